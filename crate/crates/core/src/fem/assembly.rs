use super::boundary::outer_edges;
use super::{dot2, mat_vec, DirichletMap, FemSpace, Mat2, PhysicsParams, Source};
use crate::linalg::{CsrMatrix, TripletBuilder};

/// `|∇T|_M` at or below this value counts as a vanishing gradient when `β = 0`.
pub const GRADIENT_ZERO: f64 = 1e-14;

/// `√(β + |g|²_M)`.
#[inline]
pub fn nonlinearity(grad: [f64; 2], m: &Mat2, beta: f64) -> f64 {
    (beta + dot2(mat_vec(m, grad), grad)).sqrt()
}

/// Coefficient of the linearized transport term, `M∇T / √(β + |∇T|²_M)`, with the
/// zero branch at a vanishing gradient for `β = 0`.
#[inline]
pub fn transport_coefficient(grad: [f64; 2], m: &Mat2, beta: f64) -> [f64; 2] {
    let mg = mat_vec(m, grad);
    let s2 = dot2(mg, grad);
    if beta == 0.0 && s2.sqrt() <= GRADIENT_ZERO {
        return [0.0, 0.0];
    }
    let f = (beta + s2).sqrt();
    [mg[0] / f, mg[1] / f]
}

/// `A_ij = ε ∫ M∇φ_j·∇φ_i` with `M` taken at element centroids.
pub fn assemble_stiffness(space: &FemSpace, params: &PhysicsParams) -> CsrMatrix {
    let n = space.num_dofs();
    let mut b = TripletBuilder::with_capacity(n, n, 9 * space.elements().len());
    for e in space.elements() {
        let m = params.conductivity.eval(e.centroid);
        let scale = params.epsilon * e.area;
        for a in 0..3 {
            let mg = mat_vec(&m, e.grads[a]);
            for c in 0..3 {
                b.push(e.vertices[c], e.vertices[a], scale * dot2(mg, e.grads[c]));
            }
        }
    }
    b.build()
}

/// Plain `∫ ∇φ_j·∇φ_i`.
pub fn laplacian(space: &FemSpace) -> CsrMatrix {
    let n = space.num_dofs();
    let mut b = TripletBuilder::with_capacity(n, n, 9 * space.elements().len());
    for e in space.elements() {
        for a in 0..3 {
            for c in 0..3 {
                b.push(e.vertices[c], e.vertices[a], e.area * dot2(e.grads[a], e.grads[c]));
            }
        }
    }
    b.build()
}

/// Consistent P1 mass matrix.
pub fn mass_matrix(space: &FemSpace) -> CsrMatrix {
    let n = space.num_dofs();
    let mut b = TripletBuilder::with_capacity(n, n, 9 * space.elements().len());
    for e in space.elements() {
        for a in 0..3 {
            for c in 0..3 {
                let w = if a == c { 2.0 } else { 1.0 };
                b.push(e.vertices[c], e.vertices[a], w * e.area / 12.0);
            }
        }
    }
    b.build()
}

/// `∫ f φ_i + ∫_{Γ_N} g φ_i` for the P1 source `f` and Neumann data `g`.
pub fn load_vector(space: &FemSpace, source: &Source) -> Vec<f64> {
    let mut load = vec![0.0; space.num_dofs()];
    for e in space.elements() {
        let f: [f64; 3] = e.vertices.map(|v| source.volume[v]);
        let sum = f[0] + f[1] + f[2];
        for k in 0..3 {
            load[e.vertices[k]] += e.area / 12.0 * (sum + f[k]);
        }
    }
    if let Some(g) = &source.neumann {
        let mesh = space.mesh();
        for ([i, j], [a, b]) in outer_edges(mesh).into_iter().zip(g) {
            let (p, q) = (mesh.vertices()[i], mesh.vertices()[j]);
            let len = (q[0] - p[0]).hypot(q[1] - p[1]);
            load[i] += len / 6.0 * (2.0 * a + b);
            load[j] += len / 6.0 * (a + 2.0 * b);
        }
    }
    load
}

/// Residual of the discrete state equation without Dirichlet rows:
/// `ε∫M∇T·∇φ_i + ∫√(β+|∇T|²_M) φ_i − load_i`.
pub(crate) fn operator_residual(space: &FemSpace, t: &[f64], params: &PhysicsParams, load: &[f64]) -> Vec<f64> {
    let mut r: Vec<f64> = load.iter().map(|l| -l).collect();
    for e in space.elements() {
        let m = params.conductivity.eval(e.centroid);
        let g = e.gradient(t);
        let flux = mat_vec(&m, g);
        let f = nonlinearity(g, &m, params.beta);
        for k in 0..3 {
            r[e.vertices[k]] += e.area * (params.epsilon * dot2(flux, e.grads[k]) + f / 3.0);
        }
    }
    r
}

/// Discrete state residual. Constrained rows report `T_i − u_i`.
pub fn eikonal_residual(
    space: &FemSpace,
    t: &[f64],
    params: &PhysicsParams,
    dirichlet: &DirichletMap,
    source: &Source,
) -> Vec<f64> {
    let load = load_vector(space, source);
    let mut r = operator_residual(space, t, params, &load);
    for (v, u) in dirichlet.constrained() {
        r[v] = t[v] - u;
    }
    r
}

/// Jacobian of the state residual (before Dirichlet rows are applied):
/// stiffness plus `C_ij = ∫ (M∇T·∇φ_j / √(β+|∇T|²_M)) φ_i`.
pub fn assemble_linearized_operator(space: &FemSpace, t: &[f64], params: &PhysicsParams) -> CsrMatrix {
    let n = space.num_dofs();
    let mut b = TripletBuilder::with_capacity(n, n, 9 * space.elements().len());
    for e in space.elements() {
        let m = params.conductivity.eval(e.centroid);
        let w = transport_coefficient(e.gradient(t), &m, params.beta);
        let scale = params.epsilon * e.area;
        for a in 0..3 {
            let mg = mat_vec(&m, e.grads[a]);
            let transport = e.area / 3.0 * dot2(w, e.grads[a]);
            for c in 0..3 {
                b.push(e.vertices[c], e.vertices[a], scale * dot2(mg, e.grads[c]) + transport);
            }
        }
    }
    b.build()
}

/// Replaces constrained rows by identity rows with the prescribed value and moves the
/// constrained columns to the right-hand side.
pub fn apply_dirichlet(a: &CsrMatrix, b: &[f64], dirichlet: &DirichletMap) -> (CsrMatrix, Vec<f64>) {
    let n = a.nrows();
    assert_eq!(dirichlet.num_dofs(), n);
    let mut rhs = b.to_vec();
    let mut out = TripletBuilder::with_capacity(n, n, a.nnz());
    for i in 0..n {
        if let Some(u) = dirichlet.value(i) {
            out.push(i, i, 1.0);
            rhs[i] = u;
            continue;
        }
        let (cols, vals) = a.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            match dirichlet.value(j) {
                Some(u) => rhs[i] -= v * u,
                None => out.push(i, j, v),
            }
        }
    }
    (out.build(), rhs)
}
