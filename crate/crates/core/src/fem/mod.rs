//! P1 finite elements on a [`Mesh`]: conductivity model, Dirichlet data, assembly of
//! the viscous Eikonal residual and its Jacobian, consistent boundary fluxes and
//! boundary traces.

mod assembly;
mod boundary;

pub use assembly::{
    apply_dirichlet, assemble_linearized_operator, assemble_stiffness, eikonal_residual, laplacian,
    load_vector, mass_matrix, nonlinearity, transport_coefficient, GRADIENT_ZERO,
};
pub use boundary::{
    boundary_flux, outer_boundary_l2, outer_boundary_mass, outer_boundary_restrict, outer_edges, OperatorSide,
    ResidualContext,
};

use std::sync::Arc;

use thiserror::Error;

use crate::mesh::{Mesh, Point};

pub type Mat2 = [[f64; 2]; 2];

#[derive(Debug, Error)]
pub enum FemError {
    #[error("invalid physics parameters: {0}")]
    InvalidParams(String),
    #[error("field and residual context live on different meshes")]
    ContextMismatch,
    #[error("hole {0} does not exist")]
    UnknownHole(usize),
    #[error("expected {expected} values, found {found}")]
    Length { expected: usize, found: usize },
}

/// Spatially varying conduction tensor `M(x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Conductivity {
    /// `diag(sin(πx) + 1.1, sin(πy) + 1.1)`.
    SineDiagonal,
    Identity,
    Constant(Mat2),
}

impl Conductivity {
    pub fn eval(&self, x: Point) -> Mat2 {
        use std::f64::consts::PI;
        match self {
            Conductivity::SineDiagonal => [
                [(PI * x[0]).sin() + 1.1, 0.0],
                [0.0, (PI * x[1]).sin() + 1.1],
            ],
            Conductivity::Identity => [[1.0, 0.0], [0.0, 1.0]],
            Conductivity::Constant(m) => *m,
        }
    }

    /// `(∂M/∂x₁, ∂M/∂x₂)`.
    pub fn derivative(&self, x: Point) -> [Mat2; 2] {
        use std::f64::consts::PI;
        match self {
            Conductivity::SineDiagonal => [
                [[PI * (PI * x[0]).cos(), 0.0], [0.0, 0.0]],
                [[0.0, 0.0], [0.0, PI * (PI * x[1]).cos()]],
            ],
            Conductivity::Identity | Conductivity::Constant(_) => [[[0.0; 2]; 2]; 2],
        }
    }

    /// Lower bound of `M(x)v·v / |v|²` over the plane.
    pub fn ellipticity(&self) -> f64 {
        match self {
            Conductivity::SineDiagonal => 0.1,
            Conductivity::Identity => 1.0,
            Conductivity::Constant(m) => {
                let tr = m[0][0] + m[1][1];
                let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
                0.5 * (tr - (tr * tr - 4.0 * det).max(0.0).sqrt())
            }
        }
    }
}

#[inline]
pub fn mat_vec(m: &Mat2, v: [f64; 2]) -> [f64; 2] {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

#[inline]
pub fn dot2(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicsParams {
    pub epsilon: f64,
    pub beta: f64,
    pub conductivity: Conductivity,
}

impl PhysicsParams {
    pub fn new(epsilon: f64, beta: f64, conductivity: Conductivity) -> Result<Self, FemError> {
        if !(epsilon > 0.0) {
            return Err(FemError::InvalidParams(format!("epsilon = {epsilon} must be positive")));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(FemError::InvalidParams(format!("beta = {beta} must lie in [0, 1]")));
        }
        if let Conductivity::Constant(m) = conductivity {
            if (m[0][1] - m[1][0]).abs() > 1e-14 || !(conductivity.ellipticity() > 0.0) {
                return Err(FemError::InvalidParams("constant conductivity must be symmetric positive definite".into()));
            }
        }
        Ok(Self {
            epsilon,
            beta,
            conductivity,
        })
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self, FemError> {
        Self::new(self.epsilon, beta, self.conductivity)
    }
}

/// Geometry of one P1 triangle.
#[derive(Debug, Clone, Copy)]
pub struct Element {
    pub vertices: [usize; 3],
    pub area: f64,
    /// Gradients of the three barycentric hat functions.
    pub grads: [[f64; 2]; 3],
    pub centroid: Point,
}

impl Element {
    #[inline]
    pub fn gradient(&self, values: &[f64]) -> [f64; 2] {
        let mut g = [0.0; 2];
        for k in 0..3 {
            let v = values[self.vertices[k]];
            g[0] += v * self.grads[k][0];
            g[1] += v * self.grads[k][1];
        }
        g
    }
}

/// Precomputed element data for a mesh.
#[derive(Debug, Clone)]
pub struct FemSpace {
    mesh: Arc<Mesh>,
    elements: Vec<Element>,
}

impl FemSpace {
    pub fn new(mesh: Arc<Mesh>) -> Self {
        let elements = (0..mesh.num_triangles())
            .map(|t| {
                let vertices = mesh.triangles()[t];
                let [p0, p1, p2] = mesh.triangle_points(t);
                let twice = crate::mesh::orient(p0, p1, p2);
                let grads = [
                    [(p1[1] - p2[1]) / twice, (p2[0] - p1[0]) / twice],
                    [(p2[1] - p0[1]) / twice, (p0[0] - p2[0]) / twice],
                    [(p0[1] - p1[1]) / twice, (p1[0] - p0[0]) / twice],
                ];
                Element {
                    vertices,
                    area: 0.5 * twice,
                    grads,
                    centroid: mesh.centroid(t),
                }
            })
            .collect();
        Self { mesh, elements }
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn num_dofs(&self) -> usize {
        self.mesh.num_vertices()
    }

    pub fn field(&self, values: Vec<f64>) -> Result<NodalField, FemError> {
        NodalField::new(self.mesh.clone(), values)
    }

    pub fn zeros(&self) -> NodalField {
        NodalField {
            mesh: self.mesh.clone(),
            values: vec![0.0; self.num_dofs()],
        }
    }

    pub fn interpolate(&self, f: impl Fn(Point) -> f64) -> NodalField {
        NodalField {
            mesh: self.mesh.clone(),
            values: self.mesh.vertices().iter().map(|&p| f(p)).collect(),
        }
    }
}

/// Per-vertex values on a mesh.
#[derive(Debug, Clone)]
pub struct NodalField {
    mesh: Arc<Mesh>,
    values: Vec<f64>,
}

impl NodalField {
    pub fn new(mesh: Arc<Mesh>, values: Vec<f64>) -> Result<Self, FemError> {
        if values.len() != mesh.num_vertices() {
            return Err(FemError::Length {
                expected: mesh.num_vertices(),
                found: values.len(),
            });
        }
        Ok(Self { mesh, values })
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn same_mesh(&self, other: &Arc<Mesh>) -> bool {
        Arc::ptr_eq(&self.mesh, other)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Prescribed values on the hole circles.
#[derive(Debug, Clone)]
pub struct DirichletMap {
    values: Vec<Option<f64>>,
    hole_vertices: Vec<Vec<usize>>,
    instants: Vec<f64>,
}

impl DirichletMap {
    /// `T = u_i` on the circle of hole `i`.
    pub fn from_instants(mesh: &Mesh, instants: &[f64]) -> Result<Self, FemError> {
        if instants.len() != mesh.num_holes() {
            return Err(FemError::Length {
                expected: mesh.num_holes(),
                found: instants.len(),
            });
        }
        let hole_vertices: Vec<Vec<usize>> = (0..mesh.num_holes()).map(|i| mesh.hole_vertices(i)).collect();
        let mut values = vec![None; mesh.num_vertices()];
        for (verts, &u) in hole_vertices.iter().zip(instants) {
            for &v in verts {
                values[v] = Some(u);
            }
        }
        Ok(Self {
            values,
            hole_vertices,
            instants: instants.to_vec(),
        })
    }

    pub fn homogeneous(mesh: &Mesh) -> Self {
        Self::from_instants(mesh, &vec![0.0; mesh.num_holes()]).expect("length matches")
    }

    /// Non-constant hole data `T = g(x)` (manufactured-solution studies).
    pub fn from_fn(mesh: &Mesh, g: impl Fn(Point) -> f64) -> Self {
        let mut map = Self::homogeneous(mesh);
        for verts in &map.hole_vertices {
            for &v in verts {
                map.values[v] = Some(g(mesh.vertices()[v]));
            }
        }
        map.instants = vec![f64::NAN; mesh.num_holes()];
        map
    }

    /// Additionally pins vertex `v` to `value`.
    pub fn pin(mut self, v: usize, value: f64) -> Self {
        self.values[v] = Some(value);
        self
    }

    pub fn value(&self, v: usize) -> Option<f64> {
        self.values[v]
    }

    pub fn is_constrained(&self, v: usize) -> bool {
        self.values[v].is_some()
    }

    pub fn constrained(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values.iter().enumerate().filter_map(|(v, x)| x.map(|x| (v, x)))
    }

    pub fn hole_vertices(&self, i: usize) -> &[usize] {
        &self.hole_vertices[i]
    }

    pub fn instants(&self) -> &[f64] {
        &self.instants
    }

    pub fn num_dofs(&self) -> usize {
        self.values.len()
    }

    /// Same constrained set with every value replaced by zero.
    pub fn zeroed(&self) -> Self {
        let mut z = self.clone();
        z.values.iter_mut().for_each(|v| {
            if v.is_some() {
                *v = Some(0.0);
            }
        });
        z.instants.iter_mut().for_each(|u| *u = 0.0);
        z
    }

    /// Writes the prescribed values into `values`.
    pub fn impose(&self, values: &mut [f64]) {
        for (v, x) in self.constrained() {
            values[v] = x;
        }
    }
}

/// Right-hand side of the state equation: a volume source and Neumann data on the
/// outer boundary, both as P1 nodal functions.
#[derive(Debug, Clone)]
pub struct Source {
    pub volume: Vec<f64>,
    /// Endpoint values per OUTER edge, in [`outer_edges`] order.
    pub neumann: Option<Vec<[f64; 2]>>,
}

impl Source {
    pub fn constant(mesh: &Mesh, value: f64) -> Self {
        Self {
            volume: vec![value; mesh.num_vertices()],
            neumann: None,
        }
    }

    /// The activation-time model: unit source, zero flux through the outer boundary.
    pub fn unit(mesh: &Mesh) -> Self {
        Self::constant(mesh, 1.0)
    }

    pub fn from_fn(mesh: &Mesh, f: impl Fn(Point) -> f64) -> Self {
        Self {
            volume: mesh.vertices().iter().map(|&p| f(p)).collect(),
            neumann: None,
        }
    }

    /// Neumann data `g(x, n)` with `n` the outward unit normal of the edge; values are
    /// kept per edge endpoint so corners can carry one value per side.
    pub fn with_neumann(mut self, mesh: &Mesh, g: impl Fn(Point, [f64; 2]) -> f64) -> Self {
        let center = {
            let d = mesh.domain();
            [d.width / 2.0, d.height / 2.0]
        };
        let values = outer_edges(mesh)
            .into_iter()
            .map(|[i, j]| {
                let (p, q) = (mesh.vertices()[i], mesh.vertices()[j]);
                let len = (q[0] - p[0]).hypot(q[1] - p[1]);
                let mut n = [(q[1] - p[1]) / len, -(q[0] - p[0]) / len];
                let mid = [(p[0] + q[0]) / 2.0 - center[0], (p[1] + q[1]) / 2.0 - center[1]];
                if dot2(n, mid) < 0.0 {
                    n = [-n[0], -n[1]];
                }
                [g(p, n), g(q, n)]
            })
            .collect();
        self.neumann = Some(values);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sine_conductivity_is_spd_and_matches_derivative() {
        let c = Conductivity::SineDiagonal;
        for &x in &[[0.1, 0.7], [0.5, 0.5], [0.93, 0.02]] {
            let m = c.eval(x);
            assert!(m[0][0] >= 1.1 && m[1][1] >= 1.1);
            assert_eq!(m[0][1], m[1][0]);
            let d = c.derivative(x);
            let h = 1e-6;
            for k in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[k] += h;
                xm[k] -= h;
                let (mp, mm) = (c.eval(xp), c.eval(xm));
                for i in 0..2 {
                    for j in 0..2 {
                        let fd = (mp[i][j] - mm[i][j]) / (2.0 * h);
                        assert!((fd - d[k][i][j]).abs() < 1e-8);
                    }
                }
            }
        }
    }

    #[test]
    fn params_validation() {
        assert!(PhysicsParams::new(0.0, 0.0, Conductivity::Identity).is_err());
        assert!(PhysicsParams::new(0.1, 1.5, Conductivity::Identity).is_err());
        assert!(PhysicsParams::new(0.1, 0.0, Conductivity::Constant([[1.0, 0.5], [0.4, 1.0]])).is_err());
        assert!(PhysicsParams::new(0.1, 0.0, Conductivity::Constant([[1.0, 2.0], [2.0, 1.0]])).is_err());
        assert!(PhysicsParams::new(0.1, 1.0, Conductivity::Constant([[2.0, 0.5], [0.5, 1.0]])).is_ok());
    }

    #[test]
    fn constant_ellipticity_is_smallest_eigenvalue() {
        let c = Conductivity::Constant([[2.0, 1.0], [1.0, 2.0]]);
        assert!((c.ellipticity() - 1.0).abs() < 1e-14);
    }
}
