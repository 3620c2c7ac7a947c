use std::sync::Arc;

use super::{FemError, NodalField};
use crate::linalg::{CsrMatrix, TripletBuilder};
use crate::mesh::{BoundaryTag, Mesh};

/// OUTER edges of a mesh.
pub fn outer_edges(mesh: &Mesh) -> Vec<[usize; 2]> {
    mesh.edges_with_tag(BoundaryTag::Outer).map(|e| e.vertices).collect()
}

/// `∫_{Γ_N} φ_j φ_i ds` with exact edgewise integration of P1 traces.
pub fn outer_boundary_mass(mesh: &Mesh) -> CsrMatrix {
    let n = mesh.num_vertices();
    let mut b = TripletBuilder::new(n, n);
    for [i, j] in outer_edges(mesh) {
        let (p, q) = (mesh.vertices()[i], mesh.vertices()[j]);
        let len = (p[0] - q[0]).hypot(p[1] - q[1]);
        b.push(i, i, len / 3.0);
        b.push(j, j, len / 3.0);
        b.push(i, j, len / 6.0);
        b.push(j, i, len / 6.0);
    }
    b.build()
}

/// Values on the OUTER vertices, ordered by arc length.
pub fn outer_boundary_restrict(field: &NodalField) -> Vec<f64> {
    field
        .mesh()
        .outer_vertices()
        .into_iter()
        .map(|v| field.values()[v])
        .collect()
}

/// `‖a − b‖_{L²(Γ_N)}` of the P1 traces.
pub fn outer_boundary_l2(a: &NodalField, b: &NodalField) -> Result<f64, FemError> {
    if !Arc::ptr_eq(a.mesh(), b.mesh()) {
        return Err(FemError::ContextMismatch);
    }
    let mesh = a.mesh();
    let mut total = 0.0;
    for [i, j] in outer_edges(mesh) {
        let (p, q) = (mesh.vertices()[i], mesh.vertices()[j]);
        let len = (p[0] - q[0]).hypot(p[1] - q[1]);
        let di = a.values()[i] - b.values()[i];
        let dj = a.values()[j] - b.values()[j];
        total += len / 3.0 * (di * di + di * dj + dj * dj);
    }
    Ok(total.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorSide {
    Direct,
    Transposed,
}

/// Assembled operator and load a field was solved with, before Dirichlet elimination.
/// The unconstrained residual on a hole's vertices is the variational flux through it.
#[derive(Debug, Clone)]
pub struct ResidualContext {
    mesh: Arc<Mesh>,
    operator: Arc<CsrMatrix>,
    side: OperatorSide,
    load: Vec<f64>,
}

impl ResidualContext {
    pub fn new(mesh: Arc<Mesh>, operator: Arc<CsrMatrix>, side: OperatorSide, load: Vec<f64>) -> Self {
        assert_eq!(operator.nrows(), mesh.num_vertices());
        assert_eq!(load.len(), mesh.num_vertices());
        Self {
            mesh,
            operator,
            side,
            load,
        }
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn operator(&self) -> &CsrMatrix {
        &self.operator
    }

    pub fn side(&self) -> OperatorSide {
        self.side
    }

    pub fn load(&self) -> &[f64] {
        &self.load
    }

    fn residual(&self, values: &[f64]) -> Vec<f64> {
        let applied = match self.side {
            OperatorSide::Direct => self.operator.mul_vec(values),
            OperatorSide::Transposed => self.operator.transpose_mul_vec(values),
        };
        applied.iter().zip(&self.load).map(|(a, b)| a - b).collect()
    }

    /// Consistent fluxes `−Σ_{j∈Γ_i} (Aφ − b)_j` for every hole.
    pub fn fluxes(&self, field: &NodalField) -> Result<Vec<f64>, FemError> {
        if !field.same_mesh(&self.mesh) {
            return Err(FemError::ContextMismatch);
        }
        let r = self.residual(field.values());
        Ok((0..self.mesh.num_holes())
            .map(|i| -self.mesh.hole_vertices(i).iter().map(|&v| r[v]).sum::<f64>())
            .collect())
    }
}

/// Consistent boundary flux `−ε∫_{Γ_i} M∇φ·n ds` (normal pointing out of the tissue),
/// evaluated from the assembled residual.
pub fn boundary_flux(field: &NodalField, hole: usize, ctx: &ResidualContext) -> Result<f64, FemError> {
    if hole >= ctx.mesh.num_holes() {
        return Err(FemError::UnknownHole(hole));
    }
    Ok(ctx.fluxes(field)?[hole])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{apply_dirichlet, assemble_stiffness, load_vector, Conductivity, DirichletMap, FemSpace, PhysicsParams, Source};
    use crate::linalg::solve_direct;
    use crate::mesh::{generate_mesh, DomainKind, HoleSpec, Rectangle};

    fn poisson_fluxes(mesh: Arc<Mesh>, eps: f64) -> (Vec<f64>, f64) {
        let space = FemSpace::new(mesh.clone());
        let p = PhysicsParams::new(eps, 0.0, Conductivity::SineDiagonal).unwrap();
        let k = assemble_stiffness(&space, &p);
        let b = load_vector(&space, &Source::unit(&mesh));
        let dir = DirichletMap::homogeneous(&mesh);
        let (ka, ba) = apply_dirichlet(&k, &b, &dir);
        let w = space.field(solve_direct(&ka, &ba).unwrap()).unwrap();
        let ctx = ResidualContext::new(mesh.clone(), Arc::new(k), OperatorSide::Direct, b);
        (ctx.fluxes(&w).unwrap(), mesh.total_area())
    }

    #[test]
    fn flux_balance_matches_divergence_theorem() {
        let mesh = Arc::new(
            generate_mesh(
                Rectangle::unit(),
                &[
                    HoleSpec::new([0.5, 0.8], 0.1),
                    HoleSpec::new([0.2, 0.2], 0.1),
                    HoleSpec::new([0.8, 0.4], 0.1),
                ],
                0.05,
                DomainKind::Holed,
            )
            .unwrap(),
        );
        let (fluxes, area) = poisson_fluxes(mesh, 0.1);
        let total: f64 = fluxes.iter().sum();
        // outward normal of the tissue points into the holes: the total outflux is |Ω|
        assert!((total - area).abs() < 1e-8 * area.max(1.0), "{total} vs {area}");
        assert!(fluxes.iter().all(|&f| f > 0.0));
    }

    #[test]
    fn flux_of_zero_field_with_zero_load_is_zero() {
        let mesh = Arc::new(generate_mesh(Rectangle::unit(), &[HoleSpec::new([0.5, 0.5], 0.1)], 0.1, DomainKind::Holed).unwrap());
        let space = FemSpace::new(mesh.clone());
        let p = PhysicsParams::new(0.1, 0.0, Conductivity::Identity).unwrap();
        let ctx = ResidualContext::new(mesh.clone(), Arc::new(assemble_stiffness(&space, &p)), OperatorSide::Transposed, vec![0.0; space.num_dofs()]);
        assert_eq!(boundary_flux(&space.zeros(), 0, &ctx).unwrap(), 0.0);
        assert!(matches!(boundary_flux(&space.zeros(), 1, &ctx), Err(FemError::UnknownHole(1))));
        let other = FemSpace::new(Arc::new((*mesh).clone()));
        assert!(matches!(boundary_flux(&other.zeros(), 0, &ctx), Err(FemError::ContextMismatch)));
    }

    #[test]
    fn consistent_flux_converges_quadratically() {
        // single-hole Poisson problem at h, h/2, h/4; Richardson on the three values
        let hs = [0.08, 0.04, 0.02];
        let vals: Vec<f64> = hs
            .iter()
            .map(|&h| {
                let mesh = Arc::new(generate_mesh(Rectangle::unit(), &[HoleSpec::new([0.5, 0.5], 0.15)], h, DomainKind::Holed).unwrap());
                let (f, area) = poisson_fluxes(mesh, 1.0);
                // the flux equals the discrete area exactly; compare with the area
                // of the true disk complement to see geometric convergence
                assert!((f[0] - area).abs() < 1e-10);
                f[0]
            })
            .collect();
        let exact = 1.0 - std::f64::consts::PI * 0.15 * 0.15;
        let e1 = (vals[0] - exact).abs();
        let e2 = (vals[1] - exact).abs();
        let e3 = (vals[2] - exact).abs();
        let rate1 = (e1 / e2).log2();
        let rate2 = (e2 / e3).log2();
        assert!(rate1 > 1.7 && rate2 > 1.7, "rates {rate1} {rate2}");
    }

    #[test]
    fn outer_l2_identities() {
        let mesh = Arc::new(generate_mesh(Rectangle::unit(), &[], 0.1, DomainKind::Holed).unwrap());
        let space = FemSpace::new(mesh.clone());
        let ones = space.interpolate(|_| 1.0);
        let zeros = space.zeros();
        assert!((outer_boundary_l2(&ones, &zeros).unwrap() - 2.0).abs() < 1e-14);
        assert_eq!(outer_boundary_l2(&ones, &ones).unwrap(), 0.0);

        // hat at one outer vertex: ∫ hat² = (|e1| + |e2|)/3
        let v = mesh.outer_vertices()[3];
        let mut hat = space.zeros();
        hat.values_mut()[v] = 1.0;
        let len: f64 = outer_edges(&mesh)
            .iter()
            .filter(|e| e.contains(&v))
            .map(|&[i, j]| {
                let (p, q) = (mesh.vertices()[i], mesh.vertices()[j]);
                (p[0] - q[0]).hypot(p[1] - q[1])
            })
            .sum();
        let l2 = outer_boundary_l2(&hat, &zeros).unwrap();
        assert!((l2 * l2 - len / 3.0).abs() < 1e-15);
        let restricted = outer_boundary_restrict(&hat);
        assert_eq!(restricted.iter().filter(|&&x| x == 1.0).count(), 1);
        assert_eq!(restricted.len(), mesh.outer_vertices().len());
    }
}
