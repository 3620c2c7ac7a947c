//! Shape derivative of the boundary misfit with respect to the activation sites, the
//! H¹ descent field on the full rectangle, and the joint reconstruction of site
//! positions and activation instants.

use std::sync::Arc;

use log::info;
use thiserror::Error;

use crate::eikonal::{SolveError, SolverOptions};
use crate::fem::{dot2, laplacian, mass_matrix, mat_vec, FemError, FemSpace, Mat2, NodalField, PhysicsParams};
use crate::inverse::{
    distance, project, AdmissibleSet, ArcObservation, DiscrepancyMode, Evaluation, ForwardProblem, InverseError,
    StopReason,
};
use crate::linalg::{solve_cg, CgOptions, CsrMatrix, LinalgError, TripletBuilder};
use crate::mesh::{extract_submesh, generate_mesh, validate_holes, DomainKind, HoleSpec, Mesh, MeshError, Point, Rectangle};

#[derive(Debug, Error)]
pub enum ShapeError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Inverse(#[from] InverseError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error("joint iteration aborted at step {}: {error}", partial.stopping_index())]
    Aborted {
        error: Box<ShapeError>,
        partial: Box<JointReport>,
    },
}

impl From<SolveError> for ShapeError {
    fn from(e: SolveError) -> Self {
        ShapeError::Inverse(e.into())
    }
}

/// Per-element `S1` and `S0` of the shape derivative `DJ(V) = ∫ S1:DV + S0·V`.
#[derive(Debug, Clone)]
pub struct ShapeSources {
    mesh: Arc<Mesh>,
    pub s1: Vec<Mat2>,
    pub s0: Vec<[f64; 2]>,
}

impl ShapeSources {
    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }
}

/// Vector-valued P1 field.
#[derive(Debug, Clone)]
pub struct VectorField {
    mesh: Arc<Mesh>,
    pub values: Vec<Point>,
}

impl VectorField {
    pub fn new(mesh: Arc<Mesh>, values: Vec<Point>) -> Self {
        assert_eq!(values.len(), mesh.num_vertices());
        Self { mesh, values }
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn l2_norm(&self) -> f64 {
        let space = FemSpace::new(self.mesh.clone());
        let m = mass_matrix(&space);
        (0..2)
            .map(|c| {
                let v: Vec<f64> = self.values.iter().map(|p| p[c]).collect();
                crate::linalg::dot(&v, &m.mul_vec(&v))
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// `S1` and `S0` from the state `T` and the adjoint `φ` at element centroids.
///
/// `φ` is the adjoint of this crate's sign convention (`Aᵀφ = ∂J/∂T`), so the
/// sources are built from `−φ`. With `β = 0`, `guard` is added under the square root.
pub fn assemble_shape_sources(
    t: &NodalField,
    phi: &NodalField,
    params: &PhysicsParams,
    guard: f64,
) -> Result<ShapeSources, FemError> {
    if !t.same_mesh(phi.mesh()) {
        return Err(FemError::ContextMismatch);
    }
    let space = FemSpace::new(t.mesh().clone());
    let eps = params.epsilon;
    let mut s1 = Vec::with_capacity(space.elements().len());
    let mut s0 = Vec::with_capacity(space.elements().len());
    for e in space.elements() {
        let gt = e.gradient(t.values());
        let gp = e.gradient(phi.values()).map(|x| -x);
        let p = -e.vertices.iter().map(|&v| phi.values()[v]).sum::<f64>() / 3.0;
        let m = params.conductivity.eval(e.centroid);
        let dm = params.conductivity.derivative(e.centroid);
        let mgt = mat_vec(&m, gt);
        let mgp = mat_vec(&m, gp);
        let s2 = dot2(mgt, gt);
        let f = if params.beta == 0.0 {
            (s2 + guard).sqrt()
        } else {
            (params.beta + s2).sqrt()
        };
        let iso = eps * dot2(mgt, gp) + (f - 1.0) * p;
        let mut a = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                let id = if i == j { iso } else { 0.0 };
                a[i][j] = id - eps * (gt[i] * mgp[j] + gp[i] * mgt[j]) - gt[i] * mgt[j] / f * p;
            }
        }
        // (M*_v w)_b = (∂_b M) v · w
        let b = [0, 1].map(|k| {
            let dgt = mat_vec(&dm[k], gt);
            eps * dot2(dgt, gp) + dot2(dgt, gt) / (2.0 * f) * p
        });
        s1.push(a);
        s0.push(b);
    }
    Ok(ShapeSources {
        mesh: t.mesh().clone(),
        s1,
        s0,
    })
}

/// `∫_Ω S1:DV + S0·V` for a P1 field given on the vertices of the sources' mesh.
pub fn shape_derivative(sources: &ShapeSources, v: &[Point]) -> f64 {
    let space = FemSpace::new(sources.mesh.clone());
    assert_eq!(v.len(), space.num_dofs());
    space
        .elements()
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let mut dv = [[0.0; 2]; 2];
            let mut vc = [0.0; 2];
            for a in 0..3 {
                let w = v[e.vertices[a]];
                for i in 0..2 {
                    vc[i] += w[i] / 3.0;
                    for j in 0..2 {
                        dv[i][j] += w[i] * e.grads[a][j];
                    }
                }
            }
            let s1 = &sources.s1[k];
            let contraction: f64 = (0..2).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| s1[i][j] * dv[i][j]).sum();
            e.area * (contraction + dot2(sources.s0[k], vc))
        })
        .sum()
}

/// Descent field and solver statistics.
#[derive(Debug, Clone)]
pub struct DescentField {
    pub field: VectorField,
    pub cg_iterations: [usize; 2],
    /// `γ‖Dh‖² + ‖h‖²` over the full rectangle.
    pub energy: f64,
}

/// Solves `∫_U γ Dh:Dv + h·v = −∫_Ω S1:Dv + S0·v` for `h ∈ (P1)²` with zero trace on
/// the outer boundary. `index_map` maps tissue vertices to full-mesh vertices; the
/// sources vanish inside the disks.
pub fn solve_descent_field(
    full: &Arc<Mesh>,
    sources: &ShapeSources,
    index_map: &[usize],
    gamma: f64,
    cg: &CgOptions,
) -> Result<DescentField, ShapeError> {
    if full.kind() != DomainKind::Full || index_map.len() != sources.mesh.num_vertices() {
        return Err(MeshError::Invalid("descent field needs the full companion of the tissue mesh".into()).into());
    }
    let space = FemSpace::new(full.clone());
    let n = space.num_dofs();
    let a = laplacian(&space).scaled(gamma).add_scaled(1.0, &mass_matrix(&space));

    let tissue = FemSpace::new(sources.mesh.clone());
    let mut rhs = [vec![0.0; n], vec![0.0; n]];
    for (k, e) in tissue.elements().iter().enumerate() {
        let s1 = &sources.s1[k];
        let s0 = sources.s0[k];
        for (a_idx, &v) in e.vertices.iter().enumerate() {
            let g = e.grads[a_idx];
            for c in 0..2 {
                rhs[c][index_map[v]] -= e.area * (s1[c][0] * g[0] + s1[c][1] * g[1] + s0[c] / 3.0);
            }
        }
    }

    let mut fixed = vec![false; n];
    for &v in &full.outer_vertices() {
        fixed[v] = true;
    }
    let reduced = eliminate(&a, &fixed);
    let mut values = vec![[0.0; 2]; n];
    let mut iterations = [0; 2];
    for c in 0..2 {
        let mut b = rhs[c].clone();
        for (v, &f) in fixed.iter().enumerate() {
            if f {
                b[v] = 0.0;
            }
        }
        let sol = solve_cg(&reduced, &b, cg)?;
        iterations[c] = sol.iterations;
        for (v, x) in sol.x.into_iter().enumerate() {
            values[v][c] = x;
        }
    }
    let energy: f64 = (0..2)
        .map(|c| {
            let v: Vec<f64> = values.iter().map(|p| p[c]).collect();
            crate::linalg::dot(&v, &a.mul_vec(&v))
        })
        .sum();
    Ok(DescentField {
        field: VectorField::new(full.clone(), values),
        cg_iterations: iterations,
        energy,
    })
}

/// Homogeneous Dirichlet elimination keeping symmetry.
fn eliminate(a: &CsrMatrix, fixed: &[bool]) -> CsrMatrix {
    let n = a.nrows();
    let mut b = TripletBuilder::with_capacity(n, n, a.nnz());
    for i in 0..n {
        if fixed[i] {
            b.push(i, i, 1.0);
            continue;
        }
        let (cols, vals) = a.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            if !fixed[j] {
                b.push(i, j, v);
            }
        }
    }
    b.build()
}

/// Area-weighted mean of `h` over the triangles inside disk `hole`.
pub fn average_over_hole(h: &VectorField, hole: usize) -> Result<Point, ShapeError> {
    let mesh = &h.mesh;
    if mesh.kind() != DomainKind::Full {
        return Err(MeshError::Invalid("averaging over a disk needs a FULL mesh".into()).into());
    }
    if hole >= mesh.num_holes() {
        return Err(FemError::UnknownHole(hole).into());
    }
    let mut sum = [0.0; 2];
    let mut area = 0.0;
    for t in mesh.hole_triangles(hole) {
        let a = mesh.triangle_area(t);
        area += a;
        for &v in &mesh.triangles()[t] {
            sum[0] += a * h.values[v][0] / 3.0;
            sum[1] += a * h.values[v][1] / 3.0;
        }
    }
    Ok([sum[0] / area, sum[1] / area])
}

/// Choice of the first trial step of each joint iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepRule {
    /// Twice the last accepted step.
    Doubling,
    /// Barzilai-Borwein quotient of the last two iterates and search directions.
    BarzilaiBorwein,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeOptions {
    pub gamma: f64,
    pub gradient_guard: f64,
    /// First trial step of the first iteration.
    pub initial_step: f64,
    /// Cap on the first trial step of later iterations.
    pub max_step: f64,
    pub step_rule: StepRule,
    pub max_halvings: usize,
    /// Relative scaling of the instant and position updates.
    pub instant_scale: f64,
    pub position_scale: f64,
    pub max_iterations: usize,
    pub tau: f64,
    pub discrepancy_mode: DiscrepancyMode,
    /// Update instants on even and positions on odd iterations instead of both at once.
    pub alternating: bool,
    pub cg: CgOptions,
}

impl Default for ShapeOptions {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            gradient_guard: 1e-12,
            initial_step: 1.0,
            max_step: 1e4,
            step_rule: StepRule::BarzilaiBorwein,
            max_halvings: 20,
            instant_scale: 1.0,
            position_scale: 8.0,
            max_iterations: 200,
            tau: 1.1,
            discrepancy_mode: DiscrepancyMode::LiteralTauDelta,
            alternating: false,
            cg: CgOptions::default(),
        }
    }
}

impl ShapeOptions {
    pub fn validate(&self) -> Result<(), ShapeError> {
        let bad = |m: &str| Err(InverseError::Options(m.into()).into());
        if !(self.gamma > 0.0) {
            return bad("gamma must be positive");
        }
        if !(self.gradient_guard >= 0.0) {
            return bad("gradient guard must be nonnegative");
        }
        if !(self.tau > 1.0) {
            return bad("tau must exceed 1");
        }
        if !(self.initial_step > 0.0 && self.max_step >= self.initial_step) {
            return bad("steps must be positive with max_step ≥ initial_step");
        }
        Ok(())
    }
}

/// Fixed data of a joint reconstruction.
#[derive(Debug, Clone)]
pub struct JointProblem {
    pub domain: Rectangle,
    pub radii: Vec<f64>,
    pub target_h: f64,
    pub params: PhysicsParams,
    pub solver: SolverOptions,
    pub observation: ArcObservation,
    pub admissible: AdmissibleSet,
}

/// Meshes and evaluation at one `(X, u)`.
#[derive(Debug, Clone)]
pub struct JointState {
    pub positions: Vec<Point>,
    pub full: Arc<Mesh>,
    pub index_map: Vec<usize>,
    pub eval: Evaluation,
}

impl JointProblem {
    pub fn holes(&self, positions: &[Point]) -> Vec<HoleSpec> {
        positions.iter().zip(&self.radii).map(|(&c, &r)| HoleSpec::new(c, r)).collect()
    }

    pub fn check_positions(&self, positions: &[Point]) -> Result<(), MeshError> {
        if positions.len() != self.radii.len() {
            return Err(MeshError::Geometry(format!(
                "{} positions for {} radii",
                positions.len(),
                self.radii.len()
            )));
        }
        validate_holes(self.domain, &self.holes(positions))
    }

    /// Moves every center into its clearance box.
    pub fn clamp(&self, positions: &[Point]) -> Vec<Point> {
        positions
            .iter()
            .zip(&self.radii)
            .map(|(p, &r)| {
                let c = 1.5 * r;
                [p[0].clamp(c, self.domain.width - c), p[1].clamp(c, self.domain.height - c)]
            })
            .collect()
    }

    pub fn forward(&self, tissue: Arc<Mesh>) -> ForwardProblem {
        ForwardProblem::new(tissue, self.params, self.solver.clone(), self.observation.clone())
    }

    /// Remeshes at `positions` and evaluates state, misfit and adjoint at `u`.
    pub fn evaluate(&self, positions: &[Point], u: &[f64]) -> Result<JointState, ShapeError> {
        let full = Arc::new(generate_mesh(self.domain, &self.holes(positions), self.target_h, DomainKind::Full)?);
        let (tissue, index_map) = extract_submesh(&full)?;
        let eval = self.forward(Arc::new(tissue)).evaluate(u)?;
        Ok(JointState {
            positions: positions.to_vec(),
            full,
            index_map,
            eval,
        })
    }

    /// Sources, descent field and mean shift of every disk at `state`.
    pub fn shape_step(&self, state: &JointState, options: &ShapeOptions) -> Result<(DescentField, Vec<Point>), ShapeError> {
        let sources = assemble_shape_sources(
            &state.eval.state.t,
            &state.eval.adjoint.phi,
            &self.params,
            options.gradient_guard,
        )?;
        let field = solve_descent_field(&state.full, &sources, &state.index_map, options.gamma, &options.cg)?;
        let shifts = (0..self.radii.len())
            .map(|i| average_over_hole(&field.field, i))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((field, shifts))
    }
}

/// Smooth field vanishing on the boundary of the unit square:
/// `sin(πx)sin(πy)·(c0 + c1·x, c2 + c3·y)` at every vertex.
pub fn bump_field(mesh: &Mesh, c: [f64; 4]) -> Vec<Point> {
    let pi = std::f64::consts::PI;
    let domain = mesh.domain();
    mesh.vertices()
        .iter()
        .map(|p| {
            let bump = (pi * p[0] / domain.width).sin() * (pi * p[1] / domain.height).sin();
            [bump * (c[0] + c[1] * p[0]), bump * (c[2] + c[3] * p[1])]
        })
        .collect()
}

/// Cost at the state's instants on the tissue mesh with every vertex moved by `t·v`.
pub fn perturbed_cost(problem: &JointProblem, state: &JointState, v: &[Point], t: f64) -> Result<f64, ShapeError> {
    let d: Vec<Point> = v.iter().map(|w| [t * w[0], t * w[1]]).collect();
    let moved = Arc::new(state.eval.state.mesh().displaced(&d));
    Ok(problem.forward(moved).cost(&state.eval.u)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointReport {
    pub instants: Vec<Vec<f64>>,
    pub positions: Vec<Vec<Point>>,
    pub residuals: Vec<f64>,
    /// Accepted step factor for every transition.
    pub steps: Vec<f64>,
    pub threshold: f64,
    pub stop: Option<StopReason>,
    pub reference_instants: Option<Vec<f64>>,
    pub reference_positions: Option<Vec<Point>>,
}

impl JointReport {
    pub fn stopping_index(&self) -> usize {
        self.instants.len().saturating_sub(1)
    }

    pub fn final_residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(f64::NAN)
    }

    pub fn final_instants(&self) -> &[f64] {
        self.instants.last().map_or(&[], Vec::as_slice)
    }

    pub fn final_positions(&self) -> &[Point] {
        self.positions.last().map_or(&[], Vec::as_slice)
    }

    /// `|u_k − u†|` per iterate.
    pub fn instant_errors(&self) -> Option<Vec<f64>> {
        let r = self.reference_instants.as_ref()?;
        Some(self.instants.iter().map(|u| distance(u, r)).collect())
    }

    /// `d_k^i = |x_{i,k} − x_i†|` per iterate.
    pub fn position_errors(&self) -> Option<Vec<Vec<f64>>> {
        let r = self.reference_positions.as_ref()?;
        Some(
            self.positions
                .iter()
                .map(|xs| xs.iter().zip(r).map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1])).collect())
                .collect(),
        )
    }
}

/// Reference values used only for reporting errors.
#[derive(Debug, Clone, Default)]
pub struct JointReference {
    pub instants: Option<Vec<f64>>,
    pub positions: Option<Vec<Point>>,
}

/// Gradient iteration on `(X, u)`: `u ← P(u − s ∇J)`, `x_i ← x_i + s·mean_{ω_i} h`,
/// with one backtracked step factor `s` shared by both updates and accepted only on a
/// strict decrease of `J`. The first trial of each iteration follows [`StepRule`].
pub fn run_joint_reconstruction(
    problem: &JointProblem,
    u0: &[f64],
    x0: &[Point],
    delta: f64,
    noise_norm: f64,
    reference: &JointReference,
    options: &ShapeOptions,
) -> Result<JointReport, ShapeError> {
    options.validate()?;
    problem.check_positions(x0)?;
    if !problem.admissible.contains(u0) {
        return Err(InverseError::Options("initial instants are not admissible".into()).into());
    }
    let threshold = match options.discrepancy_mode {
        DiscrepancyMode::LiteralTauDelta => options.tau * delta,
        DiscrepancyMode::TauNoiseNorm => options.tau * noise_norm,
    };
    let mut report = JointReport {
        instants: Vec::new(),
        positions: Vec::new(),
        residuals: Vec::new(),
        steps: Vec::new(),
        threshold,
        stop: None,
        reference_instants: reference.instants.clone(),
        reference_positions: reference.positions.clone(),
    };
    let abort = |error: ShapeError, report: &JointReport| ShapeError::Aborted {
        error: Box::new(error),
        partial: Box::new(report.clone()),
    };

    let mut current = problem.evaluate(x0, u0).map_err(|e| abort(e, &report))?;
    report.instants.push(u0.to_vec());
    report.positions.push(x0.to_vec());
    report.residuals.push(current.eval.misfit.residual_norm());
    let mut step = options.initial_step;
    let mut previous: Option<(Vec<f64>, Vec<f64>)> = None;
    for k in 0.. {
        let residual = current.eval.misfit.residual_norm();
        info!(
            "joint {k}: residual {residual:e}, u = {:?}, X = {:?}",
            current.eval.u, current.positions
        );
        if residual <= threshold {
            report.stop = Some(StopReason::Discrepancy);
            break;
        }
        if k == options.max_iterations {
            report.stop = Some(StopReason::MaxIterations);
            break;
        }
        let move_u = !options.alternating || k % 2 == 0;
        let move_x = !options.alternating || k % 2 == 1;
        let shifts = if move_x {
            problem.shape_step(&current, options).map_err(|e| abort(e, &report))?.1
        } else {
            vec![[0.0; 2]; x0.len()]
        };
        let grad = current.eval.gradient().to_vec();
        let cost = current.eval.cost();
        // the iteration moves along −direction
        let direction: Vec<f64> = grad
            .iter()
            .map(|g| if move_u { options.instant_scale * g } else { 0.0 })
            .chain(shifts.iter().flat_map(|d| [-options.position_scale * d[0], -options.position_scale * d[1]]))
            .collect();
        let point: Vec<f64> = current.eval.u.iter().copied().chain(current.positions.iter().flatten().copied()).collect();

        let mut s = match (&previous, options.step_rule) {
            (None, _) => options.initial_step,
            (Some(_), StepRule::Doubling) => (2.0 * step).min(options.max_step),
            (Some((p0, d0)), StepRule::BarzilaiBorwein) => {
                let dw: Vec<f64> = point.iter().zip(p0).map(|(a, b)| a - b).collect();
                let dg: Vec<f64> = direction.iter().zip(d0).map(|(a, b)| a - b).collect();
                let curvature = crate::linalg::dot(&dw, &dg);
                if curvature > 0.0 {
                    (crate::linalg::dot(&dw, &dw) / curvature).clamp(1e-6 * options.initial_step, options.max_step)
                } else {
                    (2.0 * step).min(options.max_step)
                }
            }
        };
        previous = Some((point, direction));
        let mut accepted = None;
        for _ in 0..=options.max_halvings {
            let u: Vec<f64> = if move_u {
                let raw: Vec<f64> = current
                    .eval
                    .u
                    .iter()
                    .zip(&grad)
                    .map(|(u, g)| u - s * options.instant_scale * g)
                    .collect();
                project(&raw, &problem.admissible)
            } else {
                current.eval.u.clone()
            };
            let x: Vec<Point> = current
                .positions
                .iter()
                .zip(&shifts)
                .map(|(p, d)| {
                    [
                        p[0] + s * options.position_scale * d[0],
                        p[1] + s * options.position_scale * d[1],
                    ]
                })
                .collect();
            let x = problem.clamp(&x);
            if problem.check_positions(&x).is_err() {
                s *= 0.5;
                continue;
            }
            let trial = problem.evaluate(&x, &u).map_err(|e| abort(e, &report))?;
            if trial.eval.cost() < cost {
                accepted = Some(trial);
                break;
            }
            s *= 0.5;
        }
        match accepted {
            Some(next) => {
                step = s;
                current = next;
                report.steps.push(s);
                report.instants.push(current.eval.u.clone());
                report.positions.push(current.positions.clone());
                report.residuals.push(current.eval.misfit.residual_norm());
            }
            None => {
                report.stop = Some(StopReason::Stagnation);
                break;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::Conductivity;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TRUE_X: [Point; 3] = [[0.5, 0.8], [0.2, 0.3], [0.7, 0.4]];
    const START_X: [Point; 3] = [[0.2, 0.8], [0.2, 0.2], [0.8, 0.2]];

    fn joint_problem(h: f64, beta: f64, observation: ArcObservation) -> JointProblem {
        JointProblem {
            domain: Rectangle::unit(),
            radii: vec![0.05; 3],
            target_h: h,
            params: PhysicsParams::new(0.1, beta, Conductivity::SineDiagonal).unwrap(),
            solver: SolverOptions::default().with_tol(1e-12),
            observation,
            admissible: AdmissibleSet::nonnegative(3),
        }
    }

    fn synthetic(h: f64, beta: f64) -> ArcObservation {
        let p = joint_problem(h, beta, ArcObservation::new(4.0, vec![0.0], vec![0.0]).unwrap());
        let s = p.evaluate(&TRUE_X, &[0.0, 0.1, 0.2]).unwrap();
        ArcObservation::from_trace(&s.eval.state.t)
    }

    fn test_field(mesh: &Mesh, seed: u64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        bump_field(mesh, c)
    }

    #[test]
    fn zero_adjoint_gives_zero_sources() {
        let p = joint_problem(0.08, 0.0, ArcObservation::new(4.0, vec![0.0], vec![0.0]).unwrap());
        let s = p.evaluate(&START_X, &[0.0, 0.1, 0.2]).unwrap();
        let zero = s.eval.state.space().zeros();
        let src = assemble_shape_sources(&s.eval.state.t, &zero, &p.params, 1e-12).unwrap();
        assert!(src.s1.iter().all(|m| m.iter().flatten().all(|&x| x == 0.0)));
        assert!(src.s0.iter().all(|v| v.iter().all(|&x| x == 0.0)));

        let (field, shifts) = p
            .shape_step(
                &JointState {
                    eval: {
                        let mut e = s.eval.clone();
                        e.adjoint.phi = zero;
                        e
                    },
                    ..s
                },
                &ShapeOptions::default(),
            )
            .unwrap();
        assert!(field.field.values.iter().all(|v| v[0] == 0.0 && v[1] == 0.0));
        assert!(shifts.iter().all(|v| v[0] == 0.0 && v[1] == 0.0));
    }

    #[test]
    fn constant_conductivity_has_no_s0() {
        let mut p = joint_problem(0.08, 0.0, ArcObservation::new(4.0, vec![0.0], vec![0.3]).unwrap());
        p.params = PhysicsParams::new(0.1, 0.0, Conductivity::Constant([[2.0, 0.3], [0.3, 1.0]])).unwrap();
        let s = p.evaluate(&START_X, &[0.0, 0.1, 0.2]).unwrap();
        let src = assemble_shape_sources(&s.eval.state.t, &s.eval.adjoint.phi, &p.params, 1e-12).unwrap();
        assert!(src.s0.iter().all(|v| v.iter().all(|&x| x == 0.0)));
        assert!(src.s1.iter().any(|m| m.iter().flatten().any(|&x| x != 0.0)));
    }

    fn displaced_cost(p: &JointProblem, s: &JointState, v: &[Point], t: f64) -> f64 {
        perturbed_cost(p, s, v, t).unwrap()
    }

    #[test]
    fn shape_derivative_matches_mesh_perturbation() {
        for beta in [0.0, 0.1] {
            let z = synthetic(0.05, beta);
            let p = joint_problem(0.05, beta, z);
            let s = p.evaluate(&START_X, &[0.0, 0.05, 0.1]).unwrap();
            let src = assemble_shape_sources(&s.eval.state.t, &s.eval.adjoint.phi, &p.params, 1e-12).unwrap();
            for seed in 0..3 {
                let v = test_field(s.eval.state.mesh(), seed);
                let dj = shape_derivative(&src, &v);
                let t = 1e-5;
                let fd = (displaced_cost(&p, &s, &v, t) - displaced_cost(&p, &s, &v, -t)) / (2.0 * t);
                assert!((fd - dj).abs() <= 1e-3 * dj.abs().max(1e-8), "beta {beta} seed {seed}: {fd} vs {dj}");
            }
        }
    }

    #[test]
    fn descent_identity_and_gamma_monotonicity() {
        let z = synthetic(0.05, 0.0);
        let p = joint_problem(0.05, 0.0, z);
        let s = p.evaluate(&START_X, &[0.0, 0.0, 0.0]).unwrap();
        let src = assemble_shape_sources(&s.eval.state.t, &s.eval.adjoint.phi, &p.params, 1e-12).unwrap();
        let mut norms = Vec::new();
        for gamma in [0.1, 1.0, 10.0] {
            let d = solve_descent_field(&s.full, &src, &s.index_map, gamma, &CgOptions::default()).unwrap();
            let restricted: Vec<Point> = s.index_map.iter().map(|&v| d.field.values[v]).collect();
            let dj = shape_derivative(&src, &restricted);
            assert!(dj <= 1e-12, "{dj}");
            assert!((dj + d.energy).abs() <= 1e-8 * d.energy, "{dj} vs {}", -d.energy);
            norms.push(d.field.l2_norm());
        }
        assert!(norms[0] > norms[1] && norms[1] > norms[2], "{norms:?}");
    }

    #[test]
    fn averages_over_disks() {
        let full = Arc::new(generate_mesh(Rectangle::unit(), &[HoleSpec::new([0.4, 0.6], 0.1)], 0.02, DomainKind::Full).unwrap());
        let constant = VectorField::new(full.clone(), vec![[0.3, -0.2]; full.num_vertices()]);
        let a = average_over_hole(&constant, 0).unwrap();
        assert!((a[0] - 0.3).abs() < 1e-14 && (a[1] + 0.2).abs() < 1e-14);
        let centered = VectorField::new(full.clone(), full.vertices().iter().map(|p| [p[0] - 0.4, p[1] - 0.6]).collect());
        let a = average_over_hole(&centered, 0).unwrap();
        assert!(a[0].hypot(a[1]) <= 1e-3, "{a:?}");
        let zero = VectorField::new(full.clone(), vec![[0.0; 2]; full.num_vertices()]);
        assert_eq!(average_over_hole(&zero, 0).unwrap(), [0.0, 0.0]);
        assert!(average_over_hole(&zero, 1).is_err());
    }

    #[test]
    fn truth_is_a_fixed_point() {
        let z = synthetic(0.06, 0.0);
        let p = joint_problem(0.06, 0.0, z);
        let r = run_joint_reconstruction(
            &p,
            &[0.0, 0.1, 0.2],
            &TRUE_X,
            0.0,
            0.0,
            &JointReference::default(),
            &ShapeOptions::default(),
        )
        .unwrap();
        assert_eq!(r.stopping_index(), 0);
        assert_eq!(r.stop, Some(StopReason::Discrepancy));
    }

    #[test]
    fn infeasible_start_is_rejected() {
        let p = joint_problem(0.06, 0.0, ArcObservation::new(4.0, vec![0.0], vec![0.0]).unwrap());
        let bad = [[0.5, 0.8], [0.2, 0.3], [0.02, 0.4]];
        let r = run_joint_reconstruction(&p, &[0.0; 3], &bad, 0.1, 0.0, &JointReference::default(), &ShapeOptions::default());
        assert!(matches!(r, Err(ShapeError::Mesh(MeshError::Geometry(_)))));
    }

    #[test]
    fn joint_iteration_decreases_cost() {
        let z = synthetic(0.05, 0.0);
        let p = joint_problem(0.05, 0.0, z);
        let options = ShapeOptions {
            max_iterations: 5,
            ..ShapeOptions::default()
        };
        let r = run_joint_reconstruction(
            &p,
            &[0.0; 3],
            &START_X,
            0.0,
            0.0,
            &JointReference {
                instants: Some(vec![0.0, 0.1, 0.2]),
                positions: Some(TRUE_X.to_vec()),
            },
            &options,
        )
        .unwrap();
        assert!(r.residuals.windows(2).all(|w| w[1] < w[0]), "{:?}", r.residuals);
        let d = r.position_errors().unwrap();
        let first: f64 = d[0].iter().sum();
        let last: f64 = d.last().unwrap().iter().sum();
        println!("residuals {:?}\nsteps {:?}\nd {first} -> {last}", r.residuals, r.steps);
        assert!(last < first);
    }
}
