//! Boundary misfit, adjoint gradient, Gauss-Newton matrix and the projected
//! Levenberg-Marquardt iteration for the activation instants.

use std::sync::Arc;

use log::info;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::eikonal::{solve_state_in, AdjointSolution, Linearization, SolveError, SolverOptions, StateSolution};
use crate::fem::{DirichletMap, FemError, FemSpace, NodalField, PhysicsParams, Source};
use crate::mesh::{Mesh, Rectangle};

#[derive(Debug, Error)]
pub enum InverseError {
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error("invalid observation: {0}")]
    Observation(String),
    #[error("invalid options: {0}")]
    Options(String),
    #[error("iteration aborted at step {}: {error}", partial.iterates.len().saturating_sub(1))]
    Aborted {
        error: SolveError,
        partial: Box<InverseReport>,
    },
}

/// Piecewise-linear periodic function of the counterclockwise arc length on the
/// outer rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct ArcObservation {
    perimeter: f64,
    breakpoints: Vec<f64>,
    values: Vec<f64>,
}

impl ArcObservation {
    pub fn new(perimeter: f64, breakpoints: Vec<f64>, values: Vec<f64>) -> Result<Self, InverseError> {
        if breakpoints.is_empty() || breakpoints.len() != values.len() {
            return Err(InverseError::Observation("breakpoints and values must be nonempty and equally long".into()));
        }
        if !(perimeter > 0.0) {
            return Err(InverseError::Observation("perimeter must be positive".into()));
        }
        if breakpoints[0] < 0.0 || *breakpoints.last().unwrap() >= perimeter {
            return Err(InverseError::Observation("breakpoints must lie in [0, perimeter)".into()));
        }
        if breakpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(InverseError::Observation("breakpoints must be strictly increasing".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(InverseError::Observation("values must be finite".into()));
        }
        Ok(Self {
            perimeter,
            breakpoints,
            values,
        })
    }

    /// Trace of a nodal field on the outer boundary of its mesh.
    pub fn from_trace(field: &NodalField) -> Self {
        let mesh = field.mesh();
        let domain = mesh.domain();
        let outer = mesh.outer_vertices();
        let breakpoints = outer.iter().map(|&v| domain.arc_length(mesh.vertices()[v])).collect();
        let values = outer.iter().map(|&v| field.values()[v]).collect();
        Self::new(domain.perimeter(), breakpoints, values).expect("mesh trace is a valid observation")
    }

    pub fn perimeter(&self) -> f64 {
        self.perimeter
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value at arc length `s` (taken modulo the perimeter).
    pub fn eval(&self, s: f64) -> f64 {
        let s = s.rem_euclid(self.perimeter);
        let b = &self.breakpoints;
        let n = b.len();
        if n == 1 {
            return self.values[0];
        }
        let k = b.partition_point(|&x| x <= s);
        let (s0, z0, s1, z1) = if k == 0 {
            (b[n - 1] - self.perimeter, self.values[n - 1], b[0], self.values[0])
        } else if k == n {
            (b[n - 1], self.values[n - 1], b[0] + self.perimeter, self.values[0])
        } else {
            (b[k - 1], self.values[k - 1], b[k], self.values[k])
        };
        let w = (s - s0) / (s1 - s0);
        z0 + w * (z1 - z0)
    }

    /// `‖z‖_{L²}` over one period, exact for the piecewise-linear interpolant.
    pub fn l2_norm(&self) -> f64 {
        let n = self.breakpoints.len();
        let mut sum = 0.0;
        for k in 0..n {
            let (a, b) = (self.values[k], self.values[(k + 1) % n]);
            let next = if k + 1 == n { self.breakpoints[0] + self.perimeter } else { self.breakpoints[k + 1] };
            sum += (next - self.breakpoints[k]) / 3.0 * (a * a + a * b + b * b);
        }
        sum.max(0.0).sqrt()
    }

    /// Pointwise sum with another observation, on the union of breakpoints.
    pub fn combine(&self, other: &ArcObservation, f: impl Fn(f64, f64) -> f64) -> ArcObservation {
        let mut s: Vec<f64> = self.breakpoints.iter().chain(&other.breakpoints).copied().collect();
        s.sort_by(f64::total_cmp);
        s.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * self.perimeter);
        let values = s.iter().map(|&x| f(self.eval(x), other.eval(x))).collect();
        ArcObservation {
            perimeter: self.perimeter,
            breakpoints: s,
            values,
        }
    }
}

/// `J = ½‖T − z‖²` on the outer boundary and the adjoint load `∫ (T − z) φ_i ds`.
#[derive(Debug, Clone)]
pub struct Misfit {
    pub cost: f64,
    pub load: Vec<f64>,
}

impl Misfit {
    /// `‖T − z‖_{L²(Γ_N)}`.
    pub fn residual_norm(&self) -> f64 {
        (2.0 * self.cost).max(0.0).sqrt()
    }
}

/// Exact integration on the common refinement of the mesh trace and the observation
/// breakpoints: both are linear on every piece, so Simpson's rule is exact.
pub fn misfit(t: &NodalField, z: &ArcObservation) -> Misfit {
    let mesh = t.mesh();
    let domain: Rectangle = mesh.domain();
    let per = domain.perimeter();
    let outer = mesh.outer_vertices();
    let sigma: Vec<f64> = outer.iter().map(|&v| domain.arc_length(mesh.vertices()[v])).collect();
    let mut load = vec![0.0; mesh.num_vertices()];
    let mut cost = 0.0;
    let m = outer.len();
    for k in 0..m {
        let (va, vb) = (outer[k], outer[(k + 1) % m]);
        let sa = sigma[k];
        let sb = if k + 1 == m { sigma[0] + per } else { sigma[k + 1] };
        let (ta, tb) = (t.values()[va], t.values()[vb]);
        let len = sb - sa;
        // breakpoints strictly inside (sa, sb), possibly wrapping past the perimeter
        let mut cuts = vec![sa];
        for &b in z.breakpoints() {
            for shifted in [b, b + per] {
                if shifted > sa + 1e-14 * per && shifted < sb - 1e-14 * per {
                    cuts.push(shifted);
                }
            }
        }
        cuts[1..].sort_by(f64::total_cmp);
        cuts.push(sb);
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let mid = 0.5 * (a + b);
            let weight = |s: f64| (s - sa) / len;
            let diff = |s: f64| {
                let lam = weight(s);
                ta + lam * (tb - ta) - z.eval(s)
            };
            let (da, dm, db) = (diff(a), diff(mid), diff(b));
            let piece = b - a;
            cost += 0.5 * piece / 6.0 * (da * da + 4.0 * dm * dm + db * db);
            let (la, lm, lb) = (weight(a), weight(mid), weight(b));
            load[vb] += piece / 6.0 * (da * la + 4.0 * dm * lm + db * lb);
            load[va] += piece / 6.0 * (da * (1.0 - la) + 4.0 * dm * (1.0 - lm) + db * (1.0 - lb));
        }
    }
    Misfit { cost, load }
}

/// `J(u)` for a converged state.
pub fn cost(state: &StateSolution, z: &ArcObservation) -> f64 {
    misfit(&state.t, z).cost
}

/// Box constraints on the instants.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibleSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl AdmissibleSet {
    /// `u_i ≥ 0`.
    pub fn nonnegative(n: usize) -> Self {
        Self {
            lower: vec![0.0; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, InverseError> {
        if lower.len() != upper.len() || lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(InverseError::Options("admissible set needs lower ≤ upper componentwise".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(x, (l, h))| l <= x && x <= h)
    }
}

pub fn project(u: &[f64], admissible: &AdmissibleSet) -> Vec<f64> {
    u.iter()
        .zip(admissible.lower.iter().zip(&admissible.upper))
        .map(|(&x, (&l, &h))| x.clamp(l, h))
        .collect()
}

/// Everything needed to evaluate `u ↦ J(u)` on one mesh.
#[derive(Debug, Clone)]
pub struct ForwardProblem {
    space: Arc<FemSpace>,
    pub params: PhysicsParams,
    pub source: Source,
    pub solver: SolverOptions,
    pub observation: ArcObservation,
}

/// State, misfit and adjoint at one `u`.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub u: Vec<f64>,
    pub state: StateSolution,
    pub misfit: Misfit,
    pub linearization: Linearization,
    pub adjoint: AdjointSolution,
}

impl Evaluation {
    pub fn cost(&self) -> f64 {
        self.misfit.cost
    }

    pub fn gradient(&self) -> &[f64] {
        &self.adjoint.fluxes
    }

    /// `H_ij = flux_i(w_j)`: linearized solve with `δu = e_j`, then the adjoint with
    /// `h = δT_j` on the outer boundary.
    pub fn gauss_newton_matrix(&self) -> Result<DMatrix<f64>, SolveError> {
        let n = self.u.len();
        let mut h = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let dt = self.linearization.solve(&e, None)?;
            let w = self.linearization.adjoint(dt.values())?;
            for i in 0..n {
                h[(i, j)] = w.fluxes[i];
            }
        }
        Ok(h)
    }
}

impl ForwardProblem {
    pub fn new(mesh: Arc<Mesh>, params: PhysicsParams, solver: SolverOptions, observation: ArcObservation) -> Self {
        let source = Source::unit(&mesh);
        Self {
            space: Arc::new(FemSpace::new(mesh)),
            params,
            source,
            solver,
            observation,
        }
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        self.space.mesh()
    }

    pub fn space(&self) -> &Arc<FemSpace> {
        &self.space
    }

    pub fn num_instants(&self) -> usize {
        self.mesh().num_holes()
    }

    pub fn state(&self, u: &[f64]) -> Result<StateSolution, InverseError> {
        let dir = DirichletMap::from_instants(self.mesh(), u)?;
        Ok(solve_state_in(self.space.clone(), &self.params, &dir, &self.source, &self.solver)?)
    }

    pub fn cost(&self, u: &[f64]) -> Result<f64, InverseError> {
        Ok(misfit(&self.state(u)?.t, &self.observation).cost)
    }

    pub fn evaluate(&self, u: &[f64]) -> Result<Evaluation, InverseError> {
        let state = self.state(u)?;
        Ok(self.evaluate_state(u, state)?)
    }

    pub fn evaluate_state(&self, u: &[f64], state: StateSolution) -> Result<Evaluation, SolveError> {
        let m = misfit(&state.t, &self.observation);
        let linearization = Linearization::new(&state)?;
        let adjoint = linearization.adjoint_with_load(m.load.clone())?;
        Ok(Evaluation {
            u: u.to_vec(),
            state,
            misfit: m,
            linearization,
            adjoint,
        })
    }

    pub fn gradient(&self, u: &[f64]) -> Result<Vec<f64>, InverseError> {
        Ok(self.evaluate(u)?.adjoint.fluxes)
    }

    pub fn gauss_newton_matrix(&self, u: &[f64]) -> Result<DMatrix<f64>, InverseError> {
        Ok(self.evaluate(u)?.gauss_newton_matrix()?)
    }
}

pub fn min_eigenvalue(h: &DMatrix<f64>) -> f64 {
    let sym = (h + h.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscrepancyMode {
    /// Stop once `‖S(u) − z‖ ≤ τδ` with δ the relative noise level.
    LiteralTauDelta,
    /// Stop once `‖S(u) − z‖ ≤ τ‖η‖`.
    TauNoiseNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmOptions {
    pub tau: f64,
    pub alpha0: f64,
    pub q: f64,
    pub lambda: f64,
    pub max_iterations: usize,
    pub discrepancy_mode: DiscrepancyMode,
    /// Reject steps that increase the residual and retry with α multiplied by 10.
    pub safeguarded: bool,
    pub stagnation_tol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            tau: 1.1,
            alpha0: 1.0,
            q: 0.1,
            lambda: 1.0,
            max_iterations: 50,
            discrepancy_mode: DiscrepancyMode::LiteralTauDelta,
            safeguarded: false,
            stagnation_tol: 1e-14,
        }
    }
}

impl LmOptions {
    pub fn validate(&self) -> Result<(), InverseError> {
        if !(self.tau > 1.0) {
            return Err(InverseError::Options(format!("tau = {} must exceed 1", self.tau)));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(InverseError::Options(format!("lambda = {} must lie in (0, 1]", self.lambda)));
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(InverseError::Options(format!("q = {} must lie in (0, 1)", self.q)));
        }
        if !(self.alpha0 > 0.0) {
            return Err(InverseError::Options("alpha0 must be positive".into()));
        }
        Ok(())
    }

    /// Discrepancy threshold for noise level `delta` and noise norm `‖η‖`.
    pub fn threshold(&self, delta: f64, noise_norm: f64) -> f64 {
        match self.discrepancy_mode {
            DiscrepancyMode::LiteralTauDelta => self.tau * delta,
            DiscrepancyMode::TauNoiseNorm => self.tau * noise_norm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Discrepancy,
    MaxIterations,
    Stagnation,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::Discrepancy => "discrepancy",
            StopReason::MaxIterations => "max_iterations",
            StopReason::Stagnation => "stagnation",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseReport {
    pub iterates: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    /// `α_k` used to go from iterate k to k+1.
    pub alphas: Vec<f64>,
    /// Smallest eigenvalue of `H(u_k)` at every iterate where a step was computed.
    pub h_min_eigenvalues: Vec<f64>,
    pub threshold: f64,
    pub stop: Option<StopReason>,
    pub reference: Option<Vec<f64>>,
}

impl InverseReport {
    fn new(threshold: f64, reference: Option<&[f64]>) -> Self {
        Self {
            iterates: Vec::new(),
            residuals: Vec::new(),
            alphas: Vec::new(),
            h_min_eigenvalues: Vec::new(),
            threshold,
            stop: None,
            reference: reference.map(<[f64]>::to_vec),
        }
    }

    /// Stopping index `K_δ`.
    pub fn stopping_index(&self) -> usize {
        self.iterates.len().saturating_sub(1)
    }

    pub fn final_iterate(&self) -> &[f64] {
        self.iterates.last().map_or(&[], Vec::as_slice)
    }

    pub fn final_residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(f64::NAN)
    }

    /// `|u_k − u†|` for every iterate, when a reference is known.
    pub fn errors(&self) -> Option<Vec<f64>> {
        let r = self.reference.as_ref()?;
        Some(self.iterates.iter().map(|u| distance(u, r)).collect())
    }

    pub fn final_error(&self) -> Option<f64> {
        self.errors().and_then(|e| e.last().copied())
    }
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Projected Levenberg-Marquardt: `(H + α_k I) d = −∇J`, `u ← P(u + λ d)`, stopped by
/// the discrepancy principle.
pub fn run_levenberg_marquardt(
    problem: &ForwardProblem,
    u0: &[f64],
    admissible: &AdmissibleSet,
    delta: f64,
    noise_norm: f64,
    reference: Option<&[f64]>,
    options: &LmOptions,
) -> Result<InverseReport, InverseError> {
    options.validate()?;
    let n = problem.num_instants();
    if u0.len() != n || admissible.lower.len() != n {
        return Err(FemError::Length {
            expected: n,
            found: u0.len(),
        }
        .into());
    }
    if !admissible.contains(u0) {
        return Err(InverseError::Options("initial instants are not admissible".into()));
    }
    let threshold = options.threshold(delta, noise_norm);
    let mut report = InverseReport::new(threshold, reference);

    let abort = |error: SolveError, report: &InverseReport| InverseError::Aborted {
        error,
        partial: Box::new(report.clone()),
    };
    let evaluate = |u: &[f64], report: &InverseReport| -> Result<Evaluation, InverseError> {
        match problem.evaluate(u) {
            Ok(e) => Ok(e),
            Err(InverseError::Solve(e)) => Err(abort(e, report)),
            Err(e) => Err(e),
        }
    };

    let mut current = evaluate(u0, &report)?;
    report.iterates.push(u0.to_vec());
    report.residuals.push(current.misfit.residual_norm());
    for k in 0.. {
        let residual = current.misfit.residual_norm();
        info!("LM {k}: u = {:?}, residual {residual:e}", current.u);
        if residual <= threshold {
            report.stop = Some(StopReason::Discrepancy);
            break;
        }
        if k == options.max_iterations {
            report.stop = Some(StopReason::MaxIterations);
            break;
        }
        let h = current.gauss_newton_matrix().map_err(|e| abort(e, &report))?;
        report.h_min_eigenvalues.push(min_eigenvalue(&h));
        let g = DVector::from_column_slice(current.gradient());
        let mut alpha = options.alpha0 * options.q.powi(k as i32);
        let mut attempts = 0;
        let next = loop {
            let mut system = h.clone();
            for i in 0..n {
                system[(i, i)] += alpha;
            }
            let d = system
                .clone()
                .cholesky()
                .map(|c| c.solve(&(-&g)))
                .or_else(|| system.lu().solve(&(-&g)))
                .ok_or_else(|| InverseError::Options("singular Levenberg-Marquardt system".into()))?;
            let trial: Vec<f64> = current.u.iter().zip(d.iter()).map(|(u, d)| u + options.lambda * d).collect();
            let trial = project(&trial, admissible);
            if distance(&trial, &current.u) <= options.stagnation_tol {
                break None;
            }
            let eval = evaluate(&trial, &report)?;
            if options.safeguarded && eval.misfit.residual_norm() > residual && attempts < 20 {
                alpha *= 10.0;
                attempts += 1;
                continue;
            }
            break Some(eval);
        };
        report.alphas.push(alpha);
        match next {
            Some(eval) => {
                current = eval;
                report.iterates.push(current.u.clone());
                report.residuals.push(current.misfit.residual_norm());
            }
            None => {
                report.alphas.pop();
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
    use crate::fem::{Conductivity, FemSpace};
    use crate::linalg::dot;
    use crate::mesh::{generate_mesh, DomainKind, HoleSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reference_mesh(h: f64) -> Arc<Mesh> {
        Arc::new(
            generate_mesh(
                Rectangle::unit(),
                &[
                    HoleSpec::new([0.5, 0.8], 0.1),
                    HoleSpec::new([0.2, 0.2], 0.1),
                    HoleSpec::new([0.8, 0.4], 0.1),
                ],
                h,
                DomainKind::Holed,
            )
            .unwrap(),
        )
    }

    fn single_hole_mesh() -> Arc<Mesh> {
        Arc::new(generate_mesh(Rectangle::unit(), &[HoleSpec::new([0.4, 0.6], 0.12)], 0.08, DomainKind::Holed).unwrap())
    }

    fn constant_obs(c: f64) -> ArcObservation {
        ArcObservation::new(4.0, vec![0.0, 1.0, 2.0, 3.0], vec![c; 4]).unwrap()
    }

    fn problem(mesh: Arc<Mesh>, beta: f64, obs: ArcObservation) -> ForwardProblem {
        ForwardProblem::new(
            mesh,
            PhysicsParams::new(0.1, beta, Conductivity::SineDiagonal).unwrap(),
            SolverOptions::default().with_tol(1e-12),
            obs,
        )
    }

    #[test]
    fn observation_evaluation_wraps_periodically() {
        let z = ArcObservation::new(4.0, vec![0.5, 1.5, 3.5], vec![1.0, 3.0, 2.0]).unwrap();
        assert_eq!(z.eval(0.5), 1.0);
        assert_eq!(z.eval(1.0), 2.0);
        assert!((z.eval(0.0) - 1.5).abs() < 1e-15);
        assert!((z.eval(3.75) - 1.75).abs() < 1e-15);
        assert!((z.eval(4.25) - z.eval(0.25)).abs() < 1e-15);
        assert!(ArcObservation::new(4.0, vec![1.0, 1.0], vec![0.0, 0.0]).is_err());
        assert!(ArcObservation::new(4.0, vec![4.0], vec![0.0]).is_err());
    }

    #[test]
    fn cost_identities() {
        let mesh = reference_mesh(0.1);
        let space = FemSpace::new(mesh.clone());
        let ones = space.interpolate(|_| 1.0);
        assert!((misfit(&ones, &constant_obs(0.0)).cost - 2.0).abs() < 1e-14);
        let f = space.interpolate(|p| p[0] * p[0] + 0.3 * p[1]);
        assert!(misfit(&f, &ArcObservation::from_trace(&f)).cost.abs() < 1e-28);
    }

    #[test]
    fn misfit_matches_fine_quadrature_for_mismatched_breakpoints() {
        let mesh = reference_mesh(0.1);
        let space = FemSpace::new(mesh.clone());
        let f = space.interpolate(|p| (3.0 * p[0]).sin() + p[1]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // jittered breakpoints, at least 0.05 apart so the reference quadrature resolves the kinks
        let s: Vec<f64> = (0..37).map(|k| (k as f64 + rng.random_range(0.0..0.5)) * 4.0 / 37.0).collect();
        let vals: Vec<f64> = s.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        let z = ArcObservation::new(4.0, s, vals).unwrap();
        let trace = ArcObservation::from_trace(&f);
        let n = 400_000;
        let ds = 4.0 / n as f64;
        let fine: f64 = (0..n)
            .map(|k| {
                let x = (k as f64 + 0.5) * ds;
                (trace.eval(x) - z.eval(x)).powi(2)
            })
            .sum::<f64>()
            * ds
            * 0.5;
        let m = misfit(&f, &z);
        assert!((m.cost - fine).abs() < 1e-8, "{} vs {fine}", m.cost);
        // the load is the derivative of J with respect to the nodal values of T
        let v = mesh.outer_vertices()[5];
        let mut g = f.clone();
        g.values_mut()[v] += 1e-6;
        let fd = (misfit(&g, &z).cost - m.cost) / 1e-6;
        assert!((fd - m.load[v]).abs() < 1e-6);
    }

    #[test]
    fn constant_state_cost_and_gradient() {
        let (a, c) = (0.3, 0.1);
        let p = problem(single_hole_mesh(), 1.0, constant_obs(c));
        let e = p.evaluate(&[a]).unwrap();
        assert!((e.cost() - 0.5 * 4.0 * (a - c).powi(2)).abs() < 1e-12);
        assert!((e.gradient()[0] - 4.0 * (a - c)).abs() < 1e-8, "{}", e.gradient()[0]);
        let h = e.gauss_newton_matrix().unwrap();
        assert!((h[(0, 0)] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_for_exact_data() {
        let mesh = reference_mesh(0.06);
        let u = [0.0, 0.1, 0.2];
        let truth = problem(mesh.clone(), 0.0, constant_obs(0.0)).state(&u).unwrap();
        let p = problem(mesh, 0.0, ArcObservation::from_trace(&truth.t));
        let g = p.gradient(&u).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-9), "{g:?}");
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mesh = reference_mesh(0.05);
        let truth = problem(mesh.clone(), 0.1, constant_obs(0.0)).state(&[0.0, 0.1, 0.2]).unwrap();
        let p = problem(mesh, 0.1, ArcObservation::from_trace(&truth.t).combine(&constant_obs(0.02), |a, b| a + b));
        let u = [0.05, 0.05, 0.05];
        let g = p.gradient(&u).unwrap();
        let tau = 1e-5;
        for i in 0..3 {
            let (mut up, mut um) = (u, u);
            up[i] += tau;
            um[i] -= tau;
            let fd = (p.cost(&up).unwrap() - p.cost(&um).unwrap()) / (2.0 * tau);
            assert!((fd - g[i]).abs() <= 1e-5 * (1.0 + g[i].abs()), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn gauss_newton_matrix_is_symmetric_positive_definite() {
        let mesh = reference_mesh(0.06);
        let p = problem(mesh, 0.0, constant_obs(0.0));
        let e = p.evaluate(&[0.0, 0.1, 0.2]).unwrap();
        let h = e.gauss_newton_matrix().unwrap();
        let hmax = h.amax();
        assert!((&h - h.transpose()).amax() <= 1e-8 * hmax);
        assert!(min_eigenvalue(&h) > 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let du: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dt = e.linearization.solve(&du, None).unwrap();
            let quad = dot(dt.values(), &e.linearization.boundary_mass().mul_vec(dt.values()));
            let v = DVector::from_column_slice(&du);
            let form = v.dot(&(&h * &v));
            assert!((form - quad).abs() <= 1e-9 * quad, "{form} vs {quad}");
        }
    }

    #[test]
    fn projection_examples() {
        let set = AdmissibleSet::nonnegative(3);
        assert_eq!(project(&[-1.0, 0.5, 2.0], &set), vec![0.0, 0.5, 2.0]);
        assert_eq!(project(&[0.1, 0.5, 2.0], &set), vec![0.1, 0.5, 2.0]);
        assert_eq!(project(&[-1.0, -2.0, -0.1], &set), vec![0.0; 3]);
        assert!(AdmissibleSet::new(vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn lm_stops_immediately_for_large_noise() {
        let mesh = reference_mesh(0.1);
        let p = problem(mesh, 0.0, constant_obs(0.5));
        let r = run_levenberg_marquardt(&p, &[0.0; 3], &AdmissibleSet::nonnegative(3), 10.0, 0.0, None, &LmOptions::default())
            .unwrap();
        assert_eq!(r.stopping_index(), 0);
        assert_eq!(r.final_iterate(), &[0.0; 3]);
        assert_eq!(r.stop, Some(StopReason::Discrepancy));
    }

    #[test]
    fn lm_recovers_exact_data_and_fixes_truth() {
        let mesh = reference_mesh(0.06);
        let truth = [0.0, 0.1, 0.2];
        let state = problem(mesh.clone(), 0.0, constant_obs(0.0)).state(&truth).unwrap();
        let p = problem(mesh, 0.0, ArcObservation::from_trace(&state.t));
        let set = AdmissibleSet::nonnegative(3);
        let r = run_levenberg_marquardt(&p, &[0.0; 3], &set, 1e-9, 0.0, Some(&truth), &LmOptions::default()).unwrap();
        assert_eq!(r.stop, Some(StopReason::Discrepancy));
        assert!(r.stopping_index() <= 10);
        assert!(r.final_error().unwrap() <= 1e-6, "{:?}", r.errors());
        assert!(r.residuals[1] < r.residuals[0]);
        assert!(r.h_min_eigenvalues.iter().all(|&x| x > 0.0));

        let fixed = run_levenberg_marquardt(&p, &truth, &set, 0.0, 0.0, Some(&truth), &LmOptions::default()).unwrap();
        assert!(fixed.final_error().unwrap() <= 1e-9);
    }

    #[test]
    fn options_are_validated() {
        let p = problem(single_hole_mesh(), 1.0, constant_obs(0.0));
        let set = AdmissibleSet::nonnegative(1);
        let bad = LmOptions {
            tau: 1.0,
            ..LmOptions::default()
        };
        assert!(run_levenberg_marquardt(&p, &[0.0], &set, 0.1, 0.0, None, &bad).is_err());
        assert!(run_levenberg_marquardt(&p, &[-0.1], &set, 0.1, 0.0, None, &LmOptions::default()).is_err());
    }
}
