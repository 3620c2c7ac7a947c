//! State, linearized and adjoint solves for the viscous Eikonal equation
//! `−ε div(M∇T) + √(β + |∇T|²_M) = f` with hole Dirichlet data and Neumann data on
//! the outer boundary.

use std::sync::Arc;

use log::debug;
use thiserror::Error;

use crate::fem::{
    apply_dirichlet, assemble_linearized_operator, assemble_stiffness, eikonal_residual, laplacian, load_vector,
    mass_matrix, outer_boundary_mass, DirichletMap, FemError, FemSpace, NodalField, OperatorSide, PhysicsParams,
    ResidualContext, Source,
};
use crate::linalg::{dot, norm2, CsrMatrix, LinalgError, LuFactorization};
use crate::mesh::{DomainKind, Mesh};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error("state solves need a holed mesh with at least one hole")]
    InvalidMesh,
    #[error("Newton did not reach the tolerance after {iterations} iterations (best residual {best_residual:e})")]
    NewtonDiverged {
        iterations: usize,
        best_residual: f64,
        best: Vec<f64>,
        history: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialGuess {
    LinearPoisson,
    Given(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    /// Absolute ℓ² tolerance on the residual.
    pub newton_tol: f64,
    pub max_newton: usize,
    pub armijo: f64,
    pub max_halvings: usize,
    pub initial_guess: InitialGuess,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            newton_tol: 1e-10,
            max_newton: 50,
            armijo: 1e-4,
            max_halvings: 30,
            initial_guess: InitialGuess::LinearPoisson,
        }
    }
}

impl SolverOptions {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.newton_tol = tol;
        self
    }
}

#[derive(Debug, Clone)]
pub struct StateSolution {
    pub t: NodalField,
    pub newton_iterations: usize,
    pub final_residual_norm: f64,
    pub residual_history: Vec<f64>,
    pub params: PhysicsParams,
    space: Arc<FemSpace>,
    dirichlet: DirichletMap,
    load: Vec<f64>,
}

impl StateSolution {
    pub fn space(&self) -> &Arc<FemSpace> {
        &self.space
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        self.space.mesh()
    }

    pub fn dirichlet(&self) -> &DirichletMap {
        &self.dirichlet
    }

    pub fn load(&self) -> &[f64] {
        &self.load
    }
}

fn check_mesh(mesh: &Mesh) -> Result<(), SolveError> {
    if mesh.kind() != DomainKind::Holed || mesh.num_holes() == 0 {
        return Err(SolveError::InvalidMesh);
    }
    Ok(())
}

pub fn solve_state(
    mesh: &Arc<Mesh>,
    params: &PhysicsParams,
    dirichlet: &DirichletMap,
    source: &Source,
    options: &SolverOptions,
) -> Result<StateSolution, SolveError> {
    solve_state_in(Arc::new(FemSpace::new(mesh.clone())), params, dirichlet, source, options)
}

/// [`solve_state`] on a prebuilt space.
pub fn solve_state_in(
    space: Arc<FemSpace>,
    params: &PhysicsParams,
    dirichlet: &DirichletMap,
    source: &Source,
    options: &SolverOptions,
) -> Result<StateSolution, SolveError> {
    check_mesh(space.mesh())?;
    let n = space.num_dofs();
    if dirichlet.num_dofs() != n {
        return Err(FemError::Length {
            expected: n,
            found: dirichlet.num_dofs(),
        }
        .into());
    }
    let load = load_vector(&space, source);

    let mut t = match &options.initial_guess {
        InitialGuess::LinearPoisson => {
            // linear problem with the nonlinearity frozen at zero gradient
            let k = assemble_stiffness(&space, params);
            let shifted = {
                let mut src = source.clone();
                src.volume.iter_mut().for_each(|f| *f -= params.beta.sqrt());
                load_vector(&space, &src)
            };
            let (ka, ba) = apply_dirichlet(&k, &shifted, dirichlet);
            LuFactorization::new(&ka)?.solve(&ba)
        }
        InitialGuess::Given(v) => {
            if v.len() != n {
                return Err(FemError::Length {
                    expected: n,
                    found: v.len(),
                }
                .into());
            }
            let mut v = v.clone();
            dirichlet.impose(&mut v);
            v
        }
    };

    let zero = dirichlet.zeroed();
    let residual = |t: &[f64]| eikonal_residual(&space, t, params, dirichlet, source);
    let mut r = residual(&t);
    let mut norm = norm2(&r);
    let mut history = vec![norm];
    let mut best = (norm, t.clone());
    let mut iterations = 0;
    while norm > options.newton_tol {
        if iterations == options.max_newton {
            return Err(SolveError::NewtonDiverged {
                iterations,
                best_residual: best.0,
                best: best.1,
                history,
            });
        }
        let jac = assemble_linearized_operator(&space, &t, params);
        let neg: Vec<f64> = r.iter().map(|x| -x).collect();
        let (ja, rhs) = apply_dirichlet(&jac, &neg, &zero);
        let step = LuFactorization::new(&ja)?.solve(&rhs);

        let mut s = 1.0;
        let mut accepted: Option<(Vec<f64>, Vec<f64>, f64)> = None;
        for _ in 0..=options.max_halvings {
            let trial: Vec<f64> = t.iter().zip(&step).map(|(a, d)| a + s * d).collect();
            let rt = residual(&trial);
            let nt = norm2(&rt);
            let better = accepted.as_ref().is_none_or(|a| nt < a.2);
            if better && nt.is_finite() {
                accepted = Some((trial, rt, nt));
            }
            if nt <= (1.0 - options.armijo * s) * norm {
                break;
            }
            s *= 0.5;
        }
        iterations += 1;
        match accepted {
            Some((trial, rt, nt)) if nt < norm => {
                t = trial;
                r = rt;
                norm = nt;
            }
            _ => {
                // no trial reduced the residual: the iteration has stalled
                history.push(norm);
                return Err(SolveError::NewtonDiverged {
                    iterations,
                    best_residual: best.0,
                    best: best.1,
                    history,
                });
            }
        }
        history.push(norm);
        if norm < best.0 {
            best = (norm, t.clone());
        }
        debug!("newton {iterations}: residual {norm:e} (step {s})");
    }

    Ok(StateSolution {
        t: space.field(t)?,
        newton_iterations: iterations,
        final_residual_norm: norm,
        residual_history: history,
        params: *params,
        space,
        dirichlet: dirichlet.clone(),
        load,
    })
}

/// Adjoint solution together with the fluxes through every hole.
#[derive(Debug, Clone)]
pub struct AdjointSolution {
    pub phi: NodalField,
    pub fluxes: Vec<f64>,
    pub context: ResidualContext,
}

/// Jacobian of the state equation at a converged state, factorized once. The
/// Dirichlet-eliminated matrix has the eliminated transpose as its transpose, so the
/// same factors serve linearized and adjoint solves.
#[derive(Debug, Clone)]
pub struct Linearization {
    space: Arc<FemSpace>,
    operator: Arc<CsrMatrix>,
    constraints: DirichletMap,
    lu: Arc<LuFactorization>,
    boundary_mass: Arc<CsrMatrix>,
}

impl Linearization {
    pub fn new(state: &StateSolution) -> Result<Self, SolveError> {
        let space = state.space.clone();
        let operator = assemble_linearized_operator(&space, state.t.values(), &state.params);
        let constraints = state.dirichlet.zeroed();
        let n = space.num_dofs();
        let (eliminated, _) = apply_dirichlet(&operator, &vec![0.0; n], &constraints);
        let lu = LuFactorization::new(&eliminated)?;
        let boundary_mass = outer_boundary_mass(space.mesh());
        Ok(Self {
            space,
            operator: Arc::new(operator),
            constraints,
            lu: Arc::new(lu),
            boundary_mass: Arc::new(boundary_mass),
        })
    }

    pub fn space(&self) -> &Arc<FemSpace> {
        &self.space
    }

    pub fn operator(&self) -> &CsrMatrix {
        &self.operator
    }

    pub fn boundary_mass(&self) -> &CsrMatrix {
        &self.boundary_mass
    }

    /// Solves `A δT = load` with `δT = delta_u[i]` on hole `i`.
    pub fn solve_with_load(&self, delta_u: &[f64], load: &[f64]) -> Result<NodalField, SolveError> {
        let mesh = self.space.mesh();
        if delta_u.len() != mesh.num_holes() {
            return Err(FemError::Length {
                expected: mesh.num_holes(),
                found: delta_u.len(),
            }
            .into());
        }
        let n = self.space.num_dofs();
        let mut values = vec![0.0; n];
        for (i, &d) in delta_u.iter().enumerate() {
            for &v in self.constraints.hole_vertices(i) {
                values[v] = d;
            }
        }
        let mut rhs = load.to_vec();
        for i in 0..n {
            if self.constraints.is_constrained(i) {
                rhs[i] = values[i];
                continue;
            }
            let (cols, vals) = self.operator.row(i);
            for (&j, &a) in cols.iter().zip(vals) {
                if self.constraints.is_constrained(j) {
                    rhs[i] -= a * values[j];
                }
            }
        }
        Ok(self.space.field(self.lu.solve(&rhs))?)
    }

    /// Linearized state equation with Dirichlet data `delta_u` and volume source `r`.
    pub fn solve(&self, delta_u: &[f64], r: Option<&NodalField>) -> Result<NodalField, SolveError> {
        let load = match r {
            Some(r) => {
                if !r.same_mesh(self.space.mesh()) {
                    return Err(FemError::ContextMismatch.into());
                }
                load_vector(
                    &self.space,
                    &Source {
                        volume: r.values().to_vec(),
                        neumann: None,
                    },
                )
            }
            None => vec![0.0; self.space.num_dofs()],
        };
        self.solve_with_load(delta_u, &load)
    }

    /// `Aᵀφ = load` on free rows, `φ = 0` on every hole.
    pub fn adjoint_with_load(&self, load: Vec<f64>) -> Result<AdjointSolution, SolveError> {
        let n = self.space.num_dofs();
        if load.len() != n {
            return Err(FemError::Length {
                expected: n,
                found: load.len(),
            }
            .into());
        }
        let mut rhs = load.clone();
        for (v, _) in self.constraints.constrained() {
            rhs[v] = 0.0;
        }
        let phi = self.space.field(self.lu.solve_transpose(&rhs))?;
        let context = ResidualContext::new(self.space.mesh().clone(), self.operator.clone(), OperatorSide::Transposed, load);
        let fluxes = context.fluxes(&phi)?;
        Ok(AdjointSolution { phi, fluxes, context })
    }

    /// Adjoint with Neumann data `h` (nodal values; only the outer trace is used).
    pub fn adjoint(&self, h: &[f64]) -> Result<AdjointSolution, SolveError> {
        let n = self.space.num_dofs();
        if h.len() != n {
            return Err(FemError::Length { expected: n, found: h.len() }.into());
        }
        self.adjoint_with_load(self.boundary_mass.mul_vec(h))
    }
}

pub fn solve_linearized(
    state: &StateSolution,
    delta_u: &[f64],
    r: Option<&NodalField>,
) -> Result<NodalField, SolveError> {
    Linearization::new(state)?.solve(delta_u, r)
}

pub fn solve_adjoint(state: &StateSolution, h: &NodalField) -> Result<AdjointSolution, SolveError> {
    if !h.same_mesh(state.mesh()) {
        return Err(FemError::ContextMismatch.into());
    }
    Linearization::new(state)?.adjoint(h.values())
}

/// Discrete `‖a − b‖_{H¹}`.
pub fn h1_distance(space: &FemSpace, a: &[f64], b: &[f64]) -> f64 {
    let e: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let l = laplacian(space).mul_vec(&e);
    let m = mass_matrix(space).mul_vec(&e);
    (dot(&e, &l) + dot(&e, &m)).max(0.0).sqrt()
}

#[derive(Debug)]
pub struct BetaEntry {
    pub beta: f64,
    /// `‖T_β − T_0‖_{H¹}`, or the failure of this entry's solve.
    pub distance: Result<f64, SolveError>,
    pub newton_iterations: usize,
}

/// Solves for each β in `betas` (decreasing, ending at 0), warm-starting from the
/// previous solution, and reports H¹ distances to the β = 0 solution.
pub fn beta_continuation(
    mesh: &Arc<Mesh>,
    params: &PhysicsParams,
    betas: &[f64],
    dirichlet: &DirichletMap,
    source: &Source,
    options: &SolverOptions,
) -> Result<Vec<BetaEntry>, SolveError> {
    if betas.last() != Some(&0.0) {
        return Err(FemError::InvalidParams("beta list must end at 0".into()).into());
    }
    if betas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(FemError::InvalidParams("beta list must be strictly decreasing".into()).into());
    }
    let space = Arc::new(FemSpace::new(mesh.clone()));
    let mut warm: Option<Vec<f64>> = None;
    let mut solved: Vec<(f64, Result<StateSolution, SolveError>)> = Vec::with_capacity(betas.len());
    for &beta in betas {
        let p = params.with_beta(beta)?;
        let mut opts = options.clone();
        if let Some(w) = &warm {
            opts.initial_guess = InitialGuess::Given(w.clone());
        }
        let res = solve_state_in(space.clone(), &p, dirichlet, source, &opts);
        if let Ok(s) = &res {
            warm = Some(s.t.values().to_vec());
        }
        solved.push((beta, res));
    }
    let reference = match solved.pop() {
        Some((_, Ok(s))) => s,
        Some((_, Err(e))) => return Err(e),
        None => unreachable!(),
    };
    let mut out: Vec<BetaEntry> = solved
        .into_iter()
        .map(|(beta, res)| match res {
            Ok(s) => BetaEntry {
                beta,
                distance: Ok(h1_distance(&space, s.t.values(), reference.t.values())),
                newton_iterations: s.newton_iterations,
            },
            Err(e) => BetaEntry {
                beta,
                distance: Err(e),
                newton_iterations: 0,
            },
        })
        .collect();
    out.push(BetaEntry {
        beta: 0.0,
        distance: Ok(0.0),
        newton_iterations: reference.newton_iterations,
    });
    Ok(out)
}
