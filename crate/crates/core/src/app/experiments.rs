//! Experiment drivers. Every driver writes into an output directory; CSV columns
//! are documented at the writer. Numbers use the shortest round-trip form, so equal
//! runs give byte-identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use log::info;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::config::ExperimentConfig;
use super::data::{self, mesh_digest, observation_for, BoundaryObservation};
use super::svg::{self, Series};
use super::AppError;
use crate::eikonal::{beta_continuation, solve_state, BetaEntry};
use crate::fem::{DirichletMap, Source};
use crate::inverse::{run_levenberg_marquardt, AdmissibleSet, ArcObservation, ForwardProblem, InverseReport};
use crate::mesh::{generate_mesh, save_mesh, DomainKind, Mesh, Point};
use crate::shape::{
    assemble_shape_sources, bump_field, perturbed_cost, run_joint_reconstruction, shape_derivative, JointProblem,
    JointReference, JointReport,
};

fn num(x: f64) -> String {
    x.to_string()
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), AppError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn indexed(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

/// Holed forward mesh at the fixed site positions.
pub fn forward_mesh(config: &ExperimentConfig) -> Result<Arc<Mesh>, AppError> {
    Ok(Arc::new(generate_mesh(
        config.domain,
        &config.holes(config.site_centers()),
        config.mesh_h,
        DomainKind::Holed,
    )?))
}

fn placeholder(config: &ExperimentConfig) -> Result<ArcObservation, AppError> {
    Ok(ArcObservation::new(config.domain.perimeter(), vec![0.0], vec![0.0])?)
}

/// Writes `mesh.txt` (forward mesh at the site positions).
pub fn run_mesh(config: &ExperimentConfig, out: &Path) -> Result<Arc<Mesh>, AppError> {
    std::fs::create_dir_all(out)?;
    let mesh = forward_mesh(config)?;
    save_mesh(&mesh, out.join("mesh.txt"))?;
    Ok(mesh)
}

/// Writes `observation.txt`.
pub fn run_make_data(config: &ExperimentConfig, out: &Path) -> Result<BoundaryObservation, AppError> {
    std::fs::create_dir_all(out)?;
    let obs = data::make_synthetic_data(config)?;
    data::save_observation(&obs, out.join("observation.txt"))?;
    Ok(obs)
}

#[derive(Debug, Clone)]
pub struct ForwardSummary {
    pub instants: Vec<f64>,
    pub newton_iterations: usize,
    pub final_residual_norm: f64,
    pub min_value: f64,
    pub boundary_norm: f64,
}

/// Solves the state at the true instants (initial ones without truth) and writes
/// `trace.csv` (columns `s,T`: arc length and boundary value) and `forward.txt`.
pub fn run_forward(config: &ExperimentConfig, out: &Path) -> Result<ForwardSummary, AppError> {
    std::fs::create_dir_all(out)?;
    let instants = config.truth.as_ref().map_or(&config.initial.instants, |t| &t.instants).clone();
    let mesh = forward_mesh(config)?;
    let state = solve_state(
        &mesh,
        &config.physics,
        &DirichletMap::from_instants(&mesh, &instants)?,
        &Source::unit(&mesh),
        &config.solver,
    )?;
    let trace = ArcObservation::from_trace(&state.t);
    let rows: Vec<Vec<String>> = trace.breakpoints().iter().zip(trace.values()).map(|(s, t)| vec![num(*s), num(*t)]).collect();
    write_csv(&out.join("trace.csv"), &["s".into(), "T".into()], &rows)?;
    let summary = ForwardSummary {
        instants,
        newton_iterations: state.newton_iterations,
        final_residual_norm: state.final_residual_norm,
        min_value: state.t.min(),
        boundary_norm: trace.l2_norm(),
    };
    let mut text = String::new();
    writeln!(text, "vertices {}", mesh.num_vertices()).unwrap();
    writeln!(text, "triangles {}", mesh.num_triangles()).unwrap();
    writeln!(text, "instants {:?}", summary.instants).unwrap();
    writeln!(text, "newton_iterations {}", summary.newton_iterations).unwrap();
    writeln!(text, "final_residual_norm {:e}", summary.final_residual_norm).unwrap();
    writeln!(text, "min_T {}", summary.min_value).unwrap();
    writeln!(text, "boundary_l2_norm {}", summary.boundary_norm).unwrap();
    std::fs::write(out.join("forward.txt"), text)?;
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct InstantsOutcome {
    pub report: InverseReport,
    pub observation: BoundaryObservation,
    /// Data were generated on the forward mesh itself.
    pub identical_meshes: bool,
}

/// Synthetic data (or the configured observation file) followed by projected
/// Levenberg-Marquardt. Writes
/// - `iterates.csv`: `k, u1..un, residual, alpha` (`alpha` is the α_k used to leave
///   iterate k, empty on the last row), plus `error` when the truth is known;
/// - `report.txt`; `convergence.svg`; `config.txt` (resolved configuration).
pub fn run_experiment_instants(config: &ExperimentConfig, out: &Path) -> Result<InstantsOutcome, AppError> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.txt"), config.to_text())?;
    let observation = observation_for(config)?;
    let mesh = forward_mesh(config)?;
    let identical_meshes = mesh_digest(&mesh) == observation.mesh_sha256;
    let n = config.initial.instants.len();
    let problem = ForwardProblem::new(mesh, config.physics, config.solver.clone(), observation.z.clone());
    let reference = config.truth.as_ref().map(|t| t.instants.as_slice());
    let report = run_levenberg_marquardt(
        &problem,
        &config.initial.instants,
        &AdmissibleSet::nonnegative(n),
        observation.delta,
        observation.noise_norm,
        reference,
        &config.lm,
    )?;

    let errors = report.errors();
    let mut header = vec!["k".to_string()];
    header.extend(indexed("u", n));
    header.extend(["residual".into(), "alpha".into()]);
    if errors.is_some() {
        header.push("error".into());
    }
    let rows: Vec<Vec<String>> = (0..report.iterates.len())
        .map(|k| {
            let mut row = vec![k.to_string()];
            row.extend(report.iterates[k].iter().map(|&x| num(x)));
            row.push(num(report.residuals[k]));
            row.push(report.alphas.get(k).map_or(String::new(), |&a| num(a)));
            if let Some(e) = &errors {
                row.push(num(e[k]));
            }
            row
        })
        .collect();
    write_csv(&out.join("iterates.csv"), &header, &rows)?;

    let mut text = String::new();
    writeln!(text, "stop {}", report.stop.map_or("none".into(), |s| s.to_string())).unwrap();
    writeln!(text, "K {}", report.stopping_index()).unwrap();
    writeln!(text, "threshold {}", report.threshold).unwrap();
    writeln!(text, "final_residual {}", report.final_residual()).unwrap();
    writeln!(text, "final_iterate {:?}", report.final_iterate()).unwrap();
    if let Some(e) = report.final_error() {
        writeln!(text, "final_error {e}").unwrap();
    }
    writeln!(text, "min_eigenvalue_H {:?}", report.h_min_eigenvalues).unwrap();
    writeln!(text, "delta {}", observation.delta).unwrap();
    writeln!(text, "noise_norm {}", observation.noise_norm).unwrap();
    writeln!(text, "identical_data_and_forward_mesh {identical_meshes}").unwrap();
    std::fs::write(out.join("report.txt"), text)?;

    let residual: Vec<(f64, f64)> = report.residuals.iter().enumerate().map(|(k, &r)| (k as f64, r)).collect();
    let last = residual.len().saturating_sub(1).max(1) as f64;
    let mut series = vec![
        Series::new("residual", residual),
        Series::new("threshold", vec![(0.0, report.threshold), (last, report.threshold)]).dashed(),
    ];
    if let Some(e) = &errors {
        series.push(Series::new("|u - u†|", e.iter().enumerate().map(|(k, &x)| (k as f64, x)).collect()));
    }
    std::fs::write(out.join("convergence.svg"), svg::log_chart("Levenberg-Marquardt", "iteration", &series))?;
    info!("instants: K = {}, residual {:e}", report.stopping_index(), report.final_residual());
    Ok(InstantsOutcome {
        report,
        observation,
        identical_meshes,
    })
}

pub fn joint_problem(config: &ExperimentConfig, observation: ArcObservation) -> JointProblem {
    JointProblem {
        domain: config.domain,
        radii: config.radii.clone(),
        target_h: config.mesh_h,
        params: config.physics,
        solver: config.solver.clone(),
        observation,
        admissible: AdmissibleSet::nonnegative(config.radii.len()),
    }
}

#[derive(Debug, Clone)]
pub struct JointOutcome {
    pub report: JointReport,
    pub observation: BoundaryObservation,
    /// Data and forward meshes share the mesh size, so at the true positions they coincide.
    pub identical_meshes: bool,
}

/// Joint reconstruction of positions and instants. Writes
/// - `iterates.csv`: `k, u1..un, x1, y1, .., xn, yn, residual, step, d1..dn, error`
///   (`step` is the accepted step leaving iterate k, `d`/`error` only with truth);
/// - `table.csv`: `delta, K, residual, d1..dn, error`;
/// - `midpoint_paths.svg`, `convergence.svg`, `report.txt`, `config.txt`.
pub fn run_experiment_joint(config: &ExperimentConfig, out: &Path) -> Result<JointOutcome, AppError> {
    let probe = joint_problem(config, placeholder(config)?);
    probe.check_positions(&config.initial.centers)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.txt"), config.to_text())?;
    let observation = observation_for(config)?;
    let problem = JointProblem {
        observation: observation.z.clone(),
        ..probe
    };
    let reference = JointReference {
        instants: config.truth.as_ref().map(|t| t.instants.clone()),
        positions: config.truth.as_ref().map(|t| t.centers.clone()),
    };
    let report = run_joint_reconstruction(
        &problem,
        &config.initial.instants,
        &config.initial.centers,
        observation.delta,
        observation.noise_norm,
        &reference,
        &config.shape,
    )?;
    let identical_meshes = config.inverse_crime();
    let n = config.radii.len();
    let d = report.position_errors();
    let e = report.instant_errors();

    let mut header = vec!["k".to_string()];
    header.extend(indexed("u", n));
    for i in 1..=n {
        header.extend([format!("x{i}"), format!("y{i}")]);
    }
    header.extend(["residual".into(), "step".into()]);
    if d.is_some() {
        header.extend(indexed("d", n));
    }
    if e.is_some() {
        header.push("error".into());
    }
    let rows: Vec<Vec<String>> = (0..report.residuals.len())
        .map(|k| {
            let mut row = vec![k.to_string()];
            row.extend(report.instants[k].iter().map(|&x| num(x)));
            row.extend(report.positions[k].iter().flat_map(|p| [num(p[0]), num(p[1])]));
            row.push(num(report.residuals[k]));
            row.push(report.steps.get(k).map_or(String::new(), |&s| num(s)));
            if let Some(d) = &d {
                row.extend(d[k].iter().map(|&x| num(x)));
            }
            if let Some(e) = &e {
                row.push(num(e[k]));
            }
            row
        })
        .collect();
    write_csv(&out.join("iterates.csv"), &header, &rows)?;

    let k = report.stopping_index();
    let mut table_header = vec!["delta".to_string(), "K".into(), "residual".into()];
    let mut table_row = vec![num(observation.delta), k.to_string(), num(report.final_residual())];
    if let Some(d) = &d {
        table_header.extend(indexed("d", n));
        table_row.extend(d[k].iter().map(|&x| num(x)));
    }
    if let Some(e) = &e {
        table_header.push("error".into());
        table_row.push(num(e[k]));
    }
    write_csv(&out.join("table.csv"), &table_header, &[table_row])?;

    let mut text = String::new();
    writeln!(text, "stop {}", report.stop.map_or("none".into(), |s| s.to_string())).unwrap();
    writeln!(text, "K {k}").unwrap();
    writeln!(text, "threshold {}", report.threshold).unwrap();
    writeln!(text, "final_residual {}", report.final_residual()).unwrap();
    writeln!(text, "final_instants {:?}", report.final_instants()).unwrap();
    writeln!(text, "final_positions {:?}", report.final_positions()).unwrap();
    if let Some(d) = &d {
        writeln!(text, "final_distances {:?}", d[k]).unwrap();
    }
    if let Some(e) = &e {
        writeln!(text, "final_error {}", e[k]).unwrap();
    }
    writeln!(text, "gamma {}", config.shape.gamma).unwrap();
    writeln!(text, "delta {}", observation.delta).unwrap();
    writeln!(text, "noise_norm {}", observation.noise_norm).unwrap();
    writeln!(text, "identical_data_and_forward_mesh {identical_meshes}").unwrap();
    std::fs::write(out.join("report.txt"), text)?;

    let paths: Vec<Vec<Point>> = (0..n).map(|i| report.positions.iter().map(|x| x[i]).collect()).collect();
    std::fs::write(
        out.join("midpoint_paths.svg"),
        svg::midpoint_paths(config.domain, &paths, reference.positions.as_deref(), &config.radii),
    )?;
    let residual: Vec<(f64, f64)> = report.residuals.iter().enumerate().map(|(k, &r)| (k as f64, r)).collect();
    let last = residual.len().saturating_sub(1).max(1) as f64;
    let mut series = vec![
        Series::new("residual", residual),
        Series::new("threshold", vec![(0.0, report.threshold), (last, report.threshold)]).dashed(),
    ];
    if let Some(d) = &d {
        for i in 0..n {
            series.push(Series::new(format!("d{}", i + 1), d.iter().enumerate().map(|(k, x)| (k as f64, x[i])).collect()));
        }
    }
    std::fs::write(out.join("convergence.svg"), svg::log_chart("Joint reconstruction", "iteration", &series))?;
    Ok(JointOutcome {
        report,
        observation,
        identical_meshes,
    })
}

/// Negative controls for [`check_gradient`].
#[derive(Debug, Clone, Copy, Default)]
pub struct CheckHooks {
    /// Flip the sign of the hole fluxes before comparing.
    pub corrupt_flux_sign: bool,
}

#[derive(Debug, Clone)]
pub struct GradientCheck {
    pub gradient: Vec<f64>,
    pub fd_gradient: Vec<f64>,
    /// Largest componentwise `|fd − g| / max(|g|, floor)`.
    pub gradient_deviation: f64,
    /// `(DJ(V), central difference)` per test field.
    pub shape: Vec<(f64, f64)>,
    pub shape_deviation: f64,
    pub passed: bool,
}

impl GradientCheck {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        writeln!(s, "gradient    {:?}", self.gradient).unwrap();
        writeln!(s, "fd_gradient {:?}", self.fd_gradient).unwrap();
        writeln!(s, "max relative deviation (instants) {:e}", self.gradient_deviation).unwrap();
        for (dj, fd) in &self.shape {
            writeln!(s, "shape derivative {dj:e} vs fd {fd:e}").unwrap();
        }
        writeln!(s, "max relative deviation (shape) {:e}", self.shape_deviation).unwrap();
        writeln!(s, "{}", if self.passed { "PASS" } else { "FAIL" }).unwrap();
        s
    }
}

const GRADIENT_FLOOR: f64 = 1e-12;

/// Finite-difference oracles at the initial positions and instants. Data are
/// synthetic when the truth is known, otherwise the noise-free state at the start.
pub fn check_gradient(config: &ExperimentConfig, hooks: CheckHooks) -> Result<GradientCheck, AppError> {
    let u0 = &config.initial.instants;
    let x0 = &config.initial.centers;
    let mut problem = joint_problem(config, placeholder(config)?);
    problem.check_positions(x0)?;
    problem.observation = match (&config.data_file, &config.truth) {
        (None, None) => {
            let s = problem.evaluate(x0, u0)?;
            ArcObservation::from_trace(&s.eval.state.t)
        }
        _ => observation_for(config)?.z,
    };
    let state = problem.evaluate(x0, u0)?;
    let mut gradient = state.eval.gradient().to_vec();
    if hooks.corrupt_flux_sign {
        gradient.iter_mut().for_each(|g| *g = -*g);
    }
    let forward = problem.forward(state.eval.state.mesh().clone());
    let tau = config.check.fd_step;
    let mut fd_gradient = Vec::with_capacity(u0.len());
    for i in 0..u0.len() {
        let mut plus = u0.clone();
        let mut minus = u0.clone();
        plus[i] += tau;
        minus[i] -= tau;
        fd_gradient.push((forward.cost(&plus)? - forward.cost(&minus)?) / (2.0 * tau));
    }
    let gradient_deviation = gradient
        .iter()
        .zip(&fd_gradient)
        .map(|(g, f)| (f - g).abs() / g.abs().max(GRADIENT_FLOOR))
        .fold(0.0, f64::max);

    let sources = assemble_shape_sources(
        &state.eval.state.t,
        &state.eval.adjoint.phi,
        &config.physics,
        config.shape.gradient_guard,
    )?;
    let t = config.check.shape_fd_step;
    let mut shape = Vec::new();
    for k in 0..config.check.shape_fields {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(config.seed.wrapping_add(k as u64));
        let c: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let v = bump_field(state.eval.state.mesh(), c);
        let dj = shape_derivative(&sources, &v);
        let fd = (perturbed_cost(&problem, &state, &v, t)? - perturbed_cost(&problem, &state, &v, -t)?) / (2.0 * t);
        shape.push((dj, fd));
    }
    let shape_deviation = shape
        .iter()
        .map(|(dj, fd)| (fd - dj).abs() / dj.abs().max(GRADIENT_FLOOR))
        .fold(0.0, f64::max);
    let passed = gradient_deviation <= config.check.gradient_tol && shape_deviation <= config.check.shape_tol;
    Ok(GradientCheck {
        gradient,
        fd_gradient,
        gradient_deviation,
        shape,
        shape_deviation,
        passed,
    })
}

#[derive(Debug)]
pub struct BetaSweep {
    pub entries: Vec<BetaEntry>,
    /// Distances are strictly decreasing over the positive β values.
    pub decreasing: bool,
    /// Last positive-β distance over the first one.
    pub ratio: f64,
}

/// β-continuation at the site positions. Writes `beta_sweep.csv`
/// (`beta, h1_distance, newton_iterations`; the β = 0 reference row has distance 0).
pub fn run_beta_sweep(config: &ExperimentConfig, out: &Path) -> Result<BetaSweep, AppError> {
    std::fs::create_dir_all(out)?;
    let instants = config.truth.as_ref().map_or(&config.initial.instants, |t| &t.instants);
    let mesh = forward_mesh(config)?;
    let entries = beta_continuation(
        &mesh,
        &config.physics,
        &config.betas,
        &DirichletMap::from_instants(&mesh, instants)?,
        &Source::unit(&mesh),
        &config.solver,
    )?;
    let rows: Vec<Vec<String>> = entries
        .iter()
        .map(|e| {
            vec![
                num(e.beta),
                e.distance.as_ref().map_or("nan".into(), |d| num(*d)),
                e.newton_iterations.to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join("beta_sweep.csv"),
        &["beta".into(), "h1_distance".into(), "newton_iterations".into()],
        &rows,
    )?;
    let positive: Vec<f64> = entries
        .iter()
        .filter(|e| e.beta > 0.0)
        .map(|e| e.distance.as_ref().map_or(f64::NAN, |d| *d))
        .collect();
    let decreasing = positive.windows(2).all(|w| w[1] < w[0]);
    let ratio = match (positive.first(), positive.last()) {
        (Some(a), Some(b)) => b / a,
        _ => f64::NAN,
    };
    Ok(BetaSweep {
        entries,
        decreasing,
        ratio,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Instants,
    Joint,
}

#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub k: usize,
    pub residual: f64,
    pub threshold: f64,
    pub error: Option<f64>,
    pub max_distance: Option<f64>,
}

#[derive(Debug)]
pub struct SweepRun {
    pub delta: f64,
    pub seed: u64,
    pub dir: PathBuf,
    pub result: Result<SweepSummary, AppError>,
}

pub fn sweep_dir(base: &Path, delta: f64, seed: u64) -> PathBuf {
    base.join(format!("delta_{delta}_seed_{seed}"))
}

fn run_one(config: &ExperimentConfig, kind: SweepKind, dir: &Path) -> Result<SweepSummary, AppError> {
    match kind {
        SweepKind::Instants => {
            let o = run_experiment_instants(config, dir)?;
            Ok(SweepSummary {
                k: o.report.stopping_index(),
                residual: o.report.final_residual(),
                threshold: o.report.threshold,
                error: o.report.final_error(),
                max_distance: None,
            })
        }
        SweepKind::Joint => {
            let o = run_experiment_joint(config, dir)?;
            let k = o.report.stopping_index();
            Ok(SweepSummary {
                k,
                residual: o.report.final_residual(),
                threshold: o.report.threshold,
                error: o.report.instant_errors().map(|e| e[k]),
                max_distance: o.report.position_errors().map(|d| d[k].iter().copied().fold(0.0, f64::max)),
            })
        }
    }
}

/// Independent runs for every (δ, seed) pair on up to `workers` threads, each in
/// `<base>/delta_<δ>_seed_<seed>`. Writes `<base>/sweep.csv`
/// (`delta, seed, K, residual, threshold, error, max_d`; empty fields when unknown
/// or failed). Runs are returned in input order.
pub fn run_sweep(
    config: &ExperimentConfig,
    kind: SweepKind,
    deltas: &[f64],
    seeds: &[u64],
    workers: usize,
    base: &Path,
) -> Result<Vec<SweepRun>, AppError> {
    std::fs::create_dir_all(base)?;
    let jobs: Vec<(f64, u64)> = deltas.iter().flat_map(|&d| seeds.iter().map(move |&s| (d, s))).collect();
    let results: Mutex<Vec<Option<SweepRun>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(delta, seed)) = jobs.get(j) else { break };
                let dir = sweep_dir(base, delta, seed);
                let run_config = ExperimentConfig {
                    delta,
                    seed,
                    output_dir: dir.clone(),
                    ..config.clone()
                };
                let result = run_one(&run_config, kind, &dir);
                results.lock().expect("no poisoned runs")[j] = Some(SweepRun { delta, seed, dir, result });
            });
        }
    });
    let runs: Vec<SweepRun> = results
        .into_inner()
        .expect("no poisoned runs")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect();
    let opt = |x: Option<f64>| x.map_or(String::new(), num);
    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|r| match &r.result {
            Ok(s) => vec![
                num(r.delta),
                r.seed.to_string(),
                s.k.to_string(),
                num(s.residual),
                num(s.threshold),
                opt(s.error),
                opt(s.max_distance),
            ],
            Err(_) => vec![num(r.delta), r.seed.to_string(), String::new(), String::new(), String::new(), String::new(), String::new()],
        })
        .collect();
    write_csv(
        &base.join("sweep.csv"),
        &["delta", "seed", "K", "residual", "threshold", "error", "max_d"].map(String::from),
        &rows,
    )?;
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::app::config::Layout;

    fn instants_config(delta: f64) -> ExperimentConfig {
        ExperimentConfig {
            truth: Some(Layout {
                centers: vec![[0.5, 0.8], [0.2, 0.2], [0.8, 0.4]],
                instants: vec![0.0, 0.1, 0.2],
            }),
            mesh_h: 0.06,
            data_h: 0.05,
            delta,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn huge_noise_gives_a_single_row() {
        let dir = tempfile::tempdir().unwrap();
        let o = run_experiment_instants(&instants_config(100.0), dir.path()).unwrap();
        assert_eq!(o.report.stopping_index(), 0);
        let csv = std::fs::read_to_string(dir.path().join("iterates.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("k,u1,u2,u3,residual,alpha,error\n"));
        assert!(!o.identical_meshes);
        for f in ["report.txt", "convergence.svg", "config.txt"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn missing_truth_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let c = ExperimentConfig::default();
        assert!(matches!(run_experiment_instants(&c, dir.path()), Err(AppError::Config(_))));
        assert!(matches!(run_experiment_joint(&c, dir.path()), Err(AppError::Config(_))));
    }

    #[test]
    fn identical_meshes_are_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = instants_config(100.0);
        c.data_h = c.mesh_h;
        assert!(run_experiment_instants(&c, dir.path()).unwrap().identical_meshes);
    }

    fn joint_config() -> ExperimentConfig {
        ExperimentConfig {
            radii: vec![0.05; 3],
            truth: Some(Layout {
                centers: vec![[0.5, 0.8], [0.2, 0.3], [0.7, 0.4]],
                instants: vec![0.0, 0.1, 0.2],
            }),
            initial: Layout {
                centers: vec![[0.5, 0.8], [0.2, 0.3], [0.7, 0.4]],
                instants: vec![0.0, 0.1, 0.2],
            },
            mesh_h: 0.07,
            data_h: 0.07,
            delta: 0.0,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn joint_at_truth_without_noise_is_a_single_row() {
        let dir = tempfile::tempdir().unwrap();
        let o = run_experiment_joint(&joint_config(), dir.path()).unwrap();
        assert_eq!(o.report.stopping_index(), 0);
        let csv = std::fs::read_to_string(dir.path().join("iterates.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("k,u1,u2,u3,x1,y1,x2,y2,x3,y3,residual,step,d1,d2,d3,error\n"));
        let table = std::fs::read_to_string(dir.path().join("table.csv")).unwrap();
        assert!(table.starts_with("delta,K,residual,d1,d2,d3,error\n0,0,"));
        assert!(dir.path().join("midpoint_paths.svg").exists());
    }

    #[test]
    fn infeasible_start_fails_before_solving() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = joint_config();
        c.initial.centers[0] = [0.01, 0.5];
        c.mesh_h = 1e-4;
        assert!(matches!(run_experiment_joint(&c, dir.path()), Err(AppError::Mesh(_))));
        assert!(!dir.path().join("iterates.csv").exists());
    }

    #[test]
    fn gradient_check_and_negative_control() {
        let mut c = instants_config(0.01);
        c.radii = vec![0.1; 3];
        c.mesh_h = 0.05;
        c.physics = c.physics.with_beta(0.1).unwrap();
        c.check.shape_fields = 1;
        let ok = check_gradient(&c, CheckHooks::default()).unwrap();
        assert!(ok.passed, "{}", ok.summary());
        let bad = check_gradient(&c, CheckHooks { corrupt_flux_sign: true }).unwrap();
        assert!(!bad.passed);
        assert!(bad.gradient_deviation > 1.0);
    }

    #[test]
    fn noise_free_start_has_vanishing_gradient() {
        let mut c = ExperimentConfig {
            mesh_h: 0.06,
            ..ExperimentConfig::default()
        };
        c.check.shape_fields = 0;
        c.initial.instants = vec![0.0, 0.1, 0.2];
        let r = check_gradient(&c, CheckHooks::default()).unwrap();
        assert!(r.gradient.iter().all(|g| g.abs() < 1e-10), "{:?}", r.gradient);
    }

    #[test]
    fn beta_sweep_writes_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = instants_config(0.1);
        c.mesh_h = 0.06;
        c.betas = vec![0.1, 0.01, 0.0];
        let s = run_beta_sweep(&c, dir.path()).unwrap();
        assert!(s.decreasing && s.ratio < 1.0);
        let csv = std::fs::read_to_string(dir.path().join("beta_sweep.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn sweep_runs_in_parallel_and_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let c = instants_config(0.1);
        let runs = run_sweep(&c, SweepKind::Instants, &[0.1, 0.05], &[1, 2], 3, dir.path()).unwrap();
        assert_eq!(runs.len(), 4);
        assert!(runs.iter().all(|r| r.result.is_ok()));
        let again = tempfile::tempdir().unwrap();
        run_sweep(&c, SweepKind::Instants, &[0.1, 0.05], &[1, 2], 1, again.path()).unwrap();
        for r in &runs {
            let name = r.dir.file_name().unwrap();
            let a = std::fs::read(r.dir.join("iterates.csv")).unwrap();
            let b = std::fs::read(again.path().join(name).join("iterates.csv")).unwrap();
            assert_eq!(a, b);
        }
        assert_eq!(
            std::fs::read(dir.path().join("sweep.csv")).unwrap(),
            std::fs::read(again.path().join("sweep.csv")).unwrap()
        );
    }
}
