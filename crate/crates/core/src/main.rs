use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use eikorec::app::{
    check_gradient, run_beta_sweep, run_experiment_instants, run_experiment_joint, run_forward, run_make_data, run_mesh,
    run_sweep, AppError, CheckHooks, ExperimentConfig, SweepKind,
};

/// Reconstruct activation instants and sites from boundary activation times.
#[derive(Parser)]
#[command(name = "eikorec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (defaults apply to missing keys).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Noise seed, overrides `noise.seed`.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory, overrides `output.dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Mesh size for synthetic data, overrides `mesh.data_h`.
    #[arg(long, value_name = "H")]
    data_mesh_h: Option<f64>,
    /// Forward mesh size, overrides `mesh.h`.
    #[arg(long, value_name = "H")]
    mesh_h: Option<f64>,
}

#[derive(Args, Clone)]
struct Sweep {
    /// Run every (delta, seed) pair in its own directory below the output directory.
    #[arg(long)]
    sweep: bool,
    /// Noise levels of the sweep (default: the configured one).
    #[arg(long, value_delimiter = ',', requires = "sweep")]
    deltas: Vec<f64>,
    /// Seeds of the sweep (default: the configured one).
    #[arg(long, value_delimiter = ',', requires = "sweep")]
    seeds: Vec<u64>,
    /// Worker threads of the sweep.
    #[arg(long, default_value_t = 4, requires = "sweep")]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write the forward mesh at the site positions.
    Mesh(Common),
    /// Write a synthetic observation file.
    MakeData(Common),
    /// Solve the state equation and write its boundary trace.
    Forward(Common),
    /// Reconstruct the instants by projected Levenberg-Marquardt.
    InvertInstants {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sweep: Sweep,
    },
    /// Reconstruct positions and instants jointly.
    InvertJoint {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sweep: Sweep,
    },
    /// Compare adjoint gradient and shape derivative with finite differences.
    CheckGradient {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        corrupt_flux_sign: bool,
    },
    /// H1 distances of the beta-regularized states to the beta = 0 state.
    BetaSweep(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig, AppError> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    if let Some(h) = common.data_mesh_h {
        config.data_h = h;
    }
    if let Some(h) = common.mesh_h {
        config.mesh_h = h;
    }
    config.validate()?;
    Ok(config)
}

fn sweep(config: &ExperimentConfig, kind: SweepKind, s: &Sweep) -> Result<bool, AppError> {
    let deltas = if s.deltas.is_empty() { vec![config.delta] } else { s.deltas.clone() };
    let seeds = if s.seeds.is_empty() { vec![config.seed] } else { s.seeds.clone() };
    let runs = run_sweep(config, kind, &deltas, &seeds, s.workers, &config.output_dir)?;
    let mut ok = true;
    for r in &runs {
        match &r.result {
            Ok(summary) => println!(
                "delta {} seed {}: K = {}, residual {:.4e} (threshold {:.4e}), error {:?}, max d {:?}",
                r.delta, r.seed, summary.k, summary.residual, summary.threshold, summary.error, summary.max_distance
            ),
            Err(e) => {
                ok = false;
                eprintln!("delta {} seed {}: {e}", r.delta, r.seed);
            }
        }
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool, AppError> {
    match cli.command {
        Command::Mesh(c) => {
            let config = load(&c)?;
            let mesh = run_mesh(&config, &config.output_dir)?;
            println!(
                "{} vertices, {} triangles, min angle {:.1} deg -> {}",
                mesh.num_vertices(),
                mesh.num_triangles(),
                mesh.min_angle_deg(),
                config.output_dir.join("mesh.txt").display()
            );
        }
        Command::MakeData(c) => {
            let config = load(&c)?;
            let obs = run_make_data(&config, &config.output_dir)?;
            println!(
                "{} points, |S(u)| = {:.6e}, |eta| = {:.6e} -> {}",
                obs.z.breakpoints().len(),
                obs.signal_norm,
                obs.noise_norm,
                config.output_dir.join("observation.txt").display()
            );
        }
        Command::Forward(c) => {
            let config = load(&c)?;
            let s = run_forward(&config, &config.output_dir)?;
            println!(
                "{} Newton iterations, residual {:.3e}, min T {:.6}",
                s.newton_iterations, s.final_residual_norm, s.min_value
            );
        }
        Command::InvertInstants { common, sweep: s } => {
            let config = load(&common)?;
            if s.sweep {
                return sweep(&config, SweepKind::Instants, &s);
            }
            let o = run_experiment_instants(&config, &config.output_dir)?;
            let r = &o.report;
            println!(
                "K = {}, residual {:.4e} (threshold {:.4e}), u = {:?}, error {:?}",
                r.stopping_index(),
                r.final_residual(),
                r.threshold,
                r.final_iterate(),
                r.final_error()
            );
            if o.identical_meshes {
                println!("note: data were generated on the forward mesh");
            }
        }
        Command::InvertJoint { common, sweep: s } => {
            let config = load(&common)?;
            if s.sweep {
                return sweep(&config, SweepKind::Joint, &s);
            }
            let o = run_experiment_joint(&config, &config.output_dir)?;
            let r = &o.report;
            let k = r.stopping_index();
            println!(
                "K = {k}, residual {:.4e} (threshold {:.4e}), u = {:?}, X = {:?}",
                r.final_residual(),
                r.threshold,
                r.final_instants(),
                r.final_positions()
            );
            if let (Some(d), Some(e)) = (r.position_errors(), r.instant_errors()) {
                println!("d = {:?}, |u - u_true| = {:.4e}", d[k], e[k]);
            }
            if o.identical_meshes {
                println!("note: data and forward meshes share the mesh size");
            }
        }
        Command::CheckGradient {
            common,
            corrupt_flux_sign,
        } => {
            let config = load(&common)?;
            let r = check_gradient(&config, CheckHooks { corrupt_flux_sign })?;
            print!("{}", r.summary());
            return Ok(r.passed);
        }
        Command::BetaSweep(c) => {
            let config = load(&c)?;
            let s = run_beta_sweep(&config, &config.output_dir)?;
            for e in &s.entries {
                match &e.distance {
                    Ok(d) => println!("beta {:<8} |T_beta - T_0|_H1 = {d:.6e}", e.beta),
                    Err(err) => println!("beta {:<8} failed: {err}", e.beta),
                }
            }
            println!("strictly decreasing: {}, last/first = {:.4}", s.decreasing, s.ratio);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
