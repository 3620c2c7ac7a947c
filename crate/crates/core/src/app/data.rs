//! Synthetic boundary data and the observation file format.
//!
//! ```text
//! eikorec-observation v1
//! perimeter <p>
//! mesh_sha256 <hex digest of the generating mesh file>
//! delta <δ>
//! seed <seed>
//! noise_norm <‖η‖>
//! signal_norm <‖S(u†)‖>
//! points <n>
//! <arc length> <value>      (n lines)
//! ```
//!
//! Numbers are written in the shortest form that parses back to the same `f64`.
//!
//! Noise: the coefficient at data-mesh vertex `v` is the first
//! `rand_distr::StandardNormal` draw of `Xoshiro256PlusPlus::seed_from_u64(k)`
//! with `k = seed XOR (v + 1)·0x9E3779B97F4A7C15`. `seed_from_u64` expands `k`
//! with SplitMix64. Coefficients are drawn on the outer vertices only.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::AppError;
use crate::eikonal::StateSolution;
use crate::fem::NodalField;
use crate::inverse::{ArcObservation, ForwardProblem};
use crate::mesh::{generate_mesh, write_mesh, DomainKind, Mesh};

const HEADER: &str = "eikorec-observation v1";
const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryObservation {
    pub z: ArcObservation,
    pub mesh_sha256: String,
    pub delta: f64,
    pub seed: u64,
    /// `‖η‖_{L²(Γ_N)}`.
    pub noise_norm: f64,
    /// `‖S(u†)‖_{L²(Γ_N)}`.
    pub signal_norm: f64,
}

/// Standard-normal coefficient of vertex `v`.
pub fn noise_coefficient(seed: u64, v: usize) -> f64 {
    let key = seed ^ (v as u64).wrapping_add(1).wrapping_mul(GOLDEN);
    Xoshiro256PlusPlus::seed_from_u64(key).sample(StandardNormal)
}

/// Nodal noise field: seeded coefficients on the outer vertices, zero elsewhere.
pub fn noise_field(mesh: &Arc<Mesh>, seed: u64) -> NodalField {
    let mut values = vec![0.0; mesh.num_vertices()];
    for v in mesh.outer_vertices() {
        values[v] = noise_coefficient(seed, v);
    }
    NodalField::new(mesh.clone(), values).expect("one value per vertex")
}

pub fn mesh_digest(mesh: &Mesh) -> String {
    let mut bytes = Vec::new();
    write_mesh(mesh, &mut bytes).expect("write to memory");
    hex::encode(Sha256::digest(&bytes))
}

/// `z = S(u†) + η` on the outer boundary of `state`'s mesh with
/// `‖η‖ = δ‖S(u†)‖`.
pub fn perturb(state: &StateSolution, delta: f64, seed: u64) -> BoundaryObservation {
    let mesh = state.mesh();
    let clean = ArcObservation::from_trace(&state.t);
    let signal_norm = clean.l2_norm();
    let eta_hat = ArcObservation::from_trace(&noise_field(mesh, seed));
    let raw = eta_hat.l2_norm();
    let scale = if delta == 0.0 || raw == 0.0 { 0.0 } else { delta * signal_norm / raw };
    let values: Vec<f64> = clean.values().iter().zip(eta_hat.values()).map(|(s, e)| s + scale * e).collect();
    let z = ArcObservation::new(clean.perimeter(), clean.breakpoints().to_vec(), values).expect("finite data");
    let noise_norm = z.combine(&clean, |a, b| a - b).l2_norm();
    BoundaryObservation {
        z,
        mesh_sha256: mesh_digest(mesh),
        delta,
        seed,
        noise_norm,
        signal_norm,
    }
}

/// Data mesh at the true sites (size `data_h`).
pub fn data_mesh(config: &ExperimentConfig) -> Result<Arc<Mesh>, AppError> {
    let truth = config.truth()?;
    Ok(Arc::new(generate_mesh(
        config.domain,
        &config.holes(&truth.centers),
        config.data_h,
        DomainKind::Holed,
    )?))
}

/// Forward solve at the truth on the data mesh, then additive seeded noise.
pub fn make_synthetic_data(config: &ExperimentConfig) -> Result<BoundaryObservation, AppError> {
    let truth = config.truth()?;
    let mesh = data_mesh(config)?;
    let placeholder = ArcObservation::new(config.domain.perimeter(), vec![0.0], vec![0.0])?;
    let problem = ForwardProblem::new(mesh, config.physics, config.solver.clone(), placeholder);
    let state = problem.state(&truth.instants)?;
    Ok(perturb(&state, config.delta, config.seed))
}

/// Observation from `data.observation` when set, synthetic data otherwise.
pub fn observation_for(config: &ExperimentConfig) -> Result<BoundaryObservation, AppError> {
    match &config.data_file {
        Some(path) => load_observation(path),
        None => make_synthetic_data(config),
    }
}

pub fn write_observation<W: Write>(obs: &BoundaryObservation, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{HEADER}")?;
    writeln!(w, "perimeter {}", obs.z.perimeter())?;
    writeln!(w, "mesh_sha256 {}", obs.mesh_sha256)?;
    writeln!(w, "delta {}", obs.delta)?;
    writeln!(w, "seed {}", obs.seed)?;
    writeln!(w, "noise_norm {}", obs.noise_norm)?;
    writeln!(w, "signal_norm {}", obs.signal_norm)?;
    writeln!(w, "points {}", obs.z.breakpoints().len())?;
    for (s, v) in obs.z.breakpoints().iter().zip(obs.z.values()) {
        writeln!(w, "{s} {v}")?;
    }
    Ok(())
}

pub fn save_observation(obs: &BoundaryObservation, path: impl AsRef<Path>) -> Result<(), AppError> {
    let mut buf = Vec::new();
    write_observation(obs, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_observation(path: impl AsRef<Path>) -> Result<BoundaryObservation, AppError> {
    read_observation(std::fs::File::open(path)?)
}

pub fn read_observation<R: Read>(r: R) -> Result<BoundaryObservation, AppError> {
    let mut lines = BufReader::new(r).lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String), AppError> {
        match lines.next() {
            Some((k, line)) => Ok((k + 1, line?)),
            None => Err(AppError::Format {
                line: 0,
                message: format!("unexpected end of file, expected {what}"),
            }),
        }
    };
    let (line, header) = next("header")?;
    if header.trim() != HEADER {
        return Err(AppError::Format {
            line,
            message: format!("expected `{HEADER}`"),
        });
    }
    let mut field = |name: &str| -> Result<(usize, String), AppError> {
        let (line, text) = next(name)?;
        match text.trim().split_once(' ') {
            Some((k, v)) if k == name => Ok((line, v.trim().to_string())),
            _ => Err(AppError::Format {
                line,
                message: format!("expected `{name} <value>`"),
            }),
        }
    };
    fn num<T: std::str::FromStr>((line, v): (usize, String)) -> Result<T, AppError> {
        v.parse().map_err(|_| AppError::Format {
            line,
            message: format!("cannot parse `{v}`"),
        })
    }
    let perimeter: f64 = num(field("perimeter")?)?;
    let mesh_sha256 = field("mesh_sha256")?.1;
    let delta: f64 = num(field("delta")?)?;
    let seed: u64 = num(field("seed")?)?;
    let noise_norm: f64 = num(field("noise_norm")?)?;
    let signal_norm: f64 = num(field("signal_norm")?)?;
    let n: usize = num(field("points")?)?;
    let mut breakpoints = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        let (line, text) = next("a data point")?;
        let mut it = text.split_whitespace();
        let (Some(s), Some(v), None) = (it.next(), it.next(), it.next()) else {
            return Err(AppError::Format {
                line,
                message: "expected `<arc length> <value>`".into(),
            });
        };
        breakpoints.push(num((line, s.to_string()))?);
        values.push(num((line, v.to_string()))?);
    }
    Ok(BoundaryObservation {
        z: ArcObservation::new(perimeter, breakpoints, values)?,
        mesh_sha256,
        delta,
        seed,
        noise_norm,
        signal_norm,
    })
}
