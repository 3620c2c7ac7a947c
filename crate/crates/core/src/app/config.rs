//! Experiment configuration.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! line    := blank | comment | entry
//! comment := '#' any
//! entry   := key '=' value [comment]
//! key     := section '.' name          e.g. physics.epsilon
//! value   := scalar | list
//! list    := item (',' item)*          points are written "x y"
//! ```
//!
//! Every key may appear at most once; unknown keys are rejected. Missing keys
//! take the defaults listed by [`ExperimentConfig::to_text`] on a default config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::eikonal::SolverOptions;
use crate::fem::{Conductivity, PhysicsParams};
use crate::inverse::{DiscrepancyMode, LmOptions};
use crate::mesh::{HoleSpec, Point, Rectangle};
use crate::shape::{ShapeOptions, StepRule};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("invalid value for `{key}`: {message}")]
    InvalidValue { key: String, message: String },
    #[error("missing {0}")]
    Missing(String),
}

/// Hole midpoints and activation instants.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub centers: Vec<Point>,
    pub instants: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckConfig {
    /// Componentwise relative tolerance of the instant gradient.
    pub gradient_tol: f64,
    /// Relative tolerance of the shape derivative.
    pub shape_tol: f64,
    pub fd_step: f64,
    pub shape_fd_step: f64,
    /// Number of seeded test fields for the shape derivative.
    pub shape_fields: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            gradient_tol: 1e-4,
            shape_tol: 0.05,
            fd_step: 1e-5,
            shape_fd_step: 1e-5,
            shape_fields: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub domain: Rectangle,
    pub radii: Vec<f64>,
    pub truth: Option<Layout>,
    pub initial: Layout,
    pub physics: PhysicsParams,
    pub delta: f64,
    pub seed: u64,
    /// Forward mesh size.
    pub mesh_h: f64,
    /// Mesh size for synthetic data.
    pub data_h: f64,
    pub solver: SolverOptions,
    pub lm: LmOptions,
    pub shape: ShapeOptions,
    pub betas: Vec<f64>,
    pub check: CheckConfig,
    /// Observation file to invert instead of synthetic data.
    pub data_file: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            domain: Rectangle::unit(),
            radii: vec![0.1; 3],
            truth: None,
            initial: Layout {
                centers: vec![[0.5, 0.8], [0.2, 0.2], [0.8, 0.4]],
                instants: vec![0.0; 3],
            },
            physics: PhysicsParams::new(0.1, 0.0, Conductivity::SineDiagonal).expect("default physics"),
            delta: 0.1,
            seed: 1,
            mesh_h: 0.02,
            data_h: 0.015,
            solver: SolverOptions::default().with_tol(1e-12),
            lm: LmOptions::default(),
            shape: ShapeOptions::default(),
            betas: vec![1.0, 0.1, 0.01, 0.001, 0.0],
            check: CheckConfig::default(),
            data_file: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

struct Entry {
    line: usize,
    value: String,
    used: bool,
}

struct Entries(BTreeMap<String, Entry>);

impl Entries {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                message: "expected `key = value`".into(),
            })?;
            let key = key.trim();
            if key.is_empty() || !key.contains('.') || key.contains(char::is_whitespace) {
                return Err(ConfigError::Syntax {
                    line,
                    message: format!("malformed key `{key}`"),
                });
            }
            let entry = Entry {
                line,
                value: value.trim().to_string(),
                used: false,
            };
            if map.insert(key.to_string(), entry).is_some() {
                return Err(ConfigError::DuplicateKey {
                    line,
                    key: key.into(),
                });
            }
        }
        Ok(Self(map))
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.0.get_mut(key).map(|e| {
            e.used = true;
            e.value.clone()
        })
    }

    fn get<T>(&mut self, key: &str, parse: impl Fn(&str) -> Result<T, String>) -> Result<Option<T>, ConfigError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => parse(&v).map(Some).map_err(|message| ConfigError::InvalidValue {
                key: key.into(),
                message,
            }),
        }
    }

    fn set<T>(&mut self, key: &str, target: &mut T, parse: impl Fn(&str) -> Result<T, String>) -> Result<(), ConfigError> {
        if let Some(v) = self.get(key, parse)? {
            *target = v;
        }
        Ok(())
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.0.into_iter().find(|(_, e)| !e.used) {
            Some((key, e)) => Err(ConfigError::UnknownKey { line: e.line, key }),
            None => Ok(()),
        }
    }
}

fn scalar<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| format!("`{s}`: {e}"))
}

fn boolean(s: &str) -> Result<bool, String> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("`{s}` is not a boolean")),
    }
}

fn list(s: &str) -> Result<Vec<f64>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|x| scalar(x.trim())).collect()
}

fn points(s: &str) -> Result<Vec<Point>, String> {
    s.split(',')
        .map(|item| {
            let c: Vec<f64> = item.split_whitespace().map(scalar).collect::<Result<_, _>>()?;
            match c[..] {
                [x, y] => Ok([x, y]),
                _ => Err(format!("`{}` is not a point `x y`", item.trim())),
            }
        })
        .collect()
}

fn conductivity(s: &str) -> Result<Conductivity, String> {
    match s {
        "PAPER_SINE" => return Ok(Conductivity::SineDiagonal),
        "IDENTITY" => return Ok(Conductivity::Identity),
        _ => {}
    }
    let inner = s
        .strip_prefix("CONSTANT(")
        .and_then(|r| r.strip_suffix(')'))
        .ok_or_else(|| format!("`{s}` is not PAPER_SINE, IDENTITY or CONSTANT(a b c d)"))?;
    let c: Vec<f64> = inner.split_whitespace().map(scalar).collect::<Result<_, _>>()?;
    match c[..] {
        [a, b, c, d] => Ok(Conductivity::Constant([[a, b], [c, d]])),
        _ => Err("CONSTANT needs four entries".into()),
    }
}

fn discrepancy(s: &str) -> Result<DiscrepancyMode, String> {
    match s {
        "tau_delta" => Ok(DiscrepancyMode::LiteralTauDelta),
        "tau_noise_norm" => Ok(DiscrepancyMode::TauNoiseNorm),
        _ => Err(format!("`{s}` is not tau_delta or tau_noise_norm")),
    }
}

fn step_rule(s: &str) -> Result<StepRule, String> {
    match s {
        "bb" => Ok(StepRule::BarzilaiBorwein),
        "doubling" => Ok(StepRule::Doubling),
        _ => Err(format!("`{s}` is not bb or doubling")),
    }
}

fn conductivity_text(c: &Conductivity) -> String {
    match c {
        Conductivity::SineDiagonal => "PAPER_SINE".into(),
        Conductivity::Identity => "IDENTITY".into(),
        Conductivity::Constant(m) => format!("CONSTANT({} {} {} {})", m[0][0], m[0][1], m[1][0], m[1][1]),
    }
}

fn list_text(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn points_text(v: &[Point]) -> String {
    v.iter().map(|p| format!("{} {}", p[0], p[1])).collect::<Vec<_>>().join(", ")
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut e = Entries::parse(text)?;
        let mut c = ExperimentConfig::default();

        e.set("geometry.width", &mut c.domain.width, scalar)?;
        e.set("geometry.height", &mut c.domain.height, scalar)?;
        let radii = e.get("geometry.radii", list)?;

        let truth_centers = e.get("truth.centers", points)?;
        let truth_instants = e.get("truth.instants", list)?;
        c.truth = match (truth_centers, truth_instants) {
            (Some(centers), Some(instants)) => Some(Layout { centers, instants }),
            (None, None) => None,
            (Some(_), None) => return Err(ConfigError::Missing("truth.instants (truth.centers is set)".into())),
            (None, Some(_)) => return Err(ConfigError::Missing("truth.centers (truth.instants is set)".into())),
        };
        let initial_centers = e.get("initial.centers", points)?;
        let initial_instants = e.get("initial.instants", list)?;
        c.initial.centers = match (initial_centers, &c.truth) {
            (Some(x), _) => x,
            (None, Some(t)) => t.centers.clone(),
            (None, None) => c.initial.centers,
        };
        let n = c.initial.centers.len();
        c.initial.instants = initial_instants.unwrap_or_else(|| vec![0.0; n]);
        c.radii = match radii {
            Some(r) if r.len() == 1 => vec![r[0]; n],
            Some(r) => r,
            None => vec![c.radii[0]; n],
        };

        let mut epsilon = c.physics.epsilon;
        let mut beta = c.physics.beta;
        let mut cond = c.physics.conductivity;
        e.set("physics.epsilon", &mut epsilon, scalar)?;
        e.set("physics.beta", &mut beta, scalar)?;
        e.set("physics.conductivity", &mut cond, conductivity)?;
        c.physics = PhysicsParams::new(epsilon, beta, cond).map_err(|err| invalid("physics", err.to_string()))?;

        e.set("noise.delta", &mut c.delta, scalar)?;
        e.set("noise.seed", &mut c.seed, scalar)?;
        e.set("mesh.h", &mut c.mesh_h, scalar)?;
        e.set("mesh.data_h", &mut c.data_h, scalar)?;

        e.set("solver.newton_tol", &mut c.solver.newton_tol, scalar)?;
        e.set("solver.max_newton", &mut c.solver.max_newton, scalar)?;
        e.set("solver.armijo", &mut c.solver.armijo, scalar)?;
        e.set("solver.max_halvings", &mut c.solver.max_halvings, scalar)?;

        e.set("lm.tau", &mut c.lm.tau, scalar)?;
        e.set("lm.alpha0", &mut c.lm.alpha0, scalar)?;
        e.set("lm.q", &mut c.lm.q, scalar)?;
        e.set("lm.lambda", &mut c.lm.lambda, scalar)?;
        e.set("lm.max_iterations", &mut c.lm.max_iterations, scalar)?;
        e.set("lm.discrepancy", &mut c.lm.discrepancy_mode, discrepancy)?;
        e.set("lm.safeguarded", &mut c.lm.safeguarded, boolean)?;
        e.set("lm.stagnation_tol", &mut c.lm.stagnation_tol, scalar)?;

        let s = &mut c.shape;
        e.set("shape.gamma", &mut s.gamma, scalar)?;
        e.set("shape.gradient_guard", &mut s.gradient_guard, scalar)?;
        e.set("shape.initial_step", &mut s.initial_step, scalar)?;
        e.set("shape.max_step", &mut s.max_step, scalar)?;
        e.set("shape.step_rule", &mut s.step_rule, step_rule)?;
        e.set("shape.max_halvings", &mut s.max_halvings, scalar)?;
        e.set("shape.instant_scale", &mut s.instant_scale, scalar)?;
        e.set("shape.position_scale", &mut s.position_scale, scalar)?;
        e.set("shape.max_iterations", &mut s.max_iterations, scalar)?;
        e.set("shape.tau", &mut s.tau, scalar)?;
        e.set("shape.discrepancy", &mut s.discrepancy_mode, discrepancy)?;
        e.set("shape.alternating", &mut s.alternating, boolean)?;
        e.set("shape.cg_tol", &mut s.cg.tol, scalar)?;
        e.set("shape.cg_max_iterations", &mut s.cg.max_iterations, scalar)?;

        e.set("beta.list", &mut c.betas, list)?;

        e.set("check.gradient_tol", &mut c.check.gradient_tol, scalar)?;
        e.set("check.shape_tol", &mut c.check.shape_tol, scalar)?;
        e.set("check.fd_step", &mut c.check.fd_step, scalar)?;
        e.set("check.shape_fd_step", &mut c.check.shape_fd_step, scalar)?;
        e.set("check.shape_fields", &mut c.check.shape_fields, scalar)?;

        c.data_file = e.get("data.observation", |s| Ok(PathBuf::from(s)))?;
        e.set("output.dir", &mut c.output_dir, |s| Ok(PathBuf::from(s)))?;
        e.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = self.initial.centers.len();
        if !(self.domain.width > 0.0 && self.domain.height > 0.0) {
            return Err(invalid("geometry", "width and height must be positive"));
        }
        if n == 0 {
            return Err(invalid("initial.centers", "at least one activation site is required"));
        }
        if self.radii.len() != n || self.radii.iter().any(|r| !(*r > 0.0)) {
            return Err(invalid("geometry.radii", format!("expected {n} positive radii")));
        }
        if self.initial.instants.len() != n {
            return Err(invalid("initial.instants", format!("expected {n} values")));
        }
        if let Some(t) = &self.truth {
            if t.centers.len() != n || t.instants.len() != n {
                return Err(invalid("truth", format!("expected {n} centers and instants")));
            }
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(invalid("noise.delta", "must be a nonnegative number"));
        }
        for (key, h) in [("mesh.h", self.mesh_h), ("mesh.data_h", self.data_h)] {
            if !(h > 0.0) {
                return Err(invalid(key, "must be positive"));
            }
        }
        self.lm.validate().map_err(|e| invalid("lm", e.to_string()))?;
        self.shape.validate().map_err(|e| invalid("shape", e.to_string()))?;
        Ok(())
    }

    pub fn truth(&self) -> Result<&Layout, ConfigError> {
        self.truth.as_ref().ok_or_else(|| ConfigError::Missing("truth.centers and truth.instants".into()))
    }

    /// Holes at `centers` with the configured radii.
    pub fn holes(&self, centers: &[Point]) -> Vec<HoleSpec> {
        centers.iter().zip(&self.radii).map(|(&c, &r)| HoleSpec::new(c, r)).collect()
    }

    /// Fixed site positions for experiments that do not move the sites.
    pub fn site_centers(&self) -> &[Point] {
        self.truth.as_ref().map_or(&self.initial.centers, |t| &t.centers)
    }

    /// Data and forward meshes coincide, so the data carry no discretization error.
    pub fn inverse_crime(&self) -> bool {
        self.data_h == self.mesh_h
    }

    /// Fully resolved configuration in the input grammar.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        kv("geometry.width", self.domain.width.to_string());
        kv("geometry.height", self.domain.height.to_string());
        kv("geometry.radii", list_text(&self.radii));
        if let Some(t) = &self.truth {
            kv("truth.centers", points_text(&t.centers));
            kv("truth.instants", list_text(&t.instants));
        }
        kv("initial.centers", points_text(&self.initial.centers));
        kv("initial.instants", list_text(&self.initial.instants));
        kv("physics.epsilon", self.physics.epsilon.to_string());
        kv("physics.beta", self.physics.beta.to_string());
        kv("physics.conductivity", conductivity_text(&self.physics.conductivity));
        kv("noise.delta", self.delta.to_string());
        kv("noise.seed", self.seed.to_string());
        kv("mesh.h", self.mesh_h.to_string());
        kv("mesh.data_h", self.data_h.to_string());
        kv("solver.newton_tol", self.solver.newton_tol.to_string());
        kv("solver.max_newton", self.solver.max_newton.to_string());
        kv("solver.armijo", self.solver.armijo.to_string());
        kv("solver.max_halvings", self.solver.max_halvings.to_string());
        let mode = |m: DiscrepancyMode| match m {
            DiscrepancyMode::LiteralTauDelta => "tau_delta".to_string(),
            DiscrepancyMode::TauNoiseNorm => "tau_noise_norm".to_string(),
        };
        kv("lm.tau", self.lm.tau.to_string());
        kv("lm.alpha0", self.lm.alpha0.to_string());
        kv("lm.q", self.lm.q.to_string());
        kv("lm.lambda", self.lm.lambda.to_string());
        kv("lm.max_iterations", self.lm.max_iterations.to_string());
        kv("lm.discrepancy", mode(self.lm.discrepancy_mode));
        kv("lm.safeguarded", self.lm.safeguarded.to_string());
        kv("lm.stagnation_tol", self.lm.stagnation_tol.to_string());
        let sh = &self.shape;
        kv("shape.gamma", sh.gamma.to_string());
        kv("shape.gradient_guard", sh.gradient_guard.to_string());
        kv("shape.initial_step", sh.initial_step.to_string());
        kv("shape.max_step", sh.max_step.to_string());
        kv(
            "shape.step_rule",
            match sh.step_rule {
                StepRule::BarzilaiBorwein => "bb".into(),
                StepRule::Doubling => "doubling".into(),
            },
        );
        kv("shape.max_halvings", sh.max_halvings.to_string());
        kv("shape.instant_scale", sh.instant_scale.to_string());
        kv("shape.position_scale", sh.position_scale.to_string());
        kv("shape.max_iterations", sh.max_iterations.to_string());
        kv("shape.tau", sh.tau.to_string());
        kv("shape.discrepancy", mode(sh.discrepancy_mode));
        kv("shape.alternating", sh.alternating.to_string());
        kv("shape.cg_tol", sh.cg.tol.to_string());
        kv("shape.cg_max_iterations", sh.cg.max_iterations.to_string());
        kv("beta.list", list_text(&self.betas));
        kv("check.gradient_tol", self.check.gradient_tol.to_string());
        kv("check.shape_tol", self.check.shape_tol.to_string());
        kv("check.fd_step", self.check.fd_step.to_string());
        kv("check.shape_fd_step", self.check.shape_fd_step.to_string());
        kv("check.shape_fields", self.check.shape_fields.to_string());
        if let Some(p) = &self.data_file {
            kv("data.observation", p.display().to_string());
        }
        kv("output.dir", self.output_dir.display().to_string());
        s
    }
}
