//! Configuration, synthetic data, experiment drivers and their CSV/SVG output.

pub mod config;
pub mod data;
pub mod experiments;
pub mod svg;

use thiserror::Error;

use crate::eikonal::SolveError;
use crate::fem::FemError;
use crate::inverse::InverseError;
use crate::mesh::MeshError;
use crate::shape::ShapeError;

pub use config::{ConfigError, ExperimentConfig, Layout};
pub use data::{load_observation, make_synthetic_data, save_observation, BoundaryObservation};
pub use experiments::*;

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Inverse(#[from] InverseError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("observation file, line {line}: {message}")]
    Format { line: usize, message: String },
}
