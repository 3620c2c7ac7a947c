//! Reconstruction of activation instants and activation-site positions from
//! boundary activation times, using a viscous Eikonal model discretized with P1
//! finite elements.

pub mod linalg;
pub mod app;
pub mod eikonal;
pub mod fem;
pub mod inverse;
pub mod mesh;
pub mod shape;
