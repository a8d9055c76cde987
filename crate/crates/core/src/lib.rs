//! Over-the-air federated edge learning: a ridge-regression simulator,
//! convergence bounds and power-control solvers.

pub mod bounds;
pub mod channel;
pub mod error;
pub mod grid;
pub mod harness;
pub mod model;
pub mod power;
pub mod rng;

pub use error::{Error, Result};
pub use grid::Grid;
