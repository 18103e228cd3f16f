pub mod analysis;
pub mod coarse_map;
pub mod continuation;
pub mod convergence_lab;
pub mod error;
pub mod integrator;
pub mod micro_model;
pub mod solvers;

pub use error::{Error, Result};
