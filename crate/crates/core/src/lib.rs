//! Metastability and collective switching in a driven-dissipative Rydberg ensemble.
//!
//! Exact Liouvillian analysis in the symmetric Dicke sector, photon-counting large
//! deviations, quantum-jump trajectories, and semiclassical instantons.

pub mod cli;
pub mod compare;
pub mod config;
pub mod error;
pub mod instanton;
pub mod linalg;
pub mod large_deviation;
pub mod meanfield;
pub mod model;
pub mod output;
pub mod qjmc;
pub mod spectral;

pub use error::{Error, Result};
pub use model::ModelParams;

/// Dense eigensolves run single-threaded; parallelism lives at the sweep level.
pub fn init_sequential_linalg() {
    faer::set_global_parallelism(faer::Par::Seq);
}
