//! Command-line pipeline: data generation, RAE and flow training, sampling,
//! evaluation sweeps and ablations.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod toy;

pub use config::RunConfig;
pub use error::{CliError, CliResult};

/// Cap the worker pool from `TRAJFLOW_THREADS` when it holds a positive integer.
pub fn init_threads_from_env() {
    if let Some(n) = std::env::var("TRAJFLOW_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        trajflow::par::init_threads(n);
    }
}
