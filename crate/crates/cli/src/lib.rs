//! Command-line front end for the xgap laboratory: corpus generation,
//! training, inversion, evaluation and reproducible study presets.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod report;

pub use commands::{execute, Cli};
pub use config::{ExperimentConfig, Study};
pub use error::{CliError, Result};
pub use experiment::{run_experiment, run_experiment_in, Lab};
pub use report::Report;

/// Sizes the global worker pool from `XGAP_THREADS` when it is set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("XGAP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("XGAP_THREADS must be a positive integer, got {v:?}")))?;
    // A pool built earlier in the process keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
