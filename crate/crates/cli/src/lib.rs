//! Command-line harness around the `kldd` segmentation stack.
//!
//! Subcommands generate synthetic data, train with any ablation of the
//! model, segment images by ensembled diffusion sampling, evaluate
//! predictions and export deformable receptive fields. Each is a plain
//! function here so tests can drive it without spawning processes.

pub mod checkpoint;
pub mod commands;
pub mod config;
mod error;

pub use checkpoint::{Checkpoint, RngState};
pub use config::RunConfig;
pub use error::{CliError, Result};

/// Environment variable capping the worker threads.
pub const THREADS_ENV: &str = "KLDD_THREADS";

/// Sizes the global worker pool from `KLDD_THREADS` when it is set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // a pool that is already built (tests, repeated calls) is kept as is
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
