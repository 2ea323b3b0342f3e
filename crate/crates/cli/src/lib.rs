//! Stage-by-stage pipeline driver behind the `curriculum` binary.

pub mod config;
pub mod error;
pub mod stages;

pub use config::PipelineConfig;
pub use error::CliError;
pub use stages::{Outcome, Pipeline, Stage};

use std::path::Path;

/// Loads the config and runs `stages` (all pipeline stages when `None`) on a
/// thread pool sized by the `threads` setting.
pub fn run(config: &Path, overrides: &[String], stage: Option<Stage>, force: bool) -> Result<(), CliError> {
    let cfg = PipelineConfig::load(config, overrides)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {} threads: {e}", cfg.threads)))?;
    pool.install(|| {
        let mut pipeline = Pipeline::new(cfg)?;
        pipeline.force = force;
        match stage {
            Some(s) => pipeline.run(s).map(|_| ()),
            None => pipeline.run_all().map(|_| ()),
        }
    })
}
