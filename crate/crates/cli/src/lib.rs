//! Stage orchestration for the `vbiopsy` command-line tool.

pub mod artifacts;
pub mod config;
pub mod stages;

use std::path::{Path, PathBuf};

pub use config::RunConfig;
pub use stages::Run;

/// Loads the run configuration (or the built-in default), applies command-line
/// overrides, derives stage seeds and validates the result.
pub fn resolve_config(path: Option<&Path>, out: Option<PathBuf>, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = out {
        cfg.output_root = o;
    }
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    let cfg = cfg.with_derived_seeds();
    cfg.validate()?;
    Ok(cfg)
}
