//! Optional TOML configuration file. Every key mirrors a command-line flag;
//! flags given on the command line take precedence.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use harnesslab::agent::InterventionPolicy;
use serde::Deserialize;

use crate::Format;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub home: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub format: Option<Format>,
    pub task: Option<String>,
    pub step_budget: Option<u32>,
    pub tool_timeout_ms: Option<u64>,
    pub h0_regression_counts_as_evidence: Option<bool>,
    pub slow_regression: Option<bool>,
    pub group_by: Option<String>,
    pub policy: Option<InterventionPolicy>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
