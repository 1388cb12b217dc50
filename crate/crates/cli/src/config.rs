use std::fs;
use std::path::{Path, PathBuf};

use neuroflow_core::runtime::{Ablation, Budget, DEFAULT_MAX_STEPS, DEFAULT_MAX_WALL_CLOCK_MS};
use serde::Deserialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub budget: BudgetConfig,
    #[serde(default)]
    pub ablation: Ablation,
    /// Defaults to `<out>/workspace`, which is recreated on every run.
    pub workspace_root: Option<PathBuf>,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub clock: ClockConfig,
    pub seed: Option<u64>,
    /// Directory copied into `<workspace>/tool_lib` before the run.
    pub tool_lib: Option<PathBuf>,
    #[serde(default)]
    pub exec: ExecConfig,
    pub qc_workers: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    #[serde(default = "default_steps")]
    pub max_react_steps: u64,
    #[serde(default = "default_seconds")]
    pub max_wall_clock_seconds: f64,
    pub max_cost: Option<f64>,
}

fn default_steps() -> u64 {
    DEFAULT_MAX_STEPS
}

fn default_seconds() -> f64 {
    DEFAULT_MAX_WALL_CLOCK_MS as f64 / 1000.0
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            max_react_steps: default_steps(),
            max_wall_clock_seconds: default_seconds(),
            max_cost: None,
        }
    }
}

impl BudgetConfig {
    pub fn to_budget(&self) -> Budget {
        Budget {
            max_react_steps: self.max_react_steps,
            max_wall_clock_ms: (self.max_wall_clock_seconds * 1000.0).round() as u64,
            max_cost: self.max_cost,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    /// Script for the scripted policy; relative to the config file.
    pub script: Option<PathBuf>,
    /// Where to record live sessions; relative to `--out`.
    pub record: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClockConfig {
    #[default]
    System,
    /// Starts at zero and advances `tick_ms` on every read.
    Simulated { tick_ms: u64 },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecConfig {
    pub timeout_seconds: Option<u64>,
    pub max_output_bytes: Option<usize>,
}

impl RunConfig {
    /// Loads a TOML config, resolving relative paths against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("--config: {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::usage(format!("--config: {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(v) = p.as_mut() {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        };
        fix(&mut cfg.workspace_root);
        fix(&mut cfg.policy.script);
        fix(&mut cfg.tool_lib);
        if cfg.budget.max_react_steps == 0 || cfg.budget.max_wall_clock_seconds.is_nan() || cfg.budget.max_wall_clock_seconds <= 0.0 {
            return Err(CliError::usage("--config: budget limits must be positive"));
        }
        Ok(cfg)
    }
}
