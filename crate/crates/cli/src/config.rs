//! Experiment configuration files.
//!
//! A config is TOML: top-level keys describe the problem and shared
//! settings, and each `[[level]]` table describes one network. See
//! `docs/config.md` for every key.

use std::path::Path;

use mlnn::optimize::{AdamConfig, LbfgsConfig};
use mlnn::problems::ProblemDef;
use mlnn::{ArchitectureKind, LevelConfig, RunOptions};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Problem label: poisson1d, convdiff, helmholtz1d or poisson2d.
    pub problem: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_sq: Option<f64>,
    /// Level `i` uses `seed + i` unless it sets its own.
    #[serde(default)]
    pub seed: u64,
    /// Collocation points per axis for every level without its own value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collocation: Option<usize>,
    /// Evaluation points per axis for error norms and `solution.csv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_points: Option<usize>,
    /// Relative paths resolve against the output root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub estimate_mu0: bool,
    #[serde(default = "default_elm_width")]
    pub elm_width: usize,
    #[serde(default = "default_adam_stride")]
    pub adam_metric_stride: usize,
    #[serde(default = "default_lbfgs_stride")]
    pub lbfgs_metric_stride: usize,
    /// Parameter updates per listed L-BFGS iteration, for every level.
    #[serde(default = "default_updates_per_iteration")]
    pub lbfgs_updates_per_iteration: usize,
    #[serde(default)]
    pub level: Vec<LevelSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSection {
    pub widths: Vec<usize>,
    pub wavenumbers: usize,
    #[serde(default = "default_architecture")]
    pub architecture: ArchitectureKind,
    pub adam_iterations: usize,
    #[serde(default)]
    pub lbfgs_iterations: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_lbfgs_step")]
    pub lbfgs_step: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collocation: Option<usize>,
}

fn default_elm_width() -> usize {
    RunOptions::default().elm_width
}

fn default_adam_stride() -> usize {
    RunOptions::default().adam_metric_stride
}

fn default_lbfgs_stride() -> usize {
    RunOptions::default().lbfgs_metric_stride
}

fn default_updates_per_iteration() -> usize {
    1
}

fn default_architecture() -> ArchitectureKind {
    ArchitectureKind::FourierSine
}

fn default_learning_rate() -> f64 {
    AdamConfig::default().learning_rate
}

fn default_lbfgs_step() -> f64 {
    LbfgsConfig::default().initial_step
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn problem_def(&self) -> Result<ProblemDef, CliError> {
        ProblemDef::from_label(&self.problem, self.k, self.epsilon, self.kappa_sq)
            .map_err(|e| CliError::Config(format!("problem: {e}")))
    }

    /// Checks everything that can be checked without training.
    pub fn validate(&self) -> Result<(), CliError> {
        let problem = self.problem_def()?;
        let stray = |name: &str, set: bool, owner: &str| {
            if set && self.problem != owner {
                Err(CliError::Config(format!("{name} only applies to problem = \"{owner}\"")))
            } else {
                Ok(())
            }
        };
        stray("k", self.k.is_some(), "poisson1d")?;
        stray("epsilon", self.epsilon.is_some(), "convdiff")?;
        stray("kappa_sq", self.kappa_sq.is_some(), "helmholtz1d")?;
        if self.level.is_empty() {
            return Err(CliError::Config("at least one [[level]] section is required".into()));
        }
        if self.collocation == Some(0) || self.eval_points == Some(0) {
            return Err(CliError::Config("collocation and eval_points must be positive".into()));
        }
        if self.elm_width == 0 {
            return Err(CliError::Config("elm_width must be positive".into()));
        }
        if self.lbfgs_updates_per_iteration == 0 {
            return Err(CliError::Config("lbfgs_updates_per_iteration must be positive".into()));
        }
        for (i, level) in self.levels().into_iter().enumerate() {
            level
                .network_spec(&problem)
                .and_then(|_| level.adam.validate())
                .and_then(|_| level.lbfgs.validate())
                .map_err(|e| CliError::Config(format!("level {i}: {e}")))?;
            if let Some(mu) = level.mu {
                if !(mu > 0.0 && mu.is_finite()) {
                    return Err(CliError::Config(format!("level {i}: mu must be positive")));
                }
            }
            if level.collocation_per_axis == Some(0) {
                return Err(CliError::Config(format!("level {i}: collocation must be positive")));
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> Vec<LevelConfig> {
        self.level
            .iter()
            .enumerate()
            .map(|(i, s)| LevelConfig {
                hidden_widths: s.widths.clone(),
                num_wavenumbers: s.wavenumbers,
                architecture: s.architecture,
                adam: AdamConfig {
                    learning_rate: s.learning_rate,
                    iterations: s.adam_iterations,
                    ..AdamConfig::default()
                },
                lbfgs: LbfgsConfig {
                    initial_step: s.lbfgs_step,
                    iterations: s.lbfgs_iterations * self.lbfgs_updates_per_iteration,
                    ..LbfgsConfig::default()
                },
                seed: s.seed.unwrap_or(self.seed + i as u64),
                mu: s.mu,
                collocation_per_axis: s.collocation.or(self.collocation),
            })
            .collect()
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            eval_per_axis: self.eval_points,
            estimate_mu0: self.estimate_mu0,
            elm_width: self.elm_width,
            adam_metric_stride: self.adam_metric_stride,
            lbfgs_metric_stride: self.lbfgs_metric_stride,
        }
    }
}
