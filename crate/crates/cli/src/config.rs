// SPDX-License-Identifier: Apache-2.0

//! Run configuration: one JSON document, optionally patched by
//! `--set dotted.key=value` overrides, and written next to every output.

use std::fs;
use std::path::{Path, PathBuf};

use evf_core::training::TrainConfig;
use evf_core::{ModelConfig, Stage, TaskConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

/// Environment variable that roots relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "EVF_OUTPUT_ROOT";

/// Instance sampling for `grad-check`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub instances: usize,
    pub max_tries: usize,
    pub batch_size: usize,
    pub image_tokens: usize,
    pub text_len: usize,
    /// Std of the noise added to trainable tensors before checking. A zero
    /// router ties every token, so the fresh model has no stable instance.
    pub jitter: f64,
    pub eps: f64,
    pub alpha: f64,
    pub tolerance: f64,
    pub freeze_all: bool,
    /// Negative control: perturb the analytic gradient.
    pub corrupt_gradient: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            instances: 1,
            max_tries: 100,
            batch_size: 1,
            image_tokens: 2,
            text_len: 4,
            jitter: 0.3,
            eps: evf_core::gradcheck::DEFAULT_EPS,
            alpha: evf_core::training::DEFAULT_ALPHA,
            tolerance: 1e-4,
            freeze_all: false,
            corrupt_gradient: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub train: TrainConfig,
    /// Stages `train` runs in order, each for `train.steps` steps.
    pub stages: Vec<Stage>,
    pub grad_check: GradCheckConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            task: TaskConfig::default(),
            train: TrainConfig::default(),
            stages: vec![Stage::One, Stage::Two, Stage::Three],
            grad_check: GradCheckConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let base = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        let mut doc = serde_json::to_value(&base)?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        let g = &self.grad_check;
        if g.max_tries == 0 || g.batch_size == 0 || g.text_len < 2 {
            return Err(CliError::Validation(
                "grad_check needs max_tries, batch_size > 0 and text_len >= 2".into(),
            ));
        }
        if !(g.eps > 0.0 && g.tolerance > 0.0 && g.jitter >= 0.0) {
            return Err(CliError::Validation("grad_check eps, tolerance and jitter out of range".into()));
        }
        if self.train.batch_size == 0 || self.train.eval_batch_size == 0 {
            return Err(CliError::Validation("train batch sizes must be positive".into()));
        }
        if self.stages.windows(2).any(|w| w[1] < w[0]) {
            return Err(CliError::Validation("stages must be in ascending order".into()));
        }
        Ok(())
    }

    /// `output_dir`, under `$EVF_OUTPUT_ROOT` when relative and the variable is set.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    /// Creates the output directory and writes `config.json` into it.
    pub fn prepare_output(&self) -> CliResult<PathBuf> {
        let dir = self.resolved_output_dir();
        fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        write_json(&dir.join("config.json"), self)?;
        Ok(dir)
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Sets `a.b.c=value`. The key must already exist in the resolved
/// document; `value` is parsed as JSON and falls back to a plain string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("override `{assignment}` is not key=value")))?;
    let mut slot = &mut *doc;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| CliError::Validation(format!("unknown config key `{key}`")))?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}
