//! Run configuration: defaults, then an optional JSON file, then command-line
//! overrides. Later layers win.

use std::path::Path;

use diffopf::baseline::BaselineConfig;
use diffopf::dataset::GenerateConfig;
use diffopf::diffusion::{ScheduleConfig, TrainConfig};
use diffopf::guidance::{LambdaSchedule, SignMode};
use diffopf::restore::RestoreOptions;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceParams {
    pub lambda: f64,
    pub n_samples: usize,
    pub sign_mode: SignMode,
    pub lambda_schedule: LambdaSchedule,
    /// Load `l` of the test set samples with seed `seed + l`.
    pub seed: u64,
}

impl Default for GuidanceParams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            n_samples: 250,
            sign_mode: SignMode::Corrected,
            lambda_schedule: LambdaSchedule::Constant,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub epsilons_pct: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            epsilons_pct: vec![0.5, 1.0, 2.0, 5.0],
            deltas: vec![0.9, 0.95, 0.99],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Bundled case name or path to a case file.
    pub case: String,
    pub dataset: GenerateConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
    pub guidance: GuidanceParams,
    pub restore: RestoreOptions,
    pub eval: EvalParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            case: "case5_pjm".into(),
            dataset: GenerateConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            baseline: BaselineConfig::default(),
            guidance: GuidanceParams::default(),
            restore: RestoreOptions::default(),
            eval: EvalParams::default(),
        }
    }
}

/// Small sizes for the two-bus end-to-end check.
pub fn smoke_overrides() -> Value {
    serde_json::json!({
        "case": "case2",
        "dataset": {"n_records": 64, "n_test": 4},
        "train": {"hidden": [32, 32], "embed_dim": 16, "epochs": 40, "batch_size": 32},
        "baseline": {"hidden": [32, 32], "epochs": 40, "batch_size": 32},
        "guidance": {"n_samples": 16},
    })
}

/// Recursively overlays `patch` on `base`. Keys absent from `base` are
/// rejected so that typos surface as config errors.
pub fn merge(base: &mut Value, patch: &Value, at: &str) -> Result<(), CliError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                let slot = b
                    .get_mut(k)
                    .ok_or_else(|| CliError::Config(format!("unknown config key `{path}`")))?;
                merge(slot, v, &path)?;
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

/// Overlay without key checks, for assembling patches.
pub fn merge_loose(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_loose(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// `a.b.c=value` as a nested patch. The value is read as JSON when it parses,
/// otherwise as a string.
pub fn parse_assignment(text: &str) -> Result<Value, CliError> {
    let (path, raw) = text
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("expected key=value, got `{text}`")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("bad key path `{path}`")));
    }
    let mut value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    for key in path.rsplit('.') {
        value = serde_json::json!({ key: value });
    }
    Ok(value)
}

pub struct ConfigBuilder {
    value: Value,
}

impl ConfigBuilder {
    pub fn new() -> Self {
        Self {
            value: serde_json::to_value(RunConfig::default()).expect("default config serializes"),
        }
    }

    pub fn patch(mut self, patch: &Value) -> Result<Self, CliError> {
        merge(&mut self.value, patch, "")?;
        Ok(self)
    }

    pub fn file(self, path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CliError::Config(format!("config file {} not found", path.display()))
            } else {
                CliError::io(path)(e)
            }
        })?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        self.patch(&patch)
    }

    pub fn build(self) -> Result<RunConfig, CliError> {
        let cfg: RunConfig =
            serde_json::from_value(self.value).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.schedule.build()?;
        self.train.validate()?;
        let bad = |m: String| Err(CliError::Config(m));
        if self.dataset.n_records < 2 || self.dataset.n_test == 0 {
            return bad("dataset needs at least 2 training and 1 test record".into());
        }
        if !(self.guidance.lambda > 0.0 && self.guidance.lambda.is_finite()) {
            return bad(format!("guidance.lambda must be positive, got {}", self.guidance.lambda));
        }
        if self.guidance.n_samples == 0 {
            return bad("guidance.n_samples must be positive".into());
        }
        if self.eval.epsilons_pct.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return bad("eval.epsilons_pct must be positive".into());
        }
        if self.eval.deltas.iter().any(|d| !(*d > 0.0 && *d < 1.0)) {
            return bad("eval.deltas must lie in (0, 1)".into());
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
