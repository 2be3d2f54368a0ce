//! The single run configuration shared by every subcommand.
//!
//! A config file is a JSON object whose keys mirror [`RunConfig`]; anything
//! omitted keeps its default. Unknown keys are rejected by name, and
//! [`RunConfig::violations`] reports every invalid value at once.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::loss::LossConfig;
use crate::msunet::NetworkSpec;
use crate::phantom::PhantomConfig;
use crate::postprocess::PostprocessConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Voxel spacing to resample to; `None` uses the per-axis median of the
    /// cases the statistics are computed on.
    pub target_spacing: Option<[f64; 3]>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { target_spacing: None }
    }
}

/// How cases (sorted by id) are divided. The last `test_cases` are held out;
/// of the rest, the last `validation_cases` validate and the others train.
/// With no validation cases the training cases double as validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub test_cases: usize,
    pub validation_cases: usize,
    /// Train, validate and test on every case.
    pub overfit: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            test_cases: 4,
            validation_cases: 0,
            overfit: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub phantom: u64,
    pub network: u64,
    pub training: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        SeedConfig {
            phantom: 0,
            network: 0,
            training: 0,
        }
    }
}

impl SeedConfig {
    pub fn all(seed: u64) -> Self {
        SeedConfig {
            phantom: seed,
            network: seed,
            training: seed,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    /// Existing dataset to use instead of generating phantoms.
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub phantom: PhantomConfig,
    pub preprocess: PreprocessConfig,
    pub split: SplitConfig,
    pub augment: AugmentConfig,
    pub network: NetworkSpec,
    pub loss: LossConfig,
    pub trainer: TrainConfig,
    pub inference: InferenceConfig,
    pub postprocess: PostprocessConfig,
    pub paths: PathConfig,
    pub seeds: SeedConfig,
}

pub const SNAPSHOT_FILE: &str = "resolved_config.json";

impl RunConfig {
    /// Desk-scale preset: small network and patches, short training on a
    /// four-case phantom set.
    pub fn toy() -> Self {
        RunConfig {
            phantom: PhantomConfig {
                num_cases: 4,
                ..PhantomConfig::default()
            },
            split: SplitConfig {
                test_cases: 1,
                validation_cases: 1,
                overfit: false,
            },
            network: NetworkSpec::toy(),
            trainer: TrainConfig {
                patch_size: [64, 64, 32],
                batch_size: 1,
                // Short runs need a larger step than the full-size default.
                initial_lr: 3e-3,
                iterations_per_epoch: 20,
                max_epochs: 3,
                validation_patches: 2,
                ..TrainConfig::default()
            },
            ..RunConfig::default()
        }
    }

    /// Every invalid setting, across all sections.
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.phantom.violations();
        if let Some(s) = self.preprocess.target_spacing {
            if s.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                v.push(format!("preprocess.target_spacing {s:?} must be finite and positive"));
            }
        }
        v.extend(self.augment.violations());
        v.extend(self.network.violations());
        v.extend(self.loss.violations());
        v.extend(self.trainer.violations(&self.network));
        v.extend(self.inference.violations());
        if let Some(w) = self.inference.window {
            let d = self.network.divisor();
            if w.iter().any(|&n| n % d != 0) {
                v.push(format!("inference.window {w:?} must be divisible by {d}"));
            }
        }
        if self.postprocess.max_components == 0 {
            v.push("postprocess.max_components must be >= 1".into());
        }
        if !self.split.overfit && self.data_cases().is_some_and(|n| n <= self.split.test_cases + self.split.validation_cases) {
            v.push(format!(
                "split leaves no training cases: {} cases, {} test, {} validation",
                self.phantom.num_cases, self.split.test_cases, self.split.validation_cases
            ));
        }
        v
    }

    fn data_cases(&self) -> Option<usize> {
        self.paths.data_dir.is_none().then_some(self.phantom.num_cases)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn window(&self) -> [usize; 3] {
        self.inference.window.unwrap_or(self.trainer.patch_size)
    }

    /// Overlays the JSON object `overrides` on `self`, rejecting keys that
    /// are not part of the schema.
    pub fn merged(&self, overrides: &Value) -> Result<RunConfig> {
        let mut base = serde_json::to_value(self)?;
        let mut unknown = Vec::new();
        merge(&mut base, overrides, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(unknown.into_iter().map(|k| format!("unknown config key `{k}`")).collect()));
        }
        Ok(serde_json::from_value(base)?)
    }

    /// `base` (defaults or the toy preset) overlaid with the file at `path`.
    pub fn load(path: &Path, base: &RunConfig) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text)?;
        if !value.is_object() {
            return Err(Error::Config(vec![format!("{}: top level must be a JSON object", path.display())]));
        }
        base.merged(&value)
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(SNAPSHOT_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Recursive overlay. Objects merge key by key; anything else replaces.
/// `null` defaults (optional settings) accept any value.
fn merge(base: &mut Value, over: &Value, prefix: &str, unknown: &mut Vec<String>) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &key, unknown),
                    None => unknown.push(key),
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}
