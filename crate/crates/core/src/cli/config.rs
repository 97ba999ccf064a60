//! Run configuration: every command reads one `RunConfig` (TOML, all fields
//! defaulted) and applies its command-line overrides on top.

use super::CliError;
use crate::grpo::GrpoSettings;
use crate::policy::PolicySettings;
use crate::response_format::FilterSettings;
use crate::scenes::Difficulty;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// Scenes in a generated corpus.
    pub n: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { n: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            epochs: 5,
            batch_size: 16,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    /// Greedy evaluation interval in steps; 0 evaluates only at the end.
    pub eval_every: u64,
    /// Intermediate checkpoint interval in steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Training scenes generated per seed by `ablate`.
    pub pool_size: usize,
    /// Held-out scenes generated per seed by `ablate`.
    pub eval_size: usize,
    /// Start `train` from a fresh initialization instead of a checkpoint.
    pub cold: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            eval_every: 100,
            checkpoint_every: 0,
            pool_size: 512,
            eval_size: 200,
            cold: false,
        }
    }
}

/// Files a command reads and writes. Command-line paths override these.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Scene corpus (`gen` output, `sft`/`train`/`eval` input) or CoT records (`cot-filter`).
    pub corpus: Option<PathBuf>,
    pub eval_corpus: Option<PathBuf>,
    /// Checkpoint to start from (`train`), resume (`sft`), or evaluate (`eval`).
    pub checkpoint: Option<PathBuf>,
    /// External prediction file for `eval`.
    pub predictions: Option<PathBuf>,
    /// Output file (`gen`) or directory (other commands).
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Rayon worker threads. Outputs do not depend on this value.
    pub workers: usize,
    pub scenes: Difficulty,
    pub gen: GenConfig,
    pub policy: PolicySettings,
    pub sft: SftConfig,
    pub grpo: GrpoSettings,
    pub train: TrainConfig,
    pub filter: FilterSettings,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 1,
            scenes: Difficulty::default(),
            gen: GenConfig::default(),
            policy: PolicySettings::default(),
            sft: SftConfig::default(),
            grpo: GrpoSettings::default(),
            train: TrainConfig::default(),
            filter: FilterSettings::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("RunConfig serializes to TOML")
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_toml()).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, reason: &str| {
            Err(CliError::Invalid {
                field: field.to_string(),
                reason: reason.to_string(),
            })
        };
        if self.workers == 0 {
            return bad("workers", "must be at least 1");
        }
        self.scenes.validate()?;
        self.policy.validate().map_err(|e| CliError::Invalid {
            field: "policy".into(),
            reason: e.to_string(),
        })?;
        self.grpo.validate()?;
        if (self.policy.image_w, self.policy.image_h) != (self.scenes.image_w as f64, self.scenes.image_h as f64) {
            return bad("policy.image_w", "policy image size must match scenes image size");
        }
        if self.sft.batch_size == 0 {
            return bad("sft.batch_size", "must be at least 1");
        }
        if !(self.sft.lr.is_finite() && self.sft.lr >= 0.0) {
            return bad("sft.lr", "must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.filter.match_tolerance) {
            return bad("filter.match_tolerance", "must lie in [0, 1]");
        }
        if self.train.pool_size == 0 {
            return bad("train.pool_size", "must be at least 1");
        }
        if self.train.eval_size == 0 {
            return bad("train.eval_size", "must be at least 1");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let c = RunConfig::from_toml("", Path::new("x.toml")).unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.grpo.lr = 3e-3;
        c.grpo.lambda_v = 0.1 + 0.2;
        c.scenes = Difficulty::far_init();
        let back = RunConfig::from_toml(&c.to_toml(), Path::new("x.toml")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        let e = RunConfig::from_toml("[grpo]\nlambda_z = 1\n", Path::new("x.toml")).unwrap_err();
        assert!(e.to_string().contains("lambda_z"));
        let c = RunConfig::from_toml("[scenes]\nmin_objects = 5\nmax_objects = 2\n", Path::new("x.toml")).unwrap();
        let e = c.validate().unwrap_err();
        assert!(e.to_string().contains("max_objects"), "{e}");
        assert_eq!(e.exit_code(), 1);
    }
}
