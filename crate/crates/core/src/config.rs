//! Run configuration: one TOML document that pins everything a full run
//! needs — model geometry, suite spec, adapter and optimizer settings,
//! stream schedule, baseline knobs, output directory and the master seed.
//! A run is reproducible from this file plus the code version.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::SgdConfig;
use crate::baselines::SwadtConfig;
use crate::continual::MergeBase;
use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::model::ModelConfig;
use crate::taskgen::SuiteSpec;

/// Environment variable that overrides the output root directory.
pub const OUT_ROOT_ENV: &str = "SIESTA_OUT_ROOT";

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_model() -> ModelConfig {
    ModelConfig {
        vocab_in: 256,
        vocab_out: 192,
        d_model: 64,
        n_layers: 2,
        n_heads: 2,
        d_ff: 128,
        max_seq_len: 32,
        use_positional: true,
        seed: 0, // derived from the master seed at run time
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub k: usize,
    pub epochs_per_dataset: usize,
    pub batch_size: usize,
    pub merge_base: MergeBase,
    pub early_stop_patience: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            k: 3,
            epochs_per_dataset: 6,
            batch_size: 16,
            merge_base: MergeBase::Original,
            early_stop_patience: 2,
        }
    }
}

fn default_eval_every() -> usize {
    8
}
fn default_per_lang_cap() -> f64 {
    0.012
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainParams {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Stop once held-out token error drops to this level. Checked every
    /// `eval_every_steps`, so the base lands near the target instead of
    /// overshooting to zero error.
    pub target_heldout_error: f64,
    /// Every language must also individually clear this held-out error
    /// before pretraining stops; protects weak-margin languages.
    #[serde(default = "default_per_lang_cap")]
    pub per_lang_cap: f64,
    #[serde(default = "default_eval_every")]
    pub eval_every_steps: usize,
}

impl Default for PretrainParams {
    fn default() -> Self {
        PretrainParams {
            max_epochs: 40,
            batch_size: 16,
            sgd: SgdConfig {
                learning_rate: 0.5,
                weight_decay: 1e-4,
                grad_clip_norm: Some(1.0),
            },
            target_heldout_error: 0.009,
            per_lang_cap: default_per_lang_cap(),
            eval_every_steps: default_eval_every(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub master_seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default)]
    pub suite: SuiteSpec,
    #[serde(default)]
    pub lora: LoraConfig,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default)]
    pub schedule: ScheduleParams,
    #[serde(default)]
    pub swadt: SwadtConfig,
    #[serde(default)]
    pub pretrain: PretrainParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            master_seed: 42,
            out_dir: default_out_dir(),
            model: default_model(),
            suite: SuiteSpec::default(),
            lora: LoraConfig {
                rank: 8,
                alpha: 16.0,
                ..LoraConfig::default()
            },
            sgd: SgdConfig {
                learning_rate: 0.2,
                weight_decay: 0.008,
                grad_clip_norm: Some(1.0),
            },
            schedule: ScheduleParams::default(),
            swadt: SwadtConfig::default(),
            pretrain: PretrainParams::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.lora.validate()?;
        self.sgd.validate()?;
        self.pretrain.sgd.validate()?;
        self.swadt.validate()?;
        if self.schedule.k == 0 {
            return Err(Error::Config("schedule.k must be >= 1".into()));
        }
        if self.schedule.batch_size == 0 || self.pretrain.batch_size == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        let vocab_needed = self.suite.n_languages * self.suite.vocab_per_lang;
        if self.suite.vocab_in != self.model.vocab_in {
            return Err(Error::Config(format!(
                "suite.vocab_in {} must equal model.vocab_in {}",
                self.suite.vocab_in, self.model.vocab_in
            )));
        }
        if vocab_needed > self.model.vocab_in {
            return Err(Error::Config(format!(
                "{vocab_needed} language tokens exceed model.vocab_in {}",
                self.model.vocab_in
            )));
        }
        if vocab_needed > self.model.vocab_out {
            return Err(Error::Config(format!(
                "{vocab_needed} output tokens exceed model.vocab_out {}",
                self.model.vocab_out
            )));
        }
        if self.suite.seq_len > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "suite.seq_len {} exceeds model.max_seq_len {}",
                self.suite.seq_len, self.model.max_seq_len
            )));
        }
        Ok(())
    }

    /// Output directory, honoring the `SIESTA_OUT_ROOT` override: when the
    /// variable is set, the configured path is re-rooted under it.
    pub fn effective_out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) if !root.is_empty() => {
                let rel: PathBuf = if self.out_dir.is_absolute() {
                    self.out_dir
                        .file_name()
                        .map(PathBuf::from)
                        .unwrap_or_else(|| PathBuf::from("run"))
                } else {
                    self.out_dir.clone()
                };
                PathBuf::from(root).join(rel)
            }
            _ => self.out_dir.clone(),
        }
    }
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: RunConfig = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_roundtrips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back.master_seed, cfg.master_seed);
        assert_eq!(back.model, cfg.model);
    }

    #[test]
    fn minimal_toml_fills_defaults() {
        let cfg: RunConfig = toml::from_str("master_seed = 7").unwrap();
        assert_eq!(cfg.master_seed, 7);
        assert_eq!(cfg.schedule.k, 3);
        assert_eq!(cfg.suite.n_languages, 8);
        cfg.validate().unwrap();
    }

    #[test]
    fn parse_error_is_config_error_with_diagnostic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "master_seed = \"not a number\"").unwrap();
        let err = load_run_config(&path).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("bad.toml"));
    }

    #[test]
    fn inconsistent_vocab_rejected() {
        let mut cfg = RunConfig::default();
        cfg.model.vocab_out = 100; // 8*24 = 192 > 100
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn out_root_override_reroots_relative_paths() {
        let mut cfg = RunConfig::default();
        cfg.out_dir = PathBuf::from("runs/demo");
        std::env::set_var(OUT_ROOT_ENV, "/tmp/siesta-test-root");
        let got = cfg.effective_out_dir();
        std::env::remove_var(OUT_ROOT_ENV);
        assert_eq!(got, PathBuf::from("/tmp/siesta-test-root/runs/demo"));
        assert_eq!(cfg.effective_out_dir(), PathBuf::from("runs/demo"));
    }
}
