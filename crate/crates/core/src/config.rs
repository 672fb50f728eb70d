//! Resolved run configuration: detector, DSEM and training sections.
//!
//! Every field has a documented default; JSON config files may set any
//! subset, and unknown keys are rejected so sweep typos fail loudly.

use serde::{Deserialize, Serialize};

use crate::detector::DetectorConfig;
use crate::dsem::DsemConfig;
use crate::error::{Error, Result};

fn default_lambda() -> f32 {
    1.0
}
fn default_dsem_strides() -> Vec<usize> {
    vec![8, 32]
}
fn default_pretrain_iters() -> usize {
    2000
}
fn default_adapt_iters() -> usize {
    1000
}
fn default_batch_size() -> usize {
    8
}
fn default_pretrain_lr() -> f32 {
    1e-2
}
fn default_base_lr() -> f32 {
    1e-3
}
fn default_dsem_lr_multiplier() -> f32 {
    10.0
}
fn default_momentum() -> f32 {
    0.9
}
fn default_weight_decay() -> f32 {
    5e-4
}
fn default_grl_warmup_frac() -> f32 {
    0.1
}
fn default_probe_iters() -> usize {
    300
}

/// Two-stage training hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    /// Weight of the dense alignment losses in the total objective.
    #[serde(default = "default_lambda")]
    pub lambda: f32,
    /// Strides that get a DSEM during adaptation.
    #[serde(default = "default_dsem_strides")]
    pub dsem_strides: Vec<usize>,
    #[serde(default = "default_pretrain_iters")]
    pub pretrain_iters: usize,
    #[serde(default = "default_adapt_iters")]
    pub adapt_iters: usize,
    /// Per-step images; the adaptation stage draws half source, half target.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Source-only pretraining rate (hotter than the adaptation rate: the
    /// tiny backbone trains from scratch).
    #[serde(default = "default_pretrain_lr")]
    pub pretrain_lr: f32,
    /// Detector learning rate during adaptation.
    #[serde(default = "default_base_lr")]
    pub base_lr: f32,
    /// DSEM and mask-branch parameters step at this multiple of `base_lr`.
    #[serde(default = "default_dsem_lr_multiplier")]
    pub dsem_lr_multiplier: f32,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f32,
    /// Fraction of adaptation iterations over which the reversal
    /// coefficient ramps linearly from 0 to 1; 0 disables the ramp.
    #[serde(default = "default_grl_warmup_frac")]
    pub grl_warmup_frac: f32,
    /// Iterations of frozen-backbone discriminator training in the probe.
    #[serde(default = "default_probe_iters")]
    pub probe_iters: usize,
    #[serde(default)]
    pub seed: u64,
    /// When set, the unlabeled target pool shrinks to this many images per
    /// class before adaptation.
    #[serde(default)]
    pub few_shot_target_per_class: Option<usize>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are complete")
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch_size must be even and positive, got {}",
                self.batch_size
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if self.dsem_strides.is_empty() {
            return Err(Error::Config("dsem_strides must be non-empty".into()));
        }
        let mut sorted = self.dsem_strides.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.dsem_strides {
            return Err(Error::Config(
                "dsem_strides must be ascending and unique".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.grl_warmup_frac) {
            return Err(Error::Config("grl_warmup_frac must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// The full resolved configuration of a run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabConfig {
    pub detector: DetectorConfig,
    pub dsem: DsemConfig,
    pub adapt: AdaptConfig,
}

impl LabConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.dsem.validate()?;
        self.adapt.validate()?;
        for stride in &self.adapt.dsem_strides {
            if !self.detector.head_strides.contains(stride) {
                return Err(Error::Config(format!(
                    "dsem stride {stride} has no matching detector head"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<LabConfig> {
        let cfg: LabConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_stable() {
        let cfg = LabConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.adapt.lambda, 1.0);
        assert_eq!(cfg.adapt.dsem_strides, vec![8, 32]);
        assert_eq!(cfg.adapt.batch_size, 8);
        assert_eq!(cfg.dsem.pool_bins, vec![1, 2, 4, 8]);
        assert_eq!(cfg.dsem.dense_depth_l, 3);
        assert_eq!(cfg.adapt.dsem_lr_multiplier, 10.0);
        assert_eq!(cfg.adapt.momentum, 0.9);
        assert_eq!(cfg.adapt.weight_decay, 5e-4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = LabConfig::from_json(r#"{"adapt": {"lamda": 0.5}}"#).unwrap_err();
        assert!(err.to_string().contains("lamda"), "{err}");
        let err = LabConfig::from_json(r#"{"dsme": {}}"#).unwrap_err();
        assert!(err.to_string().contains("dsme"), "{err}");
    }

    #[test]
    fn partial_configs_merge_with_defaults() {
        let cfg = LabConfig::from_json(r#"{"adapt": {"lambda": 0.5, "seed": 7}}"#).unwrap();
        assert_eq!(cfg.adapt.lambda, 0.5);
        assert_eq!(cfg.adapt.seed, 7);
        assert_eq!(cfg.adapt.adapt_iters, 1000);
    }

    #[test]
    fn odd_batch_size_is_rejected() {
        let err = LabConfig::from_json(r#"{"adapt": {"batch_size": 7}}"#).unwrap_err();
        assert!(err.to_string().contains("batch_size"));
    }
}
