//! Training configuration. Every field has a JSON key and unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gaussians::DensifyOptions;
use crate::motion::{multiscale_strides, StrideSet};
use crate::nets::NetDims;
use crate::pipeline::ConditionFlags;
use crate::train::loss::LossWeights;
use crate::Real;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("invalid training config: {0}")]
    Invalid(String),
}

/// Per-group learning rates. Positions decay exponentially from
/// `positions` to `positions_final` over the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub positions: Real,
    pub positions_final: Real,
    pub log_scales: Real,
    pub rotations: Real,
    pub colors: Real,
    pub opacities: Real,
    pub nets: Real,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            positions: 1.6e-4,
            positions_final: 1.6e-6,
            log_scales: 5e-3,
            rotations: 1e-3,
            colors: 2.5e-3,
            opacities: 5e-2,
            nets: 1e-4,
        }
    }
}

impl LearningRates {
    /// Position learning rate at iteration `iter` of `total`.
    pub fn position_lr(&self, iter: usize, total: usize) -> Real {
        if total <= 1 {
            return self.positions;
        }
        let f = (iter as Real / (total - 1) as Real).clamp(0.0, 1.0);
        (self.positions.ln() * (1.0 - f) + self.positions_final.ln() * f).exp()
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let all = [
            self.positions,
            self.positions_final,
            self.log_scales,
            self.rotations,
            self.colors,
            self.opacities,
            self.nets,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(ConfigError::Invalid("learning rates must be finite and non-negative".into()));
        }
        if self.positions > 0.0 && !(self.positions_final > 0.0) {
            return Err(ConfigError::Invalid("positions_final must be positive for exponential decay".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub seed: u64,
    /// Dataset directory; the CLI's `--data` flag takes precedence.
    pub data: Option<PathBuf>,
    pub lr: LearningRates,
    /// Base stride, stride increment and index bound of the schedule.
    pub s0: usize,
    pub ds: usize,
    pub m: usize,
    /// History length per stride.
    pub length: usize,
    /// Template neighbours gathered per Gaussian.
    pub tau: usize,
    pub conditions: ConditionFlags,
    pub loss: LossWeights,
    pub densify: DensifyOptions,
    /// Held-out evaluation cadence in iterations; 0 disables it.
    pub eval_every: usize,
    /// Checkpoint cadence in iterations; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub net_dims: NetDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            seed: 0,
            data: None,
            lr: LearningRates::default(),
            s0: 1,
            ds: 2,
            m: 2,
            length: 8,
            tau: 8,
            conditions: ConditionFlags::default(),
            loss: LossWeights::default(),
            densify: DensifyOptions::default(),
            eval_every: 0,
            checkpoint_every: 0,
            net_dims: NetDims::default(),
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let cfg: TrainConfig =
            serde_json::from_str(&text).map_err(|source| ConfigError::Json { path: path.into(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.length == 0 {
            return Err(ConfigError::Invalid("length must be at least 1".into()));
        }
        if self.tau == 0 {
            return Err(ConfigError::Invalid("tau must be at least 1".into()));
        }
        self.full_schedule()?;
        self.lr.validate()?;
        let w = &self.loss;
        if [w.color, w.ssim, w.lpips, w.mask].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(ConfigError::Invalid("loss weights must be finite and non-negative".into()));
        }
        if w.lpips != 0.0 {
            return Err(ConfigError::Invalid("the perceptual term is not implemented; loss.lpips must be 0".into()));
        }
        if self.densify.enabled && self.densify.interval == 0 {
            return Err(ConfigError::Invalid("densify.interval must be positive when densification is enabled".into()));
        }
        Ok(())
    }

    /// The complete multi-scale schedule, independent of the ablation flags.
    pub fn full_schedule(&self) -> Result<StrideSet, ConfigError> {
        multiscale_strides(self.s0, self.ds, self.m).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Strides actually fed to the encoders: the full schedule, or only the
    /// base stride when multi-scale sampling is disabled.
    pub fn strides(&self) -> Result<StrideSet, ConfigError> {
        if self.conditions.use_multiscale {
            self.full_schedule()
        } else {
            StrideSet::single(self.s0).map_err(|e| ConfigError::Invalid(e.to_string()))
        }
    }

    /// First frame offset at which no sampled history is clamped, under the
    /// full schedule so every ablation evaluates the same frames.
    pub fn warmup_frames(&self) -> Result<usize, ConfigError> {
        Ok(self.length * self.full_schedule()?.max_stride())
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.full_schedule().unwrap().strides(), &[1, 3, 5]);
        assert_eq!(cfg.warmup_frames().unwrap(), 40);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"iterations": 3, "bogus": 1}"#).is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": {"nets": 1e-3, "typo": 0}}"#).is_err());
        let cfg: TrainConfig = serde_json::from_str(r#"{"iterations": 7}"#).unwrap();
        assert_eq!(cfg.iterations, 7);
        assert_eq!(cfg.tau, 8);
    }

    #[test]
    fn single_scale_when_multiscale_disabled() {
        let mut cfg = TrainConfig::default();
        cfg.conditions.use_multiscale = false;
        assert_eq!(cfg.strides().unwrap().strides(), &[1]);
        assert_eq!(cfg.warmup_frames().unwrap(), 40);
    }

    #[test]
    fn position_lr_decays_between_endpoints() {
        let lr = LearningRates::default();
        assert!((lr.position_lr(0, 100) - 1.6e-4).abs() < 1e-18);
        assert!((lr.position_lr(99, 100) - 1.6e-6).abs() < 1e-18);
        assert!((lr.position_lr(49, 99) - 1.6e-5).abs() < 1e-17);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.s0 = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.loss.lpips = 0.5;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.lr.colors = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
