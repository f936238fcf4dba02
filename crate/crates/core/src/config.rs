//! Run configuration: one strict JSON document with sections `data`,
//! `backbone`, `es`, `loss`, `train`, and `eval`. Missing fields take their
//! defaults; unknown fields are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::BackboneConfig;
use crate::evidential::DecisionRule;
use crate::model::{EsInit, HeadKind};
use crate::objectives::DiceMode;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// train / val / test fractions
    pub ratios: [f64; 3],
    pub patch_dims: [usize; 3],
    /// share of training patches centred on a lesion voxel
    pub foreground_patch_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            ratios: crate::dataset::DEFAULT_RATIOS,
            patch_dims: [32, 32, 32],
            foreground_patch_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EsConfig {
    pub head: HeadKind,
    pub prototypes: usize,
    pub alpha: f64,
    pub gamma: f64,
}

impl EsConfig {
    pub fn init(&self) -> EsInit {
        EsInit {
            prototypes: self.prototypes,
            alpha: self.alpha,
            gamma: self.gamma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// weight of the L1 penalty on evidence strengths
    pub lambda: f64,
    pub dice_mode: DiceMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-5,
            dice_mode: DiceMode::Pignistic,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// run the finite-difference gate before training
    pub gradcheck_gate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 50,
            batch_size: 2,
            seed: 0,
            adam: AdamConfig::default(),
            gradcheck_gate: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub window: [usize; 3],
    pub stride: [usize; 3],
    pub decision: DecisionRule,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            window: [32, 32, 32],
            stride: [16, 16, 16],
            decision: DecisionRule::Pignistic,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub es: EsConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for EsConfig {
    fn default() -> Self {
        let init = EsInit::default();
        Self {
            head: HeadKind::Evidential,
            prototypes: init.prototypes,
            alpha: init.alpha,
            gamma: init.gamma,
        }
    }
}

impl RunConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_slice(bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&bytes)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| -> Result<(), ConfigError> { Err(ConfigError::Invalid(m)) };
        self.backbone.validate().or_else(|e| bad(e.to_string()))?;
        if self.es.head == HeadKind::Evidential {
            self.es.init().validate().or_else(bad)?;
        }
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", t.lr));
        }
        if t.epochs == 0 || t.batch_size == 0 {
            return bad("train.epochs and train.batch_size must be positive".into());
        }
        let a = &t.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("train.adam needs betas in [0, 1) and eps > 0".into());
        }
        if !(self.loss.lambda >= 0.0 && self.loss.lambda.is_finite()) {
            return bad(format!("loss.lambda must be nonnegative, got {}", self.loss.lambda));
        }
        let f = self.data.foreground_patch_fraction;
        if !(0.0..=1.0).contains(&f) {
            return bad(format!("data.foreground_patch_fraction must lie in [0, 1], got {f}"));
        }
        if let Err(e) = crate::dataset::split_sizes(1000, self.data.ratios) {
            return bad(e.to_string());
        }
        let m = self.backbone.required_multiple();
        for (name, dims) in [("data.patch_dims", self.data.patch_dims), ("eval.window", self.eval.window)] {
            if dims.iter().any(|&d| d == 0 || d % m != 0) {
                return bad(format!("{name} {dims:?} must be positive multiples of {m}"));
            }
        }
        if self.eval.stride.contains(&0) {
            return bad("eval.stride must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = RunConfig::from_json(b"{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.es.prototypes, 20);
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.train.epochs, 50);
        assert_eq!(cfg.loss.lambda, 1e-5);
        assert_eq!(cfg.es.alpha, 0.5);
        assert_eq!(cfg.es.gamma, 0.01);
    }

    #[test]
    fn round_trips() {
        let mut cfg = RunConfig::default();
        cfg.train.seed = 42;
        cfg.es.head = HeadKind::Softmax;
        let back = RunConfig::from_json(cfg.to_json().as_bytes()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(matches!(RunConfig::from_json(br#"{"trian": {}}"#), Err(ConfigError::Parse(_))));
        assert!(RunConfig::from_json(br#"{"train": {"learning_rate": 0.1}}"#).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        for doc in [
            r#"{"train": {"lr": 0}}"#,
            r#"{"es": {"alpha": 1.0}}"#,
            r#"{"es": {"gamma": -1}}"#,
            r#"{"data": {"patch_dims": [30, 32, 32]}}"#,
            r#"{"data": {"ratios": [0.5, 0.5, 0.5]}}"#,
            r#"{"backbone": {"channels": [4]}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(doc.as_bytes()), Err(ConfigError::Invalid(_))), "{doc}");
        }
    }
}
