//! Run configuration, read from a sectioned `key = value` text file (TOML).
//!
//! ```toml
//! [train]
//! epochs = 30
//! base_lr = 1e-3
//!
//! [backbone]
//! depth = 4
//!
//! [synqt]
//! n = 4
//!
//! [variant]
//! dropfeat = false
//! ```
//!
//! Keys left out keep their [`TrainConfig::default`] values; unknown keys
//! are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::blocks::SynqtConfig;
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::model::Variant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Arms trained by `train`: `linear` or any [`Variant::arm`] name.
    pub arms: Vec<String>,
    /// Load the frozen backbone from this checkpoint stem instead of
    /// initializing it from the seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone_checkpoint: Option<String>,
    /// Run the finite-difference check before training.
    pub grad_check: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    pub seeds: Vec<u64>,
    pub arms: Vec<String>,
    /// Learning-rate grid; empty means `train.base_lr` only.
    pub lrs: Vec<f64>,
    /// Grid over `s_attn = s_ffn`; empty means the `[synqt]` values only.
    pub scales: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub train: TrainSection,
    pub backbone: BackboneConfig,
    pub synqt: SynqtConfig,
    pub variant: Variant,
    pub data: DataConfig,
    pub compare: CompareSection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            train: TrainSection {
                epochs: 100,
                batch_size: 64,
                base_lr: 1e-3,
                weight_decay: 1e-4,
                warmup_fraction: 0.1,
                seed: 0,
                arms: vec!["synqt".into()],
                backbone_checkpoint: None,
                grad_check: false,
            },
            backbone: BackboneConfig::toy(),
            synqt: SynqtConfig::toy(),
            variant: Variant::default(),
            data: DataConfig::default(),
            compare: CompareSection {
                seeds: vec![0, 1, 2],
                arms: vec![
                    "linear".into(),
                    "kem".into(),
                    "synqt".into(),
                    "no_dropfeat".into(),
                ],
                lrs: Vec::new(),
                scales: Vec::new(),
            },
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl TrainConfig {
    /// Parses config text over the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let user: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Value::try_from(TrainConfig::default())
            .map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, user);
        let cfg: TrainConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(t.base_lr > 0.0 && t.base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "base_lr must be positive, got {}",
                t.base_lr
            )));
        }
        if !(t.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                t.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&t.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction must be in [0, 1), got {}",
                t.warmup_fraction
            )));
        }
        self.backbone.validate()?;
        self.synqt.validate(self.backbone.width)?;
        self.data.validate()?;
        for arm in t.arms.iter().chain(&self.compare.arms) {
            if arm != "linear" && Variant::arm(arm).is_none() {
                return Err(Error::Config(format!("unknown arm {arm:?}")));
            }
        }
        if self.compare.lrs.iter().any(|&lr| !(lr > 0.0))
            || self.compare.scales.iter().any(|&s| !(s > 0.0))
        {
            return Err(Error::Config("grid values must be positive".into()));
        }
        Ok(())
    }
}
