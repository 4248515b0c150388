//! Run configuration and seed bookkeeping.
//!
//! One TOML file drives the whole pipeline. Every section has defaults, so
//! an empty file is a valid (synthetic, joint-mode) run; unknown keys are
//! rejected rather than ignored.
//!
//! Randomness fans out from the single top-level seed through fixed per-use
//! streams. Each consumer can also pin its own seed in its section, in
//! which case it detaches from the top-level seed entirely: changing the
//! training seed never perturbs data generation, and vice versa.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dhrnet::{DhrNetConfig, FeatureMode};
use crate::error::{Error, Result};
use crate::evt::TailFitConfig;
use crate::trainer::TrainConfig;

/// Stream labels for `derive_seed`. Values are arbitrary but frozen; any
/// change silently re-randomizes every run.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_TRAIN: u64 = 2;
pub const STREAM_DATA_TRAIN: u64 = 3;
pub const STREAM_DATA_TEST: u64 = 4;
pub const STREAM_SPLIT: u64 = 5;
pub const STREAM_NOISE: u64 = 6;
pub const STREAM_SUPERIMPOSE: u64 = 7;
pub const STREAM_HELDOUT: u64 = 8;

/// Splitmix64 finalizer over the seed xored with a stream tag. Bijective in
/// `seed` for fixed `stream`, so distinct top-level seeds stay distinct in
/// every stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut x = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutlierSource {
    /// Uniform pixel noise.
    Noise,
    /// Known test images overlaid with noise.
    Superimposed,
    /// Classes held out by the split; needs `data.known`.
    Heldout,
}

impl OutlierSource {
    pub fn name(self) -> &'static str {
        match self {
            OutlierSource::Noise => "noise",
            OutlierSource::Superimposed => "superimposed",
            OutlierSource::Heldout => "heldout",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lambda_cls: f64,
    pub lambda_rec: f64,
    pub dropout: f64,
    pub grad_clip: f64,
    /// Pinned training seed; absent means derive from the top-level seed.
    pub seed: Option<u64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            lambda_cls: t.lambda_cls,
            lambda_rec: t.lambda_rec,
            dropout: t.dropout,
            grad_clip: t.grad_clip,
            seed: None,
        }
    }
}

impl TrainSection {
    pub fn resolve(&self, top_seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            lambda_cls: self.lambda_cls,
            lambda_rec: self.lambda_rec,
            dropout: self.dropout,
            grad_clip: self.grad_clip,
            seed: self.seed.unwrap_or_else(|| derive_seed(top_seed, STREAM_TRAIN)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpenSetSection {
    pub mode: FeatureMode,
    /// Rejection threshold theta.
    pub threshold: f64,
}

impl Default for OpenSetSection {
    fn default() -> Self {
        OpenSetSection {
            mode: FeatureMode::Joint,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Synthetic source: how many glyph classes to draw.
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// IDX source: big-endian image/label file pairs.
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Class-separation protocol: keep this many classes as knowns and move
    /// the rest to a held-out unknown test set.
    pub known: Option<usize>,
    /// Per-class fraction of the pool that trains when splitting.
    pub train_fraction: f64,
    pub seed: Option<u64>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Synthetic,
            classes: 6,
            train_per_class: 80,
            test_per_class: 25,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            known: None,
            train_fraction: 0.8,
            seed: None,
        }
    }
}

impl DataSection {
    pub fn base_seed(&self, top_seed: u64) -> u64 {
        self.seed.unwrap_or(top_seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub outliers: Vec<OutlierSource>,
    /// Grid resolution for threshold sweeps: j / theta_steps for j in
    /// 0..theta_steps.
    pub theta_steps: usize,
    pub seed: Option<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            outliers: vec![OutlierSource::Noise, OutlierSource::Superimposed],
            theta_steps: 20,
            seed: None,
        }
    }
}

impl EvalSection {
    pub fn base_seed(&self, top_seed: u64) -> u64 {
        self.seed.unwrap_or(top_seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub net: DhrNetConfig,
    pub train: TrainSection,
    pub tail: TailFitConfig,
    pub openset: OpenSetSection,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        if !path.exists() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("config file {} does not exist", path.display()),
            )));
        }
        let text = fs::read_to_string(path)?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize run config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.resolve(self.seed).validate()?;
        self.tail.validate()?;
        if !(0.0..=1.0).contains(&self.openset.threshold) {
            return Err(Error::Config(format!(
                "openset.threshold {} outside [0, 1]",
                self.openset.threshold
            )));
        }
        match self.data.source {
            DataSource::Synthetic => {
                if self.data.train_per_class == 0 || self.data.test_per_class == 0 {
                    return Err(Error::Config("per-class sample counts must be positive".into()));
                }
            }
            DataSource::Idx => {
                if self.data.train_images.is_none() || self.data.train_labels.is_none() {
                    return Err(Error::Config(
                        "idx source needs data.train_images and data.train_labels".into(),
                    ));
                }
                if self.data.known.is_none()
                    && (self.data.test_images.is_none() || self.data.test_labels.is_none())
                {
                    return Err(Error::Config(
                        "idx source needs a test pair unless data.known splits the pool".into(),
                    ));
                }
            }
        }
        if let Some(k) = self.data.known {
            if k < 2 {
                return Err(Error::Config(format!("data.known {k} leaves too few known classes")));
            }
            let pool = match self.data.source {
                DataSource::Synthetic => Some(self.data.classes),
                DataSource::Idx => None,
            };
            if let Some(total) = pool {
                if k >= total {
                    return Err(Error::Config(format!(
                        "data.known {k} must leave at least one of {total} classes unknown"
                    )));
                }
            }
            if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
                return Err(Error::Config(format!(
                    "data.train_fraction {} outside (0, 1)",
                    self.data.train_fraction
                )));
            }
        }
        // the network must agree with what the data will deliver
        if self.data.source == DataSource::Synthetic {
            let known = self.data.known.unwrap_or(self.data.classes);
            if self.net.classes != known {
                return Err(Error::Config(format!(
                    "net.classes {} but the data section supplies {known} known classes",
                    self.net.classes
                )));
            }
        }
        if self.eval.theta_steps == 0 {
            return Err(Error::Config("eval.theta_steps must be positive".into()));
        }
        if self.eval.outliers.is_empty() {
            return Err(Error::Config("eval.outliers cannot be empty".into()));
        }
        if self
            .eval
            .outliers
            .contains(&OutlierSource::Heldout)
            && self.data.known.is_none()
        {
            return Err(Error::Config(
                "heldout outliers need data.known to hold classes out".into(),
            ));
        }
        Ok(())
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, STREAM_INIT)
    }
}
