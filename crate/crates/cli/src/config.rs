//! Run configuration: a JSON document with `mask`, `coils`, `model`,
//! `train`, and `io` sections. Unknown keys are rejected, and parse errors
//! report the schema path of the offending key.

use kmoe_core::error::{Error, Result};
use kmoe_core::kspace::MaskKind;
use kmoe_core::model::train::TrainOptions;
use kmoe_core::model::CascadeConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSection {
    pub kind: MaskKind,
    #[serde(default = "d_extent")]
    pub height: usize,
    #[serde(default = "d_extent")]
    pub width: usize,
    #[serde(default = "d_af")]
    pub af: usize,
    /// Fully sampled center fraction; when absent, 0.32/af (0.08 at 4x,
    /// 0.04 at 8x — the usual Cartesian convention).
    #[serde(default)]
    pub center_fraction: Option<f64>,
    /// Radial spoke count; 0 selects the acceleration convention (128/af).
    #[serde(default)]
    pub spokes: usize,
}

fn d_extent() -> usize {
    64
}
fn d_af() -> usize {
    4
}

impl Default for MaskSection {
    fn default() -> Self {
        Self {
            kind: MaskKind::Equispaced,
            height: 64,
            width: 64,
            af: 4,
            center_fraction: None,
            spokes: 0,
        }
    }
}

impl MaskSection {
    pub fn effective_center_fraction(&self) -> f64 {
        match self.kind {
            MaskKind::Radial => 0.0,
            _ => self.center_fraction.unwrap_or(0.32 / self.af as f64),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoilsSection {
    #[serde(default = "d_coils")]
    pub count: usize,
}

fn d_coils() -> usize {
    4
}

impl Default for CoilsSection {
    fn default() -> Self {
        Self { count: 4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_steps")]
    pub steps: u64,
    #[serde(default = "d_warmup")]
    pub warmup_steps: u64,
    /// Overrides `model.lambda_bal` when present.
    #[serde(default)]
    pub lambda_bal: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default = "d_ckpt_every")]
    pub checkpoint_every: u64,
    #[serde(default = "d_holdout")]
    pub holdout: usize,
    #[serde(default)]
    pub weight_decay: f64,
}

fn d_lr() -> f64 {
    8e-4
}
fn d_steps() -> u64 {
    400
}
fn d_warmup() -> u64 {
    40
}
fn d_batch() -> usize {
    2
}
fn d_ckpt_every() -> u64 {
    100
}
fn d_holdout() -> usize {
    16
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: d_lr(),
            steps: d_steps(),
            warmup_steps: d_warmup(),
            lambda_bal: None,
            seed: 0,
            batch_size: d_batch(),
            noise_sigma: 0.0,
            checkpoint_every: d_ckpt_every(),
            holdout: d_holdout(),
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct IoSection {
    #[serde(default = "d_out")]
    pub out_dir: PathBuf,
}

fn d_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub mask: MaskSection,
    #[serde(default)]
    pub coils: CoilsSection,
    #[serde(default = "CascadeConfig::desk_scale")]
    pub model: CascadeConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub io: IoSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mask: MaskSection::default(),
            coils: CoilsSection::default(),
            model: CascadeConfig::desk_scale(),
            train: TrainSection::default(),
            io: IoSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates, reporting the JSON path of any offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            Error::InvalidArgument(format!("config key `{}`: {}", e.path(), e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.model
            .validate_extent(self.mask.height, self.mask.width)?;
        if self.mask.height < 32 || self.mask.width < 32 {
            return Err(Error::InvalidArgument(format!(
                "config key `mask.height`/`mask.width`: phantom extents {}x{} below 32",
                self.mask.height, self.mask.width
            )));
        }
        if self.coils.count == 0 {
            return Err(Error::InvalidArgument(
                "config key `coils.count`: must be >= 1".into(),
            ));
        }
        if self.train.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "config key `train.batch_size`: must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Model config with the train-section balance override applied.
    pub fn effective_model(&self) -> CascadeConfig {
        let mut m = self.model.clone();
        if let Some(lb) = self.train.lambda_bal {
            m.lambda_bal = lb;
        }
        m
    }

    pub fn train_options(&self, seed_override: Option<u64>) -> TrainOptions {
        TrainOptions {
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            min_lr: 0.0,
            warmup_steps: self.train.warmup_steps,
            weight_decay: self.train.weight_decay,
            noise_sigma: self.train.noise_sigma,
            seed: seed_override.unwrap_or(self.train.seed),
        }
    }
}
