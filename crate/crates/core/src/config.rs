//! Run configuration. Every field has a default; unknown keys are rejected
//! when deserializing.

use alloc::format;
use serde::{Deserialize, Serialize};

use crate::training::LossWeights;
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Sequence width.
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    /// Pyramid channel count.
    pub channels: usize,
    /// Incoherence score threshold for growing the quadtree.
    pub threshold: f32,
    pub node_cap: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d_model: 64, heads: 4, layers: 3, channels: 16, threshold: 0.5, node_cap: 2000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f32,
    pub epochs: usize,
    /// Samples per optimizer step (gradient accumulation).
    pub batch: usize,
    pub seed: u64,
    /// Epochs at the start of training that grow trees from ground-truth incoherence.
    pub teacher_forcing_epochs: usize,
    pub loss_weights: LossWeights,
    /// Whether the 49 context entries contribute to the refinement loss.
    pub refine_context: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 30,
            batch: 8,
            seed: 0,
            teacher_forcing_epochs: 5,
            loss_weights: LossWeights::default(),
            refine_context: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub samples: usize,
    pub image_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { samples: 500, image_size: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub warmup: usize,
    pub repeats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { warmup: 2, repeats: 3 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) must be a positive multiple of heads ({})",
                self.d_model, self.heads
            )));
        }
        if self.d_model < 4 {
            return Err(Error::Config("d_model must be at least 4".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} must lie in (0, 1)", self.threshold)));
        }
        Ok(())
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.loss_weights.validate()?;
        let t = &self.training;
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be finite and non-negative", t.lr)));
        }
        if t.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        let s = self.data.image_size;
        if s < 64 || s % 32 != 0 {
            return Err(Error::Config(format!("image_size {s} must be at least 64 and divisible by 32")));
        }
        if self.data.samples < 10 {
            return Err(Error::Config(format!("samples {} must be at least 10", self.data.samples)));
        }
        if self.eval.repeats == 0 {
            return Err(Error::Config("eval.repeats must be at least 1".into()));
        }
        Ok(())
    }
}
