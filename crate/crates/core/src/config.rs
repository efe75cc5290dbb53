//! Run configuration read from a strict JSON file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ninepath::{Aggregation, THRESHOLD};
use crate::optim::OptimizerConfig;
use crate::train::TrainConfig;
use crate::unet::InputMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dims: [usize; 3],
    pub voxel_mm: [f32; 3],
    pub mode: InputMode,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_epoch_decay: f64,
    /// Global gradient-norm clip; `null` disables it.
    pub grad_clip_norm: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    /// Post-processor epochs; `null` reuses `epochs`.
    pub post_epochs: Option<usize>,
    pub threshold: f64,
    pub aggregation: Aggregation,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dims: [48, 64, 48],
            voxel_mm: [1.0; 3],
            mode: InputMode::Flip,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_epoch_decay: 0.03,
            grad_clip_norm: None,
            batch_size: 32,
            epochs: 50,
            post_epochs: None,
            threshold: 0.5,
            aggregation: Aggregation::Cnn,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(format!("run config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate0: self.lr0,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            lr_epoch_decay: self.lr_epoch_decay,
            grad_clip_norm: self.grad_clip_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.threshold != THRESHOLD as f64 {
            return Err(Error::config(format!("threshold is fixed at {THRESHOLD}, got {}", self.threshold)));
        }
        if self.voxel_mm.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config("voxel_mm entries must be positive"));
        }
        self.train_config(true).validate()
    }

    pub fn train_config(&self, parallel: bool) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer(),
            batch_size: self.batch_size,
            epochs: self.epochs,
            post_epochs: self.post_epochs,
            seed: self.seed,
            mode: self.mode,
            parallel,
            verbose: false,
        }
    }

    /// SHA-256 of the compact JSON form of the resolved configuration.
    pub fn hash(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(bytes).into()
    }
}
