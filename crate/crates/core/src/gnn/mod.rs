//! Encode-process-decode graph network for AC-OPF.
//!
//! The model reads a [`TypedGraph`](crate::graph::TypedGraph), projects every
//! node and edge set to `hidden_size`, runs `num_message_passing_steps`
//! interaction-network blocks with residual connections and decodes bus
//! voltages and generator powers. Bounded outputs pass through a scaled
//! sigmoid, the reference angle is pinned to zero and branch flows are
//! derived from the voltages, so those constraints hold by construction.

pub mod adam;
pub mod batch;
pub mod loss;
pub mod model;
pub mod params;
pub mod physics;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::Adam;
pub use batch::Batch;
pub use loss::{gradient, loss, LossParts};
pub use model::{forward, predict};
pub use params::ModelParams;
pub use train::{lr_at, train, TrainConfig, TrainData, TrainLogRecord, TrainOutcome, TrainOutput, ValidationRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub num_message_passing_steps: usize,
    pub decoder_mlp_size: usize,
    /// Weight `C` of the constraint term in the loss.
    pub constraint_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_size: 128,
            num_message_passing_steps: 48,
            decoder_mlp_size: 256,
            constraint_weight: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn new(hidden_size: usize, num_message_passing_steps: usize) -> Self {
        ModelConfig {
            hidden_size,
            num_message_passing_steps,
            ..ModelConfig::default()
        }
    }

    /// 48 steps, hidden size 128.
    pub fn deep48() -> Self {
        ModelConfig::new(128, 48)
    }

    /// 60 steps, hidden size 128.
    pub fn deep60() -> Self {
        ModelConfig::new(128, 60)
    }

    /// 36 steps, hidden size 384.
    pub fn wide() -> Self {
        ModelConfig::new(384, 36)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0
            || self.num_message_passing_steps == 0
            || self.decoder_mlp_size == 0
            || !(self.constraint_weight >= 0.0)
        {
            return Err(Error::InvalidArgument(format!("invalid model config {self:?}")));
        }
        Ok(())
    }
}
