//! Prediction head, optimizer, schedule and the fine-tuning loop.

pub mod finetune;
pub mod head;
pub mod optim;
pub mod schedule;

pub use finetune::{evaluate, finetune, EpochMetrics, FinetuneReport};
pub use head::{head_param_count, Head};
pub use optim::AdamW;
pub use schedule::cosine_lr;

use crate::geometry::PointCloud;
use crate::model::Strategy;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Fixes the FPS start point to index 0.
    pub deterministic: bool,
}

impl TrainConfig {
    /// Desk-scale defaults: 100 epochs, batch 16, lr 5e-4 → 1e-6, decay 0.05.
    pub fn desk(strategy: Strategy, seed: u64) -> Self {
        Self {
            strategy,
            epochs: 100,
            batch_size: 16,
            lr_max: 5e-4,
            lr_min: 1e-6,
            weight_decay: 0.05,
            seed,
            deterministic: false,
        }
    }

    /// 300 epochs at batch 32.
    pub fn full_scale(strategy: Strategy, seed: u64) -> Self {
        Self { epochs: 300, batch_size: 32, ..Self::desk(strategy, seed) }
    }
}

/// Normalized clouds with labels in `[0, classes)`.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }
}
