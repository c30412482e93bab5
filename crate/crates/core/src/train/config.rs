use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offline (fixed-depth) training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Unroll depth; must equal the model's `t_train`.
    pub t_train: usize,
    pub batch_size: usize,
    /// Optimizer steps.
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip_norm: f64,
    pub warmup_steps: usize,
    /// Cosine schedule floor as a fraction of the peak rate.
    pub min_lr_ratio: f64,
    pub seed: u64,
    /// Steps between metric records (0 logs only at the end).
    pub eval_interval: usize,
    /// Stop at an eval interval once exact-match reaches this value.
    pub target_exact_match: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            t_train: 4,
            batch_size: 8,
            steps: 1000,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            grad_clip_norm: 1.0,
            warmup_steps: 50,
            min_lr_ratio: 0.1,
            seed: 0,
            eval_interval: 100,
            target_exact_match: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.t_train == 0 || self.batch_size == 0 || self.steps == 0 {
            return bad("t_train, batch_size and steps must be positive");
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate and weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be positive");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive");
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad("min_lr_ratio must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Per-task test-time adaptation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TttConfig {
    /// 0 disables adaptation.
    pub adaptation_steps: usize,
    pub learning_rate: f64,
    pub augmentations_per_demo: usize,
    /// Adapt a private copy per task instead of carrying weights over.
    pub restore_after: bool,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl Default for TttConfig {
    fn default() -> Self {
        TttConfig {
            adaptation_steps: 8,
            learning_rate: 3e-4,
            augmentations_per_demo: 2,
            restore_after: true,
            weight_decay: 0.0,
            grad_clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TttConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !(self.grad_clip_norm > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("TTT learning_rate, weight_decay and grad_clip_norm must be valid".into()));
        }
        if self.adaptation_steps > 0 && self.augmentations_per_demo == 0 {
            return Err(Error::Config("augmentations_per_demo must be positive when adapting".into()));
        }
        Ok(())
    }
}
