use serde::{Deserialize, Serialize};

use crate::arc::{CanvasConfig, NUM_CLASSES};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    /// One set of `blocks` layers reused for every iteration.
    Looped,
    /// `blocks` distinct layers applied once, no step embeddings.
    Stacked,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopVitConfig {
    /// Hidden width.
    pub d: usize,
    pub heads: usize,
    /// Layers in the core trunk (or total layers in stacked mode).
    pub blocks: usize,
    /// Unroll depth used for training; also the number of step embeddings.
    pub t_train: usize,
    /// Inference iteration cap.
    pub t_max: usize,
    /// ConvGLU inner width per branch is `ffn_expansion * d / 2`.
    pub ffn_expansion: usize,
    pub n_task_tokens: usize,
    pub canvas_h: usize,
    pub canvas_w: usize,
    /// Output classes (colors + PAD).
    pub n_classes: usize,
    pub mode: Mode,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl Default for LoopVitConfig {
    fn default() -> Self {
        LoopVitConfig {
            d: 64,
            heads: 4,
            blocks: 1,
            t_train: 4,
            t_max: 8,
            ffn_expansion: 4,
            n_task_tokens: 8,
            canvas_h: 12,
            canvas_w: 12,
            n_classes: NUM_CLASSES,
            mode: Mode::Looped,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
        }
    }
}

impl LoopVitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads));
        }
        if !self.head_dim().is_multiple_of(4) {
            return bad(format!("head dim {} must be divisible by 4 for axial RoPE", self.head_dim()));
        }
        if self.blocks == 0 || self.t_train == 0 || self.t_max == 0 {
            return bad("blocks, t_train and t_max must be >= 1".into());
        }
        if self.ffn_expansion == 0 || !(self.ffn_expansion * self.d).is_multiple_of(2) {
            return bad(format!("ffn_expansion {} gives a fractional inner width", self.ffn_expansion));
        }
        if self.canvas_h == 0 || self.canvas_w == 0 {
            return bad("canvas must be non-empty".into());
        }
        if self.n_classes != NUM_CLASSES {
            return bad(format!("n_classes must be {NUM_CLASSES} (10 colors + PAD)"));
        }
        if self.rope_base <= 1.0 || self.norm_eps <= 0.0 {
            return bad("rope_base must exceed 1 and norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads.max(1)
    }

    /// ConvGLU inner width per branch.
    pub fn ffn_inner(&self) -> usize {
        self.ffn_expansion * self.d / 2
    }

    pub fn canvas(&self) -> CanvasConfig {
        CanvasConfig {
            height: self.canvas_h,
            width: self.canvas_w,
            n_task_tokens: self.n_task_tokens,
        }
    }

    /// Sequence length `M`.
    pub fn tokens(&self) -> usize {
        self.canvas().tokens()
    }

    /// Number of step-embedding rows stored.
    pub fn step_rows(&self) -> usize {
        match self.mode {
            Mode::Looped => self.t_train,
            Mode::Stacked => 0,
        }
    }
}
