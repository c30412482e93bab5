//! Analytic forward FLOP counts (a multiply-add counts as two).

use super::config::{LoopVitConfig, Mode};

/// One hybrid layer on the full token sequence.
pub fn layer_flops(cfg: &LoopVitConfig) -> u64 {
    let m = cfg.tokens() as u64;
    let d = cfg.d as u64;
    let f = cfg.ffn_inner() as u64;
    let n_img = (cfg.canvas_h * cfg.canvas_w) as u64;
    let projections = 4 * 2 * m * d * d;
    let attention = 2 * 2 * m * m * d;
    let ffn = 2 * m * d * 2 * f + 2 * m * f * d;
    let conv = 2 * 9 * f * n_img;
    projections + attention + ffn + conv
}

/// Output head on every token.
pub fn head_flops(cfg: &LoopVitConfig) -> u64 {
    2 * cfg.tokens() as u64 * cfg.d as u64 * cfg.n_classes as u64
}

/// One loop iteration: the `B` tied layers plus the head read-out that the
/// halting rule needs at every step.
pub fn step_flops(cfg: &LoopVitConfig) -> u64 {
    cfg.blocks as u64 * layer_flops(cfg) + head_flops(cfg)
}

/// Total forward FLOPs for `executed_steps` iterations (ignored in stacked
/// mode, which runs its layers once).
pub fn forward_flops(cfg: &LoopVitConfig, executed_steps: f64) -> f64 {
    match cfg.mode {
        Mode::Looped => step_flops(cfg) as f64 * executed_steps,
        Mode::Stacked => step_flops(cfg) as f64,
    }
}
