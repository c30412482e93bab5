use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TttConfig;
use super::offline::{accumulate_batch, forward_logits, offline_loss};
use super::optim::{clip_grad_norm, AdamW};
use crate::arc::{encode_pair, Augmentation, Canvas, CanvasConfig, Equivariance, Example, TaskInstance};
use crate::error::{Error, Result};
use crate::model::LoopVit;
use crate::tensor::{Scalar, Tape};

/// Adaptation examples for `task`: each demo in turn acts as the query with
/// the remaining demos as context (the demo itself when it is alone), under
/// `augmentations_per_demo` sampled views. One augmentation is applied to a
/// whole example, context included.
pub fn ttt_batch(task: &TaskInstance, cfg: &TttConfig, eq: &Equivariance, canvas: &CanvasConfig) -> Result<Vec<Canvas>> {
    if task.demos.is_empty() {
        return Err(Error::contract("TTT needs at least one demonstration"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(task.demos.len() * cfg.augmentations_per_demo);
    for (i, held) in task.demos.iter().enumerate() {
        let context: Vec<&Example> = if task.demos.len() > 1 {
            task.demos.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, d)| d).collect()
        } else {
            vec![held]
        };
        for k in 0..cfg.augmentations_per_demo {
            // the first view of every demo is the unaugmented one
            let aug = if k == 0 { Augmentation::identity() } else { Augmentation::sample(&mut rng, eq) };
            let ctx: Vec<Example> = context
                .iter()
                .map(|d| Example {
                    input: aug.apply(&d.input),
                    output: aug.apply(&d.output),
                })
                .collect();
            let input = aug.apply(&held.input);
            let output = aug.apply(&held.output);
            out.push(encode_pair(&ctx, &input, Some(&output), canvas)?);
        }
    }
    Ok(out)
}

/// Mean offline loss of `model` over `canvases` at its training depth.
pub fn batch_loss<F: Scalar>(model: &LoopVit<F>, canvases: &[Canvas]) -> Result<f64> {
    let mut total = 0.0;
    for c in canvases {
        let mut tape = Tape::new();
        let pv = model.params.bind_frozen(&mut tape);
        let logits = forward_logits(model, &mut tape, &pv, c, model.config.t_train)?;
        let loss = offline_loss(&mut tape, logits, c)?;
        total += tape.value(loss).data()[0].as_f64();
    }
    Ok(total / canvases.len().max(1) as f64)
}

/// Fine-tune a copy of `model` on augmented demonstrations of `task`. The
/// input model is never modified.
pub fn ttt_adapt<F: Scalar>(model: &LoopVit<F>, task: &TaskInstance, cfg: &TttConfig, eq: &Equivariance) -> Result<LoopVit<F>> {
    cfg.validate()?;
    let mut adapted = model.clone();
    if cfg.adaptation_steps == 0 {
        return Ok(adapted);
    }
    let batch = ttt_batch(task, cfg, eq, &model.config.canvas())?;
    let mut opt = AdamW::new(&mut adapted.params, 0.9, 0.95, 1e-8, cfg.weight_decay);
    let steps = adapted.config.t_train;
    for step in 0..cfg.adaptation_steps {
        adapted.params.zero_grad();
        let stats = accumulate_batch(&mut adapted, &batch, steps)?;
        if !stats.loss.is_finite() {
            return Err(Error::Divergence { step: step + 1, loss: stats.loss });
        }
        clip_grad_norm(&mut adapted.params, cfg.grad_clip_norm);
        opt.step(&mut adapted.params, cfg.learning_rate);
    }
    adapted.params.zero_grad();
    Ok(adapted)
}
