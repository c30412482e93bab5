use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TttConfig;
use super::ttt::ttt_adapt;
use crate::arc::{encode_canvas, Augmentation, Equivariance, Grid, TaskInstance};
use crate::error::Result;
use crate::halting::{run_with_halting, HaltOptions, HaltPolicy};
use crate::model::LoopVit;
use crate::tensor::Scalar;

pub const EVAL_SCHEMA_VERSION: u32 = 1;

/// A task to score, with the augmentations under which its rule holds.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTask {
    pub id: String,
    pub task: TaskInstance,
    pub equivariance: Equivariance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub task_id: String,
    pub query: usize,
    pub correct: bool,
    /// First attempt that matched, 1-based.
    pub solved_by: Option<usize>,
    pub pixel_accuracy: f64,
    pub exit_step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub attempts: usize,
    pub queries: usize,
    /// Fraction of queries solved by any of the attempts.
    pub exact_match: f64,
    /// Cell accuracy of the first attempt over the expected grid.
    pub pixel_accuracy: f64,
    /// Mean exit step of the first attempt.
    pub avg_executed_steps: f64,
    pub results: Vec<QueryResult>,
}

/// Fraction of expected cells reproduced at the same position.
pub fn pixel_accuracy(pred: &Grid, expected: &Grid) -> f64 {
    let mut hit = 0;
    for r in 0..expected.height() {
        for c in 0..expected.width() {
            if r < pred.height() && c < pred.width() && pred.get(r, c) == expected.get(r, c) {
                hit += 1;
            }
        }
    }
    hit as f64 / (expected.height() * expected.width()) as f64
}

fn task_seed(base: u64, id: &str) -> u64 {
    // FNV-1a keeps the per-task stream independent of evaluation order
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64 ^ base, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Score every query with up to `attempts` candidates. Attempt 1 is the
/// direct prediction; each further attempt predicts the task under a
/// sampled augmentation and maps the answer back.
pub fn evaluate<F: Scalar>(
    model: &LoopVit<F>,
    tasks: &[EvalTask],
    policy: &HaltPolicy,
    attempts: usize,
    ttt: Option<&TttConfig>,
) -> Result<EvalReport> {
    policy.validate()?;
    let attempts = attempts.max(1);
    let canvas_cfg = model.config.canvas();
    let mut carried: Option<LoopVit<F>> = None;
    let mut results = Vec::new();
    for et in tasks {
        let adapted = match ttt.filter(|c| c.adaptation_steps > 0) {
            Some(cfg) => {
                let base = if cfg.restore_after { model } else { carried.as_ref().unwrap_or(model) };
                let m = ttt_adapt(base, &et.task, cfg, &et.equivariance)?;
                Some(m)
            }
            None => None,
        };
        let m = adapted.as_ref().unwrap_or(model);
        let mut rng = ChaCha8Rng::seed_from_u64(task_seed(ttt.map_or(0, |c| c.seed), &et.id));
        let mut views = Vec::with_capacity(attempts - 1);
        for _ in 1..attempts {
            views.push(Augmentation::sample(&mut rng, &et.equivariance));
        }
        for (qi, q) in et.task.queries.iter().enumerate() {
            let Some(expected) = q.expected.as_ref() else { continue };
            let canvas = encode_canvas(&et.task, qi, &canvas_cfg)?;
            let first = run_with_halting(m, &canvas, policy, HaltOptions::default())?;
            let mut solved_by = (first.prediction == *expected).then_some(1);
            for (k, aug) in views.iter().enumerate() {
                if solved_by.is_some() {
                    break;
                }
                let view = aug.apply_task(&et.task);
                let canvas = encode_canvas(&view, qi, &canvas_cfg)?;
                let out = run_with_halting(m, &canvas, policy, HaltOptions::default())?;
                if aug.invert().apply(&out.prediction) == *expected {
                    solved_by = Some(k + 2);
                }
            }
            results.push(QueryResult {
                task_id: et.id.clone(),
                query: qi,
                correct: solved_by.is_some(),
                solved_by,
                pixel_accuracy: pixel_accuracy(&first.prediction, expected),
                exit_step: first.exit_step,
            });
        }
        if ttt.is_some_and(|c| !c.restore_after) {
            carried = adapted;
        }
    }
    let n = results.len().max(1) as f64;
    Ok(EvalReport {
        schema_version: EVAL_SCHEMA_VERSION,
        attempts,
        queries: results.len(),
        exact_match: results.iter().filter(|r| r.correct).count() as f64 / n,
        pixel_accuracy: results.iter().map(|r| r.pixel_accuracy).sum::<f64>() / n,
        avg_executed_steps: results.iter().map(|r| r.exit_step as f64).sum::<f64>() / n,
        results,
    })
}
