use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::eval::{evaluate, EvalTask};
use super::optim::{clip_grad_norm, cosine_lr, AdamW};
use crate::arc::{encode_canvas, Canvas, TaskInstance};
use crate::error::{Error, Result};
use crate::halting::HaltPolicy;
use crate::model::{LoopVit, Mode, ParamVars, TraceOptions};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Mean cross-entropy of IMAGE-token logits against the canvas targets
/// (PAD included, TASK rows excluded), recorded on `tape`.
pub fn offline_loss<F: Scalar>(tape: &mut Tape<F>, logits: Var, canvas: &Canvas) -> Result<Var> {
    let targets = canvas
        .row_targets()
        .ok_or_else(|| Error::contract("offline loss needs targets for every IMAGE token"))?;
    tape.cross_entropy(logits, &targets)
}

/// [`offline_loss`] on a plain logits tensor.
pub fn offline_loss_value<F: Scalar>(logits: &Tensor<F>, canvas: &Canvas) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(logits.detached());
    let loss = offline_loss(&mut tape, v, canvas)?;
    Ok(tape.value(loss).data()[0].as_f64())
}

/// Unroll `steps` iterations (or the stacked trunk) and return final logits.
pub fn forward_logits<F: Scalar>(
    model: &LoopVit<F>,
    tape: &mut Tape<F>,
    pv: &ParamVars,
    canvas: &Canvas,
    steps: usize,
) -> Result<Var> {
    let layout = model.layout(canvas)?;
    let z0 = model.embed(tape, pv, canvas)?;
    let z = match model.config.mode {
        Mode::Looped => model.loop_forward(tape, pv, z0, steps, &layout, TraceOptions::default())?.0,
        Mode::Stacked => model.stacked_forward(tape, pv, z0, &layout)?,
    };
    model.head(tape, pv, z)
}

/// Loss and token-level accuracy of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub loss: f64,
    pub correct_pixels: usize,
    pub pixels: usize,
}

fn argmax_row<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Forward and backward over `canvases`, adding the gradient of the mean
/// loss into each parameter's accumulator.
pub fn accumulate_batch<F: Scalar>(model: &mut LoopVit<F>, canvases: &[Canvas], steps: usize) -> Result<BatchStats> {
    if canvases.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let scale = F::from_f64_lossy(1.0 / canvases.len() as f64);
    let mut stats = BatchStats::default();
    for canvas in canvases {
        let mut tape = Tape::new();
        let pv = model.params.bind(&mut tape);
        let logits = forward_logits(model, &mut tape, &pv, canvas, steps)?;
        let loss = offline_loss(&mut tape, logits, canvas)?;
        let value = tape.value(loss).data()[0].as_f64();
        stats.loss += value / canvases.len() as f64;
        let targets = canvas.target.as_ref().expect("checked by offline_loss");
        let lv = tape.value(logits);
        for (i, &t) in targets.iter().enumerate() {
            stats.correct_pixels += usize::from(argmax_row(lv.row(canvas.n_task() + i)) == t);
        }
        stats.pixels += targets.len();
        if !value.is_finite() {
            // skip the sweep; the caller's divergence guard fires on the loss
            continue;
        }
        let scaled = tape.scale(loss, scale);
        let grads = tape.backward(scaled)?;
        model.params.accumulate(&pv, &grads)?;
    }
    Ok(stats)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema_version: u32,
    pub step: usize,
    /// Mean training loss since the previous record.
    pub loss: f64,
    pub pixel_acc: f64,
    pub exact_match: f64,
    pub avg_executed_steps: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub steps_run: usize,
    pub log: Vec<MetricsRecord>,
}

/// Everything the trainer needs besides the model.
pub struct TrainData<'a, I> {
    /// Training tasks; every query with an expected output is one example.
    pub tasks: I,
    /// Held-out tasks scored at each eval interval.
    pub eval: &'a [EvalTask],
    /// Policy used for the held-out score.
    pub eval_policy: HaltPolicy,
}

/// Fixed-depth training: every example is unrolled for exactly `t_train`
/// steps and supervised on the final logits only.
pub fn train_offline<F, I>(
    model: &mut LoopVit<F>,
    data: TrainData<'_, I>,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainReport>
where
    F: Scalar,
    I: Iterator<Item = TaskInstance>,
{
    cfg.validate()?;
    if model.config.mode != Mode::Looped {
        return Err(Error::contract("train_offline requires LOOPED mode"));
    }
    if cfg.t_train != model.config.t_train {
        return Err(Error::Config(format!(
            "train.t_train = {} but model.t_train = {}",
            cfg.t_train, model.config.t_train
        )));
    }
    let canvas_cfg = model.config.canvas();
    let TrainData { tasks, eval, eval_policy } = data;
    let mut examples = tasks.flat_map(|task| {
        (0..task.queries.len())
            .filter(|&q| task.queries[q].expected.is_some())
            .map(|q| encode_canvas(&task, q, &canvas_cfg))
            .collect::<Vec<_>>()
    });
    let mut opt = AdamW::new(&mut model.params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let mut log = Vec::new();
    let (mut loss_sum, mut loss_n, mut last_norm) = (0.0, 0usize, 0.0);
    let mut steps_run = 0;
    for step in 0..cfg.steps {
        let batch: Vec<Canvas> = examples.by_ref().take(cfg.batch_size).collect::<Result<_>>()?;
        if batch.is_empty() {
            break;
        }
        model.params.zero_grad();
        let stats = accumulate_batch(model, &batch, cfg.t_train)?;
        if !stats.loss.is_finite() {
            return Err(Error::Divergence { step: step + 1, loss: stats.loss });
        }
        last_norm = clip_grad_norm(&mut model.params, cfg.grad_clip_norm);
        let lr = cosine_lr(step, cfg.steps, cfg.warmup_steps, cfg.learning_rate, cfg.min_lr_ratio);
        opt.step(&mut model.params, lr);
        model.params.zero_grad();
        loss_sum += stats.loss;
        loss_n += 1;
        steps_run = step + 1;
        let at_interval = cfg.eval_interval > 0 && steps_run % cfg.eval_interval == 0;
        if at_interval || steps_run == cfg.steps {
            let rec = record(model, eval, &eval_policy, steps_run, loss_sum / loss_n as f64, lr, last_norm, stats)?;
            loss_sum = 0.0;
            loss_n = 0;
            on_record(&rec)?;
            let done = cfg.target_exact_match.is_some_and(|t| !eval.is_empty() && rec.exact_match >= t);
            log.push(rec);
            if done {
                break;
            }
        }
    }
    if loss_n > 0 {
        let lr = cosine_lr(steps_run.saturating_sub(1), cfg.steps, cfg.warmup_steps, cfg.learning_rate, cfg.min_lr_ratio);
        let rec = record(model, eval, &eval_policy, steps_run, loss_sum / loss_n as f64, lr, last_norm, BatchStats::default())?;
        on_record(&rec)?;
        log.push(rec);
    }
    Ok(TrainReport { steps_run, log })
}

#[allow(clippy::too_many_arguments)]
fn record<F: Scalar>(
    model: &LoopVit<F>,
    eval: &[EvalTask],
    policy: &HaltPolicy,
    step: usize,
    loss: f64,
    lr: f64,
    grad_norm: f64,
    last: BatchStats,
) -> Result<MetricsRecord> {
    let (pixel_acc, exact_match, avg_executed_steps) = if eval.is_empty() {
        let acc = if last.pixels > 0 { last.correct_pixels as f64 / last.pixels as f64 } else { 0.0 };
        (acc, 0.0, model.config.t_train as f64)
    } else {
        let r = evaluate(model, eval, policy, 1, None)?;
        (r.pixel_accuracy, r.exact_match, r.avg_executed_steps)
    };
    Ok(MetricsRecord {
        schema_version: METRICS_SCHEMA_VERSION,
        step,
        loss,
        pixel_acc,
        exact_match,
        avg_executed_steps,
        lr,
        grad_norm,
    })
}
