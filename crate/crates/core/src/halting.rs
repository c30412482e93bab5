//! Entropy-based dynamic exit and convergence diagnostics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::arc::{decode_prediction, Canvas, Grid};
use crate::error::{Error, Result};
use crate::model::{LoopVit, TraceOptions};
use crate::tensor::{Scalar, Tape, Tensor};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HaltPolicy {
    pub tau: f64,
    pub t_min: usize,
    pub t_max: usize,
}

impl Default for HaltPolicy {
    fn default() -> Self {
        HaltPolicy {
            tau: 0.05,
            t_min: 1,
            t_max: 8,
        }
    }
}

impl HaltPolicy {
    /// Run exactly `t_max` steps.
    pub fn fixed(t_max: usize) -> Self {
        HaltPolicy { tau: 0.0, t_min: 1, t_max }
    }

    pub fn validate(&self) -> Result<()> {
        // tau = 0 is accepted as the "never exit early" setting
        if !(self.tau >= 0.0) || self.tau.is_infinite() {
            return Err(Error::Config(format!("tau must be a finite non-negative number, got {}", self.tau)));
        }
        if self.t_min < 1 || self.t_min > self.t_max {
            return Err(Error::Config(format!(
                "need 1 <= t_min <= t_max, got t_min = {} and t_max = {}",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }

    pub fn should_halt(&self, t: usize, entropy: f64) -> bool {
        t >= self.t_min && entropy < self.tau
    }
}

/// Per-iteration record.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub t: usize,
    /// `N x C_out` distributions over the IMAGE tokens.
    pub probs: Vec<f64>,
    /// Mean entropy in nats over the pixels of the decoded grid.
    pub entropy: f64,
    /// Relative change from the previous step; `None` at step 1.
    pub delta: Option<f64>,
    /// True from the exit step onwards.
    pub halted: bool,
    /// Latent state `z_t` (`M x d`), when requested.
    pub state: Option<Vec<f64>>,
    /// Per layer: `heads x M x M` attention weights, when requested.
    pub attention: Option<Vec<Vec<f64>>>,
}

/// What [`run_with_halting`] records.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HaltOptions {
    /// Pad the trace to `t_max` entries by replicating the frozen exit step.
    pub fixed_length: bool,
    pub states: bool,
    pub attention: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HaltOutcome {
    pub prediction: Grid,
    pub trace: Vec<StepTrace>,
    pub exit_step: usize,
}

impl HaltOutcome {
    /// Steps actually computed; equal to the exit step.
    pub fn executed_steps(&self) -> usize {
        self.exit_step
    }

    pub fn exit_trace(&self) -> &StepTrace {
        &self.trace[self.exit_step - 1]
    }
}

const ROW_TOLERANCE: f64 = 1e-4;

fn check_rows(probs: &[f64], n_classes: usize) -> Result<usize> {
    if n_classes == 0 || !probs.len().is_multiple_of(n_classes) {
        return Err(Error::dim("entropy", &[probs.len()], &[n_classes]));
    }
    for (i, row) in probs.chunks(n_classes).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_TOLERANCE || row.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::contract(format!("row {i} is not a distribution (sum {s})")));
        }
    }
    Ok(probs.len() / n_classes)
}

/// Mean Shannon entropy (nats) of `N` rows of `n_classes` probabilities.
pub fn compute_entropy(probs: &[f64], n_classes: usize) -> Result<f64> {
    let n = check_rows(probs, n_classes)?;
    if n == 0 {
        return Err(Error::contract("entropy of zero pixels"));
    }
    let total: f64 = probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    Ok(total / n as f64)
}

/// Mean entropy over the pixels inside the grid decoded from `probs`, a
/// `height x width` canvas of distributions. PAD cells outside the predicted
/// extent are excluded, so a few uncertain pixels are not averaged away.
pub fn grid_entropy(probs: &[f64], n_classes: usize, height: usize, width: usize) -> Result<f64> {
    if check_rows(probs, n_classes)? != height * width {
        return Err(Error::dim("grid_entropy", &[probs.len()], &[height * width * n_classes]));
    }
    let grid = decode_prediction(probs, n_classes, height, width);
    let (h, w) = (grid.height(), grid.width());
    let mut rows = Vec::with_capacity(h * w * n_classes);
    for r in 0..h {
        let start = (r * width) * n_classes;
        rows.extend_from_slice(&probs[start..start + w * n_classes]);
    }
    compute_entropy(&rows, n_classes)
}

/// `||P_t - P_prev|| / ||P_prev||` over the flattened tensors.
pub fn compute_delta(probs_t: &[f64], probs_prev: &[f64]) -> Result<f64> {
    if probs_t.len() != probs_prev.len() {
        return Err(Error::dim("delta", &[probs_t.len()], &[probs_prev.len()]));
    }
    let norm_prev = probs_prev.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm_prev == 0.0 {
        return Err(Error::contract("delta against a zero-norm previous prediction"));
    }
    let diff = probs_t.iter().zip(probs_prev).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(diff / norm_prev)
}

/// Row-wise softmax over the IMAGE rows of `logits`, in `f64`.
pub fn image_probs<F: Scalar>(logits: &Tensor<F>, n_task: usize) -> Result<Vec<f64>> {
    let (m, c) = logits.dims2()?;
    if n_task > m {
        return Err(Error::dim("image_probs", &[m, c], &[n_task]));
    }
    let mut out = Vec::with_capacity((m - n_task) * c);
    for r in n_task..m {
        let row = logits.row(r);
        let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|x| (x.as_f64() - max).exp()));
        let s: f64 = out[start..].iter().sum();
        for p in &mut out[start..] {
            *p /= s;
        }
    }
    Ok(out)
}

/// Iterate the loop one step at a time and exit once the mean grid entropy
/// drops below `policy.tau` (at or after `t_min`), otherwise at `t_max`.
/// After exit the state is frozen: padded trace entries repeat the exit step.
pub fn run_with_halting<F: Scalar>(
    model: &LoopVit<F>,
    canvas: &Canvas,
    policy: &HaltPolicy,
    opts: HaltOptions,
) -> Result<HaltOutcome> {
    policy.validate()?;
    let cfg = &model.config;
    let mut tape = Tape::new();
    let pv = model.params.bind_frozen(&mut tape);
    let layout = model.layout(canvas)?;
    let mut z = model.embed(&mut tape, &pv, canvas)?;
    let trace_opts = TraceOptions {
        logits: true,
        attention: opts.attention,
    };
    let mut trace: Vec<StepTrace> = Vec::with_capacity(policy.t_max);
    let mut exit_step = policy.t_max;
    for t in 1..=policy.t_max {
        let out = model.loop_step(&mut tape, &pv, z, t, &layout, trace_opts)?;
        z = out.state;
        let logits = tape.value(out.logits.expect("logits requested"));
        let probs = image_probs(logits, layout.n_task)?;
        let entropy = grid_entropy(&probs, cfg.n_classes, cfg.canvas_h, cfg.canvas_w)?;
        let delta = match trace.last() {
            Some(prev) => Some(compute_delta(&probs, &prev.probs)?),
            None => None,
        };
        let halted = policy.should_halt(t, entropy);
        let attention = opts.attention.then(|| {
            out.attention
                .iter()
                .map(|&a| tape.attention_probs(a).map(|p| p.iter().map(|x| x.as_f64()).collect()).unwrap_or_default())
                .collect()
        });
        let state = opts.states.then(|| tape.value(z).to_f64_vec());
        trace.push(StepTrace {
            t,
            probs,
            entropy,
            delta,
            halted,
            state,
            attention,
        });
        if halted {
            exit_step = t;
            break;
        }
    }
    if opts.fixed_length {
        let frozen = trace.last().expect("at least one step").clone();
        for t in exit_step + 1..=policy.t_max {
            trace.push(StepTrace {
                t,
                delta: Some(0.0),
                halted: true,
                ..frozen.clone()
            });
        }
    }
    let last = &trace[exit_step - 1];
    let prediction = decode_prediction(&last.probs, cfg.n_classes, cfg.canvas_h, cfg.canvas_w);
    Ok(HaltOutcome {
        prediction,
        trace,
        exit_step,
    })
}

/// Write `(task_id, outcome)` traces as CSV, one row per recorded step.
pub fn write_trace_csv<'a, W: Write>(mut w: W, rows: impl IntoIterator<Item = (&'a str, &'a HaltOutcome)>) -> Result<()> {
    let io = |e| Error::io("trace.csv", e);
    writeln!(w, "schema_version,task_id,step,entropy,delta,halted,executed_steps").map_err(io)?;
    for (task_id, outcome) in rows {
        for s in &outcome.trace {
            let delta = s.delta.map(|d| format!("{d:.9e}")).unwrap_or_default();
            writeln!(
                w,
                "{TRACE_SCHEMA_VERSION},{task_id},{},{:.9e},{delta},{},{}",
                s.t, s.entropy, s.halted, outcome.exit_step
            )
            .map_err(io)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub task_id: String,
    pub step: usize,
    pub layer: usize,
    pub heads: usize,
    pub tokens: usize,
    /// Offset into the blob, in `f32` elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionIndex {
    pub schema_version: u32,
    pub dtype: String,
    pub layout: String,
    pub records: Vec<AttentionRecord>,
}

/// Flatten every recorded attention map into a little-endian `f32` blob and
/// an index describing where each `(task, step, layer)` map lives.
pub fn export_attention<'a>(
    rows: impl IntoIterator<Item = (&'a str, &'a HaltOutcome)>,
    heads: usize,
    tokens: usize,
) -> (Vec<u8>, AttentionIndex) {
    let mut blob = Vec::new();
    let mut records = Vec::new();
    let mut offset = 0;
    for (task_id, outcome) in rows {
        // frozen padding entries would only duplicate the exit step
        for s in outcome.trace.iter().take(outcome.exit_step) {
            for (layer, map) in s.attention.iter().flatten().enumerate() {
                for &x in map {
                    blob.extend_from_slice(&(x as f32).to_le_bytes());
                }
                records.push(AttentionRecord {
                    task_id: task_id.to_string(),
                    step: s.t,
                    layer,
                    heads,
                    tokens,
                    offset,
                    len: map.len(),
                });
                offset += map.len();
            }
        }
    }
    let index = AttentionIndex {
        schema_version: TRACE_SCHEMA_VERSION,
        dtype: "f32le".into(),
        layout: "heads x query x key".into(),
        records,
    };
    (blob, index)
}
