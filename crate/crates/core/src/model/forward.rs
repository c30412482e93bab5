//! Embedding, hybrid layer, weight-tied loop, stacked baseline and head.
//!
//! All forward functions record onto a caller-owned [`Tape`] so the same
//! code path serves training (full backpropagation through the unrolled
//! loop) and inference.

use super::config::{LoopVitConfig, Mode};
use super::params::{Layer, LoopVitParams, ParamVars};
use super::rope::RopeTables;
use crate::arc::{Canvas, TokenKind, PAIR_BINS};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// A model: configuration plus parameters.
#[derive(Clone, Debug)]
pub struct LoopVit<F> {
    pub config: LoopVitConfig,
    pub params: LoopVitParams<F>,
}

/// Token layout derived from a canvas, shared by every layer application.
#[derive(Clone, Debug)]
pub struct Layout<F> {
    pub n_task: usize,
    pub height: usize,
    pub width: usize,
    pub rope: RopeTables<F>,
}

impl<F: Scalar> Layout<F> {
    /// Checks that TASK tokens come first and IMAGE tokens form a dense
    /// row-major `height x width` block.
    pub fn from_canvas(canvas: &Canvas, cfg: &LoopVitConfig) -> Result<Self> {
        let cc = canvas.config;
        if cc != cfg.canvas() {
            return Err(Error::contract(format!(
                "canvas {}x{} with {} task tokens does not match model config {}x{} with {}",
                cc.height, cc.width, cc.n_task_tokens, cfg.canvas_h, cfg.canvas_w, cfg.n_task_tokens
            )));
        }
        let m = cc.tokens();
        if canvas.tokens.len() != m || canvas.kinds.len() != m || canvas.coords.len() != m {
            return Err(Error::dim("canvas", &[m], &[canvas.tokens.len(), canvas.kinds.len(), canvas.coords.len()]));
        }
        for (i, (&kind, &coord)) in canvas.kinds.iter().zip(&canvas.coords).enumerate() {
            let ok = if i < cc.n_task_tokens {
                kind == TokenKind::Task
            } else {
                let j = i - cc.n_task_tokens;
                kind == TokenKind::Image && coord == (j / cc.width, j % cc.width)
            };
            if !ok {
                return Err(Error::contract(format!("token {i} breaks the TASK + dense IMAGE layout")));
            }
        }
        if canvas.slot_features.len() != cc.n_task_tokens * PAIR_BINS {
            return Err(Error::dim("slot_features", &[cc.n_task_tokens, PAIR_BINS], &[canvas.slot_features.len()]));
        }
        Ok(Layout {
            n_task: cc.n_task_tokens,
            height: cc.height,
            width: cc.width,
            rope: RopeTables::new(&canvas.coords, cfg.d, cfg.heads, cfg.rope_base),
        })
    }

    pub fn tokens(&self) -> usize {
        self.n_task + self.height * self.width
    }
}

/// What to record for each loop iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TraceOptions {
    /// Compute head logits at every step (not only the last).
    pub logits: bool,
    /// Keep handles to per-layer attention nodes.
    pub attention: bool,
}

/// Per-iteration handles into the tape.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// 1-based step index.
    pub t: usize,
    pub state: Var,
    pub logits: Option<Var>,
    /// One attention node per layer; see [`Tape::attention_probs`].
    pub attention: Vec<Var>,
}

impl<F: Scalar> LoopVit<F> {
    pub fn new(config: LoopVitConfig, seed: u64) -> Result<Self> {
        let params = LoopVitParams::init(&config, seed)?;
        Ok(LoopVit { config, params })
    }

    pub fn from_parts(config: LoopVitConfig, params: LoopVitParams<F>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(LoopVit { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn layout(&self, canvas: &Canvas) -> Result<Layout<F>> {
        Layout::from_canvas(canvas, &self.config)
    }

    /// `z_0`: TASK rows are slot embeddings plus the projected demo pair
    /// histogram; IMAGE rows are color-embedding lookups.
    pub fn embed(&self, tape: &mut Tape<F>, pv: &ParamVars, canvas: &Canvas) -> Result<Var> {
        let layout = self.layout(canvas)?;
        let n_task = layout.n_task;
        let colors = canvas.image_tokens();
        if let Some(&bad) = colors.iter().find(|&&c| c >= self.config.n_classes) {
            return Err(Error::dim("embed", &[self.config.n_classes], &[bad]));
        }
        let image = tape.gather_rows(pv.color_embed, colors)?;
        if n_task == 0 {
            return Ok(image);
        }
        let feats = Tensor::from_f64(&[n_task, PAIR_BINS], &canvas.slot_features)?;
        let feats = tape.constant(feats);
        let summary = tape.matmul(feats, pv.pair_embed)?;
        let task = tape.add(summary, pv.slot_embed)?;
        tape.concat_rows(&[task, image])
    }

    fn step_row(&self, t: usize) -> Result<usize> {
        if t < 1 {
            return Err(Error::contract("step index must be >= 1"));
        }
        if self.config.mode != Mode::Looped {
            return Err(Error::contract("step embeddings exist only in looped mode"));
        }
        Ok(t.min(self.config.t_train) - 1)
    }

    /// `e_t`, clamped to `e_{T_train}` beyond the training horizon.
    pub fn step_embedding(&self, tape: &mut Tape<F>, pv: &ParamVars, t: usize) -> Result<Var> {
        let r = self.step_row(t)?;
        tape.slice_rows(pv.step_embed, r, r + 1)
    }

    /// Value of `e_t` without touching a tape.
    pub fn step_embedding_values(&self, t: usize) -> Result<Vec<F>> {
        let r = self.step_row(t)?;
        Ok(self.params.step_embed.row(r).to_vec())
    }

    /// Multi-head self-attention with axial RoPE on queries and keys.
    /// Returns the output and the attention node.
    pub fn mhsa(&self, tape: &mut Tape<F>, layer: &Layer<Var>, z: Var, layout: &Layout<F>) -> Result<(Var, Var)> {
        let q = tape.matmul(z, layer.wq)?;
        let k = tape.matmul(z, layer.wk)?;
        let v = tape.matmul(z, layer.wv)?;
        let q = tape.rotate_pairs(q, layout.rope.cos.clone(), layout.rope.sin.clone())?;
        let k = tape.rotate_pairs(k, layout.rope.cos.clone(), layout.rope.sin.clone())?;
        let attn = tape.attention(q, k, v, self.config.heads)?;
        Ok((tape.matmul(attn, layer.wo)?, attn))
    }

    /// Gated FFN whose gate passes IMAGE tokens through a depth-wise 3x3
    /// convolution while TASK tokens bypass it.
    pub fn convglu(&self, tape: &mut Tape<F>, layer: &Layer<Var>, z: Var, layout: &Layout<F>) -> Result<Var> {
        let f = self.config.ffn_inner();
        let h = tape.linear(z, layer.w1, Some(layer.b1))?;
        let gate = self.gate_from_hidden(tape, layer, h, layout)?;
        let val = tape.slice_cols(h, f, 2 * f)?;
        let act = tape.silu(gate);
        let mixed = tape.mul(act, val)?;
        tape.linear(mixed, layer.w2, Some(layer.b2))
    }

    /// The reassembled gate `[G_task; DWConv(G_img)]` before activation.
    pub fn conv_gate(&self, tape: &mut Tape<F>, layer: &Layer<Var>, z: Var, layout: &Layout<F>) -> Result<Var> {
        let h = tape.linear(z, layer.w1, Some(layer.b1))?;
        self.gate_from_hidden(tape, layer, h, layout)
    }

    fn gate_from_hidden(&self, tape: &mut Tape<F>, layer: &Layer<Var>, h: Var, layout: &Layout<F>) -> Result<Var> {
        let f = self.config.ffn_inner();
        let m = layout.tokens();
        let (hh, ww) = (layout.height, layout.width);
        let gate = tape.slice_cols(h, 0, f)?;
        let g_img = tape.slice_rows(gate, layout.n_task, m)?;
        let chw = tape.transpose(g_img)?;
        let chw = tape.reshape(chw, &[f, hh, ww])?;
        let conv = tape.dwconv3x3(chw, layer.dw_kernel, layer.dw_bias)?;
        let conv = tape.reshape(conv, &[f, hh * ww])?;
        let g_img = tape.transpose(conv)?;
        if layout.n_task == 0 {
            return Ok(g_img);
        }
        let g_task = tape.slice_rows(gate, 0, layout.n_task)?;
        tape.concat_rows(&[g_task, g_img])
    }

    /// Pre-norm residual layer: attention then ConvGLU.
    pub fn layer_forward(&self, tape: &mut Tape<F>, layer: &Layer<Var>, z: Var, layout: &Layout<F>) -> Result<(Var, Var)> {
        let eps = F::from_f64_lossy(self.config.norm_eps);
        let n1 = tape.rmsnorm(z, layer.attn_norm, eps)?;
        let (a, attn) = self.mhsa(tape, layer, n1, layout)?;
        let z1 = tape.add(z, a)?;
        let n2 = tape.rmsnorm(z1, layer.ffn_norm, eps)?;
        let ff = self.convglu(tape, layer, n2, layout)?;
        Ok((tape.add(z1, ff)?, attn))
    }

    /// The core trunk: every layer once, in order.
    pub fn trunk(&self, tape: &mut Tape<F>, pv: &ParamVars, z: Var, layout: &Layout<F>) -> Result<(Var, Vec<Var>)> {
        let mut z = z;
        let mut attn = Vec::with_capacity(pv.layers.len());
        for layer in &pv.layers {
            let (next, a) = self.layer_forward(tape, layer, z, layout)?;
            z = next;
            attn.push(a);
        }
        Ok((z, attn))
    }

    /// Final RMSNorm and projection to per-token class logits.
    pub fn head(&self, tape: &mut Tape<F>, pv: &ParamVars, z: Var) -> Result<Var> {
        let n = tape.rmsnorm(z, pv.head_norm, F::from_f64_lossy(self.config.norm_eps))?;
        tape.linear(n, pv.head_w, Some(pv.head_b))
    }

    /// One iteration: `z_t = trunk(z_{t-1} + e_t)`.
    pub fn loop_step(
        &self,
        tape: &mut Tape<F>,
        pv: &ParamVars,
        z: Var,
        t: usize,
        layout: &Layout<F>,
        opts: TraceOptions,
    ) -> Result<StepOutput> {
        if self.config.mode != Mode::Looped {
            return Err(Error::contract("loop_forward requires LOOPED mode"));
        }
        let e = self.step_embedding(tape, pv, t)?;
        let zin = tape.add_row(z, e)?;
        let (state, attn) = self.trunk(tape, pv, zin, layout)?;
        let logits = if opts.logits {
            Some(self.head(tape, pv, state)?)
        } else {
            None
        };
        Ok(StepOutput {
            t,
            state,
            logits,
            attention: if opts.attention { attn } else { Vec::new() },
        })
    }

    /// Unroll the tied trunk for `steps` iterations. The last step always
    /// carries logits.
    pub fn loop_forward(
        &self,
        tape: &mut Tape<F>,
        pv: &ParamVars,
        z0: Var,
        steps: usize,
        layout: &Layout<F>,
        opts: TraceOptions,
    ) -> Result<(Var, Vec<StepOutput>)> {
        if steps == 0 {
            return Err(Error::contract("loop_forward needs T >= 1"));
        }
        let mut z = z0;
        let mut trace = Vec::with_capacity(steps);
        for t in 1..=steps {
            let last = t == steps;
            let o = TraceOptions {
                logits: opts.logits || last,
                ..opts
            };
            let out = self.loop_step(tape, pv, z, t, layout, o)?;
            z = out.state;
            trace.push(out);
        }
        Ok((z, trace))
    }

    /// Non-looped baseline: each of the distinct layers once, no step
    /// embeddings.
    pub fn stacked_forward(&self, tape: &mut Tape<F>, pv: &ParamVars, z0: Var, layout: &Layout<F>) -> Result<Var> {
        if self.config.mode != Mode::Stacked {
            return Err(Error::contract("stacked_forward requires STACKED mode"));
        }
        Ok(self.trunk(tape, pv, z0, layout)?.0)
    }

    /// Final logits for `canvas` after the configured depth (`t_train` when
    /// looped), without gradient tracking.
    pub fn predict_logits(&self, canvas: &Canvas, steps: usize) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let pv = self.params.bind_frozen(&mut tape);
        let layout = self.layout(canvas)?;
        let z0 = self.embed(&mut tape, &pv, canvas)?;
        let z = match self.config.mode {
            Mode::Looped => self.loop_forward(&mut tape, &pv, z0, steps, &layout, TraceOptions::default())?.0,
            Mode::Stacked => self.stacked_forward(&mut tape, &pv, z0, &layout)?,
        };
        let logits = self.head(&mut tape, &pv, z)?;
        Ok(tape.value(logits).detached())
    }
}
