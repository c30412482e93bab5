use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::LoopVitConfig;
use crate::arc::PAIR_BINS;
use crate::error::{Error, Result};
use crate::tensor::{Grads, Scalar, Tape, Tensor, Var};

/// Parameters of one hybrid layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub attn_norm: T,
    pub ffn_norm: T,
    /// `d -> 2f`, gate half first.
    pub w1: T,
    pub b1: T,
    pub dw_kernel: T,
    pub dw_bias: T,
    /// `f -> d`
    pub w2: T,
    pub b2: T,
}

pub const LAYER_FIELDS: [&str; 12] = [
    "wq", "wk", "wv", "wo", "attn_norm", "ffn_norm", "w1", "b1", "dw_kernel", "dw_bias", "w2", "b2",
];

impl<T> Layer<T> {
    pub fn fields(&self) -> [&T; 12] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.attn_norm,
            &self.ffn_norm,
            &self.w1,
            &self.b1,
            &self.dw_kernel,
            &self.dw_bias,
            &self.w2,
            &self.b2,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut T; 12] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.attn_norm,
            &mut self.ffn_norm,
            &mut self.w1,
            &mut self.b1,
            &mut self.dw_kernel,
            &mut self.dw_bias,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    fn try_map<U>(&self, mut f: impl FnMut(&'static str, &T) -> Result<U>) -> Result<Layer<U>> {
        Ok(Layer {
            wq: f("wq", &self.wq)?,
            wk: f("wk", &self.wk)?,
            wv: f("wv", &self.wv)?,
            wo: f("wo", &self.wo)?,
            attn_norm: f("attn_norm", &self.attn_norm)?,
            ffn_norm: f("ffn_norm", &self.ffn_norm)?,
            w1: f("w1", &self.w1)?,
            b1: f("b1", &self.b1)?,
            dw_kernel: f("dw_kernel", &self.dw_kernel)?,
            dw_bias: f("dw_bias", &self.dw_bias)?,
            w2: f("w2", &self.w2)?,
            b2: f("b2", &self.b2)?,
        })
    }
}

/// Full parameter set. Instantiated with [`Tensor`] for storage and with
/// [`Var`] for the handles bound onto a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    /// `n_classes x d` lookup for image-token colors (incl. PAD).
    pub color_embed: T,
    /// `PAIR_BINS x d` projection of demo pair histograms.
    pub pair_embed: T,
    /// `n_task x d` learned task-slot embeddings.
    pub slot_embed: T,
    /// `t_train x d` step embeddings (empty in stacked mode).
    pub step_embed: T,
    pub layers: Vec<Layer<T>>,
    pub head_norm: T,
    pub head_w: T,
    pub head_b: T,
}

pub type LoopVitParams<F> = Params<Tensor<F>>;
pub type ParamVars = Params<Var>;

impl<T> Params<T> {
    /// Every tensor with its checkpoint name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("embed.color".to_string(), &self.color_embed),
            ("embed.pair".to_string(), &self.pair_embed),
            ("embed.slot".to_string(), &self.slot_embed),
            ("embed.step".to_string(), &self.step_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(l.fields()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("head.norm".into(), &self.head_norm));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![
            &mut self.color_embed,
            &mut self.pair_embed,
            &mut self.slot_embed,
            &mut self.step_embed,
        ];
        for l in &mut self.layers {
            out.extend(l.fields_mut());
        }
        out.push(&mut self.head_norm);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&str, &T) -> Result<U>) -> Result<Params<U>> {
        Ok(Params {
            color_embed: f("embed.color", &self.color_embed)?,
            pair_embed: f("embed.pair", &self.pair_embed)?,
            slot_embed: f("embed.slot", &self.slot_embed)?,
            step_embed: f("embed.step", &self.step_embed)?,
            layers: self
                .layers
                .iter()
                .map(|l| l.try_map(|n, t| f(n, t)))
                .collect::<Result<_>>()?,
            head_norm: f("head.norm", &self.head_norm)?,
            head_w: f("head.w", &self.head_w)?,
            head_b: f("head.b", &self.head_b)?,
        })
    }
}

/// Expected shape of every named parameter for `cfg`.
pub fn param_shapes(cfg: &LoopVitConfig) -> Params<Vec<usize>> {
    let (d, f, c) = (cfg.d, cfg.ffn_inner(), cfg.n_classes);
    let layer = Layer {
        wq: vec![d, d],
        wk: vec![d, d],
        wv: vec![d, d],
        wo: vec![d, d],
        attn_norm: vec![d],
        ffn_norm: vec![d],
        w1: vec![d, 2 * f],
        b1: vec![2 * f],
        dw_kernel: vec![f, 3, 3],
        dw_bias: vec![f],
        w2: vec![f, d],
        b2: vec![d],
    };
    Params {
        color_embed: vec![c, d],
        pair_embed: vec![PAIR_BINS, d],
        slot_embed: vec![cfg.n_task_tokens, d],
        step_embed: vec![cfg.step_rows(), d],
        layers: vec![layer; cfg.blocks],
        head_norm: vec![d],
        head_w: vec![d, c],
        head_b: vec![c],
    }
}

/// Scalar parameter count as a pure function of the configuration.
pub fn param_count(cfg: &LoopVitConfig) -> usize {
    param_shapes(cfg)
        .named()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

const INIT_STD: f64 = 0.02;

fn trunc_normal<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<F> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::from_fn(shape, |_| loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 {
            break F::from_f64_lossy(x * std);
        }
    })
}

impl<F: Scalar> LoopVitParams<F> {
    /// Seeded initialization: truncated normal (std 0.02) for projections and
    /// embeddings, ones for norm gains, zeros for biases and step embeddings,
    /// identity-centered depth-wise kernels with 0.02 noise.
    pub fn init(cfg: &LoopVitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let shapes = param_shapes(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = shapes.try_map(|name, shape| {
            let leaf = name.rsplit('.').next().unwrap_or(name);
            let t = match leaf {
                "attn_norm" | "ffn_norm" | "norm" => Tensor::ones(shape),
                "b1" | "b2" | "dw_bias" | "b" | "step" => Tensor::zeros(shape),
                "dw_kernel" => {
                    let mut t: Tensor<F> = Tensor::from_fn(shape, |_| F::from_f64_lossy(INIT_STD * (rng.random::<f64>() * 2.0 - 1.0)));
                    for ch in 0..shape[0] {
                        t.data_mut()[ch * 9 + 4] += F::one();
                    }
                    t
                }
                _ => trunc_normal(&mut rng, shape, INIT_STD),
            };
            Ok(t.with_grad())
        })?;
        Ok(params)
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Register every tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<F>) -> ParamVars {
        self.try_map(|_, t| Ok(tape.leaf(t))).expect("binding cannot fail")
    }

    /// Register every tensor as an untracked constant.
    pub fn bind_frozen(&self, tape: &mut Tape<F>) -> ParamVars {
        self.try_map(|_, t| Ok(tape.constant(t.detached()))).expect("binding cannot fail")
    }

    /// Add tape gradients into each tensor's accumulator.
    pub fn accumulate(&mut self, vars: &ParamVars, grads: &Grads<F>) -> Result<()> {
        let handles: Vec<Var> = vars.named().into_iter().map(|(_, v)| *v).collect();
        for (t, v) in self.values_mut().into_iter().zip(handles) {
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for t in self.values_mut() {
            t.zero_grad();
        }
    }

    /// Check every tensor against the shapes implied by `cfg`.
    pub fn check_shapes(&self, cfg: &LoopVitConfig) -> Result<()> {
        let expected = param_shapes(cfg);
        let exp = expected.named();
        let got = self.named();
        if exp.len() != got.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                exp.len(),
                got.len()
            )));
        }
        for ((name, shape), (_, t)) in exp.iter().zip(got) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, config implies {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> LoopVitParams<G> {
        self.try_map(|_, t| Ok(t.cast::<G>())).expect("cast cannot fail")
    }
}
