use std::f64::consts::PI;

use crate::model::LoopVitParams;
use crate::tensor::Scalar;

/// Linear warmup followed by cosine decay to `min_ratio * base`.
pub fn cosine_lr(step: usize, total: usize, warmup: usize, base: f64, min_ratio: f64) -> f64 {
    if warmup > 0 && step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup.min(step)) as f64 / span as f64).min(1.0);
    let floor = base * min_ratio;
    floor + (base - floor) * 0.5 * (1.0 + (PI * progress).cos())
}

/// Global L2 norm of all accumulated gradients.
pub fn grad_norm<F: Scalar>(params: &mut LoopVitParams<F>) -> f64 {
    params
        .values_mut()
        .into_iter()
        .filter_map(|t| t.grad())
        .flat_map(|g| g.iter().map(|x| x.as_f64() * x.as_f64()))
        .sum::<f64>()
        .sqrt()
}

/// Rescale gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<F: Scalar>(params: &mut LoopVitParams<F>, max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm > max_norm && norm.is_finite() {
        let s = F::from_f64_lossy(max_norm / norm);
        for t in params.values_mut() {
            let g: Option<Vec<F>> = t.grad().map(|g| g.iter().map(|&x| x * s).collect());
            if let Some(g) = g {
                t.zero_grad();
                t.accumulate_grad(&g).expect("same shape");
            }
        }
    }
    norm
}

/// AdamW with decoupled weight decay on matrices (rank >= 2).
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new<F: Scalar>(params: &mut LoopVitParams<F>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let sizes: Vec<usize> = params.values_mut().iter().map(|t| t.numel()).collect();
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update from the accumulated gradients. Tensors without a
    /// gradient are left untouched.
    pub fn step<F: Scalar>(&mut self, params: &mut LoopVitParams<F>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in params.values_mut().into_iter().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad().map(|g| g.to_vec()) else { continue };
            let decay = if p.shape().len() >= 2 { self.weight_decay } else { 0.0 };
            for (((x, g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64();
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps) + decay * x.as_f64();
                *x -= F::from_f64_lossy(lr * update);
            }
        }
    }
}
