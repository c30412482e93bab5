//! Slice-level numeric kernels shared by the forward and backward passes.

use super::Scalar;

/// `c (m x n) += a (m x k) * b (k x n)`, all contiguous row-major.
pub fn matmul_acc<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    F::gemm(m, k, n, F::one(), a, k, 1, b, n, 1, F::one(), c, n, 1);
}

pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = sum.recip();
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Given softmax output `y` and upstream `g`, accumulate `dx` for one row.
pub fn softmax_backward_row<F: Scalar>(y: &[F], g: &[F], dx: &mut [F]) {
    let dot: F = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(g) {
        *d += yi * (gi - dot);
    }
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub fn silu<F: Scalar>(x: F) -> F {
    x * sigmoid(x)
}

pub fn silu_grad<F: Scalar>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

/// Inverse RMS of one row: `1 / sqrt(mean(x^2) + eps)`.
pub fn inv_rms<F: Scalar>(row: &[F], eps: F) -> F {
    let n = F::from_usize(row.len()).unwrap_or_else(F::one);
    let ms = row.iter().map(|&x| x * x).sum::<F>() / n;
    (ms + eps).sqrt().recip()
}

/// Zero-padded, stride-1, depth-wise 3x3 cross-correlation on `C x H x W`.
pub fn dwconv3x3_forward<F: Scalar>(
    x: &[F],
    kernel: &[F],
    bias: &[F],
    channels: usize,
    h: usize,
    w: usize,
    out: &mut [F],
) {
    for c in 0..channels {
        let k = &kernel[c * 9..c * 9 + 9];
        let xc = &x[c * h * w..(c + 1) * h * w];
        let oc = &mut out[c * h * w..(c + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = bias[c];
                for di in 0..3 {
                    let ii = i + di;
                    if ii < 1 || ii > h {
                        continue;
                    }
                    let row = &xc[(ii - 1) * w..ii * w];
                    for dj in 0..3 {
                        let jj = j + dj;
                        if jj < 1 || jj > w {
                            continue;
                        }
                        acc += k[di * 3 + dj] * row[jj - 1];
                    }
                }
                oc[i * w + j] = acc;
            }
        }
    }
}

/// Backward of [`dwconv3x3_forward`]; each gradient slot is optional.
#[allow(clippy::too_many_arguments)]
pub fn dwconv3x3_backward<F: Scalar>(
    x: &[F],
    kernel: &[F],
    g: &[F],
    channels: usize,
    h: usize,
    w: usize,
    mut dx: Option<&mut [F]>,
    mut dk: Option<&mut [F]>,
    mut db: Option<&mut [F]>,
) {
    for c in 0..channels {
        let base = c * h * w;
        for i in 0..h {
            for j in 0..w {
                let go = g[base + i * w + j];
                if let Some(db) = db.as_deref_mut() {
                    db[c] += go;
                }
                for di in 0..3 {
                    let ii = i + di;
                    if ii < 1 || ii > h {
                        continue;
                    }
                    for dj in 0..3 {
                        let jj = j + dj;
                        if jj < 1 || jj > w {
                            continue;
                        }
                        let src = base + (ii - 1) * w + (jj - 1);
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[src] += go * kernel[c * 9 + di * 3 + dj];
                        }
                        if let Some(dk) = dk.as_deref_mut() {
                            dk[c * 9 + di * 3 + dj] += go * x[src];
                        }
                    }
                }
            }
        }
    }
}

/// Multi-head scaled dot-product attention on `M x d` inputs.
///
/// Writes the concatenated head outputs into `out` and the attention
/// probabilities (`heads x M x M`) into `probs`.
pub fn attention_forward<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    m: usize,
    d: usize,
    heads: usize,
    out: &mut [F],
    probs: &mut [F],
) {
    let dh = d / heads;
    let scale = F::from_usize(dh).unwrap().sqrt().recip();
    for h in 0..heads {
        let off = h * dh;
        let p = &mut probs[h * m * m..(h + 1) * m * m];
        // S = Q_h K_h^T
        F::gemm(m, dh, m, scale, &q[off..], d, 1, &k[off..], 1, d, F::zero(), p, m, 1);
        for row in p.chunks_mut(m) {
            softmax_in_place(row);
        }
        F::gemm(m, m, dh, F::one(), p, m, 1, &v[off..], d, 1, F::zero(), &mut out[off..], d, 1);
    }
}

/// Backward of [`attention_forward`], accumulating into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    g: &[F],
    m: usize,
    d: usize,
    heads: usize,
    dq: &mut [F],
    dk: &mut [F],
    dv: &mut [F],
) {
    let dh = d / heads;
    let scale = F::from_usize(dh).unwrap().sqrt().recip();
    let mut dp = vec![F::zero(); m * m];
    let mut ds = vec![F::zero(); m * m];
    for h in 0..heads {
        let off = h * dh;
        let p = &probs[h * m * m..(h + 1) * m * m];
        // dV_h += P^T dO_h
        F::gemm(m, m, dh, F::one(), p, 1, m, &g[off..], d, 1, F::one(), &mut dv[off..], d, 1);
        // dP = dO_h V_h^T
        F::gemm(m, dh, m, F::one(), &g[off..], d, 1, &v[off..], 1, d, F::zero(), &mut dp, m, 1);
        ds.iter_mut().for_each(|x| *x = F::zero());
        for r in 0..m {
            softmax_backward_row(&p[r * m..(r + 1) * m], &dp[r * m..(r + 1) * m], &mut ds[r * m..(r + 1) * m]);
        }
        // dQ_h += scale * dS K_h ; dK_h += scale * dS^T Q_h
        F::gemm(m, m, dh, scale, &ds, m, 1, &k[off..], d, 1, F::one(), &mut dq[off..], d, 1);
        F::gemm(m, m, dh, scale, &ds, 1, m, &q[off..], d, 1, F::one(), &mut dk[off..], d, 1);
    }
}
