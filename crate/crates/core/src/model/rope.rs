//! Axial 2-D rotary position embedding.
//!
//! Within each head of width `d_h`, the first `d_h / 2` dims rotate with the
//! row coordinate and the second `d_h / 2` with the column coordinate.
//! Consecutive dim pairs share a frequency `base^(-2i / (d_h / 2))`.

use std::rc::Rc;

use crate::tensor::Scalar;

/// Rotation angle of every dim pair of one head at `coord`.
pub fn rope_angles(head_dim: usize, coord: (usize, usize), base: f64) -> Vec<f64> {
    let axis_dims = head_dim / 2;
    let pairs_per_axis = axis_dims / 2;
    let mut out = Vec::with_capacity(head_dim / 2);
    for (pos, _) in [(coord.0, 0), (coord.1, 1)] {
        for i in 0..pairs_per_axis {
            let freq = base.powf(-2.0 * i as f64 / axis_dims as f64);
            out.push(pos as f64 * freq);
        }
    }
    out
}

/// Apply the rotation for `coord` to a single head vector.
pub fn rope<F: Scalar>(x: &[F], coord: (usize, usize), base: f64) -> Vec<F> {
    assert!(x.len().is_multiple_of(4), "head dim must be divisible by 4");
    let angles = rope_angles(x.len(), coord, base);
    let mut out = x.to_vec();
    for (p, theta) in angles.iter().enumerate() {
        let (c, s) = (F::from_f64_lossy(theta.cos()), F::from_f64_lossy(theta.sin()));
        let (a, b) = (x[2 * p], x[2 * p + 1]);
        out[2 * p] = c * a - s * b;
        out[2 * p + 1] = s * a + c * b;
    }
    out
}

/// Per-token cos/sin tables covering all heads, shape `M x (d / 2)`.
#[derive(Clone, Debug)]
pub struct RopeTables<F> {
    pub cos: Rc<Vec<F>>,
    pub sin: Rc<Vec<F>>,
}

impl<F: Scalar> RopeTables<F> {
    pub fn new(coords: &[(usize, usize)], d: usize, heads: usize, base: f64) -> Self {
        let dh = d / heads;
        let mut cos = Vec::with_capacity(coords.len() * d / 2);
        let mut sin = Vec::with_capacity(coords.len() * d / 2);
        for &coord in coords {
            let angles = rope_angles(dh, coord, base);
            for _ in 0..heads {
                for &a in &angles {
                    cos.push(F::from_f64_lossy(a.cos()));
                    sin.push(F::from_f64_lossy(a.sin()));
                }
            }
        }
        RopeTables {
            cos: Rc::new(cos),
            sin: Rc::new(sin),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_is_identity() {
        let x: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        assert_eq!(rope(&x, (0, 0), 10_000.0), x);
    }

    #[test]
    fn axes_are_separate() {
        // row coordinate only touches the first half of the head
        let x = vec![1.0f64; 8];
        let y = rope(&x, (3, 0), 10_000.0);
        assert_ne!(&y[..4], &x[..4]);
        assert_eq!(&y[4..], &x[4..]);
        let z = rope(&x, (0, 2), 10_000.0);
        assert_eq!(&z[..4], &x[..4]);
        assert_ne!(&z[4..], &x[4..]);
    }
}
