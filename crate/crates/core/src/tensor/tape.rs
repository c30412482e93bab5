use std::rc::Rc;

use super::kernels;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddRow(Var, Var),
    Silu(Var),
    SoftmaxRows(Var),
    RmsNorm { x: Var, gain: Var, eps: F },
    Transpose(Var),
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows { table: Var, idx: Vec<usize> },
    DwConv3x3 { x: Var, kernel: Var, bias: Var },
    RotatePairs { x: Var, cos: Rc<Vec<F>>, sin: Rc<Vec<F>> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<F> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<F> },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Ordered record of executed differentiable ops.
///
/// Every op appends one node; [`Tape::backward`] walks the nodes in exact
/// reverse order. A node consumed `k` times receives the sum of `k`
/// gradient contributions, which is what makes weight tying across loop
/// iterations work without special casing.
#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: &[usize], data: Vec<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        let value = Tensor::new(shape, data).expect("op produced inconsistent shape");
        self.push(value, op, needs)
    }

    /// Record an input. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor<F>) -> Var {
        let needs = tensor.requires_grad();
        self.push(tensor.detached(), Op::Leaf, needs)
    }

    /// Record an untracked constant.
    pub fn constant(&mut self, tensor: Tensor<F>) -> Var {
        self.push(tensor.detached(), Op::Leaf, false)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        kernels::matmul_acc(m, k, n, self.data(a), self.data(b), &mut out);
        Ok(self.push_op(&[m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(&shape, out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("elementwise_mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(&shape, out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let out = self.data(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(&shape, out, Op::Scale(a, s), &[a])
    }

    /// `x[M x n] + v[n]` added to every row.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.value(v).numel() != n {
            return Err(Error::dim("add_row", self.shape(x), self.shape(v)));
        }
        let vd = self.data(v);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            add_into(row, vd);
        }
        let shape = self.shape(x).to_vec();
        debug_assert_eq!(out.len(), m * n);
        Ok(self.push_op(&shape, out, Op::AddRow(x, v), &[x, v]))
    }

    /// `x W (+ bias)` with `W: in x out` and `bias: out`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| kernels::silu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(&shape, out, Op::Silu(x), &[x])
    }

    /// Softmax over the last dimension.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let n = *self.shape(x).last().ok_or_else(|| Error::contract("softmax_rows on scalar"))?;
        if n == 0 {
            return Err(Error::contract("softmax_rows needs last dimension >= 1"));
        }
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            kernels::softmax_in_place(row);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push_op(&shape, out, Op::SoftmaxRows(x), &[x]))
    }

    /// `out_i = gain_i * x_i / sqrt(mean_j(x_j^2) + eps)` per row.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: F) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.value(gain).numel() != n || n == 0 {
            return Err(Error::dim("rmsnorm", self.shape(x), self.shape(gain)));
        }
        if eps <= F::zero() {
            return Err(Error::contract("rmsnorm eps must be > 0"));
        }
        let gd = self.data(gain);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            let r = kernels::inv_rms(row, eps);
            for (o, &g) in row.iter_mut().zip(gd) {
                *o = *o * r * g;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push_op(&shape, out, Op::RmsNorm { x, gain, eps }, &[x, gain]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let xd = self.data(x);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        Ok(self.push_op(&[n, m], out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let out = self.data(x).to_vec();
        Ok(self.push_op(shape, out, Op::Reshape(x), &[x]))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start > end || end > n {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, end]));
        }
        let w = end - start;
        let xd = self.data(x);
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&xd[r * n + start..r * n + end]);
        }
        Ok(self.push_op(&[m, w], out, Op::SliceCols { x, start }, &[x]))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start > end || end > m {
            return Err(Error::dim("slice_rows", self.shape(x), &[start, end]));
        }
        let out = self.data(x)[start * n..end * n].to_vec();
        Ok(self.push_op(&[end - start, n], out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let n = self.dims2(first)?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, pn) = self.dims2(p)?;
            if pn != n {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += m;
            out.extend_from_slice(self.data(p));
        }
        Ok(self.push_op(&[rows, n], out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Embedding lookup: row `idx[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(table)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::dim("gather_rows", self.shape(table), &[bad]));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&td[i * n..(i + 1) * n]);
        }
        Ok(self.push_op(
            &[idx.len(), n],
            out,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        ))
    }

    /// Depth-wise 3x3 convolution on `C x H x W` with zero padding 1.
    pub fn dwconv3x3(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs.contains(&0) {
            return Err(Error::dim("dwconv3x3", &xs, self.shape(kernel)));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if self.shape(kernel) != [c, 3, 3] {
            return Err(Error::dim("dwconv3x3", &xs, self.shape(kernel)));
        }
        if self.value(bias).numel() != c {
            return Err(Error::dim("dwconv3x3", &xs, self.shape(bias)));
        }
        let mut out = vec![F::zero(); c * h * w];
        kernels::dwconv3x3_forward(self.data(x), self.data(kernel), self.data(bias), c, h, w, &mut out);
        Ok(self.push_op(&xs, out, Op::DwConv3x3 { x, kernel, bias }, &[x, kernel, bias]))
    }

    /// Rotate consecutive column pairs `(2p, 2p+1)` of each row by an angle
    /// given as `cos`/`sin` tables of shape `M x (n/2)`.
    pub fn rotate_pairs(&mut self, x: Var, cos: Rc<Vec<F>>, sin: Rc<Vec<F>>) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if n % 2 != 0 || cos.len() != m * n / 2 || sin.len() != cos.len() {
            return Err(Error::dim("rotate_pairs", self.shape(x), &[cos.len(), sin.len()]));
        }
        let mut out = self.data(x).to_vec();
        for (p, pair) in out.chunks_mut(2).enumerate() {
            let (c, s) = (cos[p], sin[p]);
            let (a, b) = (pair[0], pair[1]);
            pair[0] = c * a - s * b;
            pair[1] = s * a + c * b;
        }
        Ok(self.push_op(&[m, n], out, Op::RotatePairs { x, cos, sin }, &[x]))
    }

    /// Multi-head softmax attention with scale `1/sqrt(d/heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (m, d) = self.dims2(q)?;
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("hidden dim {d} not divisible by {heads} heads")));
        }
        let mut out = vec![F::zero(); m * d];
        let mut probs = vec![F::zero(); heads * m * m];
        kernels::attention_forward(self.data(q), self.data(k), self.data(v), m, d, heads, &mut out, &mut probs);
        Ok(self.push_op(&[m, d], out, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    /// Attention probabilities (`heads x M x M`) saved by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[F]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean cross-entropy over rows with a target; `None` rows are excluded.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, c) = self.dims2(logits)?;
        if targets.len() != m {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::contract("cross_entropy has no target rows"));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(Error::contract(format!("target class {bad} >= {c}")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = F::zero();
        for (row, t) in probs.chunks_mut(c).zip(targets) {
            if let Some(t) = *t {
                let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                let lse = row.iter().map(|&x| (x - max).exp()).sum::<F>().ln() + max;
                loss += lse - row[t];
                kernels::softmax_in_place(row);
            }
        }
        loss = loss / F::from_usize(count).unwrap();
        Ok(self.push_op(
            &[],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.push_op(&[], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = F::from_usize(self.value(x).numel().max(1)).unwrap();
        let s = self.data(x).iter().copied().sum::<F>() / n;
        self.push_op(&[], vec![s], Op::Mean(x), &[x])
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Grads { grads })
    }

    fn backward_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        // Accumulator for `v`, or None when `v` does not need a gradient.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.needs(v) {
                    let n = self.value(v).numel();
                    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a).unwrap();
                let n = self.dims2(*b).unwrap().1;
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(da) = acc!(*a) {
                    F::gemm(m, n, k, F::one(), g, n, 1, bd, 1, n, F::one(), da, k, 1);
                }
                if let Some(db) = acc!(*b) {
                    F::gemm(k, m, n, F::one(), ad, 1, k, g, n, 1, F::one(), db, n, 1);
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = acc!(*a) {
                    add_into(da, g);
                }
                if let Some(db) = acc!(*b) {
                    add_into(db, g);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(da) = acc!(*a) {
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(bd) {
                        *d += gi * y;
                    }
                }
                if let Some(db) = acc!(*b) {
                    for ((d, &gi), &x) in db.iter_mut().zip(g).zip(ad) {
                        *d += gi * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(da) = acc!(*a) {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi * *s;
                    }
                }
            }
            Op::AddRow(x, v) => {
                let n = self.value(*v).numel();
                if let Some(dx) = acc!(*x) {
                    add_into(dx, g);
                }
                if let Some(dv) = acc!(*v) {
                    for row in g.chunks(n.max(1)) {
                        add_into(dv, row);
                    }
                }
            }
            Op::Silu(x) => {
                let xd = self.data(*x);
                if let Some(dx) = acc!(*x) {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xd) {
                        *d += gi * kernels::silu_grad(xi);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                if let Some(dx) = acc!(*x) {
                    for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                        kernels::softmax_backward_row(yr, gr, dr);
                    }
                }
            }
            Op::RmsNorm { x, gain, eps } => {
                let xd = self.data(*x);
                let gd = self.data(*gain);
                let n = gd.len();
                let nf = F::from_usize(n).unwrap();
                let inv: Vec<F> = xd.chunks(n).map(|r| kernels::inv_rms(r, *eps)).collect();
                if let Some(dgain) = acc!(*gain) {
                    for ((xr, gr), &r) in xd.chunks(n).zip(g.chunks(n)).zip(&inv) {
                        for ((d, &xi), &gi) in dgain.iter_mut().zip(xr).zip(gr) {
                            *d += gi * xi * r;
                        }
                    }
                }
                if let Some(dx) = acc!(*x) {
                    for (((xr, gr), dr), &r) in xd.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)).zip(&inv) {
                        let dot: F = xr.iter().zip(gr).zip(gd).map(|((&xi, &gi), &wi)| xi * gi * wi).sum();
                        let coef = r * r * r * dot / nf;
                        for (((d, &xi), &gi), &wi) in dr.iter_mut().zip(xr).zip(gr).zip(gd) {
                            *d += r * wi * gi - coef * xi;
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (m, n) = self.dims2(*x).unwrap();
                if let Some(dx) = acc!(*x) {
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = acc!(*x) {
                    add_into(dx, g);
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims2(*x).unwrap();
                let w = node.value.shape()[1];
                if let Some(dx) = acc!(*x) {
                    for r in 0..m {
                        add_into(&mut dx[r * n + start..r * n + start + w], &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let n = self.dims2(*x).unwrap().1;
                if let Some(dx) = acc!(*x) {
                    add_into(&mut dx[start * n..start * n + g.len()], g);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if let Some(dp) = acc!(p) {
                        add_into(dp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::GatherRows { table, idx } => {
                let n = self.dims2(*table).unwrap().1;
                if let Some(dt) = acc!(*table) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut dt[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::DwConv3x3 { x, kernel, bias } => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let xd = self.data(*x);
                let kd = self.data(*kernel);
                let mut dx = self.needs(*x).then(|| vec![F::zero(); xd.len()]);
                let mut dk = self.needs(*kernel).then(|| vec![F::zero(); kd.len()]);
                let mut db = self.needs(*bias).then(|| vec![F::zero(); c]);
                kernels::dwconv3x3_backward(xd, kd, g, c, h, w, dx.as_deref_mut(), dk.as_deref_mut(), db.as_deref_mut());
                for (var, grad) in [(*x, dx), (*kernel, dk), (*bias, db)] {
                    if let Some(grad) = grad {
                        merge(grads, var, grad);
                    }
                }
            }
            Op::RotatePairs { x, cos, sin } => {
                if let Some(dx) = acc!(*x) {
                    for (p, (dp, gp)) in dx.chunks_mut(2).zip(g.chunks(2)).enumerate() {
                        let (c, s) = (cos[p], sin[p]);
                        dp[0] += c * gp[0] + s * gp[1];
                        dp[1] += -s * gp[0] + c * gp[1];
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (m, d) = self.dims2(*q).unwrap();
                let n = m * d;
                let mut dq = vec![F::zero(); n];
                let mut dk = vec![F::zero(); n];
                let mut dv = vec![F::zero(); n];
                kernels::attention_backward(
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    probs,
                    g,
                    m,
                    d,
                    *heads,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                for (var, grad) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.needs(var) {
                        merge(grads, var, grad);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.dims2(*logits).unwrap().1;
                let count = targets.iter().filter(|t| t.is_some()).count();
                let scale = g[0] / F::from_usize(count).unwrap();
                if let Some(dl) = acc!(*logits) {
                    for ((dr, pr), t) in dl.chunks_mut(c).zip(probs.chunks(c)).zip(targets) {
                        if let Some(t) = *t {
                            for (d, &p) in dr.iter_mut().zip(pr) {
                                *d += p * scale;
                            }
                            dr[t] -= scale;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = F::from_usize(self.value(*x).numel().max(1)).unwrap();
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
        }
    }
}

fn merge<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, grad: Vec<F>) {
    match grads[v.0].as_mut() {
        Some(existing) => add_into(existing, &grad),
        None => grads[v.0] = Some(grad),
    }
}
