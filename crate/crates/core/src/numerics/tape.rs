//! Reverse-mode differentiation over an append-only operation record.
//!
//! Every op appends one node whose inputs are earlier nodes, so the node list
//! is already in topological order and the backward sweep is a single reverse
//! pass over it.

use super::linalg::gemm;
use super::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub ksize: usize,
}

impl ConvGeom {
    fn pad(&self) -> usize {
        self.ksize / 2
    }
    fn patch(&self) -> usize {
        self.c_in * self.ksize * self.ksize
    }
    fn plane(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    BroadcastRows(Var),
    ScaleRows(Var, Var),
    Relu(Var),
    Logistic(Var),
    SoftmaxRows(Var, Option<Vec<bool>>),
    Sum(Var),
    SumRows(Var),
    MeanRows(Var),
    ConcatCols(Var, Var),
    StackRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SqDistRows(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Conv2d(Var, Var, ConvGeom),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(Var, ParamId)>,
    grad_enabled: bool,
    first_non_finite: Option<(usize, &'static str)>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.len() / t.rows())
}

impl Tape {
    /// A tape that tracks gradients for parameters and requires-grad leaves.
    pub fn new() -> Self {
        Tape {
            grad_enabled: true,
            ..Default::default()
        }
    }

    /// A forward-only tape: parameters bind as constants.
    pub fn inference() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// First op (index, name) that produced a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.first_non_finite
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Var {
        if cfg!(debug_assertions) && self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some((self.nodes.len(), name));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad() && self.grad_enabled;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Binds a parameter as a leaf; [`Tape::backward`] routes its gradient back.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let mut t = params.get(id).clone();
        t.zero_grad();
        let v = self.leaf(t);
        self.bindings.push((v, id));
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if self.value(a).len() != self.value(b).len() || (sa != sb && sa.len() == sb.len()) {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b], "matmul"))
    }

    /// Row-wise linear map: `x [n x i]` times `w [o x i]` transposed gives `[n x o]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (n, i) = shape2(tx);
        let (o, wi) = shape2(tw);
        if i != wi || tw.shape().len() != 2 {
            return Err(Error::shape("linear", tx.shape(), tw.shape()));
        }
        let mut out = vec![0.0; n * o];
        gemm(n, i, o, tx.data(), false, tw.data(), true, &mut out, 0.0);
        Ok(self.push(Tensor::from_parts(vec![n, o], out), Op::Linear(x, w), &[x, w], "linear"))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b], "add"))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b], "sub"))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b], "mul"))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(t, Op::Scale(a, c), &[a], "scale")
    }

    /// Repeats a single row `n` times.
    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Result<Var> {
        let tr = self.value(row);
        if tr.rows() != 1 {
            return Err(Error::shape("broadcast_rows", tr.shape(), &[1, tr.cols()]));
        }
        let d = tr.len();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(tr.data());
        }
        let t = Tensor::from_parts(vec![n, d], data);
        Ok(self.push(t, Op::BroadcastRows(row), &[row], "broadcast_rows"))
    }

    /// Multiplies row `r` of `m [n x d]` by `s[r]` where `s` is `[n x 1]`.
    pub fn scale_rows(&mut self, m: Var, s: Var) -> Result<Var> {
        let (tm, ts) = (self.value(m), self.value(s));
        let (n, d) = shape2(tm);
        if ts.len() != n {
            return Err(Error::shape("scale_rows", tm.shape(), ts.shape()));
        }
        let mut data = tm.data().to_vec();
        for r in 0..n {
            let c = ts.data()[r];
            data[r * d..(r + 1) * d].iter_mut().for_each(|x| *x *= c);
        }
        let t = Tensor::from_parts(tm.shape().to_vec(), data);
        Ok(self.push(t, Op::ScaleRows(m, s), &[m, s], "scale_rows"))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(t, Op::Relu(a), &[a], "relu")
    }

    pub fn logistic(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| logistic(x)).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(t, Op::Logistic(a), &[a], "logistic")
    }

    /// Row-wise softmax; a 1-D input is treated as one row.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (n, d) = shape2(ta);
        let mut data = ta.data().to_vec();
        for r in 0..n {
            softmax_in_place(&mut data[r * d..(r + 1) * d], None);
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(t, Op::SoftmaxRows(a, None), &[a], "softmax")
    }

    /// Row-wise softmax restricted to entries where `mask` is true. Rows with
    /// no admissible entry come out all zero.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        let ta = self.value(a);
        if mask.len() != ta.len() {
            return Err(Error::shape("masked_softmax_rows", ta.shape(), &[mask.len()]));
        }
        let (n, d) = shape2(ta);
        let mut data = ta.data().to_vec();
        for r in 0..n {
            softmax_in_place(&mut data[r * d..(r + 1) * d], Some(&mask[r * d..(r + 1) * d]));
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(t, Op::SoftmaxRows(a, Some(mask)), &[a], "masked_softmax"))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a], "sum")
    }

    /// Column sums: `[n x d] -> [1 x d]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = column_sums(self.value(a), 1.0);
        self.push(t, Op::SumRows(a), &[a], "sum_rows")
    }

    /// Column means: `[n x d] -> [1 x d]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.value(a).rows();
        let t = column_sums(self.value(a), 1.0 / n as f64);
        self.push(t, Op::MeanRows(a), &[a], "mean_rows")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((na, da), (nb, db)) = (shape2(ta), shape2(tb));
        if na != nb {
            return Err(Error::shape("concat_cols", ta.shape(), tb.shape()));
        }
        let mut data = Vec::with_capacity(na * (da + db));
        for r in 0..na {
            data.extend_from_slice(&ta.data()[r * da..(r + 1) * da]);
            data.extend_from_slice(&tb.data()[r * db..(r + 1) * db]);
        }
        let t = Tensor::from_parts(vec![na, da + db], data);
        Ok(self.push(t, Op::ConcatCols(a, b), &[a, b], "concat_cols"))
    }

    /// Vertically stacks rows (or row blocks) of equal width.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("stack_rows"))?;
        let d = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            let (n, dp) = shape2(tp);
            if dp != d {
                return Err(Error::shape("stack_rows", self.value(first).shape(), tp.shape()));
            }
            rows += n;
            data.extend_from_slice(tp.data());
        }
        let t = Tensor::from_parts(vec![rows, d], data);
        Ok(self.push(t, Op::StackRows(parts.to_vec()), parts, "stack_rows"))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (n, d) = shape2(ta);
        if idx.is_empty() {
            return Err(Error::Empty("gather_rows"));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::shape("gather_rows", ta.shape(), &[i]));
            }
            data.extend_from_slice(&ta.data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::from_parts(vec![idx.len(), d], data);
        Ok(self.push(t, Op::GatherRows(a, idx.to_vec()), &[a], "gather_rows"))
    }

    /// Squared Euclidean distances between every row of `a [q x d]` and every
    /// row of `b [c x d]`, giving `[q x c]`.
    pub fn sq_dist_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((q, d), (c, db)) = (shape2(ta), shape2(tb));
        if d != db {
            return Err(Error::shape("sq_dist_rows", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; q * c];
        for i in 0..q {
            let ai = &ta.data()[i * d..(i + 1) * d];
            for j in 0..c {
                let bj = &tb.data()[j * d..(j + 1) * d];
                out[i * c + j] = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
        let t = Tensor::from_parts(vec![q, c], out);
        Ok(self.push(t, Op::SqDistRows(a, b), &[a, b], "sq_dist_rows"))
    }

    /// `sum_i (a_i - b_i)^2` for two equal-length vectors.
    pub fn sq_euclid(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::shape("sq_euclid", self.value(a).shape(), self.value(b).shape()));
        }
        let d = self.sq_dist_rows(a, b)?;
        Ok(d)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (q, c) = shape2(tl);
        if targets.len() != q {
            return Err(Error::shape("cross_entropy", tl.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape("cross_entropy", tl.shape(), &[bad]));
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &tl.data()[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(&mut probs[r * c..(r + 1) * c], None);
        }
        let t = Tensor::scalar(loss / q as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(t, op, &[logits], "cross_entropy"))
    }

    /// Same-padded stride-1 convolution without bias.
    /// `x [B x C x H x W]`, `w [Co x C x k x k]`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::shape("conv2d", xs, ws));
        }
        let g = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            height: xs[2],
            width: xs[3],
            ksize: ws[2],
        };
        let mut out = vec![0.0; g.batch * g.c_out * g.plane()];
        let (xd, wd) = (tx.data(), tw.data());
        par::for_each_chunk_mut(&mut out, g.c_out * g.plane(), |b, chunk| {
            let img = &xd[b * g.c_in * g.plane()..(b + 1) * g.c_in * g.plane()];
            let col = im2col(img, &g);
            gemm(g.c_out, g.patch(), g.plane(), wd, false, &col, false, chunk, 0.0);
        });
        let t = Tensor::from_parts(vec![g.batch, g.c_out, g.height, g.width], out);
        Ok(self.push(t, Op::Conv2d(x, w, g), &[x, w], "conv2d"))
    }

    /// Batch normalization with batch statistics over `B x H x W` per channel.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let tx = self.value(x);
        let s = tx.shape().to_vec();
        if s.len() != 4 || self.value(gamma).len() != s[1] || self.value(beta).len() != s[1] {
            return Err(Error::shape("batch_norm", &s, self.value(gamma).shape()));
        }
        let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
        let m = (b * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                mean[ch] += tx.data()[base..base + plane].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                var[ch] += tx.data()[base..base + plane]
                    .iter()
                    .map(|v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<f64>();
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / m).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; tx.len()];
        let mut out = vec![0.0; tx.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                for p in base..base + plane {
                    let h = (tx.data()[p] - mean[ch]) * inv_std[ch];
                    xhat[p] = h;
                    out[p] = gd[ch] * h + bd[ch];
                }
            }
        }
        let unbiased = var.iter().map(|v| v / (m - 1.0).max(1.0)).collect();
        let stats = BatchStats { mean, var: unbiased };
        let t = Tensor::from_parts(s, out);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok((self.push(t, op, &[x, gamma, beta], "batch_norm"), stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape().to_vec();
        if s.len() != 4 || mean.len() != s[1] || var.len() != s[1] || self.value(gamma).len() != s[1] {
            return Err(Error::shape("batch_norm_eval", &s, &[mean.len()]));
        }
        let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; tx.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                for p in base..base + plane {
                    out[p] = gd[ch] * (tx.data()[p] - mean[ch]) * inv_std[ch] + bd[ch];
                }
            }
        }
        let t = Tensor::from_parts(s, out);
        let op = Op::ChannelAffine {
            x,
            gamma,
            beta,
            mean: mean.to_vec(),
            inv_std,
        };
        Ok(self.push(t, op, &[x, gamma, beta], "batch_norm_eval"))
    }

    /// 2x2 max pooling with stride 2.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape().to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::shape("max_pool2", &s, &[2, 2]));
        }
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; bc * oh * ow];
        let mut argmax = vec![0usize; bc * oh * ow];
        for p in 0..bc {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if tx.data()[idx] > tx.data()[best] {
                            best = idx;
                        }
                    }
                    let o = (p * oh + i) * ow + j;
                    out[o] = tx.data()[best];
                    argmax[o] = best;
                }
            }
        }
        let t = Tensor::from_parts(vec![s[0], s[1], oh, ow], out);
        Ok(self.push(t, Op::MaxPool2 { x, argmax }, &[x], "max_pool2"))
    }

    /// Mean over the spatial plane: `[B x C x H x W] -> [B x C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", &s, &[4]));
        }
        let plane = s[2] * s[3];
        let out = tx
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let t = Tensor::from_parts(vec![s[0], s[1]], out);
        Ok(self.push(t, Op::GlobalAvgPool(x), &[x], "global_avg_pool"))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].needs_grad {
                self.backprop_node(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Backward sweep that accumulates into the grad buffers of every bound
    /// parameter. Repeated calls accumulate.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        for &(v, id) in &self.bindings {
            if let Some(g) = grads.wrt(v) {
                params.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(grads)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.wants(v) {
                let n = self.nodes[v.0].value.len();
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(*a, &mut |ga| gemm(m, n, k, g, false, tb.data(), true, ga, 1.0));
                acc(*b, &mut |gb| gemm(k, m, n, ta.data(), true, g, false, gb, 1.0));
            }
            Op::Linear(x, w) => {
                let (tx, tw) = (val(*x), val(*w));
                let (n, i) = shape2(tx);
                let o = tw.rows();
                acc(*x, &mut |gx| gemm(n, o, i, g, false, tw.data(), false, gx, 1.0));
                acc(*w, &mut |gw| gemm(o, n, i, g, true, tx.data(), false, gw, 1.0));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g, 1.0));
                acc(*b, &mut |gb| add_into(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g, 1.0));
                acc(*b, &mut |gb| add_into(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).zip(tb.data()).for_each(|((o, g), y)| *o += g * y)
                });
                acc(*b, &mut |gb| {
                    gb.iter_mut().zip(g).zip(ta.data()).for_each(|((o, g), x)| *o += g * x)
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| add_into(ga, g, *c)),
            Op::BroadcastRows(r) => {
                let d = val(*r).len();
                acc(*r, &mut |gr| {
                    for chunk in g.chunks(d) {
                        add_into(gr, chunk, 1.0);
                    }
                });
            }
            Op::ScaleRows(m, s) => {
                let (tm, ts) = (val(*m), val(*s));
                let (n, d) = shape2(tm);
                acc(*m, &mut |gm| {
                    for r in 0..n {
                        let c = ts.data()[r];
                        for k in r * d..(r + 1) * d {
                            gm[k] += g[k] * c;
                        }
                    }
                });
                acc(*s, &mut |gs| {
                    for r in 0..n {
                        gs[r] += (r * d..(r + 1) * d).map(|k| g[k] * tm.data()[k]).sum::<f64>();
                    }
                });
            }
            Op::Relu(a) => acc(*a, &mut |ga| {
                for ((o, g), x) in ga.iter_mut().zip(g).zip(val(*a).data()) {
                    if *x > 0.0 {
                        *o += g;
                    }
                }
            }),
            Op::Logistic(a) => acc(*a, &mut |ga| {
                for ((o, g), s) in ga.iter_mut().zip(g).zip(out.data()) {
                    *o += g * s * (1.0 - s);
                }
            }),
            Op::SoftmaxRows(a, mask) => {
                let (n, d) = shape2(out);
                acc(*a, &mut |ga| {
                    for r in 0..n {
                        let y = &out.data()[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            let admissible = mask.as_ref().is_none_or(|m| m[r * d + j]);
                            if admissible {
                                ga[r * d + j] += y[j] * (gr[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::SumRows(a) | Op::MeanRows(a) => {
                let ta = val(*a);
                let (n, d) = shape2(ta);
                let c = if matches!(node.op, Op::MeanRows(_)) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                acc(*a, &mut |ga| {
                    for chunk in ga.chunks_mut(d) {
                        chunk.iter_mut().zip(g).for_each(|(o, g)| *o += c * g);
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (da, db) = (shape2(val(*a)).1, shape2(val(*b)).1);
                let n = out.rows();
                acc(*a, &mut |ga| {
                    for r in 0..n {
                        add_into(
                            &mut ga[r * da..(r + 1) * da],
                            &g[r * (da + db)..r * (da + db) + da],
                            1.0,
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..n {
                        add_into(
                            &mut gb[r * db..(r + 1) * db],
                            &g[r * (da + db) + da..(r + 1) * (da + db)],
                            1.0,
                        );
                    }
                });
            }
            Op::StackRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    acc(p, &mut |gp| add_into(gp, &g[off..off + n], 1.0));
                    off += n;
                }
            }
            Op::GatherRows(a, idx) => {
                let d = shape2(val(*a)).1;
                acc(*a, &mut |ga| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut ga[i * d..(i + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                    }
                });
            }
            Op::SqDistRows(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ((q, d), (c, _)) = (shape2(ta), shape2(tb));
                acc(*a, &mut |ga| {
                    for i in 0..q {
                        for j in 0..c {
                            let gij = 2.0 * g[i * c + j];
                            for k in 0..d {
                                ga[i * d + k] += gij * (ta.data()[i * d + k] - tb.data()[j * d + k]);
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..q {
                        for j in 0..c {
                            let gij = 2.0 * g[i * c + j];
                            for k in 0..d {
                                gb[j * d + k] -= gij * (ta.data()[i * d + k] - tb.data()[j * d + k]);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let q = targets.len();
                let c = probs.len() / q;
                let scale = g[0] / q as f64;
                acc(*logits, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Conv2d(x, w, geom) => self.conv_backward(*x, *w, *geom, g, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = out.shape();
                let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
                let m = (b * plane) as f64;
                let gd = val(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * plane;
                        for p in base..base + plane {
                            sum_g[ch] += g[p];
                            sum_gx[ch] += g[p] * xhat[p];
                        }
                    }
                }
                acc(*gamma, &mut |gg| add_into(gg, &sum_gx, 1.0));
                acc(*beta, &mut |gb| add_into(gb, &sum_g, 1.0));
                acc(*x, &mut |gx| {
                    for bi in 0..b {
                        for ch in 0..c {
                            let base = (bi * c + ch) * plane;
                            let k = gd[ch] * inv_std[ch] / m;
                            for p in base..base + plane {
                                gx[p] += k * (m * g[p] - sum_g[ch] - xhat[p] * sum_gx[ch]);
                            }
                        }
                    }
                });
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let s = out.shape();
                let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
                let (xd, gd) = (val(*x).data(), val(*gamma).data());
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * plane;
                        for p in base..base + plane {
                            sum_g[ch] += g[p];
                            sum_gx[ch] += g[p] * (xd[p] - mean[ch]) * inv_std[ch];
                        }
                    }
                }
                acc(*gamma, &mut |gg| add_into(gg, &sum_gx, 1.0));
                acc(*beta, &mut |gb| add_into(gb, &sum_g, 1.0));
                acc(*x, &mut |gx| {
                    for bi in 0..b {
                        for ch in 0..c {
                            let base = (bi * c + ch) * plane;
                            for p in base..base + plane {
                                gx[p] += g[p] * gd[ch] * inv_std[ch];
                            }
                        }
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => acc(*x, &mut |gx| {
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += g[o];
                }
            }),
            Op::GlobalAvgPool(x) => {
                let s = val(*x).shape();
                let plane = s[2] * s[3];
                acc(*x, &mut |gx| {
                    for (chunk, gi) in gx.chunks_mut(plane).zip(g) {
                        chunk.iter_mut().for_each(|o| *o += gi / plane as f64);
                    }
                });
            }
        }
    }

    fn conv_backward(&self, x: Var, w: Var, geom: ConvGeom, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (tx, tw) = (self.value(x), self.value(w));
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let img_in = geom.c_in * geom.plane();
        let img_out = geom.c_out * geom.plane();
        let per_image = par::map(geom.batch, |b| {
            let gout = &g[b * img_out..(b + 1) * img_out];
            let dw = want_w.then(|| {
                let col = im2col(&tx.data()[b * img_in..(b + 1) * img_in], &geom);
                let mut dw = vec![0.0; geom.c_out * geom.patch()];
                gemm(
                    geom.c_out,
                    geom.plane(),
                    geom.patch(),
                    gout,
                    false,
                    &col,
                    true,
                    &mut dw,
                    0.0,
                );
                dw
            });
            let dx = want_x.then(|| {
                let mut dcol = vec![0.0; geom.patch() * geom.plane()];
                gemm(
                    geom.patch(),
                    geom.c_out,
                    geom.plane(),
                    tw.data(),
                    true,
                    gout,
                    false,
                    &mut dcol,
                    0.0,
                );
                col2im(&dcol, &geom)
            });
            (dw, dx)
        });
        if want_w {
            let buf = grads[w.0].get_or_insert_with(|| vec![0.0; tw.len()]);
            for (dw, _) in &per_image {
                add_into(buf, dw.as_ref().unwrap(), 1.0);
            }
        }
        if want_x {
            let buf = grads[x.0].get_or_insert_with(|| vec![0.0; tx.len()]);
            for (b, (_, dx)) in per_image.iter().enumerate() {
                add_into(&mut buf[b * img_in..(b + 1) * img_in], dx.as_ref().unwrap(), 1.0);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += c * s);
}

fn column_sums(t: &Tensor, c: f64) -> Tensor {
    let (_, d) = shape2(t);
    let mut out = vec![0.0; d];
    for chunk in t.data().chunks(d) {
        out.iter_mut().zip(chunk).for_each(|(o, x)| *o += x);
    }
    out.iter_mut().for_each(|o| *o *= c);
    Tensor::from_parts(vec![1, d], out)
}

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax, optionally restricted to `mask`.
pub fn softmax_in_place(row: &mut [f64], mask: Option<&[bool]>) {
    let ok = |j: usize| mask.is_none_or(|m| m[j]);
    let max = (0..row.len())
        .filter(|&j| ok(j))
        .map(|j| row[j])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut total = 0.0;
    for j in 0..row.len() {
        if ok(j) {
            row[j] = (row[j] - max).exp();
            total += row[j];
        } else {
            row[j] = 0.0;
        }
    }
    row.iter_mut().for_each(|x| *x /= total);
}

fn im2col(img: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (h, w, k, pad) = (g.height, g.width, g.ksize, g.pad());
    let mut col = vec![0.0; g.patch() * g.plane()];
    for c in 0..g.c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * h * w..(row + 1) * h * w];
                for i in 0..h {
                    let si = i as isize + ki as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src = &img[c * h * w + si as usize * w..c * h * w + (si as usize + 1) * w];
                    for j in 0..w {
                        let sj = j as isize + kj as isize - pad as isize;
                        if sj >= 0 && sj < w as isize {
                            dst[i * w + j] = src[sj as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (h, w, k, pad) = (g.height, g.width, g.ksize, g.pad());
    let mut img = vec![0.0; g.c_in * h * w];
    for c in 0..g.c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * h * w..(row + 1) * h * w];
                for i in 0..h {
                    let si = i as isize + ki as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for j in 0..w {
                        let sj = j as isize + kj as isize - pad as isize;
                        if sj >= 0 && sj < w as isize {
                            img[c * h * w + si as usize * w + sj as usize] += src[i * w + j];
                        }
                    }
                }
            }
        }
    }
    img
}
