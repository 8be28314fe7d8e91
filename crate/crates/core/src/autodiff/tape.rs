//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every value created on a [`Tape`] is appended in evaluation order, so
//! the value list is already a topological order of the graph. Backward
//! walks it once from the loss toward the leaves.

use crate::autodiff::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Variance epsilon used by batch normalisation.
pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running statistic in the running-average update.
pub const BN_MOMENTUM: f64 = 0.9;
/// Variance floor inside the standard deviation of statistics pooling.
pub const POOL_EPSILON: f64 = 1e-10;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean/variance tracked by a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        RunningStats {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn update(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Relu { x: Var },
    Splice {
        x: Var,
        context: Vec<isize>,
        segments: usize,
    },
    Trim {
        x: Var,
        segments: usize,
        left: usize,
        right: usize,
    },
    StatsPool { x: Var, segments: usize },
    Concat { a: Var, b: Var },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Mae { pred: Var, target: Var },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum { x: Var },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records a computation so gradients can be pulled back from a scalar.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Trainable leaves receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies `v` into a new leaf that does not propagate gradients.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated into `v` by the last backward pass; zeros when
    /// `v` did not influence the loss.
    pub fn grad(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                Tensor::from_parts(shape.clone(), vec![0.0; shape.iter().product()])
            }
        }
    }

    /// Smallest distance of any recorded ReLU input or MAE residual from
    /// its kink at zero; infinity when the tape has neither.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match node.op {
                Op::Relu { x } => {
                    for v in self.value(x).data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::Mae { pred, target } => {
                    for (p, t) in self.value(pred).data().iter().zip(self.value(target).data()) {
                        margin = margin.min((p - t).abs());
                    }
                }
                _ => {}
            }
        }
        margin
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        check_finite(name, &value)?;
        let rg = self.rg(inputs);
        Ok(self.push(value, rg, op))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, ta.data(), tb.data(), 0.0, &mut out);
        let value = Tensor::from_parts(vec![m, n], out);
        self.record("matmul", value, &[a, b], Op::MatMul { a, b })
    }

    /// `x·w + b`, with the `1 × Dout` bias broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.cols() != tw.rows() {
            return Err(mismatch("linear", tx, tw));
        }
        if tb.rows() != 1 || tb.cols() != tw.cols() {
            return Err(mismatch("linear", tw, tb));
        }
        let (m, k, n) = (tx.rows(), tx.cols(), tw.cols());
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(tb.data());
        }
        gemm_nn(m, k, n, tx.data(), tw.data(), 1.0, &mut out);
        let value = Tensor::from_parts(vec![m, n], out);
        self.record("linear", value, &[x, w, b], Op::Linear { x, w, b })
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        self.record("add", value, &[a, b], Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.record("sub", value, &[a, b], Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.record("mul", value, &[a, b], Op::Mul { a, b })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        self.record("relu", value, &[x], Op::Relu { x })
    }

    /// Valid (unpadded) frame splicing.
    ///
    /// `x` holds `segments` equally long frame sequences stacked on top of
    /// each other. Within each, output row `t` is the concatenation of
    /// input rows `t + offset - min(context)` for every offset, so each
    /// segment shrinks by `max(context) - min(context)` frames.
    pub fn tdnn_splice(&mut self, x: Var, context: &[isize], segments: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, din) = (tx.rows(), tx.cols());
        let (frames, shrink) = segment_geometry("tdnn_splice", rows, segments, context)?;
        let out_frames = frames - shrink;
        let lo = *context.iter().min().unwrap();
        let width = din * context.len();
        let mut out = vec![0.0; segments * out_frames * width];
        let src = tx.data();
        for s in 0..segments {
            for t in 0..out_frames {
                let dst_row = &mut out[(s * out_frames + t) * width..(s * out_frames + t + 1) * width];
                for (j, &off) in context.iter().enumerate() {
                    let r = s * frames + t + (off - lo) as usize;
                    dst_row[j * din..(j + 1) * din].copy_from_slice(&src[r * din..(r + 1) * din]);
                }
            }
        }
        let value = Tensor::from_parts(vec![segments * out_frames, width], out);
        let op = Op::Splice {
            x,
            context: context.to_vec(),
            segments,
        };
        self.record("tdnn_splice", value, &[x], op)
    }

    /// Drops `left` leading and `right` trailing frames of every segment.
    pub fn trim_frames(&mut self, x: Var, segments: usize, left: usize, right: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, d) = (tx.rows(), tx.cols());
        if segments == 0 || rows % segments != 0 {
            return Err(Error::ShapeMismatch {
                op: "trim_frames",
                left: tx.shape().to_vec(),
                right: vec![segments],
            });
        }
        let frames = rows / segments;
        if frames <= left + right {
            return Err(Error::SegmentTooShort {
                frames,
                needed: left + right + 1,
            });
        }
        let keep = frames - left - right;
        let mut out = Vec::with_capacity(segments * keep * d);
        for s in 0..segments {
            let start = (s * frames + left) * d;
            out.extend_from_slice(&tx.data()[start..start + keep * d]);
        }
        let value = Tensor::from_parts(vec![segments * keep, d], out);
        let op = Op::Trim {
            x,
            segments,
            left,
            right,
        };
        self.record("trim_frames", value, &[x], op)
    }

    /// Per-segment mean and standard deviation, concatenated: `segments × 2D`.
    pub fn stats_pool(&mut self, x: Var, segments: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, d) = (tx.rows(), tx.cols());
        if segments == 0 || rows == 0 {
            return Err(Error::EmptySequence { op: "stats_pool" });
        }
        if rows % segments != 0 {
            return Err(Error::ShapeMismatch {
                op: "stats_pool",
                left: tx.shape().to_vec(),
                right: vec![segments],
            });
        }
        let frames = rows / segments;
        let mut out = vec![0.0; segments * 2 * d];
        for s in 0..segments {
            let block = &tx.data()[s * frames * d..(s + 1) * frames * d];
            pool_block(block, d, &mut out[s * 2 * d..(s + 1) * 2 * d]);
        }
        let value = Tensor::from_parts(vec![segments, 2 * d], out);
        self.record("stats_pool", value, &[x], Op::StatsPool { x, segments })
    }

    /// Column-wise concatenation `[a, b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(mismatch("concat", ta, tb));
        }
        let (rows, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(ta.row_slice(r));
            out.extend_from_slice(tb.row_slice(r));
        }
        let value = Tensor::from_parts(vec![rows, ca + cb], out);
        self.record("concat", value, &[a, b], Op::Concat { a, b })
    }

    /// Batch normalisation over rows.
    ///
    /// Train mode normalises with the batch statistics and folds them into
    /// `stats`; eval mode normalises with `stats` and leaves it untouched.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
    ) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, d) = (tx.rows(), tx.cols());
        for t in [tg, tb] {
            if t.rows() != 1 || t.cols() != d {
                return Err(mismatch("batch_norm", tx, t));
            }
        }
        if stats.dim() != d {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                left: tx.shape().to_vec(),
                right: vec![stats.dim()],
            });
        }
        let (mean, var) = match mode {
            Mode::Train => {
                if rows < 2 {
                    return Err(Error::DegenerateBatch { rows });
                }
                let mut mean = vec![0.0; d];
                for row in tx.data().chunks_exact(d) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; d];
                for row in tx.data().chunks_exact(d) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= rows as f64);
                (mean, var)
            }
            Mode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let mut xhat = Vec::with_capacity(rows * d);
        let mut out = Vec::with_capacity(rows * d);
        for row in tx.data().chunks_exact(d) {
            for j in 0..d {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let value = Tensor::from_parts(vec![rows, d], out);
        let batch_stats = mode == Mode::Train;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        };
        let v = self.record("batch_norm", value, &[x, gamma, beta], op)?;
        if batch_stats {
            stats.update(&mean, &var);
        }
        Ok(v)
    }

    /// Mean absolute error over all elements.
    pub fn mae_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if !tp.same_shape(tt) {
            return Err(mismatch("mae_loss", tp, tt));
        }
        let n = tp.numel() as f64;
        let loss: f64 = tp.data().iter().zip(tt.data()).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
        self.record("mae_loss", Tensor::scalar(loss), &[pred, target], Op::Mae { pred, target })
    }

    /// Mean negative log-softmax at the labelled class.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (b, c) = (tl.rows(), tl.cols());
        if labels.len() != b {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = tl.row_slice(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let value = Tensor::scalar(loss / b as f64);
        let op = Op::SoftmaxCe {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.record("softmax_cross_entropy", value, &[logits], op)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).sum();
        self.record("sum", Tensor::scalar(total), &[x], Op::Sum { x })
    }

    /// Pulls gradients back from the scalar `loss` to every value that
    /// requires them. A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g);
            // Interior gradients are released as soon as they are consumed;
            // only leaf gradients survive the pass.
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&mut self, i: usize, g: &Tensor) {
        let node = &self.nodes[i];
        let mut pending: Vec<(Var, Tensor)> = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(m, n, k, g.data(), tb.data(), 0.0, &mut ga);
                    pending.push((*a, Tensor::from_parts(vec![m, k], ga)));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(k, m, n, ta.data(), g.data(), 0.0, &mut gb);
                    pending.push((*b, Tensor::from_parts(vec![k, n], gb)));
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (m, k, n) = (tx.rows(), tx.cols(), tw.cols());
                if self.wants(*x) {
                    let mut gx = vec![0.0; m * k];
                    gemm_nt(m, n, k, g.data(), tw.data(), 0.0, &mut gx);
                    pending.push((*x, Tensor::from_parts(vec![m, k], gx)));
                }
                if self.wants(*w) {
                    let mut gw = vec![0.0; k * n];
                    gemm_tn(k, m, n, tx.data(), g.data(), 0.0, &mut gw);
                    pending.push((*w, Tensor::from_parts(vec![k, n], gw)));
                }
                if self.wants(*b) {
                    pending.push((*b, column_sums(g)));
                }
            }
            Op::Add { a, b } => {
                pending.push((*a, g.clone()));
                pending.push((*b, g.clone()));
            }
            Op::Sub { a, b } => {
                pending.push((*a, g.clone()));
                let neg = g.data().iter().map(|v| -v).collect();
                pending.push((*b, Tensor::from_parts(g.shape().to_vec(), neg)));
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let ga = g.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                let gb = g.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                pending.push((*a, Tensor::from_parts(g.shape().to_vec(), ga)));
                pending.push((*b, Tensor::from_parts(g.shape().to_vec(), gb)));
            }
            Op::Relu { x } => {
                let tx = &self.nodes[x.0].value;
                let gx = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                pending.push((*x, Tensor::from_parts(g.shape().to_vec(), gx)));
            }
            Op::Splice {
                x,
                context,
                segments,
            } => {
                let tx = &self.nodes[x.0].value;
                let (rows, din) = (tx.rows(), tx.cols());
                let frames = rows / segments;
                let lo = *context.iter().min().unwrap();
                let out_frames = g.rows() / segments;
                let width = g.cols();
                let mut gx = vec![0.0; rows * din];
                for s in 0..*segments {
                    for t in 0..out_frames {
                        let src = &g.data()[(s * out_frames + t) * width..(s * out_frames + t + 1) * width];
                        for (j, &off) in context.iter().enumerate() {
                            let r = s * frames + t + (off - lo) as usize;
                            let dst = &mut gx[r * din..(r + 1) * din];
                            for (d, v) in dst.iter_mut().zip(&src[j * din..(j + 1) * din]) {
                                *d += v;
                            }
                        }
                    }
                }
                pending.push((*x, Tensor::from_parts(vec![rows, din], gx)));
            }
            Op::Trim {
                x,
                segments,
                left,
                right,
            } => {
                let tx = &self.nodes[x.0].value;
                let (rows, d) = (tx.rows(), tx.cols());
                let frames = rows / segments;
                let keep = frames - left - right;
                let mut gx = vec![0.0; rows * d];
                for s in 0..*segments {
                    let dst = (s * frames + left) * d;
                    let src = s * keep * d;
                    gx[dst..dst + keep * d].copy_from_slice(&g.data()[src..src + keep * d]);
                }
                pending.push((*x, Tensor::from_parts(vec![rows, d], gx)));
            }
            Op::StatsPool { x, segments } => {
                let tx = &self.nodes[x.0].value;
                let out = &node.value;
                let (rows, d) = (tx.rows(), tx.cols());
                let frames = rows / segments;
                let tf = frames as f64;
                let mut gx = vec![0.0; rows * d];
                for s in 0..*segments {
                    let stats = out.row_slice(s);
                    let (mean, std) = stats.split_at(d);
                    let gs = g.row_slice(s);
                    let (g_mean, g_std) = gs.split_at(d);
                    for t in 0..frames {
                        let r = s * frames + t;
                        let xr = &tx.data()[r * d..(r + 1) * d];
                        let gr = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            gr[j] = g_mean[j] / tf + g_std[j] * (xr[j] - mean[j]) / (tf * std[j]);
                        }
                    }
                }
                pending.push((*x, Tensor::from_parts(vec![rows, d], gx)));
            }
            Op::Concat { a, b } => {
                let ca = self.nodes[a.0].value.cols();
                let rows = g.rows();
                let cb = g.cols() - ca;
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let row = g.row_slice(r);
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                pending.push((*a, Tensor::from_parts(vec![rows, ca], ga)));
                pending.push((*b, Tensor::from_parts(vec![rows, cb], gb)));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let tg = &self.nodes[gamma.0].value;
                let (rows, d) = (g.rows(), g.cols());
                let mut g_gamma = vec![0.0; d];
                let mut g_beta = vec![0.0; d];
                for (gr, hr) in g.data().chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        g_gamma[j] += gr[j] * hr[j];
                        g_beta[j] += gr[j];
                    }
                }
                if self.wants(*x) {
                    let mut gx = Vec::with_capacity(rows * d);
                    if *batch_stats {
                        let n = rows as f64;
                        for (gr, hr) in g.data().chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for j in 0..d {
                                let gamma_j = tg.data()[j];
                                let dxhat = gr[j] * gamma_j;
                                let sum_dxhat = g_beta[j] * gamma_j;
                                let sum_dxhat_xhat = g_gamma[j] * gamma_j;
                                gx.push(inv_std[j] / n * (n * dxhat - sum_dxhat - hr[j] * sum_dxhat_xhat));
                            }
                        }
                    } else {
                        for gr in g.data().chunks_exact(d) {
                            for j in 0..d {
                                gx.push(gr[j] * tg.data()[j] * inv_std[j]);
                            }
                        }
                    }
                    pending.push((*x, Tensor::from_parts(vec![rows, d], gx)));
                }
                pending.push((*gamma, Tensor::from_parts(vec![1, d], g_gamma)));
                pending.push((*beta, Tensor::from_parts(vec![1, d], g_beta)));
            }
            Op::Mae { pred, target } => {
                let (tp, tt) = (&self.nodes[pred.0].value, &self.nodes[target.0].value);
                let scale = g.item() / tp.numel() as f64;
                let gp: Vec<f64> = tp
                    .data()
                    .iter()
                    .zip(tt.data())
                    .map(|(p, t)| sign(p - t) * scale)
                    .collect();
                let gt = gp.iter().map(|v| -v).collect();
                pending.push((*pred, Tensor::from_parts(tp.shape().to_vec(), gp)));
                pending.push((*target, Tensor::from_parts(tt.shape().to_vec(), gt)));
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let tl = &self.nodes[logits.0].value;
                let (b, c) = (tl.rows(), tl.cols());
                let scale = g.item() / b as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &label) in labels.iter().enumerate() {
                    gl[r * c + label] -= scale;
                }
                pending.push((*logits, Tensor::from_parts(vec![b, c], gl)));
            }
            Op::Sum { x } => {
                let tx = &self.nodes[x.0].value;
                let gx = vec![g.item(); tx.numel()];
                pending.push((*x, Tensor::from_parts(tx.shape().to_vec(), gx)));
            }
        }
        for (v, gv) in pending {
            self.accumulate(v, gv);
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let d = g.cols();
    let mut out = vec![0.0; d];
    for row in g.data().chunks_exact(d) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::from_parts(vec![1, d], out)
}

/// Mean and standard deviation of the rows of `block` (each `d` wide),
/// written to `out` as `[mean, std]`. `out` must be zeroed.
pub(crate) fn pool_block(block: &[f64], d: usize, out: &mut [f64]) {
    let frames = block.len() / d;
    let (mean, std) = out.split_at_mut(d);
    for row in block.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= frames as f64;
    }
    for row in block.chunks_exact(d) {
        for ((sd, v), m) in std.iter_mut().zip(row).zip(mean.iter()) {
            *sd += (v - m) * (v - m);
        }
    }
    for sd in std.iter_mut() {
        *sd = (*sd / frames as f64 + POOL_EPSILON).sqrt();
    }
}

/// Frames per segment and total shrinkage for a splice over `context`.
pub(crate) fn segment_geometry(
    op: &'static str,
    rows: usize,
    segments: usize,
    context: &[isize],
) -> Result<(usize, usize)> {
    if context.is_empty() {
        return Err(Error::EmptySequence { op });
    }
    if segments == 0 || rows % segments != 0 {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![rows],
            right: vec![segments],
        });
    }
    let frames = rows / segments;
    let lo = *context.iter().min().unwrap();
    let hi = *context.iter().max().unwrap();
    let shrink = (hi - lo) as usize;
    if frames <= shrink {
        return Err(Error::SegmentTooShort {
            frames,
            needed: shrink + 1,
        });
    }
    Ok((frames, shrink))
}
