//! Recording tape and reverse sweep.
//!
//! Every op appends one node holding its forward value. Node inputs always
//! have smaller indices, so a reverse scan over the node list is a valid
//! topological order for the backward sweep.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::activation::{sigmoid, softplus, ActivationKind};
use super::tensor::{gemm, gemm_strided, CsrMatrix, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-segment reduction used for neighbourhood aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Add,
    Max,
}

impl Aggregation {
    pub const ALL: [Aggregation; 3] = [Aggregation::Mean, Aggregation::Add, Aggregation::Max];

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Mean => "mean",
            Aggregation::Add => "add",
            Aggregation::Max => "max",
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Aggregation::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Argument(format!("unknown aggregation '{s}'")))
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMatMul(Arc<CsrMatrix>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    ScaleRows(Var, Var),
    MulBroadcast(Var, Var),
    MatVec(Var, Var),
    RowDot(Var, Var),
    Concat(Vec<Var>),
    GatherRows(Var, Arc<[usize]>),
    SegmentAggregate {
        input: Var,
        targets: Arc<[usize]>,
        mode: Aggregation,
        counts: Vec<usize>,
        argmax: Vec<usize>,
    },
    SegmentSoftmax(Var, Arc<[usize]>),
    Activation(Var, ActivationKind),
    LeakyRelu(Var, f64),
    Masked(Var, Vec<f64>),
    StraightThrough(Var, Vec<bool>),
    PassThrough(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        rows: Arc<[usize]>,
        labels: Arc<[usize]>,
        probs: Vec<f64>,
    },
    SigmoidBce {
        logits: Var,
        rows: Arc<[usize]>,
        targets: Arc<Tensor>,
    },
    Sum(Var),
    Mean(Var),
    WeightedSum(Var, Vec<f64>),
    UnitGate(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of ops for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (x, y) = (self.val(a), self.val(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.val(a).data(), self.val(b).data(), &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Constant sparse matrix times a dense var.
    pub fn sparse_matmul(&mut self, lhs: Arc<CsrMatrix>, b: Var) -> Result<Var> {
        let sb = self.shape(b);
        if sb.len() != 2 || sb[0] != lhs.cols() {
            return Err(Error::dim(
                "sparse_matmul",
                format!("[{}×{}] · {sb:?}", lhs.rows(), lhs.cols()),
            ));
        }
        let value = lhs.matmul_dense(self.val(b));
        Ok(self.push(value, Op::SpMatMul(lhs, b), &[b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary_map("add", a, b, |p, q| p + q)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary_map("sub", a, b, |p, q| p - q)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary_map("mul", a, b, |p, q| p * q)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Sums any number of same-shape vars.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Contract("add_all needs at least one input".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// `x[i, j] + bias[j]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.val(x).cols();
        if self.val(bias).len() != cols {
            return Err(Error::dim(
                "add_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let b = self.val(bias).data();
        let mut value = self.val(x).clone();
        for row in value.data_mut().chunks_mut(cols.max(1)) {
            for (v, bj) in row.iter_mut().zip(b) {
                *v += bj;
            }
        }
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.val(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    /// Multiplies every element by a single-element var.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.val(s).len() != 1 {
            return Err(Error::dim("mul_scalar", format!("scalar has shape {:?}", self.shape(s))));
        }
        let c = self.val(s).item();
        let value = self.val(x).map(|v| v * c);
        Ok(self.push(value, Op::MulScalar(x, s), &[x, s]))
    }

    /// `x[i, j] * s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let rows = self.val(x).rows();
        if self.val(s).len() != rows {
            return Err(Error::dim(
                "scale_rows",
                format!("{:?} by {:?}", self.shape(x), self.shape(s)),
            ));
        }
        let cols = self.val(x).cols();
        let sv = self.val(s).data();
        let mut value = self.val(x).clone();
        if cols > 0 {
            for (row, &c) in value.data_mut().chunks_mut(cols).zip(sv) {
                row.iter_mut().for_each(|v| *v *= c);
            }
        }
        Ok(self.push(value, Op::ScaleRows(x, s), &[x, s]))
    }

    /// `x[i, j] * v[j]`.
    pub fn mul_broadcast(&mut self, x: Var, v: Var) -> Result<Var> {
        let cols = self.val(x).cols();
        if self.val(v).len() != cols {
            return Err(Error::dim(
                "mul_broadcast",
                format!("{:?} by {:?}", self.shape(x), self.shape(v)),
            ));
        }
        let vv = self.val(v).data();
        let mut value = self.val(x).clone();
        if cols > 0 {
            for row in value.data_mut().chunks_mut(cols) {
                row.iter_mut().zip(vv).for_each(|(a, b)| *a *= b);
            }
        }
        Ok(self.push(value, Op::MulBroadcast(x, v), &[x, v]))
    }

    /// `[m×n] · [n] -> [m]`.
    pub fn matvec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (m, n) = (self.val(x).rows(), self.val(x).cols());
        if self.val(v).len() != n {
            return Err(Error::dim(
                "matvec",
                format!("{:?} · {:?}", self.shape(x), self.shape(v)),
            ));
        }
        let vv = self.val(v).data();
        let xv = self.val(x);
        let data = (0..m)
            .map(|i| xv.row(i).iter().zip(vv).map(|(a, b)| a * b).sum())
            .collect();
        Ok(self.push(Tensor::vector(data), Op::MatVec(x, v), &[x, v]))
    }

    /// Row-wise inner products of two same-shape matrices.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (x, y) = (self.val(a), self.val(b));
        let data = (0..x.rows())
            .map(|i| x.row(i).iter().zip(y.row(i)).map(|(p, q)| p * q).sum())
            .collect();
        Ok(self.push(Tensor::vector(data), Op::RowDot(a, b), &[a, b]))
    }

    /// Concatenates along the feature (column) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.val(p).rows())
            .ok_or_else(|| Error::Contract("concat needs at least one input".into()))?;
        if let Some(&bad) = parts.iter().find(|&&p| self.val(p).rows() != rows) {
            return Err(Error::dim("concat", format!("row count {:?} vs {rows}", self.shape(bad))));
        }
        let total: usize = parts.iter().map(|&p| self.val(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.val(p).row(i));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Picks rows by index; works for matrices and vectors.
    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        let xv = self.val(x);
        let rows = xv.rows();
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                op: "gather_rows",
                index: bad,
                bound: rows,
            });
        }
        let cols = xv.cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index.iter() {
            data.extend_from_slice(xv.row(i));
        }
        let mut shape = xv.shape().to_vec();
        if shape.is_empty() {
            shape.push(index.len());
        } else {
            shape[0] = index.len();
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::GatherRows(x, index), &[x]))
    }

    /// Reduces message rows into `n` node rows keyed by `targets`.
    ///
    /// Nodes without incoming messages get zeros. For `Max`, ties go to the
    /// lowest edge index.
    pub fn segment_aggregate(
        &mut self,
        messages: Var,
        targets: Arc<[usize]>,
        mode: Aggregation,
        n: usize,
    ) -> Result<Var> {
        let mv = self.val(messages);
        let (e, d) = (mv.rows(), mv.cols());
        if targets.len() != e {
            return Err(Error::dim(
                "segment_aggregate",
                format!("{e} messages but {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Index {
                op: "segment_aggregate",
                index: bad,
                bound: n,
            });
        }
        let mut counts = vec![0usize; n];
        for &t in targets.iter() {
            counts[t] += 1;
        }
        let mut out = vec![0.0; n * d];
        let mut argmax = Vec::new();
        match mode {
            Aggregation::Add | Aggregation::Mean => {
                for (k, &t) in targets.iter().enumerate() {
                    for (o, m) in out[t * d..(t + 1) * d].iter_mut().zip(mv.row(k)) {
                        *o += m;
                    }
                }
                if mode == Aggregation::Mean {
                    for (t, &c) in counts.iter().enumerate() {
                        if c > 0 {
                            let inv = c as f64;
                            out[t * d..(t + 1) * d].iter_mut().for_each(|v| *v /= inv);
                        }
                    }
                }
            }
            Aggregation::Max => {
                argmax = vec![usize::MAX; n * d];
                for (k, &t) in targets.iter().enumerate() {
                    let row = mv.row(k);
                    for j in 0..d {
                        let slot = t * d + j;
                        if argmax[slot] == usize::MAX || row[j] > out[slot] {
                            out[slot] = row[j];
                            argmax[slot] = k;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        Ok(self.push(
            value,
            Op::SegmentAggregate {
                input: messages,
                targets,
                mode,
                counts,
                argmax,
            },
            &[messages],
        ))
    }

    /// Softmax over the entries sharing a target, stabilised per segment.
    pub fn segment_softmax(&mut self, scores: Var, targets: Arc<[usize]>) -> Result<Var> {
        let sv = self.val(scores).data();
        if sv.len() != targets.len() {
            return Err(Error::dim(
                "segment_softmax",
                format!("{} scores but {} targets", sv.len(), targets.len()),
            ));
        }
        let segments = targets.iter().max().map_or(0, |m| m + 1);
        let mut max = vec![f64::NEG_INFINITY; segments];
        for (&s, &t) in sv.iter().zip(targets.iter()) {
            max[t] = max[t].max(s);
        }
        let mut sum = vec![0.0; segments];
        let mut out: Vec<f64> = sv
            .iter()
            .zip(targets.iter())
            .map(|(&s, &t)| {
                let e = (s - max[t]).exp();
                sum[t] += e;
                e
            })
            .collect();
        for (o, &t) in out.iter_mut().zip(targets.iter()) {
            *o /= sum[t];
        }
        let value = Tensor::vector(out);
        Ok(self.push(value, Op::SegmentSoftmax(scores, targets), &[scores]))
    }

    /// Softmax over all entries of a vector.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.val(x).len();
        self.segment_softmax(x, vec![0; n].into())
    }

    pub fn activation(&mut self, x: Var, kind: ActivationKind) -> Var {
        if kind == ActivationKind::None {
            return x;
        }
        let value = self.val(x).map(|v| kind.apply(v));
        self.push(value, Op::Activation(x, kind), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.val(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu(x, slope), &[x])
    }

    /// Inverted dropout; identity when `rate` is zero.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.val(x).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mut value = self.val(x).clone();
        value.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        self.push(value, Op::Masked(x, mask), &[x])
    }

    /// Records a non-differentiable transform whose backward passes the
    /// upstream gradient where `pass` is true and zero elsewhere.
    pub fn straight_through(&mut self, x: Var, values: Vec<f64>, pass: Vec<bool>) -> Result<Var> {
        let n = self.val(x).len();
        if values.len() != n || pass.len() != n {
            return Err(Error::dim("straight_through", "value/mask length differs from input"));
        }
        let value = Tensor::new(self.shape(x).to_vec(), values)?;
        Ok(self.push(value, Op::StraightThrough(x, pass), &[x]))
    }

    /// `x + c` for a constant `c`; gradient passes through unchanged.
    pub fn add_constant(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if c.len() != self.val(x).len() {
            return Err(Error::dim("add_constant", "constant length differs from input"));
        }
        let mut value = self.val(x).clone();
        value.data_mut().iter_mut().zip(c.data()).for_each(|(v, d)| *v += d);
        Ok(self.push(value, Op::PassThrough(x), &[x]))
    }

    /// Mean softmax cross-entropy over the selected rows.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Arc<[usize]>, rows: Arc<[usize]>) -> Result<Var> {
        let lv = self.val(logits);
        let (n, c) = (lv.rows(), lv.cols());
        if labels.len() != n {
            return Err(Error::dim("cross_entropy", format!("{n} rows but {} labels", labels.len())));
        }
        if rows.is_empty() {
            return Err(Error::Argument("cross_entropy over an empty row set".into()));
        }
        let mut probs = Vec::with_capacity(rows.len() * c);
        let mut loss = 0.0;
        for &r in rows.iter() {
            if r >= n || labels[r] >= c {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: r.max(labels.get(r).copied().unwrap_or(r)),
                    bound: n.max(c),
                });
            }
            let row = lv.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            loss += lse - row[labels[r]];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let value = Tensor::scalar(loss / rows.len() as f64);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                rows,
                labels,
                probs,
            },
            &[logits],
        ))
    }

    /// Mean binary cross-entropy with logits over the selected rows.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: Arc<Tensor>, rows: Arc<[usize]>) -> Result<Var> {
        let lv = self.val(logits);
        if lv.shape() != targets.shape() {
            return Err(Error::dim(
                "sigmoid_bce",
                format!("{:?} vs {:?}", lv.shape(), targets.shape()),
            ));
        }
        if rows.is_empty() {
            return Err(Error::Argument("sigmoid_bce over an empty row set".into()));
        }
        let c = lv.cols();
        let mut loss = 0.0;
        for &r in rows.iter() {
            for (&z, &t) in lv.row(r).iter().zip(targets.row(r)) {
                loss += softplus(z) - z * t;
            }
        }
        let value = Tensor::scalar(loss / (rows.len() * c) as f64);
        Ok(self.push(
            value,
            Op::SigmoidBce {
                logits,
                rows,
                targets,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.val(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.val(x).len().max(1) as f64;
        let value = Tensor::scalar(self.val(x).sum() / n);
        self.push(value, Op::Mean(x), &[x])
    }

    /// `Σ w_k · x_k` for constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.val(x).len() {
            return Err(Error::dim(
                "weighted_sum",
                format!("{} weights for {:?}", weights.len(), self.shape(x)),
            ));
        }
        let value = Tensor::scalar(self.val(x).data().iter().zip(&weights).map(|(a, b)| a * b).sum());
        Ok(self.push(value, Op::WeightedSum(x, weights), &[x]))
    }

    /// Forward value exactly 1; backward routes the gradient into `p[index]`.
    ///
    /// Equivalent to `1 + p[index] - stop_gradient(p[index])`, without the
    /// rounding that expression would introduce.
    pub fn unit_gate(&mut self, p: Var, index: usize) -> Result<Var> {
        let bound = self.val(p).len();
        if index >= bound {
            return Err(Error::Index {
                op: "unit_gate",
                index,
                bound,
            });
        }
        Ok(self.push(Tensor::scalar(1.0), Op::UnitGate(p, index), &[p]))
    }

    /// Reverse sweep from a scalar loss; leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.val(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        for (id, g) in grads.into_iter().enumerate() {
            let (Some(g), node) = (g, &mut self.nodes[id]) else { continue };
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        macro_rules! buf {
            ($v:expr) => {
                slot(grads, nodes, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if wants(*a) {
                    gemm_strided(m, n, k, g, (n as isize, 1), bv.data(), (1, n as isize), buf!(*a), true);
                }
                if wants(*b) {
                    gemm_strided(k, m, n, av.data(), (1, k as isize), g, (n as isize, 1), buf!(*b), true);
                }
            }
            Op::SpMatMul(lhs, b) => {
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("grad shape");
                let d = lhs.transpose_matmul_dense(&gt);
                add_into(buf!(*b), d.data());
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    add_into(buf!(*a), g);
                }
                if wants(*b) {
                    add_into(buf!(*b), g);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(buf!(*a), g);
                }
                if wants(*b) {
                    buf!(*b).iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let other = nodes[b.0].value.data();
                    buf!(*a).iter_mut().zip(g).zip(other).for_each(|((d, s), o)| *d += s * o);
                }
                if wants(*b) {
                    let other = nodes[a.0].value.data();
                    buf!(*b).iter_mut().zip(g).zip(other).for_each(|((d, s), o)| *d += s * o);
                }
            }
            Op::AddBias(x, bias) => {
                if wants(*x) {
                    add_into(buf!(*x), g);
                }
                if wants(*bias) {
                    let db = buf!(*bias);
                    let cols = db.len().max(1);
                    for row in g.chunks(cols) {
                        add_into(db, row);
                    }
                }
            }
            Op::Scale(x, c) => {
                buf!(*x).iter_mut().zip(g).for_each(|(d, s)| *d += s * c);
            }
            Op::MulScalar(x, s) => {
                let xv = nodes[x.0].value.data();
                if wants(*x) {
                    let c = nodes[s.0].value.item();
                    buf!(*x).iter_mut().zip(g).for_each(|(d, v)| *d += v * c);
                }
                if wants(*s) {
                    buf!(*s)[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Op::ScaleRows(x, s) => {
                let xv = &nodes[x.0].value;
                let cols = xv.cols();
                let sv = nodes[s.0].value.data();
                if wants(*x) {
                    let dx = buf!(*x);
                    for (i, &c) in sv.iter().enumerate() {
                        for j in 0..cols {
                            dx[i * cols + j] += g[i * cols + j] * c;
                        }
                    }
                }
                if wants(*s) {
                    let ds = buf!(*s);
                    for (i, d) in ds.iter_mut().enumerate() {
                        *d += (0..cols).map(|j| g[i * cols + j] * xv.data()[i * cols + j]).sum::<f64>();
                    }
                }
            }
            Op::MulBroadcast(x, v) => {
                let xv = &nodes[x.0].value;
                let cols = xv.cols();
                let vv = nodes[v.0].value.data();
                if wants(*x) && cols > 0 {
                    let dx = buf!(*x);
                    for (drow, grow) in dx.chunks_mut(cols).zip(g.chunks(cols)) {
                        for ((d, s), w) in drow.iter_mut().zip(grow).zip(vv) {
                            *d += s * w;
                        }
                    }
                }
                if wants(*v) && cols > 0 {
                    let dv = buf!(*v);
                    for (xrow, grow) in xv.data().chunks(cols).zip(g.chunks(cols)) {
                        for ((d, s), a) in dv.iter_mut().zip(grow).zip(xrow) {
                            *d += s * a;
                        }
                    }
                }
            }
            Op::MatVec(x, v) => {
                let xv = &nodes[x.0].value;
                let vv = nodes[v.0].value.data();
                let cols = xv.cols();
                if wants(*x) {
                    let dx = buf!(*x);
                    for (i, &gi) in g.iter().enumerate() {
                        for (d, w) in dx[i * cols..(i + 1) * cols].iter_mut().zip(vv) {
                            *d += gi * w;
                        }
                    }
                }
                if wants(*v) {
                    let dv = buf!(*v);
                    for (i, &gi) in g.iter().enumerate() {
                        for (d, a) in dv.iter_mut().zip(xv.row(i)) {
                            *d += gi * a;
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let cols = av.cols();
                for (target, other) in [(*a, bv), (*b, av)] {
                    if !wants(target) {
                        continue;
                    }
                    let d = buf!(target);
                    for (i, &gi) in g.iter().enumerate() {
                        for (dd, o) in d[i * cols..(i + 1) * cols].iter_mut().zip(other.row(i)) {
                            *dd += gi * o;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    if wants(p) {
                        let d = buf!(p);
                        for (i, drow) in d.chunks_mut(w.max(1)).enumerate().take(node.value.rows()) {
                            add_into(drow, &g[i * total + offset..i * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows(x, index) => {
                let cols = nodes[x.0].value.cols();
                let dx = buf!(*x);
                for (k, &i) in index.iter().enumerate() {
                    add_into(&mut dx[i * cols..(i + 1) * cols], &g[k * cols..(k + 1) * cols]);
                }
            }
            Op::SegmentAggregate {
                input,
                targets,
                mode,
                counts,
                argmax,
            } => {
                let d = node.value.cols();
                let dm = buf!(*input);
                match mode {
                    Aggregation::Add => {
                        for (k, &t) in targets.iter().enumerate() {
                            add_into(&mut dm[k * d..(k + 1) * d], &g[t * d..(t + 1) * d]);
                        }
                    }
                    Aggregation::Mean => {
                        for (k, &t) in targets.iter().enumerate() {
                            let c = counts[t] as f64;
                            for (a, b) in dm[k * d..(k + 1) * d].iter_mut().zip(&g[t * d..(t + 1) * d]) {
                                *a += b / c;
                            }
                        }
                    }
                    Aggregation::Max => {
                        for (slot, &k) in argmax.iter().enumerate() {
                            if k != usize::MAX {
                                dm[k * d + slot % d] += g[slot];
                            }
                        }
                    }
                }
            }
            Op::SegmentSoftmax(x, targets) => {
                let y = node.value.data();
                let segments = targets.iter().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; segments];
                for ((&yi, &gi), &t) in y.iter().zip(g).zip(targets.iter()) {
                    dot[t] += yi * gi;
                }
                let dx = buf!(*x);
                for (k, &t) in targets.iter().enumerate() {
                    dx[k] += y[k] * (g[k] - dot[t]);
                }
            }
            Op::Activation(x, kind) => {
                let xv = nodes[x.0].value.data();
                let y = node.value.data();
                let dx = buf!(*x);
                for k in 0..dx.len() {
                    dx[k] += g[k] * kind.derivative(xv[k], y[k]);
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xv = nodes[x.0].value.data();
                let dx = buf!(*x);
                for k in 0..dx.len() {
                    dx[k] += if xv[k] > 0.0 { g[k] } else { g[k] * slope };
                }
            }
            Op::Masked(x, mask) => {
                buf!(*x).iter_mut().zip(g).zip(mask).for_each(|((d, s), m)| *d += s * m);
            }
            Op::StraightThrough(x, pass) => {
                buf!(*x).iter_mut().zip(g).zip(pass).for_each(|((d, s), &p)| {
                    if p {
                        *d += s
                    }
                });
            }
            Op::PassThrough(x) => add_into(buf!(*x), g),
            Op::SoftmaxCrossEntropy {
                logits,
                rows,
                labels,
                probs,
            } => {
                let c = nodes[logits.0].value.cols();
                let scale = g[0] / rows.len() as f64;
                let dl = buf!(*logits);
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        let target = if labels[r] == j { 1.0 } else { 0.0 };
                        dl[r * c + j] += scale * (probs[k * c + j] - target);
                    }
                }
            }
            Op::SigmoidBce {
                logits,
                rows,
                targets,
            } => {
                let lv = &nodes[logits.0].value;
                let c = lv.cols();
                let scale = g[0] / (rows.len() * c) as f64;
                let dl = buf!(*logits);
                for &r in rows.iter() {
                    for j in 0..c {
                        let z = lv.data()[r * c + j];
                        dl[r * c + j] += scale * (sigmoid(z) - targets.data()[r * c + j]);
                    }
                }
            }
            Op::Sum(x) => buf!(*x).iter_mut().for_each(|d| *d += g[0]),
            Op::Mean(x) => {
                let dx = buf!(*x);
                let n = dx.len().max(1) as f64;
                dx.iter_mut().for_each(|d| *d += g[0] / n);
            }
            Op::WeightedSum(x, w) => {
                buf!(*x).iter_mut().zip(w).for_each(|(d, wk)| *d += g[0] * wk);
            }
            Op::UnitGate(p, index) => buf!(*p)[*index] += g[0],
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
