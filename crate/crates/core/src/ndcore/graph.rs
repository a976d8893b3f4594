//! Dynamically recorded computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value, so nodes are in
//! topological order by construction. Parameter leaves carry a slot index;
//! [`Graph::backward`] returns one gradient per slot, shaped like the value
//! that was registered for it.

use std::borrow::Cow;

use super::gemm::gemm;
use super::{NdError, Tensor};

/// Lower and upper clamp applied to predictions before the log in BCE.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    ScaleBy(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Elu(NodeId),
    EluPlusOne(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    Sqrt(NodeId),
    GatherRows(NodeId, Vec<usize>),
    TileRows(NodeId, usize),
    Concat(NodeId, NodeId, usize),
    PairConcat(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        filters: NodeId,
        bias: NodeId,
        // im2col matrix; `None` for 1×1 kernels, where the input itself is used.
        cols: Option<Vec<f64>>,
    },
    Reshape(NodeId),
    TransposeLast2(NodeId),
    PairwiseDot(NodeId, NodeId),
    RowDot(NodeId, NodeId),
    MeanLast(NodeId),
    Sum(NodeId),
    BceLoss(NodeId, Vec<f64>),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
    slot: Option<usize>,
}

/// Gradients of a scalar loss, indexed by parameter slot.
#[derive(Debug, Default)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, slot: usize) -> Option<&Tensor> {
        self.slots.get(slot).and_then(Option::as_ref)
    }

    /// Takes every slot's gradient in order; slots that never appeared in the
    /// graph are `None`.
    pub fn into_slots(self) -> Vec<Option<Tensor>> {
        self.slots
    }
}

#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn elu_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// `elu(x) + 1` without the cancellation that rounds it to zero for very
/// negative `x`.
pub fn elu_plus_one_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid_scalar(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
            slot: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf. Its gradient is reported under `slot`.
    pub fn param(&mut self, slot: usize, value: &'p Tensor) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad: true,
            slot: Some(slot),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad: false,
            slot: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant_ref(&mut self, value: &'p Tensor) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad: false,
            slot: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), NdError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NdError::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v = self.value(x).map(f);
        self.push(v, op, &[x])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NdError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NdError::shape("matmul", format!("{sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NdError> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NdError> {
        self.same_shape("sub", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NdError> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// Adds `bias` along the last axis. A one-element bias broadcasts to every
    /// entry.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, NdError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let last = tx.shape().last().copied().unwrap_or(1);
        let nb = tb.len();
        if tb.rank() > 1 || (nb != last && nb != 1) {
            return Err(NdError::shape(
                "add_bias",
                format!("bias {:?} for input {:?}", tb.shape(), tx.shape()),
            ));
        }
        let b = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % nb])
            .collect();
        let v = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(v, Op::AddBias(x, bias), &[x, bias]))
    }

    /// Multiplies every entry by a one-element (trainable) scale.
    pub fn scale_by(&mut self, x: NodeId, scale: NodeId) -> Result<NodeId, NdError> {
        let s = self.value(scale).item()?;
        let v = self.value(x).map(|v| v * s);
        Ok(self.push(v, Op::ScaleBy(x, scale), &[x, scale]))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// `x` for `x ≥ 0`, `exp(x) − 1` otherwise. The derivative at 0 is 1.
    pub fn elu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, elu_scalar, Op::Elu(x))
    }

    pub fn elu_plus_one(&mut self, x: NodeId) -> NodeId {
        self.unary(x, elu_plus_one_scalar, Op::EluPlusOne(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, sigmoid_scalar, Op::Sigmoid(x))
    }

    pub fn log_sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, log_sigmoid_scalar, Op::LogSigmoid(x))
    }

    /// Elementwise square root; every input entry must be strictly positive.
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId, NdError> {
        if let Some(bad) = self.value(x).data().iter().find(|v| v.is_nan() || **v <= 0.0) {
            return Err(NdError::invalid(format!(
                "sqrt of non-positive value {bad}"
            )));
        }
        Ok(self.unary(x, f64::sqrt, Op::Sqrt(x)))
    }

    /// Selects rows of a rank-2 table.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, NdError> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(NdError::shape(
                "gather_rows",
                format!("table must be rank 2, got {:?}", t.shape()),
            ));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(NdError::invalid(format!(
                    "row id {id} out of range for {rows} rows"
                )));
            }
            out.extend_from_slice(&t.data()[id * cols..(id + 1) * cols]);
        }
        let v = Tensor::new(vec![ids.len(), cols], out)?;
        Ok(self.push(v, Op::GatherRows(table, ids.to_vec()), &[table]))
    }

    /// `[B×D] → [B×k×D]`, repeating each row `k` times.
    pub fn tile_rows(&mut self, x: NodeId, k: usize) -> Result<NodeId, NdError> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(NdError::shape(
                "tile_rows",
                format!("expected rank 2, got {:?}", t.shape()),
            ));
        }
        let (b, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(b * k * d);
        for row in t.data().chunks(d.max(1)).take(b) {
            for _ in 0..k {
                out.extend_from_slice(row);
            }
        }
        let v = Tensor::new(vec![b, k, d], out)?;
        Ok(self.push(v, Op::TileRows(x, k), &[x]))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId, NdError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let v = concat_tensors(ta, tb, axis)?;
        Ok(self.push(v, Op::Concat(a, b, axis), &[a, b]))
    }

    /// `a: [B×K×Da]`, `b: [B×J×Db]` → `[B×K×J×(Da+Db)]` with cell `(i, j)`
    /// holding `a[i] ⧺ b[j]`.
    pub fn pair_concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NdError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(NdError::shape("pair_concat", format!("{sa:?} with {sb:?}")));
        }
        let (batch, ka, da, kb, db) = (sa[0], sa[1], sa[2], sb[1], sb[2]);
        let width = da + db;
        let mut out = vec![0.0; batch * ka * kb * width];
        for n in 0..batch {
            for i in 0..ka {
                let ra = &ta.data()[(n * ka + i) * da..(n * ka + i + 1) * da];
                for j in 0..kb {
                    let rb = &tb.data()[(n * kb + j) * db..(n * kb + j + 1) * db];
                    let base = ((n * ka + i) * kb + j) * width;
                    out[base..base + da].copy_from_slice(ra);
                    out[base + da..base + width].copy_from_slice(rb);
                }
            }
        }
        let v = Tensor::new(vec![batch, ka, kb, width], out)?;
        Ok(self.push(v, Op::PairConcat(a, b), &[a, b]))
    }

    /// Valid (no padding), stride-1 cross-correlation plus per-filter bias.
    ///
    /// `input` is `[H×W×C]` or batched `[B×H×W×C]`; `filters` is
    /// `[kh×kw×C×T]`; `bias` is `[T]`. The output keeps the input's rank.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        filters: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, NdError> {
        let (ti, tf, tb) = (self.value(input), self.value(filters), self.value(bias));
        let geo = ConvGeometry::new(ti.shape(), tf.shape(), tb.shape())?;
        let cols = if geo.is_pointwise() {
            None
        } else {
            Some(geo.im2col(ti.data()))
        };
        let lhs = cols.as_deref().unwrap_or(ti.data());
        let rows = geo.out_rows();
        let mut out = vec![0.0; rows * geo.filters];
        for row in out.chunks_mut(geo.filters) {
            row.copy_from_slice(tb.data());
        }
        gemm(
            rows,
            geo.patch(),
            geo.filters,
            lhs,
            false,
            tf.data(),
            false,
            1.0,
            &mut out,
        );
        let v = Tensor::new(geo.out_shape(ti.rank()), out)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                filters,
                bias,
                cols,
            },
            &[input, filters, bias],
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, NdError> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: NodeId) -> Result<NodeId, NdError> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() < 2 {
            return Err(NdError::shape(
                "transpose_last2",
                format!("need rank ≥ 2, got {s:?}"),
            ));
        }
        let (p, q) = (s[s.len() - 2], s[s.len() - 1]);
        let out = transpose_blocks(t.data(), p, q);
        let mut shape = s.to_vec();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::TransposeLast2(x), &[x]))
    }

    /// `a: [B×K×D]`, `b: [B×J×D]` → `[B×K×J]` of dot products `a[i]·b[j]`.
    pub fn pairwise_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NdError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(NdError::shape("pairwise_dot", format!("{sa:?} with {sb:?}")));
        }
        let (batch, ka, kb, d) = (sa[0], sa[1], sb[1], sa[2]);
        let mut out = vec![0.0; batch * ka * kb];
        for n in 0..batch {
            gemm(
                ka,
                d,
                kb,
                &ta.data()[n * ka * d..(n + 1) * ka * d],
                false,
                &tb.data()[n * kb * d..(n + 1) * kb * d],
                true,
                0.0,
                &mut out[n * ka * kb..(n + 1) * ka * kb],
            );
        }
        let v = Tensor::new(vec![batch, ka, kb], out)?;
        Ok(self.push(v, Op::PairwiseDot(a, b), &[a, b]))
    }

    /// `[B×D]`, `[B×D]` → `[B]` of row-wise dot products.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NdError> {
        self.same_shape("row_dot", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 {
            return Err(NdError::shape(
                "row_dot",
                format!("expected rank 2, got {:?}", ta.shape()),
            ));
        }
        let d = ta.shape()[1];
        let out = ta
            .data()
            .chunks(d.max(1))
            .zip(tb.data().chunks(d.max(1)))
            .take(ta.shape()[0])
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let v = Tensor::new(vec![ta.shape()[0]], out)?;
        Ok(self.push(v, Op::RowDot(a, b), &[a, b]))
    }

    /// Mean over the last axis.
    pub fn mean_last(&mut self, x: NodeId) -> Result<NodeId, NdError> {
        let t = self.value(x);
        let s = t.shape();
        let Some((&n, outer)) = s.split_last() else {
            return Err(NdError::shape("mean_last", "rank-0 input".to_string()));
        };
        if n == 0 {
            return Err(NdError::invalid("mean over an empty axis".to_string()));
        }
        let out = t.data().chunks(n).map(|c| c.iter().sum::<f64>() / n as f64).collect();
        let v = Tensor::new(outer.to_vec(), out)?;
        Ok(self.push(v, Op::MeanLast(x), &[x]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Summed binary cross-entropy of predictions against 0/1 labels.
    ///
    /// Predictions are clamped to `[BCE_CLAMP, 1 − BCE_CLAMP]` before the log.
    /// The gradient is taken at the clamped value even when the clamp is
    /// active, so saturated wrong predictions still receive a signal.
    pub fn bce_loss(&mut self, pred: NodeId, labels: &[f64]) -> Result<NodeId, NdError> {
        let p = self.value(pred);
        if p.len() != labels.len() {
            return Err(NdError::shape(
                "bce_loss",
                format!("{} predictions vs {} labels", p.len(), labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|y| **y != 0.0 && **y != 1.0) {
            return Err(NdError::invalid(format!("label {bad} is not 0 or 1")));
        }
        let loss = p
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLoss(pred, labels.to_vec()),
            &[pred],
        ))
    }

    /// Back-propagates from a scalar `loss`, returning a gradient for every
    /// parameter slot registered in this graph (zeros when unreachable).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NdError> {
        if self.value(loss).len() != 1 {
            return Err(NdError::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
        }

        let mut slots: Vec<Option<Tensor>> = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            let Some(slot) = node.slot else { continue };
            if slots.len() <= slot {
                slots.resize(slot + 1, None);
            }
            let shape = node.value.shape();
            let g = grads[idx].take().unwrap_or_else(|| vec![0.0; numel(shape)]);
            match &mut slots[slot] {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                empty => *empty = Some(Tensor::new(shape.to_vec(), g)?),
            }
        }
        Ok(Gradients { slots })
    }

    fn propagate(
        &self,
        idx: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<(), NdError> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let wants = |id: &NodeId| self.nodes[id.0].requires_grad;
        let mut acc = |id: NodeId, contrib: Vec<f64>| accumulate(grads, id, contrib);

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, tb.data(), true, 0.0, &mut ga);
                    acc(*a, ga);
                }
                if wants(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g, false, 0.0, &mut gb);
                    acc(*b, gb);
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    acc(*a, g.to_vec());
                }
                if wants(b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    acc(*a, g.to_vec());
                }
                if wants(b) {
                    acc(*b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if wants(a) {
                    acc(*a, g.iter().zip(tb).map(|(g, y)| g * y).collect());
                }
                if wants(b) {
                    acc(*b, g.iter().zip(ta).map(|(g, x)| g * x).collect());
                }
            }
            Op::AddBias(x, bias) => {
                if wants(x) {
                    acc(*x, g.to_vec());
                }
                if wants(bias) {
                    let nb = self.value(*bias).len();
                    let mut gb = vec![0.0; nb];
                    for (i, v) in g.iter().enumerate() {
                        gb[i % nb] += v;
                    }
                    acc(*bias, gb);
                }
            }
            Op::ScaleBy(x, s) => {
                let sv = self.value(*s).data()[0];
                if wants(x) {
                    acc(*x, g.iter().map(|v| v * sv).collect());
                }
                if wants(s) {
                    let xs = self.value(*x).data();
                    acc(*s, vec![g.iter().zip(xs).map(|(g, x)| g * x).sum()]);
                }
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Elu(x) | Op::EluPlusOne(x) => {
                let xs = self.value(*x).data();
                let d = xs
                    .iter()
                    .zip(g)
                    .map(|(&x, g)| if x >= 0.0 { *g } else { g * x.exp() })
                    .collect();
                acc(*x, d);
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                let d = xs
                    .iter()
                    .zip(g)
                    .map(|(&x, g)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(*x, d);
            }
            Op::Sigmoid(x) => {
                let d = out.iter().zip(g).map(|(s, g)| g * s * (1.0 - s)).collect();
                acc(*x, d);
            }
            Op::LogSigmoid(x) => {
                let xs = self.value(*x).data();
                let d = xs
                    .iter()
                    .zip(g)
                    .map(|(&x, g)| g * sigmoid_scalar(-x))
                    .collect();
                acc(*x, d);
            }
            Op::Sqrt(x) => {
                let d = out.iter().zip(g).map(|(r, g)| g * 0.5 / r).collect();
                acc(*x, d);
            }
            Op::GatherRows(table, ids) => {
                let t = self.value(*table);
                let cols = t.shape()[1];
                let mut gt = vec![0.0; t.len()];
                for (row, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * cols..(id + 1) * cols];
                    for (d, s) in dst.iter_mut().zip(&g[row * cols..(row + 1) * cols]) {
                        *d += s;
                    }
                }
                acc(*table, gt);
            }
            Op::TileRows(x, k) => {
                let t = self.value(*x);
                let d = t.shape()[1];
                let mut gx = vec![0.0; t.len()];
                for (r, dst) in gx.chunks_mut(d.max(1)).enumerate().take(t.shape()[0]) {
                    for rep in 0..*k {
                        let src = &g[(r * k + rep) * d..(r * k + rep + 1) * d];
                        for (a, b) in dst.iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Concat(a, b, axis) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (ga, gb) = split_flat(g, sa, sb, *axis);
                if wants(a) {
                    acc(*a, ga);
                }
                if wants(b) {
                    acc(*b, gb);
                }
            }
            Op::PairConcat(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (batch, ka, da, kb, db) = (sa[0], sa[1], sa[2], sb[1], sb[2]);
                let width = da + db;
                let mut ga = vec![0.0; batch * ka * da];
                let mut gb = vec![0.0; batch * kb * db];
                for n in 0..batch {
                    for i in 0..ka {
                        for j in 0..kb {
                            let base = ((n * ka + i) * kb + j) * width;
                            let cell = &g[base..base + width];
                            let ra = &mut ga[(n * ka + i) * da..(n * ka + i + 1) * da];
                            for (d, s) in ra.iter_mut().zip(&cell[..da]) {
                                *d += s;
                            }
                            let rb = &mut gb[(n * kb + j) * db..(n * kb + j + 1) * db];
                            for (d, s) in rb.iter_mut().zip(&cell[da..]) {
                                *d += s;
                            }
                        }
                    }
                }
                if wants(a) {
                    acc(*a, ga);
                }
                if wants(b) {
                    acc(*b, gb);
                }
            }
            Op::Conv2d {
                input,
                filters,
                bias,
                cols,
            } => {
                let (ti, tf, tb) = (self.value(*input), self.value(*filters), self.value(*bias));
                let geo = ConvGeometry::new(ti.shape(), tf.shape(), tb.shape())?;
                let rows = geo.out_rows();
                let patch = geo.patch();
                let t = geo.filters;
                if wants(filters) {
                    let lhs = cols.as_deref().unwrap_or(ti.data());
                    let mut gf = vec![0.0; patch * t];
                    gemm(patch, rows, t, lhs, true, g, false, 0.0, &mut gf);
                    acc(*filters, gf);
                }
                if wants(bias) {
                    let mut gb = vec![0.0; t];
                    for row in g.chunks(t) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    acc(*bias, gb);
                }
                if wants(input) {
                    let mut gcol = vec![0.0; rows * patch];
                    gemm(rows, t, patch, g, false, tf.data(), true, 0.0, &mut gcol);
                    let gi = if geo.is_pointwise() {
                        gcol
                    } else {
                        geo.col2im(&gcol)
                    };
                    acc(*input, gi);
                }
            }
            Op::TransposeLast2(x) => {
                let s = self.value(*x).shape();
                let (p, q) = (s[s.len() - 2], s[s.len() - 1]);
                acc(*x, transpose_blocks(g, q, p));
            }
            Op::PairwiseDot(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (batch, ka, kb, d) =
                    (ta.shape()[0], ta.shape()[1], tb.shape()[1], ta.shape()[2]);
                if wants(a) {
                    let mut ga = vec![0.0; ta.len()];
                    for n in 0..batch {
                        gemm(
                            ka,
                            kb,
                            d,
                            &g[n * ka * kb..(n + 1) * ka * kb],
                            false,
                            &tb.data()[n * kb * d..(n + 1) * kb * d],
                            false,
                            0.0,
                            &mut ga[n * ka * d..(n + 1) * ka * d],
                        );
                    }
                    acc(*a, ga);
                }
                if wants(b) {
                    let mut gb = vec![0.0; tb.len()];
                    for n in 0..batch {
                        gemm(
                            kb,
                            ka,
                            d,
                            &g[n * ka * kb..(n + 1) * ka * kb],
                            true,
                            &ta.data()[n * ka * d..(n + 1) * ka * d],
                            false,
                            0.0,
                            &mut gb[n * kb * d..(n + 1) * kb * d],
                        );
                    }
                    acc(*b, gb);
                }
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let d = ta.shape()[1];
                let scaled = |other: &Tensor| -> Vec<f64> {
                    other
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * g[i / d])
                        .collect()
                };
                if wants(a) {
                    acc(*a, scaled(tb));
                }
                if wants(b) {
                    acc(*b, scaled(ta));
                }
            }
            Op::MeanLast(x) => {
                let t = self.value(*x);
                let n = *t.shape().last().unwrap_or(&1);
                let d = (0..t.len()).map(|i| g[i / n] / n as f64).collect();
                acc(*x, d);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).len()]),
            Op::BceLoss(p, labels) => {
                let ps = self.value(*p).data();
                let d = ps
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| {
                        let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                        g[0] * (pc - y) / (pc * (1.0 - pc))
                    })
                    .collect();
                acc(*p, d);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, contrib: Vec<f64>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(&contrib) {
                *a += b;
            }
        }
        slot => *slot = Some(contrib),
    }
}

/// Transposes each contiguous `p×q` block of `data` into `q×p`.
fn transpose_blocks(data: &[f64], p: usize, q: usize) -> Vec<f64> {
    let block = p * q;
    let mut out = vec![0.0; data.len()];
    if block == 0 {
        return out;
    }
    for (src, dst) in data.chunks(block).zip(out.chunks_mut(block)) {
        for i in 0..p {
            for j in 0..q {
                dst[j * p + i] = src[i * q + j];
            }
        }
    }
    out
}

fn concat_tensors(a: &Tensor, b: &Tensor, axis: usize) -> Result<Tensor, NdError> {
    let (sa, sb) = (a.shape(), b.shape());
    let compatible = sa.len() == sb.len()
        && axis < sa.len()
        && sa.iter().zip(sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
    if !compatible {
        return Err(NdError::shape(
            "concat",
            format!("{sa:?} and {sb:?} along axis {axis}"),
        ));
    }
    let outer: usize = sa[..axis].iter().product();
    let ia: usize = sa[axis..].iter().product();
    let ib: usize = sb[axis..].iter().product();
    let mut out = Vec::with_capacity(a.len() + b.len());
    for o in 0..outer {
        out.extend_from_slice(&a.data()[o * ia..(o + 1) * ia]);
        out.extend_from_slice(&b.data()[o * ib..(o + 1) * ib]);
    }
    let mut shape = sa.to_vec();
    shape[axis] += sb[axis];
    Tensor::new(shape, out)
}

fn split_flat(data: &[f64], sa: &[usize], sb: &[usize], axis: usize) -> (Vec<f64>, Vec<f64>) {
    let outer: usize = sa[..axis].iter().product();
    let ia: usize = sa[axis..].iter().product();
    let ib: usize = sb[axis..].iter().product();
    let mut a = Vec::with_capacity(outer * ia);
    let mut b = Vec::with_capacity(outer * ib);
    for o in 0..outer {
        let base = o * (ia + ib);
        a.extend_from_slice(&data[base..base + ia]);
        b.extend_from_slice(&data[base + ia..base + ia + ib]);
    }
    (a, b)
}

/// Joins two tensors along `axis`; all other axes must agree.
pub fn concat(a: &Tensor, b: &Tensor, axis: usize) -> Result<Tensor, NdError> {
    concat_tensors(a, b, axis)
}

/// Splits `x` along `axis` at position `at`, the inverse of [`concat`].
pub fn split(x: &Tensor, axis: usize, at: usize) -> Result<(Tensor, Tensor), NdError> {
    let s = x.shape();
    if axis >= s.len() || at > s[axis] {
        return Err(NdError::shape(
            "split",
            format!("cannot split {s:?} at {at} along axis {axis}"),
        ));
    }
    let mut sa = s.to_vec();
    let mut sb = s.to_vec();
    sa[axis] = at;
    sb[axis] = s[axis] - at;
    let (a, b) = split_flat(x.data(), &sa, &sb, axis);
    Ok((Tensor::new(sa, a)?, Tensor::new(sb, b)?))
}

struct ConvGeometry {
    batch: usize,
    height: usize,
    width: usize,
    channels: usize,
    kh: usize,
    kw: usize,
    filters: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], filters: &[usize], bias: &[usize]) -> Result<Self, NdError> {
        let (batch, h, w, c) = match *input {
            [h, w, c] => (1, h, w, c),
            [b, h, w, c] => (b, h, w, c),
            _ => {
                return Err(NdError::shape(
                    "conv2d",
                    format!("input must be H×W×C or B×H×W×C, got {input:?}"),
                ))
            }
        };
        let [kh, kw, fc, t] = *filters else {
            return Err(NdError::shape(
                "conv2d",
                format!("filters must be kh×kw×C×T, got {filters:?}"),
            ));
        };
        if fc != c {
            return Err(NdError::shape(
                "conv2d",
                format!("filters expect {fc} channels, input has {c}"),
            ));
        }
        if kh == 0 || kw == 0 || kh > h || kw > w {
            return Err(NdError::shape(
                "conv2d",
                format!("kernel {kh}×{kw} does not fit input {h}×{w}"),
            ));
        }
        if bias != [t] {
            return Err(NdError::shape(
                "conv2d",
                format!("bias must be [{t}], got {bias:?}"),
            ));
        }
        Ok(Self {
            batch,
            height: h,
            width: w,
            channels: c,
            kh,
            kw,
            filters: t,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }

    fn out_h(&self) -> usize {
        self.height - self.kh + 1
    }

    fn out_w(&self) -> usize {
        self.width - self.kw + 1
    }

    fn out_rows(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.channels
    }

    fn out_shape(&self, input_rank: usize) -> Vec<usize> {
        let spatial = [self.out_h(), self.out_w(), self.filters];
        if input_rank == 3 {
            spatial.to_vec()
        } else {
            let mut s = vec![self.batch];
            s.extend_from_slice(&spatial);
            s
        }
    }

    fn input_offset(&self, n: usize, y: usize, x: usize) -> usize {
        ((n * self.height + y) * self.width + x) * self.channels
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let (c, patch) = (self.channels, self.patch());
        let mut cols = vec![0.0; self.out_rows() * patch];
        let mut row = 0;
        for n in 0..self.batch {
            for oy in 0..self.out_h() {
                for ox in 0..self.out_w() {
                    let dst = &mut cols[row * patch..(row + 1) * patch];
                    for dy in 0..self.kh {
                        for dx in 0..self.kw {
                            let src = self.input_offset(n, oy + dy, ox + dx);
                            let off = (dy * self.kw + dx) * c;
                            dst[off..off + c].copy_from_slice(&input[src..src + c]);
                        }
                    }
                    row += 1;
                }
            }
        }
        cols
    }

    fn col2im(&self, gcol: &[f64]) -> Vec<f64> {
        let (c, patch) = (self.channels, self.patch());
        let mut gi = vec![0.0; self.batch * self.height * self.width * c];
        let mut row = 0;
        for n in 0..self.batch {
            for oy in 0..self.out_h() {
                for ox in 0..self.out_w() {
                    let src = &gcol[row * patch..(row + 1) * patch];
                    for dy in 0..self.kh {
                        for dx in 0..self.kw {
                            let dst = self.input_offset(n, oy + dy, ox + dx);
                            let off = (dy * self.kw + dx) * c;
                            for (d, s) in gi[dst..dst + c].iter_mut().zip(&src[off..off + c]) {
                                *d += s;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        gi
    }
}
