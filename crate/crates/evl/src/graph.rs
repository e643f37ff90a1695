//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass as an arena of
//! nodes. [`Graph::backward`] walks the tape in reverse and returns a
//! [`GradientRecord`] holding gradients for exactly the named trainable
//! leaves that are connected to the loss. Frozen inputs enter the graph as
//! unnamed constants, so gradient computation never touches them: the
//! backward sweep stops at the feature boundary by construction.
//!
//! Ops store enough payload to re-run the forward pass in f64
//! ([`F64Forward`]), which is what the finite-difference gradient checker
//! evaluates. The recorded graph has no data-dependent control flow, so a
//! leaf-value override is exactly a perturbed evaluation of the same
//! function.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{
    gelu_grad_scalar, gelu_scalar, layer_norm_raw, layer_norm_stats, matmul_raw, softmax_raw,
    transpose_raw,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node in one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

/// Heads-averaged cross-frame attention maps, shape (T, S, S) flattened.
/// Stored as an op payload: the maps come from frozen projections and are
/// constants of the differentiable computation.
#[derive(Debug)]
pub struct AttnMaps {
    pub frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub data: Vec<f32>,
}

impl AttnMaps {
    pub fn spatial(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: VarId, b: VarId },
    AddBias { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    Scale { a: VarId, c: f32 },
    Matmul { a: VarId, b: VarId },
    Transpose { a: VarId },
    Reshape { a: VarId },
    Gelu { a: VarId },
    Dropout { a: VarId, mask: Vec<f32> },
    Softmax { a: VarId, axis: usize },
    LayerNorm { x: VarId, gain: VarId, bias: VarId, eps: f64 },
    MeanAxis { a: VarId, axis: usize },
    SumAll { a: VarId },
    SliceCols { a: VarId, start: usize, len: usize },
    ConcatCols { parts: Vec<VarId> },
    CrossEntropy { logits: VarId, label: usize },
    TemporalConv { x: VarId, w: VarId, b: VarId },
    PosBroadcast { p: VarId, rows: Vec<usize>, spatial: usize },
    RelposProject { attn: Arc<AttnMaps>, w: VarId },
}

impl Op {
    fn inputs(&self) -> Vec<VarId> {
        match self {
            Op::Leaf => vec![],
            Op::Add { a, b } | Op::AddBias { a, b } | Op::Mul { a, b } | Op::Matmul { a, b } => {
                vec![*a, *b]
            }
            Op::Scale { a, .. }
            | Op::Transpose { a }
            | Op::Reshape { a }
            | Op::Gelu { a }
            | Op::Dropout { a, .. }
            | Op::Softmax { a, .. }
            | Op::MeanAxis { a, .. }
            | Op::SumAll { a }
            | Op::SliceCols { a, .. } => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatCols { parts } => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::TemporalConv { x, w, b } => vec![*x, *w, *b],
            Op::PosBroadcast { p, .. } => vec![*p],
            Op::RelposProject { w, .. } => vec![*w],
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    name: Option<String>,
    op: Op,
}

/// Gradients of one backward pass, keyed by trainable-parameter name.
#[derive(Debug, Default, Clone)]
pub struct GradientRecord {
    grads: BTreeMap<String, Tensor>,
}

impl GradientRecord {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.grads.contains_key(name)
    }

    /// Elementwise accumulate another record (used for batch averaging).
    pub fn accumulate(&mut self, other: &GradientRecord) {
        for (name, grad) in &other.grads {
            match self.grads.get_mut(name) {
                Some(existing) => {
                    for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                        *e += g;
                    }
                }
                None => {
                    self.grads.insert(name.clone(), grad.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, c: f32) {
        for grad in self.grads.values_mut() {
            for v in grad.data_mut() {
                *v *= c;
            }
        }
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    rng: Rng,
    stochastic: bool,
}

impl Graph {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            rng: Rng::new(seed),
            stochastic: false,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// True when the recorded pass sampled randomness (active dropout).
    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Named trainable leaves in insertion order.
    pub fn named_leaves(&self) -> Vec<(String, VarId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match (&n.op, &n.name) {
                (Op::Leaf, Some(name)) if n.requires_grad => Some((name.clone(), VarId(i))),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op, name: Option<String>) -> VarId {
        let requires_grad = match &op {
            Op::Leaf => value.requires_grad,
            other => other
                .inputs()
                .iter()
                .any(|id| self.nodes[id.0].requires_grad),
        };
        debug_assert!(
            value.all_finite(),
            "non-finite op output (shape {:?})",
            value.shape()
        );
        self.nodes.push(Node {
            value,
            requires_grad,
            name,
            op,
        });
        VarId(self.nodes.len() - 1)
    }

    /// Trainable named leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> VarId {
        let mut value = value;
        value.requires_grad = true;
        self.push(value, Op::Leaf, Some(name.to_string()))
    }

    /// Frozen input: receives no gradient and is skipped by backward.
    pub fn constant(&mut self, value: Tensor) -> VarId {
        let mut value = value;
        value.requires_grad = false;
        self.push(value, Op::Leaf, None)
    }

    // ── Forward ops ─────────────────────────────────────────────────────────

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add { a, b }, None))
    }

    /// Broadcast-add `b` over the leading dimensions of `a`; `b`'s shape must
    /// be a suffix of `a`'s shape (the only broadcast this crate permits).
    pub fn add_bias(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ashape, bshape) = (self.shape(a), self.shape(b));
        if bshape.len() > ashape.len() || &ashape[ashape.len() - bshape.len()..] != bshape {
            return Err(Error::Shape(format!(
                "bias shape {bshape:?} is not a suffix of {ashape:?}"
            )));
        }
        let bn = self.value(b).numel();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(bn) {
            for (v, add) in chunk.iter_mut().zip(self.value(b).data()) {
                *v += add;
            }
        }
        let t = Tensor::new(ashape.to_vec(), data)?;
        Ok(self.push(t, Op::AddBias { a, b }, None))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "mul shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul { a, b }, None))
    }

    pub fn scale(&mut self, a: VarId, c: f32) -> VarId {
        let data = self.value(a).data().iter().map(|&v| v * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("shape preserved");
        self.push(t, Op::Scale { a, c }, None)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ashape, bshape) = (self.shape(a), self.shape(b));
        if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[0] {
            return Err(Error::Shape(format!(
                "matmul shapes incompatible: {ashape:?} x {bshape:?}"
            )));
        }
        let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::Matmul { a, b }, None))
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        let shape = self.shape(a);
        if shape.len() != 2 {
            return Err(Error::Shape(format!("transpose expects rank 2, got {shape:?}")));
        }
        let (r, c) = (shape[0], shape[1]);
        let data = transpose_raw(self.value(a).data(), r, c);
        let t = Tensor::new(vec![c, r], data)?;
        Ok(self.push(t, Op::Transpose { a }, None))
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> Result<VarId> {
        let t = self.value(a).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape { a }, None))
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&v| gelu_scalar(v as f64) as f32)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("shape preserved");
        self.push(t, Op::Gelu { a }, None)
    }

    /// Inverted-scaling dropout: active only in train mode, identity in eval.
    pub fn dropout(&mut self, a: VarId, rate: f32) -> Result<VarId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidParam(format!(
                "dropout rate must be in [0,1), got {rate}"
            )));
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(a);
        }
        self.stochastic = true;
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f32> = (0..self.value(a).numel())
            .map(|_| if self.rng.next_f32() < rate { 0.0 } else { keep })
            .collect();
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Dropout { a, mask }, None))
    }

    pub fn softmax(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(Error::Range(format!(
                "softmax axis {axis} invalid for shape {shape:?}"
            )));
        }
        let data = softmax_raw(self.value(a).data(), shape, axis);
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(t, Op::Softmax { a, axis }, None))
    }

    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId, eps: f64) -> Result<VarId> {
        if eps <= 0.0 {
            return Err(Error::InvalidParam(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let width = *self.shape(x).last().unwrap();
        if self.shape(gain) != [width] || self.shape(bias) != [width] {
            return Err(Error::Shape(format!(
                "layer_norm gain/bias must be [{width}], got {:?} / {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let data = layer_norm_raw(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
        );
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, eps }, None))
    }

    /// Mean over one axis; that axis is removed from the shape.
    pub fn mean_axis(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Range(format!(
                "mean axis {axis} invalid for shape {shape:?}"
            )));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != axis)
            .map(|(_, &d)| d)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let x = self.value(a).data();
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut sum = 0.0f64;
                for l in 0..len {
                    sum += x[o * len * inner + l * inner + i] as f64;
                }
                out[o * inner + i] = (sum / len as f64) as f32;
            }
        }
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::MeanAxis { a, axis }, None))
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let sum: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        let t = Tensor::scalar(sum as f32);
        self.push(t, Op::SumAll { a }, None)
    }

    /// Column window of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId> {
        let shape = self.shape(a);
        if shape.len() != 2 || start + len > shape[1] || len == 0 {
            return Err(Error::Range(format!(
                "column slice [{start}, {}) invalid for shape {shape:?}",
                start + len
            )));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&x[r * cols + start..r * cols + start + len]);
        }
        let t = Tensor::new(vec![rows, len], out)?;
        Ok(self.push(t, Op::SliceCols { a, start, len }, None))
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let rows = self.shape(parts[0])[0];
        if parts
            .iter()
            .any(|&p| self.shape(p).len() != 2 || self.shape(p)[0] != rows)
        {
            return Err(Error::Shape("concat parts must be rank 2 with equal rows".into()));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let cols = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[r * cols..(r + 1) * cols]);
            }
        }
        let t = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(
            t,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            None,
        ))
    }

    /// Cross-entropy of a logit vector against a class index, stabilized via
    /// log-sum-exp.
    pub fn cross_entropy(&mut self, logits: VarId, label: usize) -> Result<VarId> {
        let shape = self.shape(logits).to_vec();
        let k = match shape.as_slice() {
            [k] => *k,
            [1, k] => *k,
            _ => {
                return Err(Error::Shape(format!(
                    "cross_entropy expects a logit vector, got {shape:?}"
                )))
            }
        };
        if label >= k {
            return Err(Error::Range(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let x = self.value(logits).data();
        let max = x.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let lse = max + x.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        let loss = (lse - x[label] as f64) as f32;
        let t = Tensor::scalar(loss);
        Ok(self.push(t, Op::CrossEntropy { logits, label }, None))
    }

    /// Depthwise width-3 convolution along the leading (time) axis of a
    /// (T, S, C) volume with zero padding; `w` is (3, C) indexed by
    /// offset {-1, 0, +1}, `b` is (C).
    pub fn temporal_conv(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::Shape(format!(
                "temporal_conv expects (T, S, C) input, got {xs:?}"
            )));
        }
        let (t, s, c) = (xs[0], xs[1], xs[2]);
        if self.shape(w) != [3, c] || self.shape(b) != [c] {
            return Err(Error::Shape(format!(
                "temporal_conv params must be (3, {c}) and ({c}), got {:?} / {:?}",
                self.shape(w),
                self.shape(b)
            )));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0f32; t * s * c];
        for ti in 0..t {
            for si in 0..s {
                let base = (ti * s + si) * c;
                for ci in 0..c {
                    let mut acc = bv[ci] as f64;
                    for (d, wrow) in [-1i64, 0, 1].iter().zip(0..3usize) {
                        let src = ti as i64 + d;
                        if src < 0 || src >= t as i64 {
                            continue;
                        }
                        let xi = (src as usize * s + si) * c + ci;
                        acc += wv[wrow * c + ci] as f64 * xv[xi] as f64;
                    }
                    out[base + ci] = acc as f32;
                }
            }
        }
        let tout = Tensor::new(xs, out)?;
        Ok(self.push(tout, Op::TemporalConv { x, w, b }, None))
    }

    /// Per-frame positional embedding broadcast over spatial positions:
    /// out[t, s, c] = p[rows[t], c].
    pub fn pos_broadcast(&mut self, p: VarId, rows: &[usize], spatial: usize) -> Result<VarId> {
        let ps = self.shape(p).to_vec();
        if ps.len() != 2 {
            return Err(Error::Shape(format!(
                "positional table must be rank 2, got {ps:?}"
            )));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= ps[0]) {
            return Err(Error::Range(format!(
                "temporal position {bad} outside table of {} rows",
                ps[0]
            )));
        }
        let c = ps[1];
        let pv = self.value(p).data();
        let mut out = vec![0.0f32; rows.len() * spatial * c];
        for (ti, &row) in rows.iter().enumerate() {
            for si in 0..spatial {
                let dst = (ti * spatial + si) * c;
                out[dst..dst + c].copy_from_slice(&pv[row * c..(row + 1) * c]);
            }
        }
        let t = Tensor::new(vec![rows.len(), spatial, c], out)?;
        Ok(self.push(
            t,
            Op::PosBroadcast {
                p,
                rows: rows.to_vec(),
                spatial,
            },
            None,
        ))
    }

    /// Project attention maps into feature space through relative-offset
    /// weights: out[t, (h,w), c] = sum over (h',w') of
    /// w[h-h', w-w', c] * attn[t, (h,w), (h',w')].
    pub fn relpos_project(&mut self, attn: Arc<AttnMaps>, w: VarId) -> Result<VarId> {
        let (gh, gw) = (attn.grid_h, attn.grid_w);
        let s = attn.spatial();
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[0] != 2 * gh - 1 || ws[1] != 2 * gw - 1 {
            return Err(Error::Shape(format!(
                "relative-offset weights must be ({}, {}, C), got {ws:?}",
                2 * gh - 1,
                2 * gw - 1
            )));
        }
        let c = ws[2];
        if attn.data.len() != attn.frames * s * s {
            return Err(Error::Shape("attention payload size mismatch".into()));
        }
        let wv = self.value(w).data();
        let mut out = vec![0.0f32; attn.frames * s * c];
        relpos_forward_f32(&attn, wv, c, &mut out);
        let t = Tensor::new(vec![attn.frames, s, c], out)?;
        Ok(self.push(t, Op::RelposProject { attn, w }, None))
    }

    // ── Backward ────────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns gradients for exactly the
    /// trainable named leaves reachable from the loss; a loss with no
    /// trainable dependencies yields an empty record.
    pub fn backward(&self, loss: VarId) -> Result<GradientRecord> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut record = GradientRecord::default();
        if !loss_node.requires_grad {
            return Ok(record);
        }

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if let (Op::Leaf, Some(name)) = (&node.op, &node.name) {
                if node.requires_grad {
                    let t = Tensor::new(node.value.shape().to_vec(), gout)?;
                    record.grads.insert(name.clone(), t);
                }
                continue;
            }
            self.propagate(id, &gout, &mut grads);
        }
        Ok(record)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], target: VarId, delta: &[f32]) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta.to_vec()),
        }
    }

    fn propagate(&self, id: usize, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gout);
                self.accumulate(grads, *b, gout);
            }
            Op::AddBias { a, b } => {
                self.accumulate(grads, *a, gout);
                if self.nodes[b.0].requires_grad {
                    let bn = self.value(*b).numel();
                    let mut gb = vec![0.0f32; bn];
                    for chunk in gout.chunks(bn) {
                        for (g, &v) in gb.iter_mut().zip(chunk) {
                            *g += v;
                        }
                    }
                    self.accumulate(grads, *b, &gb);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].requires_grad {
                    let ga: Vec<f32> = gout
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(g, v)| g * v)
                        .collect();
                    self.accumulate(grads, *a, &ga);
                }
                if self.nodes[b.0].requires_grad {
                    let gb: Vec<f32> = gout
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, v)| g * v)
                        .collect();
                    self.accumulate(grads, *b, &gb);
                }
            }
            Op::Scale { a, c } => {
                let ga: Vec<f32> = gout.iter().map(|g| g * c).collect();
                self.accumulate(grads, *a, &ga);
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.nodes[a.0].requires_grad {
                    let bt = transpose_raw(self.value(*b).data(), k, n);
                    let ga = matmul_raw(gout, &bt, m, n, k);
                    self.accumulate(grads, *a, &ga);
                }
                if self.nodes[b.0].requires_grad {
                    let at = transpose_raw(self.value(*a).data(), m, k);
                    let gb = matmul_raw(&at, gout, k, m, n);
                    self.accumulate(grads, *b, &gb);
                }
            }
            Op::Transpose { a } => {
                let out_shape = node.value.shape();
                let ga = transpose_raw(gout, out_shape[0], out_shape[1]);
                self.accumulate(grads, *a, &ga);
            }
            Op::Reshape { a } => {
                self.accumulate(grads, *a, gout);
            }
            Op::Gelu { a } => {
                let ga: Vec<f32> = gout
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| ((*g as f64) * gelu_grad_scalar(x as f64)) as f32)
                    .collect();
                self.accumulate(grads, *a, &ga);
            }
            Op::Dropout { a, mask } => {
                let ga: Vec<f32> = gout.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accumulate(grads, *a, &ga);
            }
            Op::Softmax { a, axis } => {
                let p = node.value.data();
                let shape = node.value.shape();
                let len = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let mut ga = vec![0.0f32; p.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0f64;
                        for l in 0..len {
                            let idx = base + l * inner;
                            dot += gout[idx] as f64 * p[idx] as f64;
                        }
                        for l in 0..len {
                            let idx = base + l * inner;
                            ga[idx] = ((gout[idx] as f64 - dot) * p[idx] as f64) as f32;
                        }
                    }
                }
                self.accumulate(grads, *a, &ga);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let width = gv.len();
                let rows = xv.len() / width;
                let (means, inv_stds) = layer_norm_stats(xv, width, *eps);
                let mut gx = vec![0.0f32; xv.len()];
                let mut ggain = vec![0.0f64; width];
                let mut gbias = vec![0.0f64; width];
                for r in 0..rows {
                    let mut mean_wg = 0.0f64;
                    let mut mean_wgx = 0.0f64;
                    for c in 0..width {
                        let idx = r * width + c;
                        let xh = (xv[idx] as f64 - means[r]) * inv_stds[r];
                        let go = gout[idx] as f64;
                        ggain[c] += go * xh;
                        gbias[c] += go;
                        let wg = go * gv[c] as f64;
                        mean_wg += wg;
                        mean_wgx += wg * xh;
                    }
                    mean_wg /= width as f64;
                    mean_wgx /= width as f64;
                    for c in 0..width {
                        let idx = r * width + c;
                        let xh = (xv[idx] as f64 - means[r]) * inv_stds[r];
                        let wg = gout[idx] as f64 * gv[c] as f64;
                        gx[idx] = ((wg - mean_wg - xh * mean_wgx) * inv_stds[r]) as f32;
                    }
                }
                self.accumulate(grads, *x, &gx);
                let ggain: Vec<f32> = ggain.iter().map(|&v| v as f32).collect();
                let gbias: Vec<f32> = gbias.iter().map(|&v| v as f32).collect();
                self.accumulate(grads, *gain, &ggain);
                self.accumulate(grads, *bias, &gbias);
            }
            Op::MeanAxis { a, axis } => {
                let shape = self.shape(*a);
                let len = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let inv = 1.0 / len as f32;
                let mut ga = vec![0.0f32; self.value(*a).numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let g = gout[o * inner + i] * inv;
                        for l in 0..len {
                            ga[o * len * inner + l * inner + i] = g;
                        }
                    }
                }
                self.accumulate(grads, *a, &ga);
            }
            Op::SumAll { a } => {
                let ga = vec![gout[0]; self.value(*a).numel()];
                self.accumulate(grads, *a, &ga);
            }
            Op::SliceCols { a, start, len } => {
                let (rows, cols) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut ga = vec![0.0f32; rows * cols];
                for r in 0..rows {
                    for l in 0..*len {
                        ga[r * cols + start + l] = gout[r * len + l];
                    }
                }
                self.accumulate(grads, *a, &ga);
            }
            Op::ConcatCols { parts } => {
                let rows = self.shape(parts[0])[0];
                let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
                let mut offset = 0;
                for &p in parts {
                    let cols = self.shape(p)[1];
                    if self.nodes[p.0].requires_grad {
                        let mut gp = vec![0.0f32; rows * cols];
                        for r in 0..rows {
                            gp[r * cols..(r + 1) * cols]
                                .copy_from_slice(&gout[r * total + offset..r * total + offset + cols]);
                        }
                        self.accumulate(grads, p, &gp);
                    }
                    offset += cols;
                }
            }
            Op::CrossEntropy { logits, label } => {
                let x = self.value(*logits).data();
                let max = x.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
                let sum: f64 = x.iter().map(|&v| (v as f64 - max).exp()).sum();
                let g = gout[0] as f64;
                let ga: Vec<f32> = x
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let p = (v as f64 - max).exp() / sum;
                        (g * (p - if i == *label { 1.0 } else { 0.0 })) as f32
                    })
                    .collect();
                self.accumulate(grads, *logits, &ga);
            }
            Op::TemporalConv { x, w, b } => {
                let xs = self.shape(*x);
                let (t, s, c) = (xs[0], xs[1], xs[2]);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.nodes[x.0].requires_grad {
                    let mut gx = vec![0.0f32; xv.len()];
                    for ti in 0..t {
                        for (d, wrow) in [-1i64, 0, 1].iter().zip(0..3usize) {
                            let src = ti as i64 + d;
                            if src < 0 || src >= t as i64 {
                                continue;
                            }
                            for si in 0..s {
                                let go = &gout[(ti * s + si) * c..(ti * s + si + 1) * c];
                                let gx_row =
                                    &mut gx[(src as usize * s + si) * c..(src as usize * s + si + 1) * c];
                                for ci in 0..c {
                                    gx_row[ci] += wv[wrow * c + ci] * go[ci];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, &gx);
                }
                if self.nodes[w.0].requires_grad {
                    let mut gw = vec![0.0f64; 3 * c];
                    for ti in 0..t {
                        for (d, wrow) in [-1i64, 0, 1].iter().zip(0..3usize) {
                            let src = ti as i64 + d;
                            if src < 0 || src >= t as i64 {
                                continue;
                            }
                            for si in 0..s {
                                let go = &gout[(ti * s + si) * c..(ti * s + si + 1) * c];
                                let xr =
                                    &xv[(src as usize * s + si) * c..(src as usize * s + si + 1) * c];
                                for ci in 0..c {
                                    gw[wrow * c + ci] += go[ci] as f64 * xr[ci] as f64;
                                }
                            }
                        }
                    }
                    let gw: Vec<f32> = gw.iter().map(|&v| v as f32).collect();
                    self.accumulate(grads, *w, &gw);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0f64; c];
                    for chunk in gout.chunks(c) {
                        for (g, &v) in gb.iter_mut().zip(chunk) {
                            *g += v as f64;
                        }
                    }
                    let gb: Vec<f32> = gb.iter().map(|&v| v as f32).collect();
                    self.accumulate(grads, *b, &gb);
                }
            }
            Op::PosBroadcast { p, rows, spatial } => {
                if self.nodes[p.0].requires_grad {
                    let ps = self.shape(*p);
                    let c = ps[1];
                    let mut gp = vec![0.0f32; ps[0] * c];
                    for (ti, &row) in rows.iter().enumerate() {
                        for si in 0..*spatial {
                            let src = (ti * spatial + si) * c;
                            for ci in 0..c {
                                gp[row * c + ci] += gout[src + ci];
                            }
                        }
                    }
                    self.accumulate(grads, *p, &gp);
                }
            }
            Op::RelposProject { attn, w } => {
                if self.nodes[w.0].requires_grad {
                    let c = self.shape(*w)[2];
                    let mut gw = vec![0.0f64; self.value(*w).numel()];
                    relpos_backward_w(attn, gout, c, &mut gw);
                    let gw: Vec<f32> = gw.iter().map(|&v| v as f32).collect();
                    self.accumulate(grads, *w, &gw);
                }
            }
        }
    }
}

fn relpos_forward_f32(attn: &AttnMaps, wv: &[f32], c: usize, out: &mut [f32]) {
    let (gh, gw) = (attn.grid_h, attn.grid_w);
    let s = attn.spatial();
    let wcols = 2 * gw - 1;
    for t in 0..attn.frames {
        for qi in 0..s {
            let (qh, qw) = (qi / gw, qi % gw);
            let mut acc = vec![0.0f64; c];
            for ki in 0..s {
                let a = attn.data[(t * s + qi) * s + ki] as f64;
                let (kh, kw) = (ki / gw, ki % gw);
                let (dh, dw) = (qh + gh - 1 - kh, qw + gw - 1 - kw);
                let wbase = (dh * wcols + dw) * c;
                for ci in 0..c {
                    acc[ci] += a * wv[wbase + ci] as f64;
                }
            }
            let obase = (t * s + qi) * c;
            for ci in 0..c {
                out[obase + ci] = acc[ci] as f32;
            }
        }
    }
}

fn relpos_backward_w(attn: &AttnMaps, gout: &[f32], c: usize, gw_acc: &mut [f64]) {
    let (gh, gw) = (attn.grid_h, attn.grid_w);
    let s = attn.spatial();
    let wcols = 2 * gw - 1;
    for t in 0..attn.frames {
        for qi in 0..s {
            let (qh, qw_) = (qi / gw, qi % gw);
            let go = &gout[(t * s + qi) * c..(t * s + qi + 1) * c];
            for ki in 0..s {
                let a = attn.data[(t * s + qi) * s + ki] as f64;
                let (kh, kw) = (ki / gw, ki % gw);
                let (dh, dw) = (qh + gh - 1 - kh, qw_ + gw - 1 - kw);
                let wbase = (dh * wcols + dw) * c;
                for ci in 0..c {
                    gw_acc[wbase + ci] += a * go[ci] as f64;
                }
            }
        }
    }
}

// ── f64 re-evaluation for finite differences ───────────────────────────────

/// Re-runs a recorded graph in f64 with one leaf entry perturbed. The base
/// values are computed once; each probe only recomputes nodes downstream of
/// the probed leaf.
pub struct F64Forward<'g> {
    graph: &'g Graph,
    loss: VarId,
    base: Vec<Vec<f64>>,
    scratch: Vec<Vec<f64>>,
    dependent: Vec<bool>,
    probe: Option<VarId>,
}

impl<'g> F64Forward<'g> {
    pub fn new(graph: &'g Graph, loss: VarId) -> Self {
        let n = loss.0 + 1;
        let mut base: Vec<Vec<f64>> = Vec::with_capacity(n);
        for id in 0..n {
            let val = eval_node_f64(graph, id, &|pred| base[pred].as_slice());
            base.push(val);
        }
        let scratch = base.clone();
        F64Forward {
            graph,
            loss,
            base,
            scratch,
            dependent: vec![false; n],
            probe: None,
        }
    }

    pub fn base_loss(&self) -> f64 {
        self.base[self.loss.0][0]
    }

    /// Select the leaf whose entries the next probes will perturb.
    pub fn set_probe_leaf(&mut self, leaf: VarId) {
        for d in self.dependent.iter_mut() {
            *d = false;
        }
        self.dependent[leaf.0] = true;
        for id in leaf.0 + 1..=self.loss.0 {
            let deps = self.graph.nodes[id].op.inputs();
            self.dependent[id] = deps.iter().any(|p| self.dependent[p.0]);
        }
        self.probe = Some(leaf);
    }

    /// Loss value with `delta` added to one entry of the probed leaf.
    pub fn eval_with_delta(&mut self, entry: usize, delta: f64) -> f64 {
        let leaf = self.probe.expect("set_probe_leaf first");
        self.scratch[leaf.0].copy_from_slice(&self.base[leaf.0]);
        self.scratch[leaf.0][entry] += delta;
        for id in leaf.0 + 1..=self.loss.0 {
            if !self.dependent[id] {
                continue;
            }
            let val = eval_node_f64(self.graph, id, &|pred| {
                if self.dependent[pred] {
                    self.scratch[pred].as_slice()
                } else {
                    self.base[pred].as_slice()
                }
            });
            self.scratch[id] = val;
        }
        if self.dependent[self.loss.0] {
            self.scratch[self.loss.0][0]
        } else {
            self.base[self.loss.0][0]
        }
    }
}

fn eval_node_f64<'v>(graph: &Graph, id: usize, input: &dyn Fn(usize) -> &'v [f64]) -> Vec<f64> {
    let node = &graph.nodes[id];
    match &node.op {
        Op::Leaf => node.value.data().iter().map(|&v| v as f64).collect(),
        Op::Add { a, b } => input(a.0)
            .iter()
            .zip(input(b.0))
            .map(|(x, y)| x + y)
            .collect(),
        Op::AddBias { a, b } => {
            let bv = input(b.0);
            let mut out = input(a.0).to_vec();
            for chunk in out.chunks_mut(bv.len()) {
                for (v, add) in chunk.iter_mut().zip(bv) {
                    *v += add;
                }
            }
            out
        }
        Op::Mul { a, b } => input(a.0)
            .iter()
            .zip(input(b.0))
            .map(|(x, y)| x * y)
            .collect(),
        Op::Scale { a, c } => input(a.0).iter().map(|v| v * *c as f64).collect(),
        Op::Matmul { a, b } => {
            let (m, k) = (graph.shape(*a)[0], graph.shape(*a)[1]);
            let n = graph.shape(*b)[1];
            let (av, bv) = (input(a.0), input(b.0));
            let mut out = vec![0.0f64; m * n];
            for i in 0..m {
                for p in 0..k {
                    let aip = av[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        out[i * n + j] += aip * bv[p * n + j];
                    }
                }
            }
            out
        }
        Op::Transpose { a } => {
            let (r, c) = (graph.shape(*a)[0], graph.shape(*a)[1]);
            let av = input(a.0);
            let mut out = vec![0.0f64; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = av[i * c + j];
                }
            }
            out
        }
        Op::Reshape { a } => input(a.0).to_vec(),
        Op::Gelu { a } => input(a.0).iter().map(|&v| gelu_scalar(v)).collect(),
        Op::Dropout { a, mask } => input(a.0)
            .iter()
            .zip(mask)
            .map(|(v, &m)| v * m as f64)
            .collect(),
        Op::Softmax { a, axis } => {
            let shape = graph.shape(*a);
            let len = shape[*axis];
            let inner: usize = shape[*axis + 1..].iter().product();
            let outer: usize = shape[..*axis].iter().product();
            let x = input(a.0);
            let mut out = vec![0.0f64; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut max = f64::NEG_INFINITY;
                    for l in 0..len {
                        max = max.max(x[base + l * inner]);
                    }
                    let mut sum = 0.0;
                    for l in 0..len {
                        let e = (x[base + l * inner] - max).exp();
                        out[base + l * inner] = e;
                        sum += e;
                    }
                    for l in 0..len {
                        out[base + l * inner] /= sum;
                    }
                }
            }
            out
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let width = graph.shape(*gain)[0];
            let (xv, gv, bv) = (input(x.0), input(gain.0), input(bias.0));
            let rows = xv.len() / width;
            let mut out = vec![0.0f64; xv.len()];
            for r in 0..rows {
                let row = &xv[r * width..(r + 1) * width];
                let mean = row.iter().sum::<f64>() / width as f64;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for c in 0..width {
                    out[r * width + c] = (row[c] - mean) * inv * gv[c] + bv[c];
                }
            }
            out
        }
        Op::MeanAxis { a, axis } => {
            let shape = graph.shape(*a);
            let len = shape[*axis];
            let inner: usize = shape[*axis + 1..].iter().product();
            let outer: usize = shape[..*axis].iter().product();
            let x = input(a.0);
            let mut out = vec![0.0f64; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let mut sum = 0.0;
                    for l in 0..len {
                        sum += x[o * len * inner + l * inner + i];
                    }
                    out[o * inner + i] = sum / len as f64;
                }
            }
            out
        }
        Op::SumAll { a } => vec![input(a.0).iter().sum()],
        Op::SliceCols { a, start, len } => {
            let (rows, cols) = (graph.shape(*a)[0], graph.shape(*a)[1]);
            let x = input(a.0);
            let mut out = Vec::with_capacity(rows * len);
            for r in 0..rows {
                out.extend_from_slice(&x[r * cols + start..r * cols + start + len]);
            }
            out
        }
        Op::ConcatCols { parts } => {
            let rows = graph.shape(parts[0])[0];
            let mut out = Vec::new();
            for r in 0..rows {
                for &p in parts {
                    let cols = graph.shape(p)[1];
                    out.extend_from_slice(&input(p.0)[r * cols..(r + 1) * cols]);
                }
            }
            out
        }
        Op::CrossEntropy { logits, label } => {
            let x = input(logits.0);
            let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            vec![lse - x[*label]]
        }
        Op::TemporalConv { x, w, b } => {
            let xs = graph.shape(*x);
            let (t, s, c) = (xs[0], xs[1], xs[2]);
            let (xv, wv, bv) = (input(x.0), input(w.0), input(b.0));
            let mut out = vec![0.0f64; t * s * c];
            for ti in 0..t {
                for si in 0..s {
                    for ci in 0..c {
                        let mut acc = bv[ci];
                        for (d, wrow) in [-1i64, 0, 1].iter().zip(0..3usize) {
                            let src = ti as i64 + d;
                            if src < 0 || src >= t as i64 {
                                continue;
                            }
                            acc += wv[wrow * c + ci] * xv[(src as usize * s + si) * c + ci];
                        }
                        out[(ti * s + si) * c + ci] = acc;
                    }
                }
            }
            out
        }
        Op::PosBroadcast { p, rows, spatial } => {
            let c = graph.shape(*p)[1];
            let pv = input(p.0);
            let mut out = vec![0.0f64; rows.len() * spatial * c];
            for (ti, &row) in rows.iter().enumerate() {
                for si in 0..*spatial {
                    let dst = (ti * spatial + si) * c;
                    out[dst..dst + c].copy_from_slice(&pv[row * c..(row + 1) * c]);
                }
            }
            out
        }
        Op::RelposProject { attn, w } => {
            let c = graph.shape(*w)[2];
            let wv = input(w.0);
            let (gh, gw) = (attn.grid_h, attn.grid_w);
            let s = attn.spatial();
            let wcols = 2 * gw - 1;
            let mut out = vec![0.0f64; attn.frames * s * c];
            for t in 0..attn.frames {
                for qi in 0..s {
                    let (qh, qw_) = (qi / gw, qi % gw);
                    for ki in 0..s {
                        let a = attn.data[(t * s + qi) * s + ki] as f64;
                        let (kh, kw) = (ki / gw, ki % gw);
                        let wbase = ((qh + gh - 1 - kh) * wcols + (qw_ + gw - 1 - kw)) * c;
                        let obase = (t * s + qi) * c;
                        for ci in 0..c {
                            out[obase + ci] += a * wv[wbase + ci];
                        }
                    }
                }
            }
            out
        }
    }
}
