//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Graph`] owns a flat list of nodes. Every builder method evaluates its
//! forward result eagerly and records the operation, so construction order is
//! a valid topological order and [`Graph::backward`] is a single reverse
//! sweep. Node handles are plain indices ([`NodeId`]); values are dense f64
//! [`Tensor`]s.
//!
//! Gradient conventions:
//! - `backward(loss)` requires `loss` to be a finite scalar and seeds it
//!   with 1.0.
//! - A node's gradient has the node's shape. Parameters not reachable from
//!   the loss simply have no entry; callers treat that as a zero gradient.
//! - All reductions accumulate in fixed index order, so gradients are
//!   bit-identical across runs.
//!
//! Besides the elementary primitives, two fused operations exist for speed
//! on the hot path: [`Graph::linear`] (matmul plus row-broadcast bias) and
//! [`Graph::attention`] (multi-head scaled dot-product attention over
//! pre-projected inputs). Their backwards are hand-derived and covered by
//! the same finite-difference checks as everything else.

use crate::error::{Error, Result};
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Masking mode for [`Graph::attention`].
///
/// Masked score entries are forced to [`MASK_VALUE`] before the softmax, so
/// masked keys receive exactly zero probability and zero gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMask {
    /// Every query attends to every key.
    None,
    /// Query at position i attends to keys 0..=i.
    Causal,
    /// All queries attend only to keys 0..len (padding mask).
    KeyLen(usize),
}

/// Additive mask magnitude. Large enough that `exp(MASK_VALUE - max)`
/// underflows to exactly 0.0 for any realistic score scale.
pub const MASK_VALUE: f64 = -1.0e30;

/// Gelu tanh-form constants.
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    Matmul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Transpose(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gelu(NodeId),
    EmbeddingLookup {
        table: NodeId,
        ids: Vec<usize>,
    },
    ConcatRows(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    MaskedFill {
        x: NodeId,
        mask: Vec<bool>,
    },
    MeanAll(NodeId),
    SumAll(NodeId),
    MulRow {
        x: NodeId,
        v: NodeId,
    },
    AddRow {
        x: NodeId,
        v: NodeId,
    },
    PickPerRow {
        x: NodeId,
        ids: Vec<usize>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
        scale: f64,
        /// Per-head post-softmax probabilities, saved for the backward pass.
        probs: Vec<Tensor>,
    },
    /// Scalar loss with a precomputed gradient w.r.t. its single input.
    /// Used by the CTC objective, whose backward comes from its own
    /// forward-backward recursion rather than from primitive composition.
    PrecomputedGrad {
        x: NodeId,
        grad: Tensor,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Graph::backward`], indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `id`, if the node was reached by the
    /// backward sweep. Unreached nodes have gradient zero.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient as an owned tensor, materializing zeros for unreached nodes.
    pub fn wrt_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.wrt(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn req(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Constant input; no gradient is tracked through it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    /// Trainable input; `backward` produces a gradient for it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::contract(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    /// Elementwise sum. Shapes must match. d/da = d/db = upstream.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += bv;
        }
        Ok(self.push(out, self.req(&[a, b]), Op::Add(a, b)))
    }

    /// Elementwise difference a - b.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let mut out = self.value(a).clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= bv;
        }
        Ok(self.push(out, self.req(&[a, b]), Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product. d/da = upstream * b, d/db = upstream * a.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= bv;
        }
        Ok(self.push(out, self.req(&[a, b]), Op::Mul(a, b)))
    }

    /// Add a scalar constant to every element.
    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o += s;
        }
        let rq = self.req(&[a]);
        self.push(out, rq, Op::AddScalar(a))
    }

    /// Multiply every element by a scalar constant.
    pub fn mul_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o *= s;
        }
        let rq = self.req(&[a]);
        self.push(out, rq, Op::MulScalar(a, s))
    }

    /// Matrix product [m x k] * [k x n] -> [m x n].
    /// dA = dOut * B^T, dB = A^T * dOut.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::contract(format!(
                "matmul: incompatible shapes {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(va.data(), vb.data(), m, k, n, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, self.req(&[a, b]), Op::Matmul(a, b)))
    }

    /// Fused affine map: x[m x k] * w[k x n] + b[n] broadcast over rows.
    /// Equivalent to matmul followed by add_row; one node instead of two.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.shape().len() != 2
            || vw.shape().len() != 2
            || vx.shape()[1] != vw.shape()[0]
            || vb.len() != vw.shape()[1]
        {
            return Err(Error::contract(format!(
                "linear: incompatible shapes x{:?} w{:?} b{:?}",
                vx.shape(),
                vw.shape(),
                vb.shape()
            )));
        }
        let (m, k, n) = (vx.shape()[0], vx.shape()[1], vw.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            out[i * n..(i + 1) * n].copy_from_slice(vb.data());
        }
        matmul_acc(vx.data(), vw.data(), m, k, n, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, self.req(&[x, w, b]), Op::Linear { x, w, b }))
    }

    /// 2-D transpose. Backward transposes the upstream gradient.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).transpose2()?;
        Ok(self.push(out, self.req(&[a]), Op::Transpose(a)))
    }

    /// Row-wise softmax with max subtraction. For each row y = softmax(x):
    /// dx = y * (dy - dot(dy, y)).
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        if c == 0 {
            return Err(Error::contract("softmax: empty rows"));
        }
        let mut out = va.clone();
        for i in 0..r {
            softmax_row(out.row_mut(i));
        }
        Ok(self.push(out, self.req(&[a]), Op::Softmax(a)))
    }

    /// Row-wise log-softmax: x - max - ln(sum exp(x - max)).
    /// dx = dy - exp(y) * sum(dy) per row.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        if c == 0 {
            return Err(Error::contract("log_softmax: empty rows"));
        }
        let mut out = va.clone();
        for i in 0..r {
            log_softmax_row(out.row_mut(i));
        }
        Ok(self.push(out, self.req(&[a]), Op::LogSoftmax(a)))
    }

    /// Row-wise layer normalization without affine parameters:
    /// y = (x - mean) / sqrt(var + eps), biased variance over the row.
    /// Affine scaling is composed from mul_row/add_row where needed.
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        if c == 0 {
            return Err(Error::contract("layer_norm: empty rows"));
        }
        let mut xhat = va.clone();
        let mut inv_std = vec![0.0; r];
        for (i, slot) in inv_std.iter_mut().enumerate() {
            let row = xhat.row_mut(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let istd = 1.0 / (var + eps).sqrt();
            *slot = istd;
            for x in row.iter_mut() {
                *x = (*x - mean) * istd;
            }
        }
        let value = xhat.clone();
        Ok(self.push(
            value,
            self.req(&[a]),
            Op::LayerNorm {
                x: a,
                xhat,
                inv_std,
            },
        ))
    }

    /// Gelu in tanh form: 0.5 x (1 + tanh(c (x + a x^3))).
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for x in out.data_mut() {
            *x = gelu_fwd(*x);
        }
        let rq = self.req(&[a]);
        self.push(out, rq, Op::Gelu(a))
    }

    /// Row gather: out[i, :] = table[ids[i], :]. Backward scatter-adds rows.
    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        if vt.shape().len() != 2 {
            return Err(Error::contract("embedding_lookup: table must be rank 2"));
        }
        let (rows, d) = (vt.shape()[0], vt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::contract(format!(
                    "embedding_lookup: id {id} out of range (table has {rows} rows)"
                )));
            }
            out.extend_from_slice(vt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            t,
            self.req(&[table]),
            Op::EmbeddingLookup {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Concatenate along `axis` (0 = rows, 1 = columns). Backward splits the
    /// upstream gradient at the seam.
    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 {
            return Err(Error::contract("concat: rank-2 tensors required"));
        }
        match axis {
            0 => {
                if va.cols() != vb.cols() {
                    return Err(Error::contract("concat rows: column counts differ"));
                }
                let mut data = Vec::with_capacity(va.len() + vb.len());
                data.extend_from_slice(va.data());
                data.extend_from_slice(vb.data());
                let t = Tensor::new(vec![va.rows() + vb.rows(), va.cols()], data)?;
                Ok(self.push(t, self.req(&[a, b]), Op::ConcatRows(a, b)))
            }
            1 => {
                if va.rows() != vb.rows() {
                    return Err(Error::contract("concat cols: row counts differ"));
                }
                let (r, ca, cb) = (va.rows(), va.cols(), vb.cols());
                let mut data = Vec::with_capacity(va.len() + vb.len());
                for i in 0..r {
                    data.extend_from_slice(va.row(i));
                    data.extend_from_slice(vb.row(i));
                }
                let t = Tensor::new(vec![r, ca + cb], data)?;
                Ok(self.push(t, self.req(&[a, b]), Op::ConcatCols(a, b)))
            }
            _ => Err(Error::contract("concat: axis must be 0 or 1")),
        }
    }

    /// Contiguous slice along `axis` (0 = rows, 1 = columns). Backward embeds
    /// the upstream gradient into the sliced region.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.shape().len() != 2 {
            return Err(Error::contract("slice: rank-2 tensor required"));
        }
        let (r, c) = (vx.rows(), vx.cols());
        match axis {
            0 => {
                if start + len > r {
                    return Err(Error::contract(format!(
                        "slice rows: {start}+{len} exceeds {r}"
                    )));
                }
                let data = vx.data()[start * c..(start + len) * c].to_vec();
                let t = Tensor::new(vec![len, c], data)?;
                Ok(self.push(t, self.req(&[x]), Op::SliceRows { x, start }))
            }
            1 => {
                if start + len > c {
                    return Err(Error::contract(format!(
                        "slice cols: {start}+{len} exceeds {c}"
                    )));
                }
                let mut data = Vec::with_capacity(r * len);
                for i in 0..r {
                    data.extend_from_slice(&vx.row(i)[start..start + len]);
                }
                let t = Tensor::new(vec![r, len], data)?;
                Ok(self.push(t, self.req(&[x]), Op::SliceCols { x, start }))
            }
            _ => Err(Error::contract("slice: axis must be 0 or 1")),
        }
    }

    /// Replace elements where `mask` is true with `value`. Gradient flows
    /// only through unmasked elements.
    pub fn masked_fill(&mut self, x: NodeId, mask: &[bool], value: f64) -> Result<NodeId> {
        let vx = self.value(x);
        if mask.len() != vx.len() {
            return Err(Error::contract(format!(
                "masked_fill: mask has {} entries, tensor has {}",
                mask.len(),
                vx.len()
            )));
        }
        let mut out = vx.clone();
        for (o, &m) in out.data_mut().iter_mut().zip(mask) {
            if m {
                *o = value;
            }
        }
        Ok(self.push(
            out,
            self.req(&[x]),
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Mean over all elements -> scalar. dx = upstream / numel.
    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.is_empty() {
            return Err(Error::contract("mean_all: empty tensor"));
        }
        let m = vx.data().iter().sum::<f64>() / vx.len() as f64;
        Ok(self.push(Tensor::scalar(m), self.req(&[x]), Op::MeanAll(x)))
    }

    /// Sum over all elements -> scalar. dx = upstream.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum::<f64>();
        let rq = self.req(&[x]);
        self.push(Tensor::scalar(s), rq, Op::SumAll(x))
    }

    /// Broadcast multiply: out[i, :] = x[i, :] * v where v has one row.
    pub fn mul_row(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (vx, vv) = (self.value(x), self.value(v));
        if vv.len() != vx.cols() {
            return Err(Error::contract(format!(
                "mul_row: vector of {} vs {} columns",
                vv.len(),
                vx.cols()
            )));
        }
        let mut out = vx.clone();
        for i in 0..out.rows() {
            for (rv, &sv) in out.row_mut(i).iter_mut().zip(vv.data()) {
                *rv *= sv;
            }
        }
        Ok(self.push(out, self.req(&[x, v]), Op::MulRow { x, v }))
    }

    /// Broadcast add: out[i, :] = x[i, :] + v where v has one row.
    pub fn add_row(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (vx, vv) = (self.value(x), self.value(v));
        if vv.len() != vx.cols() {
            return Err(Error::contract(format!(
                "add_row: vector of {} vs {} columns",
                vv.len(),
                vx.cols()
            )));
        }
        let mut out = vx.clone();
        for i in 0..out.rows() {
            for (rv, &sv) in out.row_mut(i).iter_mut().zip(vv.data()) {
                *rv += sv;
            }
        }
        Ok(self.push(out, self.req(&[x, v]), Op::AddRow { x, v }))
    }

    /// Per-row gather: out[i] = x[i, ids[i]]. Used for cross-entropy.
    pub fn pick_per_row(&mut self, x: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vx = self.value(x);
        if ids.len() != vx.rows() {
            return Err(Error::contract(format!(
                "pick_per_row: {} ids for {} rows",
                ids.len(),
                vx.rows()
            )));
        }
        let c = vx.cols();
        let mut out = Vec::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if id >= c {
                return Err(Error::contract(format!(
                    "pick_per_row: id {id} out of range for {c} columns"
                )));
            }
            out.push(vx.at(i, id));
        }
        let t = Tensor::new(vec![ids.len()], out)?;
        Ok(self.push(
            t,
            self.req(&[x]),
            Op::PickPerRow {
                x,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Multi-head scaled dot-product attention over pre-projected inputs.
    ///
    /// q: [Tq x d], k, v: [Tk x d] with d divisible by `n_heads`. Per head h
    /// over column block h: S = scale * Qh Kh^T (masked entries forced to
    /// MASK_VALUE), P = softmax rows, out block = P Vh. Returns [Tq x d].
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
        mask: AttnMask,
    ) -> Result<NodeId> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        if vq.shape().len() != 2 || vk.shape().len() != 2 || vv.shape().len() != 2 {
            return Err(Error::contract("attention: rank-2 inputs required"));
        }
        let d = vq.cols();
        if vk.cols() != d || vv.cols() != d {
            return Err(Error::contract("attention: q/k/v widths differ"));
        }
        if vk.rows() != vv.rows() {
            return Err(Error::contract("attention: k/v lengths differ"));
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::contract(format!(
                "attention: width {d} not divisible by {n_heads} heads"
            )));
        }
        if let AttnMask::KeyLen(len) = mask {
            if len == 0 || len > vk.rows() {
                return Err(Error::contract(format!(
                    "attention: key mask length {len} out of range 1..={}",
                    vk.rows()
                )));
            }
        }
        let (tq, tk) = (vq.rows(), vk.rows());
        let dk = d / n_heads;
        let scale = 1.0 / (dk as f64).sqrt();

        let mut out = vec![0.0; tq * d];
        let mut probs = Vec::with_capacity(n_heads);
        let mut qh = vec![0.0; tq * dk];
        let mut kh = vec![0.0; tk * dk];
        let mut vh = vec![0.0; tk * dk];
        for h in 0..n_heads {
            copy_head(vq.data(), d, h * dk, dk, &mut qh);
            copy_head(vk.data(), d, h * dk, dk, &mut kh);
            copy_head(vv.data(), d, h * dk, dk, &mut vh);

            let mut scores = vec![0.0; tq * tk];
            matmul_nt_acc(&qh, &kh, tq, dk, tk, &mut scores);
            for s in scores.iter_mut() {
                *s *= scale;
            }
            apply_mask(&mut scores, tq, tk, mask);
            for i in 0..tq {
                softmax_row(&mut scores[i * tk..(i + 1) * tk]);
            }

            let mut ctx = vec![0.0; tq * dk];
            matmul_acc(&scores, &vh, tq, tk, dk, &mut ctx);
            paste_head(&ctx, d, h * dk, dk, &mut out);
            probs.push(Tensor::new(vec![tq, tk], scores)?);
        }
        let t = Tensor::new(vec![tq, d], out)?;
        Ok(self.push(
            t,
            self.req(&[q, k, v]),
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                scale,
                probs,
            },
        ))
    }

    /// Scalar node whose gradient w.r.t. `x` was computed by the caller.
    /// The stored gradient is scaled by the upstream gradient on backward.
    pub(crate) fn precomputed_scalar(&mut self, x: NodeId, value: f64, grad: Tensor) -> Result<NodeId> {
        if grad.shape() != self.value(x).shape() {
            return Err(Error::contract(
                "precomputed_scalar: gradient shape must match input",
            ));
        }
        Ok(self.push(
            Tensor::scalar(value),
            self.req(&[x]),
            Op::PrecomputedGrad { x, grad },
        ))
    }

    /// Reverse sweep from a finite scalar `loss`. See module docs.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.item().is_finite() {
            return Err(Error::numeric(format!(
                "backward: loss is not finite ({})",
                lv.item()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.backprop_node(idx, &g, &mut grads);
            // Reinstate: callers may want intermediate gradients too.
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn grad_entry<'a>(
        &self,
        grads: &'a mut [Option<Tensor>],
        id: NodeId,
    ) -> Option<&'a mut Tensor> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let shape = self.nodes[id.0].value.shape().to_vec();
        Some(grads[id.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(da) = self.grad_entry(grads, *a) {
                    axpy(1.0, g.data(), da.data_mut());
                }
                if let Some(db) = self.grad_entry(grads, *b) {
                    axpy(1.0, g.data(), db.data_mut());
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.grad_entry(grads, *a) {
                    axpy(1.0, g.data(), da.data_mut());
                }
                if let Some(db) = self.grad_entry(grads, *b) {
                    axpy(-1.0, g.data(), db.data_mut());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                if let Some(da) = self.grad_entry(grads, *a) {
                    for ((d, &gv), &bv) in da.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = self.grad_entry(grads, *b) {
                    for ((d, &gv), &av) in db.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *d += gv * av;
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(da) = self.grad_entry(grads, *a) {
                    axpy(1.0, g.data(), da.data_mut());
                }
            }
            Op::MulScalar(a, s) => {
                let s = *s;
                if let Some(da) = self.grad_entry(grads, *a) {
                    axpy(s, g.data(), da.data_mut());
                }
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                let (vad, vbd) = (va.data().to_vec(), vb.data().to_vec());
                if let Some(da) = self.grad_entry(grads, *a) {
                    matmul_nt_acc(g.data(), &vbd, m, n, k, da.data_mut());
                }
                if let Some(db) = self.grad_entry(grads, *b) {
                    matmul_tn_acc(&vad, g.data(), m, k, n, db.data_mut());
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (m, k) = (vx.shape()[0], vx.shape()[1]);
                let n = vw.shape()[1];
                let (vxd, vwd) = (vx.data().to_vec(), vw.data().to_vec());
                if let Some(dx) = self.grad_entry(grads, *x) {
                    matmul_nt_acc(g.data(), &vwd, m, n, k, dx.data_mut());
                }
                if let Some(dw) = self.grad_entry(grads, *w) {
                    matmul_tn_acc(&vxd, g.data(), m, k, n, dw.data_mut());
                }
                if let Some(db) = self.grad_entry(grads, *b) {
                    let dbd = db.data_mut();
                    for i in 0..m {
                        axpy(1.0, &g.data()[i * n..(i + 1) * n], dbd);
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (g.rows(), g.cols());
                if let Some(da) = self.grad_entry(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            let v = g.at(i, j);
                            let dd = da.data_mut();
                            dd[j * r + i] += v;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = self.value(NodeId(idx)).clone();
                let (r, c) = (y.rows(), y.cols());
                if let Some(da) = self.grad_entry(grads, *a) {
                    for i in 0..r {
                        let yr = y.row(i);
                        let gr = &g.data()[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        let dr = da.row_mut(i);
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let y = self.value(NodeId(idx)).clone();
                let (r, c) = (y.rows(), y.cols());
                if let Some(da) = self.grad_entry(grads, *a) {
                    for i in 0..r {
                        let yr = y.row(i);
                        let gr = &g.data()[i * c..(i + 1) * c];
                        let gsum: f64 = gr.iter().sum();
                        let dr = da.row_mut(i);
                        for j in 0..c {
                            dr[j] += gr[j] - yr[j].exp() * gsum;
                        }
                    }
                }
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let c = xhat.cols();
                if let Some(dx) = self.grad_entry(grads, *x) {
                    for (i, &istd) in inv_std.iter().enumerate() {
                        let xh = xhat.row(i);
                        let gr = &g.data()[i * c..(i + 1) * c];
                        let m1: f64 = gr.iter().sum::<f64>() / c as f64;
                        let m2: f64 =
                            gr.iter().zip(xh).map(|(&gv, &xv)| gv * xv).sum::<f64>() / c as f64;
                        let dr = dx.row_mut(i);
                        for j in 0..c {
                            dr[j] += istd * (gr[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let va = self.value(*a).clone();
                if let Some(da) = self.grad_entry(grads, *a) {
                    for ((d, &gv), &xv) in da.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *d += gv * gelu_bwd(xv);
                    }
                }
            }
            Op::EmbeddingLookup { table, ids } => {
                let d = g.cols();
                if let Some(dt) = self.grad_entry(grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        axpy(1.0, &g.data()[i * d..(i + 1) * d], dt.row_mut(id));
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let ra = self.value(*a).rows();
                let c = g.cols();
                if let Some(da) = self.grad_entry(grads, *a) {
                    axpy(1.0, &g.data()[..ra * c], da.data_mut());
                }
                if let Some(db) = self.grad_entry(grads, *b) {
                    axpy(1.0, &g.data()[ra * c..], db.data_mut());
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let c = g.cols();
                let r = g.rows();
                if let Some(da) = self.grad_entry(grads, *a) {
                    for i in 0..r {
                        axpy(1.0, &g.row(i)[..ca], da.row_mut(i));
                    }
                }
                if let Some(db) = self.grad_entry(grads, *b) {
                    for i in 0..r {
                        axpy(1.0, &g.row(i)[ca..c], db.row_mut(i));
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let (r, c) = (g.rows(), g.cols());
                let start = *start;
                if let Some(dx) = self.grad_entry(grads, *x) {
                    for i in 0..r {
                        axpy(1.0, g.row(i), dx.row_mut(start + i));
                    }
                    let _ = c;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = (g.rows(), g.cols());
                let start = *start;
                if let Some(dx) = self.grad_entry(grads, *x) {
                    for i in 0..r {
                        axpy(1.0, g.row(i), &mut dx.row_mut(i)[start..start + c]);
                    }
                }
            }
            Op::MaskedFill { x, mask } => {
                if let Some(dx) = self.grad_entry(grads, *x) {
                    for ((d, &gv), &m) in dx.data_mut().iter_mut().zip(g.data()).zip(mask) {
                        if !m {
                            *d += gv;
                        }
                    }
                }
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len() as f64;
                let gv = g.item() / n;
                if let Some(dx) = self.grad_entry(grads, *x) {
                    for d in dx.data_mut() {
                        *d += gv;
                    }
                }
            }
            Op::SumAll(x) => {
                let gv = g.item();
                if let Some(dx) = self.grad_entry(grads, *x) {
                    for d in dx.data_mut() {
                        *d += gv;
                    }
                }
            }
            Op::MulRow { x, v } => {
                let (vx, vv) = (self.value(*x).clone(), self.value(*v).clone());
                let (r, c) = (vx.rows(), vx.cols());
                if let Some(dx) = self.grad_entry(grads, *x) {
                    for i in 0..r {
                        let gr = &g.data()[i * c..(i + 1) * c];
                        let dr = dx.row_mut(i);
                        for j in 0..c {
                            dr[j] += gr[j] * vv.data()[j];
                        }
                    }
                }
                if let Some(dv) = self.grad_entry(grads, *v) {
                    let dd = dv.data_mut();
                    for i in 0..r {
                        let gr = &g.data()[i * c..(i + 1) * c];
                        let xr = vx.row(i);
                        for j in 0..c {
                            dd[j] += gr[j] * xr[j];
                        }
                    }
                }
            }
            Op::AddRow { x, v } => {
                let (r, c) = (g.rows(), g.cols());
                if let Some(dx) = self.grad_entry(grads, *x) {
                    axpy(1.0, g.data(), dx.data_mut());
                }
                if let Some(dv) = self.grad_entry(grads, *v) {
                    let dd = dv.data_mut();
                    for i in 0..r {
                        axpy(1.0, &g.data()[i * c..(i + 1) * c], dd);
                    }
                }
            }
            Op::PickPerRow { x, ids } => {
                if let Some(dx) = self.grad_entry(grads, *x) {
                    let c = dx.cols();
                    for (i, &id) in ids.iter().enumerate() {
                        let dd = dx.data_mut();
                        dd[i * c + id] += g.data()[i];
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                scale,
                probs,
            } => {
                self.backprop_attention(g, *q, *k, *v, *n_heads, *scale, probs, grads);
            }
            Op::PrecomputedGrad { x, grad } => {
                let scale = g.item();
                if let Some(dx) = self.grad_entry(grads, *x) {
                    axpy(scale, grad.data(), dx.data_mut());
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        g: &Tensor,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
        scale: f64,
        probs: &[Tensor],
        grads: &mut [Option<Tensor>],
    ) {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.cols();
        let dk = d / n_heads;
        let (tq, tk) = (vq.rows(), vk.rows());

        let mut gctx = vec![0.0; tq * dk];
        let mut qh = vec![0.0; tq * dk];
        let mut kh = vec![0.0; tk * dk];
        let mut vh = vec![0.0; tk * dk];
        let mut dqh = vec![0.0; tq * dk];
        let mut dkh = vec![0.0; tk * dk];
        let mut dvh = vec![0.0; tk * dk];
        let mut dp = vec![0.0; tq * tk];
        let mut ds = vec![0.0; tq * tk];

        let qd = vq.data().to_vec();
        let kd = vk.data().to_vec();
        let vd = vv.data().to_vec();

        for (h, ph) in probs.iter().enumerate() {
            copy_head(&qd, d, h * dk, dk, &mut qh);
            copy_head(&kd, d, h * dk, dk, &mut kh);
            copy_head(&vd, d, h * dk, dk, &mut vh);
            copy_head(g.data(), d, h * dk, dk, &mut gctx);
            let p = ph.data();

            // dV = P^T gctx
            dvh.iter_mut().for_each(|x| *x = 0.0);
            matmul_tn_acc(p, &gctx, tq, tk, dk, &mut dvh);

            // dP = gctx V^T
            dp.iter_mut().for_each(|x| *x = 0.0);
            matmul_nt_acc(&gctx, &vh, tq, dk, tk, &mut dp);

            // dS = P (dP - rowdot(dP, P)), then scale.
            for i in 0..tq {
                let pr = &p[i * tk..(i + 1) * tk];
                let dpr = &dp[i * tk..(i + 1) * tk];
                let dot: f64 = pr.iter().zip(dpr).map(|(&pv, &dv)| pv * dv).sum();
                let dsr = &mut ds[i * tk..(i + 1) * tk];
                for j in 0..tk {
                    dsr[j] = pr[j] * (dpr[j] - dot) * scale;
                }
            }

            // dQ = dS K, dK = dS^T Q
            dqh.iter_mut().for_each(|x| *x = 0.0);
            matmul_acc(&ds, &kh, tq, tk, dk, &mut dqh);
            dkh.iter_mut().for_each(|x| *x = 0.0);
            matmul_tn_acc(&ds, &qh, tq, tk, dk, &mut dkh);

            if let Some(dq) = self.grad_entry(grads, q) {
                paste_head_acc(&dqh, d, h * dk, dk, dq.data_mut());
            }
            if let Some(dkt) = self.grad_entry(grads, k) {
                paste_head_acc(&dkh, d, h * dk, dk, dkt.data_mut());
            }
            if let Some(dvt) = self.grad_entry(grads, v) {
                paste_head_acc(&dvh, d, h * dk, dk, dvt.data_mut());
            }
        }
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

fn copy_head(src: &[f64], width: usize, col0: usize, dk: usize, dst: &mut [f64]) {
    let rows = src.len() / width;
    debug_assert_eq!(dst.len(), rows * dk);
    for i in 0..rows {
        dst[i * dk..(i + 1) * dk].copy_from_slice(&src[i * width + col0..i * width + col0 + dk]);
    }
}

fn paste_head(src: &[f64], width: usize, col0: usize, dk: usize, dst: &mut [f64]) {
    let rows = src.len() / dk;
    for i in 0..rows {
        dst[i * width + col0..i * width + col0 + dk].copy_from_slice(&src[i * dk..(i + 1) * dk]);
    }
}

fn paste_head_acc(src: &[f64], width: usize, col0: usize, dk: usize, dst: &mut [f64]) {
    let rows = src.len() / dk;
    for i in 0..rows {
        axpy(
            1.0,
            &src[i * dk..(i + 1) * dk],
            &mut dst[i * width + col0..i * width + col0 + dk],
        );
    }
}

fn apply_mask(scores: &mut [f64], tq: usize, tk: usize, mask: AttnMask) {
    match mask {
        AttnMask::None => {}
        AttnMask::Causal => {
            for i in 0..tq {
                for j in (i + 1)..tk {
                    scores[i * tk + j] = MASK_VALUE;
                }
            }
        }
        AttnMask::KeyLen(len) => {
            for i in 0..tq {
                for j in len..tk {
                    scores[i * tk + j] = MASK_VALUE;
                }
            }
        }
    }
}

pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

pub(crate) fn log_softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &x in row.iter() {
        sum += (x - max).exp();
    }
    let lse = max + sum.ln();
    for x in row.iter_mut() {
        *x -= lse;
    }
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn layer_norm_centers_constant_rows_to_zero() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 4], &[5.0, 5.0, 5.0, 5.0]));
        let y = g.layer_norm(x, 1e-5).unwrap();
        for &v in g.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_log_softmax_matches() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, -5.0, 0.0, 5.0]));
        let sm = g.softmax(x).unwrap();
        let lsm = g.log_softmax(x).unwrap();
        for i in 0..2 {
            let s: f64 = g.value(sm).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for j in 0..3 {
                assert!((g.value(sm).at(i, j).ln() - g.value(lsm).at(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_fill_replaces_and_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let y = g
            .masked_fill(x, &[false, true, false, true], -7.0)
            .unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -7.0, 3.0, -7.0]);
        let s = g.sum_all(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn attention_with_causal_mask_ignores_future_keys() {
        let mut g = Graph::new();
        let q = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let k = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let v = g.leaf(t(&[2, 2], &[10.0, 20.0, 30.0, 40.0]));
        let out = g.attention(q, k, v, 1, AttnMask::Causal).unwrap();
        // First query can only see the first key.
        assert!((g.value(out).at(0, 0) - 10.0).abs() < 1e-12);
        assert!((g.value(out).at(0, 1) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn key_len_mask_makes_padded_keys_irrelevant() {
        let mut g = Graph::new();
        let q = g.leaf(t(&[1, 4], &[0.3, -0.2, 0.9, 0.1]));
        let k_short = g.leaf(t(&[2, 4], &[0.5, 0.1, -0.3, 0.2, 0.7, -0.5, 0.2, 0.0]));
        let v_short = g.leaf(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let out_short = g.attention(q, k_short, v_short, 2, AttnMask::None).unwrap();

        // Same keys plus garbage rows, masked off.
        let k_pad = g.leaf(t(
            &[3, 4],
            &[0.5, 0.1, -0.3, 0.2, 0.7, -0.5, 0.2, 0.0, 99.0, -99.0, 50.0, 1.0],
        ));
        let v_pad = g.leaf(t(
            &[3, 4],
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, -1e6, 1e6, 0.0, 3.0],
        ));
        let out_pad = g.attention(q, k_pad, v_pad, 2, AttnMask::KeyLen(2)).unwrap();
        for (a, b) in g
            .value(out_short)
            .data()
            .iter()
            .zip(g.value(out_pad).data())
        {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_non_finite() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 2], &[1.0, 2.0]));
        assert!(g.backward(x).is_err());
        let inf = g.leaf(Tensor::scalar(f64::INFINITY));
        assert!(g.backward(inf).is_err());
    }

    #[test]
    fn unreached_parameters_have_no_gradient_entry() {
        let mut g = Graph::new();
        let used = g.param(t(&[1, 2], &[1.0, 2.0]));
        let unused = g.param(t(&[1, 2], &[3.0, 4.0]));
        let s = g.sum_all(used);
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(unused).is_none());
        assert_eq!(
            grads.wrt_or_zeros(unused, &[1, 2]).data(),
            &[0.0, 0.0],
        );
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(t(&[2, 3], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]));
        let cat = g.concat(a, b, 1).unwrap();
        assert_eq!(g.value(cat).shape(), &[2, 5]);
        let back = g.slice(cat, 1, 2, 3).unwrap();
        assert_eq!(g.value(back).data(), g.value(b).data());

        let cat0 = g.concat(a, a, 0).unwrap();
        let back0 = g.slice(cat0, 0, 2, 2).unwrap();
        assert_eq!(g.value(back0).data(), g.value(a).data());
    }
}
