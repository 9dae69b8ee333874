//! Tape-based reverse-mode differentiable arrays.
//!
//! Computation is recorded as a flat operation tape; [`Tape::backward`]
//! replays it in reverse, accumulating gradients into every node that
//! requires them. All kernels are plain sequential loops: identical inputs
//! produce bit-identical outputs.

mod gradcheck;
mod layers;
mod optim;
mod params;

pub use gradcheck::{central_diff, max_rel_err, rel_err, GradCheckReport};
pub use layers::{
    feed_forward, multi_head_attention, Conv3, FeedForward, LayerNorm, Linear,
    MultiHeadAttention, TransformerBlock,
};
pub use optim::{Adam, Sgd};
pub use params::{ParamInit, ParamStore};

use thiserror::Error;

/// Scalar type the engine is generic over. f64 for tests and oracles,
/// f32 is enough for training.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssign
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("softmax mask row {row} is fully masked")]
    DegenerateMask { row: usize },
    #[error("mask entries must be 0 or -inf, found {value} at index {index}")]
    InvalidMask { value: f64, index: usize },
    #[error("{0}")]
    Config(String),
    #[error("parameter {path} has no gradient (backward not run or branch unused)")]
    UninitializedGradient { path: String },
    #[error("unknown parameter path {0}")]
    UnknownParam(String),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
}

pub type Result<V> = std::result::Result<V, TensorError>;

/// Dense N-dimensional array participating in differentiation.
///
/// `grad` is populated (same shape as `data`) after a backward pass when
/// `requires_grad` is set; arrays off the path get an all-zero gradient.
#[derive(Debug, Clone)]
pub struct DiffArray<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Option<Vec<T>>,
    pub requires_grad: bool,
}

impl<T: Real> DiffArray<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(DiffArray {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::from_f64(x)).collect())
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        DiffArray {
            shape,
            data: vec![T::zero(); n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    /// `[.., k] x [k, n]`; leading dims of the left operand are row-batched.
    MatMul(NodeId, NodeId),
    /// `[B, m, k] x [B, k, n]`.
    BatMatMul(NodeId, NodeId),
    TransposeLast2(NodeId),
    Reshape(NodeId),
    Concat { inputs: Vec<NodeId>, axis: usize },
    SliceLast { input: NodeId, start: usize },
    Gather { input: NodeId, indices: Vec<usize> },
    /// Softmax over the last axis; `blocked` has the extent of the last two
    /// dims and broadcasts over leading batch dims. Blocked entries get
    /// exactly zero weight.
    SoftmaxLast { input: NodeId, blocked: Option<Vec<bool>> },
    Exp(NodeId),
    Ln(NodeId),
    Gelu(NodeId),
    LeakyRelu(NodeId, T),
    Sigmoid(NodeId),
    /// Normalize over the last axis, elementwise affine.
    LayerNorm { input: NodeId, gamma: NodeId, beta: NodeId, eps: T },
    /// Normalize each leading-axis channel over all trailing positions,
    /// scalar affine per channel.
    ChannelNorm { input: NodeId, gamma: NodeId, beta: NodeId, eps: T },
    AddLastBias { input: NodeId, bias: NodeId },
    AddChannelBias { input: NodeId, bias: NodeId },
    MeanAxis { input: NodeId, axis: usize },
    MeanAll(NodeId),
    SumAll(NodeId),
    CumSum(NodeId),
    Conv3d { input: NodeId, kernel: NodeId, stride: usize, padding: usize },
}

/// Recorded computation. Nodes own their values; gradients are filled in by
/// [`Tape::backward`].
pub struct Tape<T> {
    nodes: Vec<DiffArray<T>>,
    ops: Vec<Op<T>>,
    bindings: Vec<(NodeId, String)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            bindings: Vec::new(),
        }
    }

    fn push(&mut self, mut arr: DiffArray<T>, op: Op<T>) -> NodeId {
        arr.requires_grad = match &op {
            Op::Leaf => arr.requires_grad,
            _ => self.op_inputs(&op).iter().any(|&i| self.nodes[i.0].requires_grad),
        };
        let id = NodeId(self.nodes.len());
        self.nodes.push(arr);
        self.ops.push(op);
        id
    }

    fn op_inputs(&self, op: &Op<T>) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::BatMatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::TransposeLast2(a)
            | Op::Reshape(a)
            | Op::SliceLast { input: a, .. }
            | Op::Gather { input: a, .. }
            | Op::SoftmaxLast { input: a, .. }
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Gelu(a)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::MeanAxis { input: a, .. }
            | Op::MeanAll(a)
            | Op::SumAll(a)
            | Op::CumSum(a) => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::LayerNorm { input, gamma, beta, .. } | Op::ChannelNorm { input, gamma, beta, .. } => {
                vec![*input, *gamma, *beta]
            }
            Op::AddLastBias { input, bias } | Op::AddChannelBias { input, bias } => {
                vec![*input, *bias]
            }
            Op::Conv3d { input, kernel, .. } => vec![*input, *kernel],
        }
    }

    /// Put an existing array on the tape as a leaf.
    pub fn leaf(&mut self, arr: DiffArray<T>) -> NodeId {
        self.push(arr, Op::Leaf)
    }

    /// Leaf that does not require gradients.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<NodeId> {
        Ok(self.leaf(DiffArray::new(shape, data)?))
    }

    /// Leaf that requires gradients.
    pub fn var(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<NodeId> {
        Ok(self.leaf(DiffArray::new(shape, data)?.requires_grad()))
    }

    pub fn scalar(&mut self, v: T) -> NodeId {
        self.leaf(DiffArray {
            shape: vec![1],
            data: vec![v],
            grad: None,
            requires_grad: false,
        })
    }

    /// Record that a leaf holds the named parameter so its gradient can be
    /// absorbed back into a [`ParamStore`] after backward.
    pub fn bind(&mut self, id: NodeId, path: &str) {
        self.bindings.push((id, path.to_string()));
    }

    pub fn bindings(&self) -> &[(NodeId, String)] {
        &self.bindings
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn array(&self, id: NodeId) -> &DiffArray<T> {
        &self.nodes[id.0]
    }

    /// Value of a single-element node.
    pub fn value(&self, id: NodeId) -> T {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- elementwise ----

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(DiffArray::new(shape, data)?, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(DiffArray::new(shape, data)?, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(DiffArray::new(shape, data)?, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let data = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(
            DiffArray {
                shape,
                data,
                grad: None,
                requires_grad: false,
            },
            Op::Scale(a, c),
        )
    }

    // ---- linear algebra ----

    /// `[.., k] x [k, n]`. Leading dims of `a` are treated as rows, so a
    /// batched left operand against a shared weight needs no reshaping.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ashape, bshape) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if ashape.len() < 2 || bshape.len() != 2 || ashape[ashape.len() - 1] != bshape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ashape.clone(),
                rhs: bshape.clone(),
            });
        }
        let k = bshape[0];
        let n = bshape[1];
        let m: usize = ashape[..ashape.len() - 1].iter().product();
        let mut out = vec![T::zero(); m * n];
        matmul_kernel(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut out);
        let mut oshape = ashape[..ashape.len() - 1].to_vec();
        oshape.push(n);
        Ok(self.push(DiffArray::new(oshape, out)?, Op::MatMul(a, b)))
    }

    /// `[B, m, k] x [B, k, n]`.
    pub fn bat_matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ashape, bshape) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if ashape.len() != 3 || bshape.len() != 3 || ashape[0] != bshape[0] || ashape[2] != bshape[1]
        {
            return Err(TensorError::ShapeMismatch {
                op: "bat_matmul",
                lhs: ashape.clone(),
                rhs: bshape.clone(),
            });
        }
        let (bt, m, k, n) = (ashape[0], ashape[1], ashape[2], bshape[2]);
        let mut out = vec![T::zero(); bt * m * n];
        for i in 0..bt {
            matmul_kernel(
                &self.nodes[a.0].data[i * m * k..(i + 1) * m * k],
                &self.nodes[b.0].data[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push(DiffArray::new(vec![bt, m, n], out)?, Op::BatMatMul(a, b)))
    }

    pub fn transpose_last2(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() < 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose_last2",
                shape,
                reason: "needs rank >= 2".into(),
            });
        }
        let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch: usize = shape[..shape.len() - 2].iter().product();
        let src = &self.nodes[a.0].data;
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..batch {
            let o = bi * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[o + j * m + i] = src[o + i * n + j];
                }
            }
        }
        let mut oshape = shape.clone();
        let r = oshape.len();
        oshape.swap(r - 2, r - 1);
        Ok(self.push(DiffArray::new(oshape, out)?, Op::TransposeLast2(a)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != self.nodes[a.0].data.len() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape,
                reason: format!("element count != {}", self.nodes[a.0].data.len()),
            });
        }
        let data = self.nodes[a.0].data.clone();
        Ok(self.push(DiffArray::new(shape, data)?, Op::Reshape(a)))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self.nodes[inputs[0].0].shape.clone();
        if axis >= first.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: first,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut axis_total = 0;
        for &id in inputs {
            let s = &self.nodes[id.0].shape;
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.clone(),
                });
            }
            axis_total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut oshape = first.clone();
        oshape[axis] = axis_total;
        let mut out = vec![T::zero(); outer * axis_total * inner];
        for o in 0..outer {
            let mut offset = 0;
            for &id in inputs {
                let a = self.nodes[id.0].shape[axis];
                let src = &self.nodes[id.0].data[o * a * inner..(o + 1) * a * inner];
                out[(o * axis_total + offset) * inner..(o * axis_total + offset + a) * inner]
                    .copy_from_slice(src);
                offset += a;
            }
        }
        Ok(self.push(
            DiffArray::new(oshape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice_last(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        let last = *shape.last().ok_or_else(|| TensorError::InvalidShape {
            op: "slice_last",
            shape: shape.clone(),
            reason: "scalar input".into(),
        })?;
        if start + len > last || len == 0 {
            return Err(TensorError::InvalidShape {
                op: "slice_last",
                shape,
                reason: format!("slice {start}..{} out of {last}", start + len),
            });
        }
        let rows = self.nodes[a.0].data.len() / last;
        let mut out = vec![T::zero(); rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len]
                .copy_from_slice(&self.nodes[a.0].data[r * last + start..r * last + start + len]);
        }
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = len;
        Ok(self.push(DiffArray::new(oshape, out)?, Op::SliceLast { input: a, start }))
    }

    /// Arbitrary selection by flat index (covers permutations, un/fold and
    /// tiling). Backward scatter-adds.
    pub fn gather(&mut self, a: NodeId, indices: Vec<usize>, out_shape: Vec<usize>) -> Result<NodeId> {
        if out_shape.iter().product::<usize>() != indices.len() {
            return Err(TensorError::InvalidShape {
                op: "gather",
                shape: out_shape,
                reason: "index count != output size".into(),
            });
        }
        let src = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(indices.len());
        for &ix in &indices {
            if ix >= src.len() {
                return Err(TensorError::InvalidShape {
                    op: "gather",
                    shape: self.nodes[a.0].shape.clone(),
                    reason: format!("index {ix} out of bounds"),
                });
            }
            out.push(src[ix]);
        }
        Ok(self.push(DiffArray::new(out_shape, out)?, Op::Gather { input: a, indices }))
    }

    // ---- nonlinear ----

    /// Softmax over the last axis. `mask` entries must be 0 (kept) or -inf
    /// (blocked, weight exactly 0); it spans the last two dims and
    /// broadcasts over any leading batch dims. No row may be fully blocked.
    pub fn softmax_rows(&mut self, a: NodeId, mask: Option<&DiffArray<T>>) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        let n = *shape.last().ok_or_else(|| TensorError::InvalidShape {
            op: "softmax_rows",
            shape: shape.clone(),
            reason: "scalar input".into(),
        })?;
        let blocked = match mask {
            None => None,
            Some(m) => {
                if shape.len() < 2 || m.shape != shape[shape.len() - 2..] {
                    return Err(TensorError::ShapeMismatch {
                        op: "softmax_rows mask",
                        lhs: shape.clone(),
                        rhs: m.shape.clone(),
                    });
                }
                let mut b = Vec::with_capacity(m.data.len());
                for (i, &v) in m.data.iter().enumerate() {
                    if v == T::zero() {
                        b.push(false);
                    } else if v == T::neg_infinity() {
                        b.push(true);
                    } else {
                        return Err(TensorError::InvalidMask {
                            value: v.to_f64(),
                            index: i,
                        });
                    }
                }
                for (r, row) in b.chunks(n).enumerate() {
                    if row.iter().all(|&x| x) {
                        return Err(TensorError::DegenerateMask { row: r });
                    }
                }
                Some(b)
            }
        };
        let rows = self.nodes[a.0].data.len() / n;
        let mask_rows = blocked.as_ref().map(|b| b.len() / n).unwrap_or(1);
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            let x = &self.nodes[a.0].data[r * n..(r + 1) * n];
            let brow = blocked
                .as_ref()
                .map(|b| &b[(r % mask_rows) * n..((r % mask_rows) + 1) * n]);
            let keep = |j: usize| brow.map(|b| !b[j]).unwrap_or(true);
            let mut mx = T::neg_infinity();
            for j in 0..n {
                if keep(j) && x[j] > mx {
                    mx = x[j];
                }
            }
            let mut sum = T::zero();
            for j in 0..n {
                if keep(j) {
                    let e = (x[j] - mx).exp();
                    out[r * n + j] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                if keep(j) {
                    out[r * n + j] /= sum;
                }
            }
        }
        Ok(self.push(
            DiffArray::new(shape, out)?,
            Op::SoftmaxLast { input: a, blocked },
        ))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a.0].data.iter().map(|x| x.exp()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(
            DiffArray {
                shape,
                data,
                grad: None,
                requires_grad: false,
            },
            Op::Exp(a),
        )
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a.0].data.iter().map(|x| x.ln()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(
            DiffArray {
                shape,
                data,
                grad: None,
                requires_grad: false,
            },
            Op::Ln(a),
        )
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a.0].data.iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(
            DiffArray {
                shape,
                data,
                grad: None,
                requires_grad: false,
            },
            Op::Gelu(a),
        )
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let s = T::from_f64(slope);
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| if x > T::zero() { x } else { x * s })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(
            DiffArray {
                shape,
                data,
                grad: None,
                requires_grad: false,
            },
            Op::LeakyRelu(a, s),
        )
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| T::one() / (T::one() + (-x).exp()))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(
            DiffArray {
                shape,
                data,
                grad: None,
                requires_grad: false,
            },
            Op::Sigmoid(a),
        )
    }

    // ---- normalization ----

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().unwrap();
        if self.nodes[gamma.0].shape != [d] || self.nodes[beta.0].shape != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        let e = T::from_f64(eps);
        let rows = self.nodes[x.0].data.len() / d;
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let xs = &self.nodes[x.0].data[r * d..(r + 1) * d];
            let (mean, inv_std) = moments(xs, e);
            for j in 0..d {
                out[r * d + j] =
                    (xs[j] - mean) * inv_std * self.nodes[gamma.0].data[j] + self.nodes[beta.0].data[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(
            DiffArray::new(shape, out)?,
            Op::LayerNorm {
                input: x,
                gamma,
                beta,
                eps: e,
            },
        ))
    }

    /// Per-channel normalization of a `[C, ..]` feature map over all
    /// trailing positions, with scalar scale/shift per channel.
    pub fn channel_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape.clone();
        let c = shape[0];
        if self.nodes[gamma.0].shape != [c] || self.nodes[beta.0].shape != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "channel_norm",
                lhs: shape,
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        let e = T::from_f64(eps);
        let s = self.nodes[x.0].data.len() / c;
        let mut out = vec![T::zero(); c * s];
        for ch in 0..c {
            let xs = &self.nodes[x.0].data[ch * s..(ch + 1) * s];
            let (mean, inv_std) = moments(xs, e);
            let g = self.nodes[gamma.0].data[ch];
            let b = self.nodes[beta.0].data[ch];
            for j in 0..s {
                out[ch * s + j] = (xs[j] - mean) * inv_std * g + b;
            }
        }
        Ok(self.push(
            DiffArray::new(shape, out)?,
            Op::ChannelNorm {
                input: x,
                gamma,
                beta,
                eps: e,
            },
        ))
    }

    pub fn add_last_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().unwrap();
        if self.nodes[bias.0].shape != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_last_bias",
                lhs: shape,
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let rows = self.nodes[x.0].data.len() / d;
        let mut out = self.nodes[x.0].data.clone();
        for r in 0..rows {
            for j in 0..d {
                out[r * d + j] += self.nodes[bias.0].data[j];
            }
        }
        Ok(self.push(DiffArray::new(shape, out)?, Op::AddLastBias { input: x, bias }))
    }

    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape.clone();
        let c = shape[0];
        if self.nodes[bias.0].shape != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel_bias",
                lhs: shape,
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let s = self.nodes[x.0].data.len() / c;
        let mut out = self.nodes[x.0].data.clone();
        for ch in 0..c {
            let b = self.nodes[bias.0].data[ch];
            for j in 0..s {
                out[ch * s + j] += b;
            }
        }
        Ok(self.push(DiffArray::new(shape, out)?, Op::AddChannelBias { input: x, bias }))
    }

    // ---- reductions ----

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::InvalidShape {
                op: "mean_axis",
                shape,
                reason: format!("axis {axis} out of range"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let a = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        let inv = T::one() / T::from_f64(a as f64);
        for o in 0..outer {
            for ai in 0..a {
                for i in 0..inner {
                    out[o * inner + i] += self.nodes[x.0].data[(o * a + ai) * inner + i];
                }
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let mut oshape: Vec<usize> = shape[..axis].to_vec();
        oshape.extend_from_slice(&shape[axis + 1..]);
        if oshape.is_empty() {
            oshape.push(1);
        }
        Ok(self.push(DiffArray::new(oshape, out)?, Op::MeanAxis { input: x, axis }))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.0].data.len();
        let mut s = T::zero();
        for &v in &self.nodes[x.0].data {
            s += v;
        }
        s /= T::from_f64(n as f64);
        self.push(
            DiffArray {
                shape: vec![1],
                data: vec![s],
                grad: None,
                requires_grad: false,
            },
            Op::MeanAll(x),
        )
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut s = T::zero();
        for &v in &self.nodes[x.0].data {
            s += v;
        }
        self.push(
            DiffArray {
                shape: vec![1],
                data: vec![s],
                grad: None,
                requires_grad: false,
            },
            Op::SumAll(x),
        )
    }

    /// Inclusive prefix sum of a vector.
    pub fn cumsum(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 1 {
            return Err(TensorError::InvalidShape {
                op: "cumsum",
                shape,
                reason: "expects rank 1".into(),
            });
        }
        let mut out = Vec::with_capacity(self.nodes[x.0].data.len());
        let mut acc = T::zero();
        for &v in &self.nodes[x.0].data {
            acc += v;
            out.push(acc);
        }
        Ok(self.push(DiffArray::new(shape, out)?, Op::CumSum(x)))
    }

    // ---- convolution ----

    /// Cross-correlation of `[C_in, H, W, D]` with `[C_out, C_in, k, k, k]`,
    /// zero padding, no kernel flip. Kernel size must be 1 or 3 and the
    /// output extents must come out integral.
    pub fn conv3d(&mut self, x: NodeId, kernel: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let xs = self.nodes[x.0].shape.clone();
        let ks = self.nodes[kernel.0].shape.clone();
        if xs.len() != 4 || ks.len() != 5 {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                lhs: xs,
                rhs: ks,
            });
        }
        let k = ks[2];
        if !(k == 1 || k == 3) || ks[3] != k || ks[4] != k {
            return Err(TensorError::Config(format!(
                "conv3d: kernel size must be 1 or 3, got {:?}",
                &ks[2..]
            )));
        }
        if ks[1] != xs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                lhs: xs,
                rhs: ks,
            });
        }
        if stride == 0 {
            return Err(TensorError::Config("conv3d: stride must be positive".into()));
        }
        let mut odims = [0usize; 3];
        for (i, &dim) in xs[1..].iter().enumerate() {
            let span = dim + 2 * padding;
            if span < k || (span - k) % stride != 0 {
                return Err(TensorError::Config(format!(
                    "conv3d: input dim {dim} with padding {padding}, kernel {k}, stride {stride} \
                     gives a non-integer output extent"
                )));
            }
            odims[i] = (span - k) / stride + 1;
        }
        let (c_out, c_in) = (ks[0], ks[1]);
        let (h, w, d) = (xs[1], xs[2], xs[3]);
        let (oh, ow, od) = (odims[0], odims[1], odims[2]);
        let mut out = vec![T::zero(); c_out * oh * ow * od];
        let xdata = &self.nodes[x.0].data;
        let kdata = &self.nodes[kernel.0].data;
        for co in 0..c_out {
            for ci in 0..c_in {
                for kh in 0..k {
                    for kw in 0..k {
                        for kd in 0..k {
                            let wgt = kdata[(((co * c_in + ci) * k + kh) * k + kw) * k + kd];
                            if wgt == T::zero() {
                                continue;
                            }
                            for o0 in 0..oh {
                                let i0 = (o0 * stride + kh) as isize - padding as isize;
                                if i0 < 0 || i0 as usize >= h {
                                    continue;
                                }
                                for o1 in 0..ow {
                                    let i1 = (o1 * stride + kw) as isize - padding as isize;
                                    if i1 < 0 || i1 as usize >= w {
                                        continue;
                                    }
                                    let obase = ((co * oh + o0) * ow + o1) * od;
                                    let ibase = ((ci * h + i0 as usize) * w + i1 as usize) * d;
                                    for o2 in 0..od {
                                        let i2 = (o2 * stride + kd) as isize - padding as isize;
                                        if i2 < 0 || i2 as usize >= d {
                                            continue;
                                        }
                                        out[obase + o2] += wgt * xdata[ibase + i2 as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(
            DiffArray::new(vec![c_out, oh, ow, od], out)?,
            Op::Conv3d {
                input: x,
                kernel,
                stride,
                padding,
            },
        ))
    }

    // ---- backward ----

    /// Backward from a scalar output with seed 1.
    pub fn backward(&mut self, out: NodeId) -> Result<()> {
        if self.nodes[out.0].data.len() != 1 {
            return Err(TensorError::InvalidShape {
                op: "backward",
                shape: self.nodes[out.0].shape.clone(),
                reason: "output must be scalar (use backward_seeded)".into(),
            });
        }
        self.backward_seeded(out, &[T::one()])
    }

    /// Backward with an explicit output gradient.
    pub fn backward_seeded(&mut self, out: NodeId, seed: &[T]) -> Result<()> {
        if seed.len() != self.nodes[out.0].data.len() {
            return Err(TensorError::DataLength {
                len: seed.len(),
                shape: self.nodes[out.0].shape.clone(),
            });
        }
        // Every grad-requiring node gets a zero buffer so off-path leaves
        // report zero rather than missing gradients.
        for node in &mut self.nodes {
            if node.requires_grad {
                node.grad = Some(vec![T::zero(); node.data.len()]);
            }
        }
        if self.nodes[out.0].grad.is_none() {
            self.nodes[out.0].grad = Some(vec![T::zero(); seed.len()]);
        }
        self.nodes[out.0].grad.as_mut().unwrap().copy_from_slice(seed);

        for i in (0..=out.0).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let op = self.ops[i].clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let grad = self.nodes[i].grad.clone().unwrap();
            self.backprop_op(i, &op, &grad);
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: NodeId) -> Option<&mut Vec<T>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        if self.nodes[id.0].grad.is_none() {
            let n = self.nodes[id.0].data.len();
            self.nodes[id.0].grad = Some(vec![T::zero(); n]);
        }
        self.nodes[id.0].grad.as_mut()
    }

    fn backprop_op(&mut self, node: usize, op: &Op<T>, g: &[T]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.grad_buf(*a) {
                    for (t, &s) in ga.iter_mut().zip(g) {
                        *t += s;
                    }
                }
                if let Some(gb) = self.grad_buf(*b) {
                    for (t, &s) in gb.iter_mut().zip(g) {
                        *t += s;
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.grad_buf(*a) {
                    for (t, &s) in ga.iter_mut().zip(g) {
                        *t += s;
                    }
                }
                if let Some(gb) = self.grad_buf(*b) {
                    for (t, &s) in gb.iter_mut().zip(g) {
                        *t -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].requires_grad {
                    let bd = self.nodes[b.0].data.clone();
                    let ga = self.grad_buf(a).unwrap();
                    for ((t, &s), &bv) in ga.iter_mut().zip(g).zip(&bd) {
                        *t += s * bv;
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let ad = self.nodes[a.0].data.clone();
                    let gb = self.grad_buf(b).unwrap();
                    for ((t, &s), &av) in gb.iter_mut().zip(g).zip(&ad) {
                        *t += s * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                if let Some(ga) = self.grad_buf(*a) {
                    for (t, &s) in ga.iter_mut().zip(g) {
                        *t += s * c;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let bshape = self.nodes[b.0].shape.clone();
                let (k, n) = (bshape[0], bshape[1]);
                let m = self.nodes[a.0].data.len() / k;
                if self.nodes[a.0].requires_grad {
                    // dA[i,p] = sum_j g[i,j] B[p,j]
                    let bd = self.nodes[b.0].data.clone();
                    let ga = self.grad_buf(a).unwrap();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let mut acc = T::zero();
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            ga[i * k + p] += acc;
                        }
                    }
                }
                if self.nodes[b.0].requires_grad {
                    // dB[p,j] = sum_i A[i,p] g[i,j]
                    let ad = self.nodes[a.0].data.clone();
                    let gb = self.grad_buf(b).unwrap();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == T::zero() {
                                continue;
                            }
                            let brow = &mut gb[p * n..(p + 1) * n];
                            for j in 0..n {
                                brow[j] += av * grow[j];
                            }
                        }
                    }
                }
            }
            Op::BatMatMul(a, b) => {
                let (a, b) = (*a, *b);
                let ashape = self.nodes[a.0].shape.clone();
                let bshape = self.nodes[b.0].shape.clone();
                let (bt, m, k, n) = (ashape[0], ashape[1], ashape[2], bshape[2]);
                if self.nodes[a.0].requires_grad {
                    let bd = self.nodes[b.0].data.clone();
                    let ga = self.grad_buf(a).unwrap();
                    for bi in 0..bt {
                        let go = bi * m * n;
                        let bo = bi * k * n;
                        let ao = bi * m * k;
                        for i in 0..m {
                            for p in 0..k {
                                let mut acc = T::zero();
                                let grow = &g[go + i * n..go + (i + 1) * n];
                                let brow = &bd[bo + p * n..bo + (p + 1) * n];
                                for j in 0..n {
                                    acc += grow[j] * brow[j];
                                }
                                ga[ao + i * k + p] += acc;
                            }
                        }
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let ad = self.nodes[a.0].data.clone();
                    let gb = self.grad_buf(b).unwrap();
                    for bi in 0..bt {
                        let go = bi * m * n;
                        let bo = bi * k * n;
                        let ao = bi * m * k;
                        for i in 0..m {
                            let grow = &g[go + i * n..go + (i + 1) * n];
                            for p in 0..k {
                                let av = ad[ao + i * k + p];
                                if av == T::zero() {
                                    continue;
                                }
                                let brow = &mut gb[bo + p * n..bo + (p + 1) * n];
                                for j in 0..n {
                                    brow[j] += av * grow[j];
                                }
                            }
                        }
                    }
                }
            }
            Op::TransposeLast2(a) => {
                let a = *a;
                let oshape = self.nodes[node].shape.clone();
                let (m, n) = (oshape[oshape.len() - 2], oshape[oshape.len() - 1]);
                let batch: usize = oshape[..oshape.len() - 2].iter().product();
                if let Some(ga) = self.grad_buf(a) {
                    for bi in 0..batch {
                        let o = bi * m * n;
                        for i in 0..m {
                            for j in 0..n {
                                ga[o + j * m + i] += g[o + i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.grad_buf(*a) {
                    for (t, &s) in ga.iter_mut().zip(g) {
                        *t += s;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let axis = *axis;
                let oshape = self.nodes[node].shape.clone();
                let outer: usize = oshape[..axis].iter().product();
                let inner: usize = oshape[axis + 1..].iter().product();
                let total = oshape[axis];
                let mut offset = 0;
                for &id in inputs {
                    let a = self.nodes[id.0].shape[axis];
                    if self.nodes[id.0].requires_grad {
                        let ga = self.grad_buf(id).unwrap();
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + a) * inner];
                            for (t, &s) in ga[o * a * inner..(o + 1) * a * inner].iter_mut().zip(src) {
                                *t += s;
                            }
                        }
                    }
                    offset += a;
                }
            }
            Op::SliceLast { input, start } => {
                let (input, start) = (*input, *start);
                let last = *self.nodes[input.0].shape.last().unwrap();
                let len = *self.nodes[node].shape.last().unwrap();
                let rows = self.nodes[input.0].data.len() / last;
                if let Some(ga) = self.grad_buf(input) {
                    for r in 0..rows {
                        for j in 0..len {
                            ga[r * last + start + j] += g[r * len + j];
                        }
                    }
                }
            }
            Op::Gather { input, indices } => {
                if let Some(ga) = self.grad_buf(*input) {
                    for (out_i, &src_i) in indices.iter().enumerate() {
                        ga[src_i] += g[out_i];
                    }
                }
            }
            Op::SoftmaxLast { input, .. } => {
                let input = *input;
                let s = self.nodes[node].data.clone();
                let n = *self.nodes[node].shape.last().unwrap();
                let rows = s.len() / n;
                if let Some(ga) = self.grad_buf(input) {
                    // Blocked entries have s == 0 so they receive no gradient.
                    for r in 0..rows {
                        let srow = &s[r * n..(r + 1) * n];
                        let grow = &g[r * n..(r + 1) * n];
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot += srow[j] * grow[j];
                        }
                        for j in 0..n {
                            ga[r * n + j] += srow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::Exp(a) => {
                let a = *a;
                let out = self.nodes[node].data.clone();
                if let Some(ga) = self.grad_buf(a) {
                    for ((t, &s), &o) in ga.iter_mut().zip(g).zip(&out) {
                        *t += s * o;
                    }
                }
            }
            Op::Ln(a) => {
                let a = *a;
                let x = self.nodes[a.0].data.clone();
                if let Some(ga) = self.grad_buf(a) {
                    for ((t, &s), &xv) in ga.iter_mut().zip(g).zip(&x) {
                        *t += s / xv;
                    }
                }
            }
            Op::Gelu(a) => {
                let a = *a;
                let x = self.nodes[a.0].data.clone();
                if let Some(ga) = self.grad_buf(a) {
                    for ((t, &s), &xv) in ga.iter_mut().zip(g).zip(&x) {
                        *t += s * gelu_bwd(xv);
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let (a, slope) = (*a, *slope);
                let x = self.nodes[a.0].data.clone();
                if let Some(ga) = self.grad_buf(a) {
                    for ((t, &s), &xv) in ga.iter_mut().zip(g).zip(&x) {
                        *t += if xv > T::zero() { s } else { s * slope };
                    }
                }
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let out = self.nodes[node].data.clone();
                if let Some(ga) = self.grad_buf(a) {
                    for ((t, &s), &o) in ga.iter_mut().zip(g).zip(&out) {
                        *t += s * o * (T::one() - o);
                    }
                }
            }
            Op::LayerNorm { input, gamma, beta, eps } => {
                let d = *self.nodes[input.0].shape.last().unwrap();
                self.norm_backward(node, *input, *gamma, *beta, *eps, g, d, true);
            }
            Op::ChannelNorm { input, gamma, beta, eps } => {
                let c = self.nodes[input.0].shape[0];
                let s = self.nodes[input.0].data.len() / c;
                self.norm_backward(node, *input, *gamma, *beta, *eps, g, s, false);
            }
            Op::AddLastBias { input, bias } => {
                let (input, bias) = (*input, *bias);
                let d = *self.nodes[node].shape.last().unwrap();
                let rows = g.len() / d;
                if let Some(ga) = self.grad_buf(input) {
                    for (t, &s) in ga.iter_mut().zip(g) {
                        *t += s;
                    }
                }
                if let Some(gb) = self.grad_buf(bias) {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::AddChannelBias { input, bias } => {
                let (input, bias) = (*input, *bias);
                let c = self.nodes[node].shape[0];
                let s = g.len() / c;
                if let Some(ga) = self.grad_buf(input) {
                    for (t, &sv) in ga.iter_mut().zip(g) {
                        *t += sv;
                    }
                }
                if let Some(gb) = self.grad_buf(bias) {
                    for ch in 0..c {
                        let mut acc = T::zero();
                        for j in 0..s {
                            acc += g[ch * s + j];
                        }
                        gb[ch] += acc;
                    }
                }
            }
            Op::MeanAxis { input, axis } => {
                let (input, axis) = (*input, *axis);
                let ishape = self.nodes[input.0].shape.clone();
                let outer: usize = ishape[..axis].iter().product();
                let a = ishape[axis];
                let inner: usize = ishape[axis + 1..].iter().product();
                let inv = T::one() / T::from_f64(a as f64);
                if let Some(ga) = self.grad_buf(input) {
                    for o in 0..outer {
                        for ai in 0..a {
                            for i in 0..inner {
                                ga[(o * a + ai) * inner + i] += g[o * inner + i] * inv;
                            }
                        }
                    }
                }
            }
            Op::MeanAll(a) => {
                let a = *a;
                let n = self.nodes[a.0].data.len();
                let s = g[0] / T::from_f64(n as f64);
                if let Some(ga) = self.grad_buf(a) {
                    for t in ga.iter_mut() {
                        *t += s;
                    }
                }
            }
            Op::SumAll(a) => {
                let s = g[0];
                if let Some(ga) = self.grad_buf(*a) {
                    for t in ga.iter_mut() {
                        *t += s;
                    }
                }
            }
            Op::CumSum(a) => {
                if let Some(ga) = self.grad_buf(*a) {
                    let mut acc = T::zero();
                    for i in (0..g.len()).rev() {
                        acc += g[i];
                        ga[i] += acc;
                    }
                }
            }
            Op::Conv3d { input, kernel, stride, padding } => {
                let (input, kernel) = (*input, *kernel);
                let (stride, padding) = (*stride, *padding);
                let xs = self.nodes[input.0].shape.clone();
                let ks = self.nodes[kernel.0].shape.clone();
                let os = self.nodes[node].shape.clone();
                let (c_out, c_in, k) = (ks[0], ks[1], ks[2]);
                let (h, w, d) = (xs[1], xs[2], xs[3]);
                let (oh, ow, od) = (os[1], os[2], os[3]);
                let xdata = self.nodes[input.0].data.clone();
                let kdata = self.nodes[kernel.0].data.clone();
                let want_dx = self.nodes[input.0].requires_grad;
                let want_dk = self.nodes[kernel.0].requires_grad;
                let mut dx = if want_dx { vec![T::zero(); xdata.len()] } else { Vec::new() };
                let mut dk = if want_dk { vec![T::zero(); kdata.len()] } else { Vec::new() };
                for co in 0..c_out {
                    for ci in 0..c_in {
                        for kh in 0..k {
                            for kw in 0..k {
                                for kd in 0..k {
                                    let kidx = (((co * c_in + ci) * k + kh) * k + kw) * k + kd;
                                    let wgt = kdata[kidx];
                                    let mut wacc = T::zero();
                                    for o0 in 0..oh {
                                        let i0 = (o0 * stride + kh) as isize - padding as isize;
                                        if i0 < 0 || i0 as usize >= h {
                                            continue;
                                        }
                                        for o1 in 0..ow {
                                            let i1 = (o1 * stride + kw) as isize - padding as isize;
                                            if i1 < 0 || i1 as usize >= w {
                                                continue;
                                            }
                                            let obase = ((co * oh + o0) * ow + o1) * od;
                                            let ibase =
                                                ((ci * h + i0 as usize) * w + i1 as usize) * d;
                                            for o2 in 0..od {
                                                let i2 =
                                                    (o2 * stride + kd) as isize - padding as isize;
                                                if i2 < 0 || i2 as usize >= d {
                                                    continue;
                                                }
                                                let gv = g[obase + o2];
                                                if want_dx {
                                                    dx[ibase + i2 as usize] += gv * wgt;
                                                }
                                                if want_dk {
                                                    wacc += gv * xdata[ibase + i2 as usize];
                                                }
                                            }
                                        }
                                    }
                                    if want_dk {
                                        dk[kidx] += wacc;
                                    }
                                }
                            }
                        }
                    }
                }
                if want_dx {
                    let ga = self.grad_buf(input).unwrap();
                    for (t, s) in ga.iter_mut().zip(dx) {
                        *t += s;
                    }
                }
                if want_dk {
                    let gk = self.grad_buf(kernel).unwrap();
                    for (t, s) in gk.iter_mut().zip(dk) {
                        *t += s;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_backward(
        &mut self,
        node: usize,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
        g: &[T],
        group: usize,
        per_elem_affine: bool,
    ) {
        let x = self.nodes[input.0].data.clone();
        let gam = self.nodes[gamma.0].data.clone();
        let groups = x.len() / group;
        let want_dx = self.nodes[input.0].requires_grad;
        let want_dg = self.nodes[gamma.0].requires_grad;
        let want_db = self.nodes[beta.0].requires_grad;
        let _ = node;
        let mut dx = if want_dx { vec![T::zero(); x.len()] } else { Vec::new() };
        let mut dgamma = if want_dg { vec![T::zero(); gam.len()] } else { Vec::new() };
        let mut dbeta = if want_db { vec![T::zero(); gam.len()] } else { Vec::new() };
        let gn = T::from_f64(group as f64);
        for r in 0..groups {
            let xs = &x[r * group..(r + 1) * group];
            let gs = &g[r * group..(r + 1) * group];
            let (mean, inv_std) = moments(xs, eps);
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            for j in 0..group {
                let xh = (xs[j] - mean) * inv_std;
                let gj = if per_elem_affine { gam[j] } else { gam[r] };
                let dxh = gs[j] * gj;
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh;
                if want_dg {
                    if per_elem_affine {
                        dgamma[j] += gs[j] * xh;
                    } else {
                        dgamma[r] += gs[j] * xh;
                    }
                }
                if want_db {
                    if per_elem_affine {
                        dbeta[j] += gs[j];
                    } else {
                        dbeta[r] += gs[j];
                    }
                }
            }
            if want_dx {
                for j in 0..group {
                    let xh = (xs[j] - mean) * inv_std;
                    let gj = if per_elem_affine { gam[j] } else { gam[r] };
                    let dxh = gs[j] * gj;
                    dx[r * group + j] +=
                        inv_std * (dxh - sum_dxh / gn - xh * sum_dxh_xh / gn);
                }
            }
        }
        if want_dx {
            let ga = self.grad_buf(input).unwrap();
            for (t, s) in ga.iter_mut().zip(dx) {
                *t += s;
            }
        }
        if want_dg {
            let gg = self.grad_buf(gamma).unwrap();
            for (t, s) in gg.iter_mut().zip(dgamma) {
                *t += s;
            }
        }
        if want_db {
            let gb = self.grad_buf(beta).unwrap();
            for (t, s) in gb.iter_mut().zip(dbeta) {
                *t += s;
            }
        }
    }
}

fn matmul_kernel<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn moments<T: Real>(xs: &[T], eps: T) -> (T, T) {
    let n = T::from_f64(xs.len() as f64);
    let mut mean = T::zero();
    for &v in xs {
        mean += v;
    }
    mean /= n;
    let mut var = T::zero();
    for &v in xs {
        var += (v - mean) * (v - mean);
    }
    var /= n;
    (mean, T::one() / (var + eps).sqrt())
}

fn gelu_fwd<T: Real>(x: T) -> T {
    // tanh approximation
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_bwd<T: Real>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    let dinner = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * sech2 * dinner
}

#[cfg(test)]
mod tests;
