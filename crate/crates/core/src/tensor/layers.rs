//! Reusable network building blocks. A layer owns parameter *paths*; the
//! values live in a [`ParamStore`] and are bound onto the active tape at
//! forward time, so one layer can be shared across phases or vessels and
//! gradients accumulate in the shared parameters.

use super::{DiffArray, NodeId, ParamInit, ParamStore, Real, Result, Tape, TensorError};

/// Affine map on the last axis: `[.., in] -> [.., out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: String,
    pub b: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = format!("{prefix}.w");
        let b = format!("{prefix}.b");
        store.add(
            &w,
            vec![in_dim, out_dim],
            ParamInit::Glorot {
                fan_in: in_dim,
                fan_out: out_dim,
            },
        );
        store.add(&b, vec![out_dim], ParamInit::Zeros);
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = store.leaf_on(tape, &self.w)?;
        let b = store.leaf_on(tape, &self.b)?;
        let y = tape.matmul(x, w)?;
        tape.add_last_bias(y, b)
    }
}

/// Normalization over the last axis with learnable scale/shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Self {
        let gamma = format!("{prefix}.gamma");
        let beta = format!("{prefix}.beta");
        store.add(&gamma, vec![dim], ParamInit::Ones);
        store.add(&beta, vec![dim], ParamInit::Zeros);
        LayerNorm {
            gamma,
            beta,
            dim,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let g = store.leaf_on(tape, &self.gamma)?;
        let b = store.leaf_on(tape, &self.beta)?;
        tape.layer_norm(x, g, b, self.eps)
    }
}

/// 3D convolution with per-channel bias, instance-style channel
/// normalization and leaky-rectifier activation (slope 0.01).
#[derive(Debug, Clone)]
pub struct Conv3 {
    pub w: String,
    pub b: String,
    pub gamma: String,
    pub beta: String,
    pub stride: usize,
    pub padding: usize,
    pub normalized: bool,
}

impl Conv3 {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let w = format!("{prefix}.w");
        let b = format!("{prefix}.b");
        let gamma = format!("{prefix}.gamma");
        let beta = format!("{prefix}.beta");
        let fan = c_in * k * k * k;
        store.add(
            &w,
            vec![c_out, c_in, k, k, k],
            ParamInit::Glorot {
                fan_in: fan,
                fan_out: c_out * k * k * k,
            },
        );
        store.add(&b, vec![c_out], ParamInit::Zeros);
        store.add(&gamma, vec![c_out], ParamInit::Ones);
        store.add(&beta, vec![c_out], ParamInit::Zeros);
        Conv3 {
            w,
            b,
            gamma,
            beta,
            stride,
            padding,
            normalized: true,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = store.leaf_on(tape, &self.w)?;
        let b = store.leaf_on(tape, &self.b)?;
        let y = tape.conv3d(x, w, self.stride, self.padding)?;
        let y = tape.add_channel_bias(y, b)?;
        if !self.normalized {
            return Ok(tape.leaky_relu(y, 0.01));
        }
        let g = store.leaf_on(tape, &self.gamma)?;
        let be = store.leaf_on(tape, &self.beta)?;
        let y = tape.channel_norm(y, g, be, 1e-5)?;
        Ok(tape.leaky_relu(y, 0.01))
    }
}

/// Multi-head scaled dot-product attention with optional additive
/// `{0, -inf}` mask shared across heads. Self-attention when `q_in ==
/// kv_in`, cross-attention otherwise. Inputs are `[L, d]` or batched
/// `[B, L, d]`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_model: usize,
}

/// Forward result carrying the post-softmax attention matrices per head,
/// for mask and symmetry checks.
pub struct AttentionTrace {
    pub out: NodeId,
    pub weights: Vec<NodeId>,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(TensorError::Config(format!(
                "attention width {d_model} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(store, &format!("{prefix}.wq"), d_model, d_model),
            wk: Linear::new(store, &format!("{prefix}.wk"), d_model, d_model),
            wv: Linear::new(store, &format!("{prefix}.wv"), d_model, d_model),
            wo: Linear::new(store, &format!("{prefix}.wo"), d_model, d_model),
            heads,
            d_model,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        q_in: NodeId,
        kv_in: NodeId,
        mask: Option<&DiffArray<T>>,
    ) -> Result<NodeId> {
        Ok(self.forward_traced(tape, store, q_in, kv_in, mask)?.out)
    }

    pub fn forward_traced<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        q_in: NodeId,
        kv_in: NodeId,
        mask: Option<&DiffArray<T>>,
    ) -> Result<AttentionTrace> {
        let rank = tape.shape(q_in).len();
        if rank != tape.shape(kv_in).len() || *tape.shape(q_in).last().unwrap() != self.d_model {
            return Err(TensorError::ShapeMismatch {
                op: "multi_head_attention",
                lhs: tape.shape(q_in).to_vec(),
                rhs: tape.shape(kv_in).to_vec(),
            });
        }
        let dh = self.d_model / self.heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let q = self.wq.forward(tape, store, q_in)?;
        let k = self.wk.forward(tape, store, kv_in)?;
        let v = self.wv.forward(tape, store, kv_in)?;
        let mut head_outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_last(q, h * dh, dh)?;
            let kh = tape.slice_last(k, h * dh, dh)?;
            let vh = tape.slice_last(v, h * dh, dh)?;
            let kt = tape.transpose_last2(kh)?;
            let scores = if rank == 2 {
                tape.matmul(qh, kt)?
            } else {
                tape.bat_matmul(qh, kt)?
            };
            let scaled = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scaled, mask)?;
            weights.push(attn);
            let out = if rank == 2 {
                tape.matmul(attn, vh)?
            } else {
                tape.bat_matmul(attn, vh)?
            };
            head_outs.push(out);
        }
        let merged = tape.concat(&head_outs, rank - 1)?;
        let out = self.wo.forward(tape, store, merged)?;
        Ok(AttentionTrace { out, weights })
    }
}

/// Position-wise feed-forward sub-block with pre-normalization and residual:
/// `x + lin2(gelu(lin1(norm(x))))`. All-zero linear weights make it the
/// identity.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, d_model: usize, hidden: usize) -> Self {
        FeedForward {
            norm: LayerNorm::new(store, &format!("{prefix}.norm"), d_model),
            lin1: Linear::new(store, &format!("{prefix}.lin1"), d_model, hidden),
            lin2: Linear::new(store, &format!("{prefix}.lin2"), hidden, d_model),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let n = self.norm.forward(tape, store, x)?;
        let h = self.lin1.forward(tape, store, n)?;
        let h = tape.gelu(h);
        let h = self.lin2.forward(tape, store, h)?;
        tape.add(x, h)
    }
}

/// Pre-norm transformer block: attention and feed-forward sub-blocks, each
/// under a residual connection.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ff: FeedForward,
}

impl TransformerBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        heads: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            norm: LayerNorm::new(store, &format!("{prefix}.norm"), d_model),
            attn: MultiHeadAttention::new(store, &format!("{prefix}.attn"), d_model, heads)?,
            ff: FeedForward::new(store, &format!("{prefix}.ff"), d_model, hidden),
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let n = self.norm.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, n, n, None)?;
        let h = tape.add(x, a)?;
        self.ff.forward(tape, store, h)
    }
}

/// Free-function form of [`MultiHeadAttention::forward`].
pub fn multi_head_attention<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    layer: &MultiHeadAttention,
    q_in: NodeId,
    kv_in: NodeId,
    mask: Option<&DiffArray<T>>,
) -> Result<NodeId> {
    layer.forward(tape, store, q_in, kv_in, mask)
}

/// Free-function form of [`FeedForward::forward`].
pub fn feed_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    layer: &FeedForward,
    x: NodeId,
) -> Result<NodeId> {
    layer.forward(tape, store, x)
}
