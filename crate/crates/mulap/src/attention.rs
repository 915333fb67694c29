//! Transformer building blocks: dense layers, layer-norm parameter pairs,
//! multi-head attention (self- or cross-), feed-forward blocks, and the
//! post-norm encoder layer.
//!
//! One [`MultiHeadAttention`] serves both uses: self-attention passes the
//! same states as queries and keys/values, cross-attention passes the other
//! stream as keys/values. Masking is additive: masked keys get a -1e30
//! logit, which underflows to an exactly-zero weight after softmax.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tensor, TensorError};

/// Epsilon used by every layer norm in the model.
pub const LN_EPS: f64 = 1e-5;
/// Additive logit for masked attention keys; exp(-1e30 - max) == 0 exactly.
pub const MASK_LOGIT: f64 = -1e30;
/// Initialization std for weight matrices (BERT convention).
pub const INIT_STD: f64 = 0.02;

// ─────────────────────────── Dense / LayerNorm ─────────────────────────

/// A dense layer: weight `[in, out]` plus bias `[1, out]`.
#[derive(Clone)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    pub fn new(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Dense {
        Dense { w: Tensor::param_randn(&[n_in, n_out], INIT_STD, rng), b: Tensor::param_zeros(&[1, n_out]) }
    }

    /// Like [`Dense::new`] with an explicit weight scale, for stacks that
    /// have no normalization between layers.
    pub fn with_std(n_in: usize, n_out: usize, std: f64, rng: &mut ChaCha8Rng) -> Dense {
        Dense { w: Tensor::param_randn(&[n_in, n_out], std, rng), b: Tensor::param_zeros(&[1, n_out]) }
    }

    /// Zero-initialized head (uniform logits / zero output at start).
    pub fn zeros(n_in: usize, n_out: usize) -> Dense {
        Dense { w: Tensor::param_zeros(&[n_in, n_out]), b: Tensor::param_zeros(&[1, n_out]) }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        x.linear(&self.w, &self.b)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

/// Learnable layer-norm affine parameters.
#[derive(Clone)]
pub struct Norm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl Norm {
    pub fn new(dim: usize) -> Norm {
        Norm {
            gamma: Tensor::param(&[1, dim], vec![1.0; dim]).expect("const init"),
            beta: Tensor::param_zeros(&[1, dim]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        x.layer_norm(&self.gamma, &self.beta, LN_EPS)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

// ─────────────────────────── Attention ─────────────────────────────────

/// Scaled dot-product logits: `q kᵀ / sqrt(d_k)`.
pub fn scaled_scores(q: &Tensor, k: &Tensor, d_k: usize) -> Result<Tensor, TensorError> {
    q.matmul(&k.transpose()?)?.scale(1.0 / (d_k as f64).sqrt())
}

/// Multi-head attention with separate Q/K/V/output projections.
#[derive(Clone)]
pub struct MultiHeadAttention {
    pub wq: Dense,
    pub wk: Dense,
    pub wv: Dense,
    pub wo: Dense,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(hidden: usize, heads: usize, rng: &mut ChaCha8Rng) -> MultiHeadAttention {
        assert!(hidden % heads == 0, "hidden {hidden} not divisible by heads {heads}");
        MultiHeadAttention {
            wq: Dense::new(hidden, hidden, rng),
            wk: Dense::new(hidden, hidden, rng),
            wv: Dense::new(hidden, hidden, rng),
            wo: Dense::new(hidden, hidden, rng),
            heads,
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.wq.params(&format!("{prefix}.wq"), out);
        self.wk.params(&format!("{prefix}.wk"), out);
        self.wv.params(&format!("{prefix}.wv"), out);
        self.wo.params(&format!("{prefix}.wo"), out);
    }

    /// Attend from `q_in` (rows A) to `kv_in` (rows B). `key_mask[b]` marks
    /// attendable keys; it must have at least one `true`.
    pub fn forward(
        &self,
        q_in: &Tensor,
        kv_in: &Tensor,
        key_mask: &[bool],
    ) -> Result<Tensor, TensorError> {
        Ok(self.forward_with_weights(q_in, kv_in, key_mask)?.0)
    }

    /// Like [`forward`](Self::forward) but also returns the per-head
    /// attention weight matrices (for tests and inspection).
    pub fn forward_with_weights(
        &self,
        q_in: &Tensor,
        kv_in: &Tensor,
        key_mask: &[bool],
    ) -> Result<(Tensor, Vec<Tensor>), TensorError> {
        let b_rows = kv_in.rows();
        if key_mask.len() != b_rows {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                detail: format!("mask len {} vs {} keys", key_mask.len(), b_rows),
            });
        }
        if !key_mask.iter().any(|&m| m) {
            return Err(TensorError::InvalidArgument {
                op: "attention",
                detail: "no attendable key (mask all false)".into(),
            });
        }
        let hidden = self.wq.w.cols();
        let dk = hidden / self.heads;
        let q = self.wq.forward(q_in)?;
        let k = self.wk.forward(kv_in)?;
        let v = self.wv.forward(kv_in)?;
        let a_rows = q.rows();
        // Additive mask, shared by all heads.
        let bias = if key_mask.iter().all(|&m| m) {
            None
        } else {
            let mut row = vec![0.0; b_rows];
            for (j, &m) in key_mask.iter().enumerate() {
                if !m {
                    row[j] = MASK_LOGIT;
                }
            }
            let data: Vec<f64> = (0..a_rows).flat_map(|_| row.iter().copied()).collect();
            Some(Tensor::from_vec(&[a_rows, b_rows], data)?)
        };
        let mut head_outs = Vec::with_capacity(self.heads);
        let mut head_weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.narrow_cols(h * dk, dk)?;
            let kh = k.narrow_cols(h * dk, dk)?;
            let vh = v.narrow_cols(h * dk, dk)?;
            let mut logits = scaled_scores(&qh, &kh, dk)?;
            if let Some(b) = &bias {
                logits = logits.add(b)?;
            }
            let weights = logits.softmax_rows()?;
            head_outs.push(weights.matmul(&vh)?);
            head_weights.push(weights);
        }
        let merged = Tensor::concat_cols(&head_outs)?;
        Ok((self.wo.forward(&merged)?, head_weights))
    }
}

// ─────────────────────────── Feed-forward ──────────────────────────────

/// Two-layer position-wise feed-forward block with GELU.
#[derive(Clone)]
pub struct FeedForward {
    pub lin1: Dense,
    pub lin2: Dense,
}

impl FeedForward {
    pub fn new(hidden: usize, inner: usize, rng: &mut ChaCha8Rng) -> FeedForward {
        FeedForward { lin1: Dense::new(hidden, inner, rng), lin2: Dense::new(inner, hidden, rng) }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        self.lin2.forward(&self.lin1.forward(x)?.gelu()?)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.lin1.params(&format!("{prefix}.lin1"), out);
        self.lin2.params(&format!("{prefix}.lin2"), out);
    }
}

// ─────────────────────────── Encoder layer ─────────────────────────────

/// Standard post-norm transformer encoder layer:
/// `x = LN(x + SelfAttn(x)); x = LN(x + FFN(x))`.
#[derive(Clone)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ln1: Norm,
    pub ffn: FeedForward,
    pub ln2: Norm,
}

impl EncoderLayer {
    pub fn new(hidden: usize, heads: usize, inner: usize, rng: &mut ChaCha8Rng) -> EncoderLayer {
        EncoderLayer {
            attn: MultiHeadAttention::new(hidden, heads, rng),
            ln1: Norm::new(hidden),
            ffn: FeedForward::new(hidden, inner, rng),
            ln2: Norm::new(hidden),
        }
    }

    pub fn forward(&self, x: &Tensor, key_mask: &[bool]) -> Result<Tensor, TensorError> {
        let a = self.attn.forward(x, x, key_mask)?;
        let h = self.ln1.forward(&x.add(&a)?)?;
        let f = self.ffn.forward(&h)?;
        self.ln2.forward(&h.add(&f)?)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.attn.params(&format!("{prefix}.attn"), out);
        self.ln1.params(&format!("{prefix}.ln1"), out);
        self.ffn.params(&format!("{prefix}.ffn"), out);
        self.ln2.params(&format!("{prefix}.ln2"), out);
    }
}

// ─────────────────────────────── Tests ─────────────────────────────────
