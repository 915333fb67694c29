//! A small f64 tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors are immutable nodes in a dynamically built computation graph.
//! Every operation records its inputs plus whatever context the backward
//! pass needs (softmax outputs, pooling argmaxes, normalization statistics),
//! and [`Tensor::backward`] replays the graph in exact reverse creation
//! order, accumulating gradients into every node that requires them.
//!
//! Design choices worth knowing about:
//!
//! * All data is `f64` and row-major. Shapes are explicit (`Vec<usize>`);
//!   matrix ops demand 2-D operands, convolution works on `[C, H, W]`.
//! * Ops return `Result`: shape mismatches and non-finite outputs are
//!   errors, not silent NaN propagation.
//! * Gradients accumulate. Calling `backward` twice doubles leaf
//!   gradients; call [`Tensor::zero_grad`] between steps.
//! * Graph pruning: no adjoint is ever computed for a subgraph in which
//!   nothing requires gradients (e.g. a constant spectrogram feeding a
//!   convolution only produces weight gradients).

use std::cell::{Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

// ─────────────────────────────── Errors ───────────────────────────────

/// Errors produced by tensor construction and operations.
#[derive(Debug, Error)]
pub enum TensorError {
    /// Operand shapes are incompatible with the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    /// The operation produced a NaN or infinity.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    /// An argument is invalid (bad index, empty input, ...).
    #[error("invalid argument in {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch { op, detail: detail.into() }
}

fn arg_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument { op, detail: detail.into() }
}

fn ensure_finite(data: &[f64], op: &'static str) -> Result<(), TensorError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

// ─────────────────────────────── Graph ────────────────────────────────

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Recorded operation: inputs plus saved context for the backward pass.
enum Op {
    Leaf,
    MatMul { a: Tensor, b: Tensor },
    Transpose { a: Tensor },
    Reshape { a: Tensor },
    ConcatRows { parts: Vec<Tensor> },
    ConcatCols { parts: Vec<Tensor> },
    NarrowRows { a: Tensor, start: usize },
    NarrowCols { a: Tensor, start: usize },
    GatherRows { a: Tensor, ids: Vec<usize> },
    SoftmaxRows { x: Tensor, y: Vec<f64> },
    LayerNorm { x: Tensor, gamma: Tensor, beta: Tensor, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { x: Tensor },
    Relu { x: Tensor },
    Sigmoid { x: Tensor, y: Vec<f64> },
    Add { a: Tensor, b: Tensor },
    Sub { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    AddBias { a: Tensor, bias: Tensor },
    Scale { a: Tensor, k: f64 },
    SumAll { a: Tensor },
    MeanAll { a: Tensor },
    MeanRows { a: Tensor },
    Conv2d { x: Tensor, w: Tensor, b: Tensor, stride: usize },
    MaxPool2d { x: Tensor, argmax: Vec<usize> },
    GlobalAvgPool { x: Tensor },
    CrossEntropy { logits: Tensor, targets: Vec<usize>, probs: Vec<f64> },
    BceFromProb { p: Tensor, y: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::ConcatRows { .. } => "concat_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::NarrowRows { .. } => "narrow_rows",
            Op::NarrowCols { .. } => "narrow_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale { .. } => "scale",
            Op::SumAll { .. } => "sum_all",
            Op::MeanAll { .. } => "mean_all",
            Op::MeanRows { .. } => "mean_rows",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BceFromProb { .. } => "bce_from_prob",
        }
    }

    fn inputs(&self) -> Vec<Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![a.clone(), b.clone()]
            }
            Op::Transpose { a }
            | Op::Reshape { a }
            | Op::NarrowRows { a, .. }
            | Op::NarrowCols { a, .. }
            | Op::GatherRows { a, .. }
            | Op::Scale { a, .. }
            | Op::SumAll { a }
            | Op::MeanAll { a }
            | Op::MeanRows { a } => vec![a.clone()],
            Op::ConcatRows { parts } | Op::ConcatCols { parts } => parts.clone(),
            Op::SoftmaxRows { x, .. }
            | Op::Gelu { x }
            | Op::Relu { x }
            | Op::Sigmoid { x, .. }
            | Op::MaxPool2d { x, .. }
            | Op::GlobalAvgPool { x } => vec![x.clone()],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x.clone(), gamma.clone(), beta.clone()],
            Op::AddBias { a, bias } => vec![a.clone(), bias.clone()],
            Op::Conv2d { x, w, b, .. } => vec![x.clone(), w.clone(), b.clone()],
            Op::CrossEntropy { logits, .. } => vec![logits.clone()],
            Op::BceFromProb { p, .. } => vec![p.clone()],
        }
    }
}

struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    value: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Op,
}

/// A reference-counted handle to a graph node. Cloning is cheap.
#[derive(Clone)]
pub struct Tensor(Rc<TensorInner>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(#{} {} shape={:?} grad={})",
            self.0.id,
            self.0.op.name(),
            self.0.shape,
            self.0.requires_grad
        )
    }
}

impl Tensor {
    fn node(shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        Tensor(Rc::new(TensorInner {
            id: fresh_id(),
            shape,
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad,
            op,
        }))
    }

    // ─────────────────────────── Constructors ───────────────────────────

    /// Constant leaf tensor (no gradient).
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "from_vec",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        ensure_finite(&data, "from_vec")?;
        Ok(Tensor::node(shape.to_vec(), data, Op::Leaf, false))
    }

    /// Trainable leaf tensor (gradient is accumulated by `backward`).
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "param",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        ensure_finite(&data, "param")?;
        Ok(Tensor::node(shape.to_vec(), data, Op::Leaf, true))
    }

    /// Trainable leaf with i.i.d. normal entries of the given std.
    pub fn param_randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| crate::rng::normal(rng, 0.0, std)).collect();
        Tensor::node(shape.to_vec(), data, Op::Leaf, true)
    }

    /// Constant tensor of zeros.
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::node(shape.to_vec(), vec![0.0; n], Op::Leaf, false)
    }

    /// Trainable tensor of zeros (bias initialization).
    pub fn param_zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::node(shape.to_vec(), vec![0.0; n], Op::Leaf, true)
    }

    /// 1x1 constant.
    pub fn scalar(v: f64) -> Tensor {
        Tensor::node(vec![1, 1], vec![v], Op::Leaf, false)
    }

    /// New constant leaf holding a snapshot of this tensor's current value.
    pub fn detach(&self) -> Tensor {
        Tensor::node(self.0.shape.clone(), self.0.value.borrow().clone(), Op::Leaf, false)
    }

    // ─────────────────────────── Accessors ──────────────────────────────

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    /// Number of scalar elements.
    pub fn len(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.0.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.0.shape[self.0.shape.len() - 1]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Borrow the raw row-major data.
    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.value.borrow()
    }

    /// Clone the raw row-major data.
    pub fn data_vec(&self) -> Vec<f64> {
        self.0.value.borrow().clone()
    }

    /// Mutably borrow the data (optimizer updates, checkpoint loading).
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.value.borrow_mut()
    }

    /// Overwrite the data in place. Length must match.
    pub fn set_data(&self, new: &[f64]) -> Result<(), TensorError> {
        if new.len() != self.len() {
            return Err(shape_err(
                "set_data",
                format!("expected {} values, got {}", self.len(), new.len()),
            ));
        }
        ensure_finite(new, "set_data")?;
        self.0.value.borrow_mut().copy_from_slice(new);
        Ok(())
    }

    /// Accumulated gradient, if any backward pass touched this tensor.
    pub fn grad_vec(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    /// Reset the accumulated gradient.
    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.0.value.borrow()[0]
    }

    // ─────────────────────────── Shape ops ───────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape(), shape),
            ));
        }
        Ok(Tensor::node(
            shape.to_vec(),
            self.data_vec(),
            Op::Reshape { a: self.clone() },
            self.requires_grad(),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        let (m, n) = self.dims2("transpose")?;
        let a = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        drop(a);
        Ok(Tensor::node(vec![n, m], out, Op::Transpose { a: self.clone() }, self.requires_grad()))
    }

    /// Stack 2-D tensors with equal column counts along the row axis.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor, TensorError> {
        if parts.is_empty() {
            return Err(arg_err("concat_rows", "no parts"));
        }
        let n = parts[0].dims2("concat_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (m, pn) = p.dims2("concat_rows")?;
            if pn != n {
                return Err(shape_err("concat_rows", format!("columns differ: {} vs {}", n, pn)));
            }
            rows += m;
            out.extend_from_slice(&p.data());
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(Tensor::node(vec![rows, n], out, Op::ConcatRows { parts: parts.to_vec() }, rg))
    }

    /// Stack 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor, TensorError> {
        if parts.is_empty() {
            return Err(arg_err("concat_cols", "no parts"));
        }
        let m = parts[0].dims2("concat_cols")?.0;
        let mut cols = 0;
        for p in parts {
            let (pm, pn) = p.dims2("concat_cols")?;
            if pm != m {
                return Err(shape_err("concat_cols", format!("rows differ: {} vs {}", m, pm)));
            }
            cols += pn;
        }
        let mut out = vec![0.0; m * cols];
        let mut off = 0;
        for p in parts {
            let pn = p.cols();
            let d = p.data();
            for i in 0..m {
                out[i * cols + off..i * cols + off + pn].copy_from_slice(&d[i * pn..(i + 1) * pn]);
            }
            off += pn;
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(Tensor::node(vec![m, cols], out, Op::ConcatCols { parts: parts.to_vec() }, rg))
    }

    /// Contiguous row slice `[start, start+len)` of a 2-D tensor.
    pub fn narrow_rows(&self, start: usize, len: usize) -> Result<Tensor, TensorError> {
        let (m, n) = self.dims2("narrow_rows")?;
        if start + len > m {
            return Err(arg_err("narrow_rows", format!("{}+{} > {} rows", start, len, m)));
        }
        let out = self.data()[start * n..(start + len) * n].to_vec();
        Ok(Tensor::node(
            vec![len, n],
            out,
            Op::NarrowRows { a: self.clone(), start },
            self.requires_grad(),
        ))
    }

    /// Contiguous column slice `[start, start+len)` of a 2-D tensor.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Tensor, TensorError> {
        let (m, n) = self.dims2("narrow_cols")?;
        if start + len > n {
            return Err(arg_err("narrow_cols", format!("{}+{} > {} cols", start, len, n)));
        }
        let a = self.data();
        let mut out = vec![0.0; m * len];
        for i in 0..m {
            out[i * len..(i + 1) * len].copy_from_slice(&a[i * n + start..i * n + start + len]);
        }
        drop(a);
        Ok(Tensor::node(
            vec![m, len],
            out,
            Op::NarrowCols { a: self.clone(), start },
            self.requires_grad(),
        ))
    }

    /// Gather rows by index (indices may repeat, as in embedding lookup).
    /// Gradients scatter-add back into the source rows.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor, TensorError> {
        let (m, n) = self.dims2("gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= m) {
            return Err(arg_err("gather_rows", format!("row {} out of {}", bad, m)));
        }
        let a = self.data();
        let mut out = vec![0.0; ids.len() * n];
        for (r, &i) in ids.iter().enumerate() {
            out[r * n..(r + 1) * n].copy_from_slice(&a[i * n..(i + 1) * n]);
        }
        drop(a);
        Ok(Tensor::node(
            vec![ids.len(), n],
            out,
            Op::GatherRows { a: self.clone(), ids: ids.to_vec() },
            self.requires_grad(),
        ))
    }

    // ─────────────────────────── Linear algebra ──────────────────────────

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{},{}] x [{},{}]", m, k, k2, n)));
        }
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av != 0.0 {
                    let brow = &b[p * n..(p + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
        drop(a);
        drop(b);
        ensure_finite(&out, "matmul")?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Tensor::node(vec![m, n], out, Op::MatMul { a: self.clone(), b: other.clone() }, rg))
    }

    /// `x @ w + bias`, the dense-layer staple.
    pub fn linear(&self, w: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
        self.matmul(w)?.add_bias(bias)
    }

    // ─────────────────────────── Pointwise ───────────────────────────────

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip("sub", other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip("mul", other, |a, b| a * b)
    }

    fn zip(
        &self,
        op: &'static str,
        other: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        if self.shape() != other.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        let a = self.data();
        let b = other.data();
        let out: Vec<f64> = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
        drop(a);
        drop(b);
        ensure_finite(&out, op)?;
        let rg = self.requires_grad() || other.requires_grad();
        let node = match op {
            "add" => Op::Add { a: self.clone(), b: other.clone() },
            "sub" => Op::Sub { a: self.clone(), b: other.clone() },
            _ => Op::Mul { a: self.clone(), b: other.clone() },
        };
        Ok(Tensor::node(self.0.shape.clone(), out, node, rg))
    }

    /// Add a `[1, n]` bias row to every row of a `[m, n]` tensor.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor, TensorError> {
        let (m, n) = self.dims2("add_bias")?;
        if bias.len() != n {
            return Err(shape_err("add_bias", format!("bias len {} vs {} cols", bias.len(), n)));
        }
        let a = self.data();
        let b = bias.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = a[i * n + j] + b[j];
            }
        }
        drop(a);
        drop(b);
        ensure_finite(&out, "add_bias")?;
        let rg = self.requires_grad() || bias.requires_grad();
        Ok(Tensor::node(
            vec![m, n],
            out,
            Op::AddBias { a: self.clone(), bias: bias.clone() },
            rg,
        ))
    }

    pub fn scale(&self, k: f64) -> Result<Tensor, TensorError> {
        let out: Vec<f64> = self.data().iter().map(|&v| v * k).collect();
        ensure_finite(&out, "scale")?;
        Ok(Tensor::node(
            self.0.shape.clone(),
            out,
            Op::Scale { a: self.clone(), k },
            self.requires_grad(),
        ))
    }

    pub fn relu(&self) -> Result<Tensor, TensorError> {
        let out: Vec<f64> = self.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        Ok(Tensor::node(
            self.0.shape.clone(),
            out,
            Op::Relu { x: self.clone() },
            self.requires_grad(),
        ))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&self) -> Result<Tensor, TensorError> {
        let out: Vec<f64> = self.data().iter().map(|&v| gelu_fwd(v)).collect();
        ensure_finite(&out, "gelu")?;
        Ok(Tensor::node(
            self.0.shape.clone(),
            out,
            Op::Gelu { x: self.clone() },
            self.requires_grad(),
        ))
    }

    pub fn sigmoid(&self) -> Result<Tensor, TensorError> {
        let out: Vec<f64> = self.data().iter().map(|&v| sigmoid_fwd(v)).collect();
        Ok(Tensor::node(
            self.0.shape.clone(),
            out.clone(),
            Op::Sigmoid { x: self.clone(), y: out },
            self.requires_grad(),
        ))
    }

    /// Row-wise softmax of a 2-D tensor, with max subtraction. Entries at
    /// or below roughly -1e30 (additive masking) underflow to exactly zero.
    pub fn softmax_rows(&self) -> Result<Tensor, TensorError> {
        let (m, n) = self.dims2("softmax_rows")?;
        if n == 0 {
            return Err(arg_err("softmax_rows", "zero columns"));
        }
        let a = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &a[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        drop(a);
        ensure_finite(&out, "softmax_rows")?;
        Ok(Tensor::node(
            vec![m, n],
            out.clone(),
            Op::SoftmaxRows { x: self.clone(), y: out },
            self.requires_grad(),
        ))
    }

    /// Row-wise layer normalization with per-column affine parameters.
    pub fn layer_norm(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<Tensor, TensorError> {
        let (m, n) = self.dims2("layer_norm")?;
        if gamma.len() != n || beta.len() != n {
            return Err(shape_err(
                "layer_norm",
                format!("gamma/beta len {}/{} vs {} cols", gamma.len(), beta.len(), n),
            ));
        }
        let a = self.data();
        let g = gamma.data();
        let b = beta.data();
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &a[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                xhat[i * n + j] = xh;
                out[i * n + j] = g[j] * xh + b[j];
            }
        }
        drop(a);
        drop(g);
        drop(b);
        ensure_finite(&out, "layer_norm")?;
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(Tensor::node(
            vec![m, n],
            out,
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ─────────────────────────── Reductions ──────────────────────────────

    pub fn sum_all(&self) -> Result<Tensor, TensorError> {
        let s = self.data().iter().sum::<f64>();
        if !s.is_finite() {
            return Err(TensorError::NonFinite { op: "sum_all" });
        }
        Ok(Tensor::node(vec![1, 1], vec![s], Op::SumAll { a: self.clone() }, self.requires_grad()))
    }

    pub fn mean_all(&self) -> Result<Tensor, TensorError> {
        if self.is_empty() {
            return Err(arg_err("mean_all", "empty tensor"));
        }
        let s = self.data().iter().sum::<f64>() / self.len() as f64;
        if !s.is_finite() {
            return Err(TensorError::NonFinite { op: "mean_all" });
        }
        Ok(Tensor::node(
            vec![1, 1],
            vec![s],
            Op::MeanAll { a: self.clone() },
            self.requires_grad(),
        ))
    }

    /// Column means of a 2-D tensor: `[m, n] -> [1, n]`.
    pub fn mean_rows(&self) -> Result<Tensor, TensorError> {
        let (m, n) = self.dims2("mean_rows")?;
        if m == 0 {
            return Err(arg_err("mean_rows", "zero rows"));
        }
        let a = self.data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += a[i * n + j];
            }
        }
        for v in &mut out {
            *v /= m as f64;
        }
        drop(a);
        ensure_finite(&out, "mean_rows")?;
        Ok(Tensor::node(
            vec![1, n],
            out,
            Op::MeanRows { a: self.clone() },
            self.requires_grad(),
        ))
    }

    // ─────────────────────────── Convolution ─────────────────────────────

    /// Valid 2-D cross-correlation. `self` is `[Cin, H, W]`, `w` is
    /// `[Cout, Cin, KH, KW]`, `b` is `[Cout]`; output `[Cout, OH, OW]`
    /// with `OH = (H - KH) / stride + 1` (floor).
    pub fn conv2d(&self, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor, TensorError> {
        if stride == 0 {
            return Err(arg_err("conv2d", "stride must be positive"));
        }
        let [cin, h, wd] = self.dims3("conv2d")?;
        let [cout, wcin, kh, kw] = w.dims4("conv2d")?;
        if wcin != cin {
            return Err(shape_err("conv2d", format!("in channels {} vs kernel {}", cin, wcin)));
        }
        if b.len() != cout {
            return Err(shape_err("conv2d", format!("bias len {} vs {} out channels", b.len(), cout)));
        }
        if h < kh || wd < kw {
            return Err(shape_err("conv2d", format!("input {}x{} smaller than kernel {}x{}", h, wd, kh, kw)));
        }
        let oh = (h - kh) / stride + 1;
        let ow = (wd - kw) / stride + 1;
        let x = self.data();
        let wv = w.data();
        let bv = b.data();
        let mut out = vec![0.0; cout * oh * ow];
        for o in 0..cout {
            let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
            plane.fill(bv[o]);
            for c in 0..cin {
                let xc = &x[c * h * wd..(c + 1) * h * wd];
                for p in 0..kh {
                    for q in 0..kw {
                        let k = wv[((o * cin + c) * kh + p) * kw + q];
                        if k == 0.0 {
                            continue;
                        }
                        for i in 0..oh {
                            let xrow = &xc[(i * stride + p) * wd..(i * stride + p) * wd + wd];
                            let orow = &mut plane[i * ow..(i + 1) * ow];
                            for j in 0..ow {
                                orow[j] += k * xrow[j * stride + q];
                            }
                        }
                    }
                }
            }
        }
        drop(x);
        drop(wv);
        drop(bv);
        ensure_finite(&out, "conv2d")?;
        let rg = self.requires_grad() || w.requires_grad() || b.requires_grad();
        Ok(Tensor::node(
            vec![cout, oh, ow],
            out,
            Op::Conv2d { x: self.clone(), w: w.clone(), b: b.clone(), stride },
            rg,
        ))
    }

    /// Per-channel max pooling over `[C, H, W]`. Ties take the first
    /// element in row-major scan order (stable argmax for the backward).
    pub fn max_pool2d(&self, kh: usize, kw: usize, stride: usize) -> Result<Tensor, TensorError> {
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(arg_err("max_pool2d", "window and stride must be positive"));
        }
        let [c, h, w] = self.dims3("max_pool2d")?;
        if h < kh || w < kw {
            return Err(shape_err("max_pool2d", format!("input {}x{} smaller than window {}x{}", h, w, kh, kw)));
        }
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let x = self.data();
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for p in 0..kh {
                        for q in 0..kw {
                            let idx = ch * h * w + (i * stride + p) * w + (j * stride + q);
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[(ch * oh + i) * ow + j] = best;
                    argmax[(ch * oh + i) * ow + j] = best_idx;
                }
            }
        }
        drop(x);
        Ok(Tensor::node(
            vec![c, oh, ow],
            out,
            Op::MaxPool2d { x: self.clone(), argmax },
            self.requires_grad(),
        ))
    }

    /// Spatial mean per channel: `[C, H, W] -> [1, C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor, TensorError> {
        let [c, h, w] = self.dims3("global_avg_pool")?;
        let x = self.data();
        let hw = (h * w) as f64;
        let out: Vec<f64> =
            (0..c).map(|ch| x[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / hw).collect();
        drop(x);
        ensure_finite(&out, "global_avg_pool")?;
        Ok(Tensor::node(
            vec![1, c],
            out,
            Op::GlobalAvgPool { x: self.clone() },
            self.requires_grad(),
        ))
    }

    // ─────────────────────────── Losses ──────────────────────────────────

    /// Mean cross-entropy of row logits against integer targets.
    /// Fused log-softmax keeps the backward pass a single subtraction.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor, TensorError> {
        let (m, n) = self.dims2("cross_entropy")?;
        if targets.len() != m {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for {} rows", targets.len(), m),
            ));
        }
        if m == 0 {
            return Err(arg_err("cross_entropy", "no rows"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(arg_err("cross_entropy", format!("target {} out of {} classes", bad, n)));
        }
        let a = self.data();
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for i in 0..m {
            let row = &a[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                probs[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                probs[i * n + j] /= sum;
            }
            loss += sum.ln() + mx - row[targets[i]];
        }
        loss /= m as f64;
        drop(a);
        if !loss.is_finite() {
            return Err(TensorError::NonFinite { op: "cross_entropy" });
        }
        Ok(Tensor::node(
            vec![1, 1],
            vec![loss],
            Op::CrossEntropy { logits: self.clone(), targets: targets.to_vec(), probs },
            self.requires_grad(),
        ))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 targets.
    /// Probabilities are clamped to `[1e-7, 1 - 1e-7]` inside the log, and
    /// the gradient is taken at the clamped value so saturated predictions
    /// still receive a (bounded) training signal.
    pub fn bce_from_prob(&self, y: &[f64]) -> Result<Tensor, TensorError> {
        if y.len() != self.len() {
            return Err(shape_err(
                "bce_from_prob",
                format!("{} targets for {} probabilities", y.len(), self.len()),
            ));
        }
        if y.is_empty() {
            return Err(arg_err("bce_from_prob", "no elements"));
        }
        let p = self.data();
        let mut loss = 0.0;
        for (&pi, &yi) in p.iter().zip(y.iter()) {
            let ph = pi.clamp(BCE_EPS, 1.0 - BCE_EPS);
            loss -= yi * ph.ln() + (1.0 - yi) * (1.0 - ph).ln();
        }
        loss /= y.len() as f64;
        drop(p);
        if !loss.is_finite() {
            return Err(TensorError::NonFinite { op: "bce_from_prob" });
        }
        Ok(Tensor::node(
            vec![1, 1],
            vec![loss],
            Op::BceFromProb { p: self.clone(), y: y.to_vec() },
            self.requires_grad(),
        ))
    }

    // ─────────────────────────── Backward ────────────────────────────────

    /// Reverse-mode sweep from a scalar. Visits the recorded graph in
    /// exact reverse creation order and adds each node's adjoint into its
    /// persistent gradient buffer.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.len() != 1 {
            return Err(arg_err("backward", format!("needs a scalar, got {:?}", self.shape())));
        }
        if !self.requires_grad() {
            return Err(arg_err("backward", "tensor does not require gradients"));
        }
        // Collect every reachable node that requires gradients. A node's
        // requires_grad is the OR of its inputs', so pruning here is exact.
        let mut nodes: Vec<Rc<TensorInner>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.0.clone()];
        seen.insert(self.0.id);
        while let Some(n) = stack.pop() {
            for inp in n.op.inputs() {
                if inp.requires_grad() && seen.insert(inp.id()) {
                    stack.push(inp.0.clone());
                }
            }
            nodes.push(n);
        }
        // Node ids increase monotonically with creation; descending id
        // order is exactly reverse creation order, a valid topological
        // order of the DAG.
        nodes.sort_by(|a, b| b.id.cmp(&a.id));

        let mut adj: HashMap<u64, Vec<f64>> = HashMap::new();
        adj.insert(self.0.id, vec![1.0]);
        for node in &nodes {
            let Some(up) = adj.remove(&node.id) else { continue };
            {
                let mut g = node.grad.borrow_mut();
                let gv = g.get_or_insert_with(|| vec![0.0; up.len()]);
                for (gi, ui) in gv.iter_mut().zip(up.iter()) {
                    *gi += ui;
                }
            }
            backprop(node, &up, &mut adj);
        }
        Ok(())
    }

    /// Human-readable dump of the graph below this node, in creation order.
    pub fn trace(&self) -> String {
        let mut nodes: Vec<Rc<TensorInner>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.0.clone()];
        seen.insert(self.0.id);
        while let Some(n) = stack.pop() {
            for inp in n.op.inputs() {
                if seen.insert(inp.id()) {
                    stack.push(inp.0.clone());
                }
            }
            nodes.push(n);
        }
        nodes.sort_by_key(|n| n.id);
        let mut s = String::new();
        for n in nodes {
            let ins: Vec<String> = n.op.inputs().iter().map(|t| format!("#{}", t.id())).collect();
            s.push_str(&format!(
                "#{} {} {:?}{}{}\n",
                n.id,
                n.op.name(),
                n.shape,
                if n.requires_grad { " grad" } else { "" },
                if ins.is_empty() { String::new() } else { format!(" <- {}", ins.join(",")) },
            ));
        }
        s
    }

    // ─────────────────────────── Shape helpers ───────────────────────────

    fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.0.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            s => Err(shape_err(op, format!("expected 2-D, got {:?}", s))),
        }
    }

    fn dims3(&self, op: &'static str) -> Result<[usize; 3], TensorError> {
        match self.0.shape.as_slice() {
            &[c, h, w] => Ok([c, h, w]),
            s => Err(shape_err(op, format!("expected 3-D, got {:?}", s))),
        }
    }

    fn dims4(&self, op: &'static str) -> Result<[usize; 4], TensorError> {
        match self.0.shape.as_slice() {
            &[a, b, c, d] => Ok([a, b, c, d]),
            s => Err(shape_err(op, format!("expected 4-D, got {:?}", s))),
        }
    }
}

const BCE_EPS: f64 = 1e-7;

fn sigmoid_fwd(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

// ─────────────────────────── Backward kernels ──────────────────────────

fn slot<'a>(adj: &'a mut HashMap<u64, Vec<f64>>, t: &Tensor) -> &'a mut Vec<f64> {
    adj.entry(t.id()).or_insert_with(|| vec![0.0; t.len()])
}

fn backprop(node: &Rc<TensorInner>, up: &[f64], adj: &mut HashMap<u64, Vec<f64>>) {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = (a.rows(), a.cols());
            let n = b.cols();
            if a.requires_grad() {
                let bv = b.data();
                let da = slot(adj, a);
                for i in 0..m {
                    let urow = &up[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += urow[j] * brow[j];
                        }
                        da[i * k + p] += acc;
                    }
                }
            }
            if b.requires_grad() {
                let av = a.data();
                let db = slot(adj, b);
                for i in 0..m {
                    let urow = &up[i * n..(i + 1) * n];
                    for p in 0..k {
                        let x = av[i * k + p];
                        if x != 0.0 {
                            let drow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] += x * urow[j];
                            }
                        }
                    }
                }
            }
        }
        Op::Transpose { a } => {
            if a.requires_grad() {
                let (m, n) = (a.rows(), a.cols());
                let da = slot(adj, a);
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] += up[j * m + i];
                    }
                }
            }
        }
        Op::Reshape { a } => {
            if a.requires_grad() {
                let da = slot(adj, a);
                for (d, u) in da.iter_mut().zip(up.iter()) {
                    *d += u;
                }
            }
        }
        Op::ConcatRows { parts } => {
            let n = node.shape[1];
            let mut row = 0;
            for p in parts {
                let m = p.rows();
                if p.requires_grad() {
                    let dp = slot(adj, p);
                    for (d, u) in dp.iter_mut().zip(&up[row * n..(row + m) * n]) {
                        *d += u;
                    }
                }
                row += m;
            }
        }
        Op::ConcatCols { parts } => {
            let m = node.shape[0];
            let cols = node.shape[1];
            let mut off = 0;
            for p in parts {
                let pn = p.cols();
                if p.requires_grad() {
                    let dp = slot(adj, p);
                    for i in 0..m {
                        for j in 0..pn {
                            dp[i * pn + j] += up[i * cols + off + j];
                        }
                    }
                }
                off += pn;
            }
        }
        Op::NarrowRows { a, start } => {
            if a.requires_grad() {
                let n = a.cols();
                let len = node.shape[0];
                let da = slot(adj, a);
                for (d, u) in da[start * n..(start + len) * n].iter_mut().zip(up.iter()) {
                    *d += u;
                }
            }
        }
        Op::NarrowCols { a, start } => {
            if a.requires_grad() {
                let n = a.cols();
                let (m, len) = (node.shape[0], node.shape[1]);
                let da = slot(adj, a);
                for i in 0..m {
                    for j in 0..len {
                        da[i * n + start + j] += up[i * len + j];
                    }
                }
            }
        }
        Op::GatherRows { a, ids } => {
            if a.requires_grad() {
                let n = a.cols();
                let da = slot(adj, a);
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..n {
                        da[i * n + j] += up[r * n + j];
                    }
                }
            }
        }
        Op::SoftmaxRows { x, y } => {
            if x.requires_grad() {
                let (m, n) = (x.rows(), x.cols());
                let dx = slot(adj, x);
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let ur = &up[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(ur.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] += yr[j] * (ur[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let (m, n) = (x.rows(), x.cols());
            if gamma.requires_grad() {
                let dg = slot(adj, gamma);
                for i in 0..m {
                    for j in 0..n {
                        dg[j] += up[i * n + j] * xhat[i * n + j];
                    }
                }
            }
            if beta.requires_grad() {
                let db = slot(adj, beta);
                for i in 0..m {
                    for j in 0..n {
                        db[j] += up[i * n + j];
                    }
                }
            }
            if x.requires_grad() {
                let g = gamma.data();
                let dx = slot(adj, x);
                let nf = n as f64;
                for i in 0..m {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..n {
                        let dxh = up[i * n + j] * g[j];
                        s1 += dxh;
                        s2 += dxh * xhat[i * n + j];
                    }
                    s1 /= nf;
                    s2 /= nf;
                    for j in 0..n {
                        let dxh = up[i * n + j] * g[j];
                        dx[i * n + j] += inv_std[i] * (dxh - s1 - xhat[i * n + j] * s2);
                    }
                }
            }
        }
        Op::Gelu { x } => {
            if x.requires_grad() {
                let xv = x.data();
                let dx = slot(adj, x);
                for ((d, &u), &v) in dx.iter_mut().zip(up.iter()).zip(xv.iter()) {
                    *d += u * gelu_grad(v);
                }
            }
        }
        Op::Relu { x } => {
            if x.requires_grad() {
                let xv = x.data();
                let dx = slot(adj, x);
                for ((d, &u), &v) in dx.iter_mut().zip(up.iter()).zip(xv.iter()) {
                    if v > 0.0 {
                        *d += u;
                    }
                }
            }
        }
        Op::Sigmoid { x, y } => {
            if x.requires_grad() {
                let dx = slot(adj, x);
                for ((d, &u), &yv) in dx.iter_mut().zip(up.iter()).zip(y.iter()) {
                    *d += u * yv * (1.0 - yv);
                }
            }
        }
        Op::Add { a, b } => {
            if a.requires_grad() {
                let da = slot(adj, a);
                for (d, u) in da.iter_mut().zip(up.iter()) {
                    *d += u;
                }
            }
            if b.requires_grad() {
                let db = slot(adj, b);
                for (d, u) in db.iter_mut().zip(up.iter()) {
                    *d += u;
                }
            }
        }
        Op::Sub { a, b } => {
            if a.requires_grad() {
                let da = slot(adj, a);
                for (d, u) in da.iter_mut().zip(up.iter()) {
                    *d += u;
                }
            }
            if b.requires_grad() {
                let db = slot(adj, b);
                for (d, u) in db.iter_mut().zip(up.iter()) {
                    *d -= u;
                }
            }
        }
        Op::Mul { a, b } => {
            if a.requires_grad() {
                let bv = b.data();
                let da = slot(adj, a);
                for ((d, &u), &v) in da.iter_mut().zip(up.iter()).zip(bv.iter()) {
                    *d += u * v;
                }
            }
            if b.requires_grad() {
                let av = a.data();
                let db = slot(adj, b);
                for ((d, &u), &v) in db.iter_mut().zip(up.iter()).zip(av.iter()) {
                    *d += u * v;
                }
            }
        }
        Op::AddBias { a, bias } => {
            let (m, n) = (a.rows(), a.cols());
            if a.requires_grad() {
                let da = slot(adj, a);
                for (d, u) in da.iter_mut().zip(up.iter()) {
                    *d += u;
                }
            }
            if bias.requires_grad() {
                let db = slot(adj, bias);
                for i in 0..m {
                    for j in 0..n {
                        db[j] += up[i * n + j];
                    }
                }
            }
        }
        Op::Scale { a, k } => {
            if a.requires_grad() {
                let da = slot(adj, a);
                for (d, u) in da.iter_mut().zip(up.iter()) {
                    *d += u * k;
                }
            }
        }
        Op::SumAll { a } => {
            if a.requires_grad() {
                let da = slot(adj, a);
                for d in da.iter_mut() {
                    *d += up[0];
                }
            }
        }
        Op::MeanAll { a } => {
            if a.requires_grad() {
                let u = up[0] / a.len() as f64;
                let da = slot(adj, a);
                for d in da.iter_mut() {
                    *d += u;
                }
            }
        }
        Op::MeanRows { a } => {
            if a.requires_grad() {
                let (m, n) = (a.rows(), a.cols());
                let mf = m as f64;
                let da = slot(adj, a);
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] += up[j] / mf;
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, stride } => {
            let s = *stride;
            let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
            let (oh, ow) = (node.shape[1], node.shape[2]);
            if w.requires_grad() {
                let xv = x.data();
                let dw = slot(adj, w);
                for o in 0..cout {
                    let uplane = &up[o * oh * ow..(o + 1) * oh * ow];
                    for c in 0..cin {
                        let xc = &xv[c * h * wd..(c + 1) * h * wd];
                        for p in 0..kh {
                            for q in 0..kw {
                                let mut acc = 0.0;
                                for i in 0..oh {
                                    let xrow = &xc[(i * s + p) * wd..(i * s + p) * wd + wd];
                                    let urow = &uplane[i * ow..(i + 1) * ow];
                                    for j in 0..ow {
                                        acc += urow[j] * xrow[j * s + q];
                                    }
                                }
                                dw[((o * cin + c) * kh + p) * kw + q] += acc;
                            }
                        }
                    }
                }
            }
            if b.requires_grad() {
                let db = slot(adj, b);
                for o in 0..cout {
                    db[o] += up[o * oh * ow..(o + 1) * oh * ow].iter().sum::<f64>();
                }
            }
            if x.requires_grad() {
                let wv = w.data();
                let dx = slot(adj, x);
                for o in 0..cout {
                    let uplane = &up[o * oh * ow..(o + 1) * oh * ow];
                    for c in 0..cin {
                        let dxc = &mut dx[c * h * wd..(c + 1) * h * wd];
                        for p in 0..kh {
                            for q in 0..kw {
                                let k = wv[((o * cin + c) * kh + p) * kw + q];
                                if k == 0.0 {
                                    continue;
                                }
                                for i in 0..oh {
                                    let urow = &uplane[i * ow..(i + 1) * ow];
                                    let base = (i * s + p) * wd;
                                    for j in 0..ow {
                                        dxc[base + j * s + q] += k * urow[j];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if x.requires_grad() {
                let dx = slot(adj, x);
                for (e, &src) in argmax.iter().enumerate() {
                    dx[src] += up[e];
                }
            }
        }
        Op::GlobalAvgPool { x } => {
            if x.requires_grad() {
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let hw = (h * w) as f64;
                let dx = slot(adj, x);
                for ch in 0..c {
                    let u = up[ch] / hw;
                    for d in dx[ch * h * w..(ch + 1) * h * w].iter_mut() {
                        *d += u;
                    }
                }
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            if logits.requires_grad() {
                let (m, n) = (logits.rows(), logits.cols());
                let scale = up[0] / m as f64;
                let dl = slot(adj, logits);
                for i in 0..m {
                    for j in 0..n {
                        let onehot = if targets[i] == j { 1.0 } else { 0.0 };
                        dl[i * n + j] += scale * (probs[i * n + j] - onehot);
                    }
                }
            }
        }
        Op::BceFromProb { p, y } => {
            if p.requires_grad() {
                let pv = p.data();
                let scale = up[0] / y.len() as f64;
                let dp = slot(adj, p);
                for ((d, &pi), &yi) in dp.iter_mut().zip(pv.iter()).zip(y.iter()) {
                    let ph = pi.clamp(BCE_EPS, 1.0 - BCE_EPS);
                    *d += scale * (ph - yi) / (ph * (1.0 - ph));
                }
            }
        }
    }
}

// ─────────────────────────────── Tests ─────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn p(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::param(shape, data.to_vec()).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (&x, &y)) in a.iter().zip(b.iter()).enumerate() {
            assert!((x - y).abs() <= tol, "index {}: {} vs {}", i, x, y);
        }
    }

    #[test]
    fn matmul_forward_and_backward() {
        let a = p(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = p(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b).unwrap();
        assert_close(&c.data(), &[58.0, 64.0, 139.0, 154.0], 0.0);
        c.sum_all().unwrap().backward().unwrap();
        assert_close(&a.grad_vec().unwrap(), &[15.0, 19.0, 23.0, 15.0, 19.0, 23.0], 1e-12);
        assert_close(&b.grad_vec().unwrap(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0], 1e-12);
    }

    #[test]
    fn softmax_matches_reference_values() {
        let x = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let y = x.softmax_rows().unwrap();
        assert_close(
            &y.data(),
            &[0.09003057317038046, 0.24472847105479767, 0.6652409557748219],
            1e-15,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one_so_sum_gradient_vanishes() {
        let x = p(&[2, 4], &[0.3, -1.2, 2.0, 0.0, 5.0, 5.0, 5.0, 5.0]);
        let y = x.softmax_rows().unwrap();
        y.sum_all().unwrap().backward().unwrap();
        for g in x.grad_vec().unwrap() {
            assert!(g.abs() < 1e-12, "softmax sum gradient should vanish, got {}", g);
        }
    }

    #[test]
    fn softmax_additive_mask_zeroes_entries_exactly() {
        let x = t(&[1, 3], &[0.5, -1e30, 1.5]);
        let y = x.softmax_rows().unwrap();
        assert_eq!(y.data()[1], 0.0);
        assert!((y.data()[0] + y.data()[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_constant_row_maps_to_beta() {
        let x = p(&[1, 4], &[5.0, 5.0, 5.0, 5.0]);
        let gamma = p(&[1, 4], &[1.0, 1.0, 1.0, 1.0]);
        let beta = p(&[1, 4], &[2.0, -1.0, 0.5, 0.0]);
        let y = x.layer_norm(&gamma, &beta, 1e-5).unwrap();
        assert_close(&y.data(), &[2.0, -1.0, 0.5, 0.0], 1e-9);
    }

    #[test]
    fn conv2d_ones_kernel_sums_window() {
        let x = t(&[1, 3, 3], &[1.0; 9]);
        let w = p(&[1, 1, 3, 3], &[1.0; 9]);
        let b = p(&[1], &[1.0]);
        let y = x.conv2d(&w, &b, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_close(&y.data(), &[10.0], 0.0);
        y.sum_all().unwrap().backward().unwrap();
        assert_close(&w.grad_vec().unwrap(), &[1.0; 9], 1e-12);
        assert_close(&b.grad_vec().unwrap(), &[1.0], 1e-12);
        // The constant input must not receive a gradient buffer at all.
        assert!(x.grad_vec().is_none());
    }

    #[test]
    fn conv2d_stride_two_shapes_and_values() {
        // 1x4x4 input, 2x2 kernel of ones, stride 2: four disjoint windows.
        let x = t(&[1, 4, 4], &(1..=16).map(f64::from).collect::<Vec<_>>());
        let w = p(&[1, 1, 2, 2], &[1.0; 4]);
        let b = p(&[1], &[0.0]);
        let y = x.conv2d(&w, &b, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_close(&y.data(), &[14.0, 22.0, 46.0, 54.0], 0.0);
    }

    #[test]
    fn max_pool_breaks_ties_toward_first_element() {
        let x = p(&[1, 2, 2], &[1.0, 1.0, 1.0, 1.0]);
        let y = x.max_pool2d(2, 2, 2).unwrap();
        assert_close(&y.data(), &[1.0], 0.0);
        y.sum_all().unwrap().backward().unwrap();
        assert_close(&x.grad_vec().unwrap(), &[1.0, 0.0, 0.0, 0.0], 0.0);
    }

    #[test]
    fn global_avg_pool_means_channels() {
        let x = p(&[2, 1, 2], &[1.0, 3.0, 10.0, 20.0]);
        let y = x.global_avg_pool().unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert_close(&y.data(), &[2.0, 15.0], 1e-15);
        y.sum_all().unwrap().backward().unwrap();
        assert_close(&x.grad_vec().unwrap(), &[0.5, 0.5, 0.5, 0.5], 1e-15);
    }

    #[test]
    fn cross_entropy_matches_reference_value() {
        let logits = p(&[1, 3], &[1.0, 0.0, 0.0]);
        let loss = logits.cross_entropy(&[0]).unwrap();
        assert!((loss.item() - 0.551444713932051).abs() < 1e-15);
        loss.backward().unwrap();
        let g = logits.grad_vec().unwrap();
        let e = std::f64::consts::E;
        let p0 = e / (e + 2.0);
        let prest = 1.0 / (e + 2.0);
        assert_close(&g, &[p0 - 1.0, prest, prest], 1e-15);
    }

    #[test]
    fn sigmoid_and_bce_match_reference_values() {
        let x = p(&[1, 1], &[3.0]);
        let s = x.sigmoid().unwrap();
        assert!((s.item() - 0.9525741268224334).abs() < 1e-15);
        let loss = s.bce_from_prob(&[0.0]).unwrap();
        assert!((loss.item() - 3.048587351573742).abs() < 1e-12);
        loss.backward().unwrap();
        // d/dx BCE(sigmoid(x), 0) = sigmoid(x)
        assert!((x.grad_vec().unwrap()[0] - 0.9525741268224334).abs() < 1e-12);
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let x = p(&[1, 1], &[3.0]);
        let y = x.mul(&x).unwrap(); // both factors are the same node
        y.backward().unwrap();
        assert_close(&x.grad_vec().unwrap(), &[6.0], 1e-15);
        y.backward().unwrap();
        assert_close(&x.grad_vec().unwrap(), &[12.0], 1e-15);
        x.zero_grad();
        assert!(x.grad_vec().is_none());
    }

    #[test]
    fn constants_are_pruned_from_backward() {
        let a = p(&[1, 2], &[2.0, 3.0]);
        let c = t(&[1, 2], &[10.0, 100.0]);
        let y = a.mul(&c).unwrap().sum_all().unwrap();
        y.backward().unwrap();
        assert_close(&a.grad_vec().unwrap(), &[10.0, 100.0], 0.0);
        assert!(c.grad_vec().is_none());
    }

    #[test]
    fn gather_rows_scatter_adds_repeated_ids() {
        let table = p(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let g = table.gather_rows(&[2, 0, 2]).unwrap();
        assert_close(&g.data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0], 0.0);
        g.sum_all().unwrap().backward().unwrap();
        assert_close(&table.grad_vec().unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0], 0.0);
    }

    #[test]
    fn transpose_narrow_concat_round_trip() {
        let a = p(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let tr = a.transpose().unwrap();
        assert_close(&tr.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0], 0.0);
        let left = a.narrow_cols(0, 1).unwrap();
        let right = a.narrow_cols(1, 2).unwrap();
        let back = Tensor::concat_cols(&[left, right]).unwrap();
        assert_close(&back.data(), &a.data(), 0.0);
        let top = a.narrow_rows(0, 1).unwrap();
        let bottom = a.narrow_rows(1, 1).unwrap();
        let back2 = Tensor::concat_rows(&[top, bottom]).unwrap();
        assert_close(&back2.data(), &a.data(), 0.0);
        back2.sum_all().unwrap().backward().unwrap();
        assert_close(&a.grad_vec().unwrap(), &[1.0; 6], 0.0);
    }

    #[test]
    fn add_bias_accumulates_column_sums() {
        let a = p(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = p(&[1, 2], &[10.0, 20.0]);
        let y = a.add_bias(&b).unwrap();
        assert_close(&y.data(), &[11.0, 22.0, 13.0, 24.0], 0.0);
        y.sum_all().unwrap().backward().unwrap();
        assert_close(&b.grad_vec().unwrap(), &[2.0, 2.0], 0.0);
    }

    #[test]
    fn mean_rows_and_mean_all() {
        let a = p(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let mr = a.mean_rows().unwrap();
        assert_close(&mr.data(), &[2.0, 3.0], 1e-15);
        mr.sum_all().unwrap().backward().unwrap();
        assert_close(&a.grad_vec().unwrap(), &[0.5; 4], 1e-15);
        a.zero_grad();
        let ma = a.mean_all().unwrap();
        assert!((ma.item() - 2.5).abs() < 1e-15);
        ma.backward().unwrap();
        assert_close(&a.grad_vec().unwrap(), &[0.25; 4], 1e-15);
    }

    #[test]
    fn overflow_is_an_error_not_a_nan() {
        let x = t(&[1, 1], &[1e200]);
        let err = x.mul(&x).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { op: "mul" }));
    }

    #[test]
    fn shape_errors_are_reported() {
        let a = t(&[2, 2], &[0.0; 4]);
        let b = t(&[3, 2], &[0.0; 6]);
        assert!(matches!(a.matmul(&b), Err(TensorError::ShapeMismatch { .. })));
        assert!(matches!(a.add(&b), Err(TensorError::ShapeMismatch { .. })));
        assert!(a.narrow_rows(1, 2).is_err());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn backward_requires_scalar_with_grad() {
        let a = p(&[1, 2], &[1.0, 2.0]);
        assert!(a.backward().is_err()); // not a scalar
        let c = t(&[1, 1], &[1.0]);
        assert!(c.backward().is_err()); // no grad
    }

    #[test]
    fn detach_cuts_the_graph() {
        let a = p(&[1, 1], &[2.0]);
        let b = a.mul(&a).unwrap().detach();
        assert!(!b.requires_grad());
        assert_close(&b.data(), &[4.0], 0.0);
        let c = p(&[1, 1], &[3.0]);
        let y = b.mul(&c).unwrap().sum_all().unwrap();
        y.backward().unwrap();
        assert!(a.grad_vec().is_none());
        assert_close(&c.grad_vec().unwrap(), &[4.0], 0.0);
    }

    #[test]
    fn trace_lists_ops_in_creation_order() {
        let a = p(&[1, 1], &[1.0]);
        let y = a.mul(&a).unwrap().sum_all().unwrap();
        let tr = y.trace();
        let lines: Vec<&str> = tr.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("leaf"));
        assert!(lines[1].contains("mul"));
        assert!(lines[2].contains("sum_all"));
    }

    #[test]
    fn gelu_reference_points() {
        let x = p(&[1, 3], &[0.0, 10.0, -10.0]);
        let y = x.gelu().unwrap();
        let d = y.data_vec();
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 10.0).abs() < 1e-9);
        assert!(d[2].abs() < 1e-9);
    }

    #[test]
    fn reshape_preserves_data_and_gradients() {
        let a = p(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = a.reshape(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_close(&r.data(), &a.data(), 0.0);
        r.sum_all().unwrap().backward().unwrap();
        assert_close(&a.grad_vec().unwrap(), &[1.0; 6], 0.0);
        assert!(a.reshape(&[4, 2]).is_err());
    }
}
