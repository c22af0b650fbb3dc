//! Reverse-mode automatic differentiation over a dynamic Wengert tape.
//!
//! The tape stores flat f64 buffers; each recorded operation carries the
//! dimensions it needs, so reshapes are free (callers reinterpret a node's
//! buffer under new dimensions). Shape bookkeeping for the network lives one
//! layer up, in [`crate::nn`], which validates logical shapes before emitting
//! tape ops.
//!
//! Design invariants:
//! - Nodes are appended in topological order; [`Tape::backward`] walks them
//!   once in reverse, so every VJP sees its output gradient fully
//!   accumulated.
//! - Every forward op scans its output for NaN/Inf and fails loudly — a
//!   non-finite activation is an error state, never silently propagated.
//! - All loops run in a fixed serial order; two identical forward+backward
//!   passes are bitwise identical.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::gemm;

/// Handle to a node (one value buffer) on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tref(usize);

/// Errors surfaced while building or differentiating a tape.
#[derive(Debug, Clone, PartialEq)]
pub enum TapeError {
    /// Operands do not conform; the message names the op and the offending
    /// dimensions.
    Shape(String),
    /// An op produced a NaN or Inf at `index` of its output buffer.
    NonFinite { op: &'static str, index: usize },
    /// `backward` was called on a non-scalar root.
    NotScalar { len: usize },
}

impl core::fmt::Display for TapeError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TapeError::Shape(msg) => write!(f, "shape error: {msg}"),
            TapeError::NonFinite { op, index } => {
                write!(f, "non-finite value produced by {op} at flat index {index}")
            }
            TapeError::NotScalar { len } => {
                write!(f, "backward root must be a scalar, got {len} elements")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TapeError {}

/// Recorded primitive. Fields hold input node ids, dimensions, and any
/// forward-pass values the backward pass reuses.
enum Op {
    Leaf,
    /// C = op(A)·op(B) with `op` transposing when the flag is set. Dims are
    /// those of the product: op(A) is m×k, op(B) is k×n.
    Matmul { a: Tref, b: Tref, m: usize, k: usize, n: usize, ta: bool, tb: bool },
    /// out[r,c] = a[r,c] + b[c]  (bias addition).
    AddSuffix { a: Tref, b: Tref, rows: usize, cols: usize },
    Add { a: Tref, b: Tref },
    Sub { a: Tref, b: Tref },
    Mul { a: Tref, b: Tref },
    Scale { a: Tref, c: f64 },
    AddConst { a: Tref },
    /// out = a repeated `times` times end to end.
    Repeat { a: Tref, times: usize },
    /// Every consecutive `chunk`-sized block of a is repeated `times` times.
    RepeatChunks { a: Tref, chunk: usize, times: usize },
    /// out chunk i = a chunk idx[i]; duplicate indices allowed.
    GatherChunks { a: Tref, chunk: usize, idx: Vec<usize>, src_chunks: usize },
    /// Row-wise concatenation: out row o = [parts[0] row o | parts[1] row o | …].
    Concat { parts: Vec<Tref>, outer: usize, inners: Vec<usize> },
    /// (outer, d1, d2, inner) → (outer, d2, d1, inner) axis swap.
    SwapMid { a: Tref, outer: usize, d1: usize, d2: usize, inner: usize },
    /// Fused multi-head scaled dot-product self-attention over packed QKV.
    /// Input layout: (seqs·len) rows of [q | k | v], each `width` wide.
    /// `probs` saves the softmax attention weights for the backward pass.
    Attention { qkv: Tref, seqs: usize, len: usize, width: usize, heads: usize, probs: Vec<f64> },
    /// Row-wise layer normalization with affine parameters.
    /// `xhat` and `rstd` are saved from the forward pass.
    LayerNorm {
        a: Tref,
        gamma: Tref,
        beta: Tref,
        rows: usize,
        cols: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax { a: Tref, rows: usize, cols: usize },
    LogSoftmax { a: Tref, rows: usize, cols: usize },
    Gelu { a: Tref },
    Relu { a: Tref },
    /// Elementwise a^p for constant p.
    PowConst { a: Tref, p: f64 },
    /// Mean over the middle axis of an (outer, mid, inner) view.
    MeanMid { a: Tref, outer: usize, mid: usize, inner: usize },
    SumAll { a: Tref },
    MeanAll { a: Tref },
    /// out[i] = a[idx[i]].
    GatherScalars { a: Tref, idx: Vec<usize>, src_len: usize },
    /// out[r,c] = a[r,c] · b[r]  (per-row scaling).
    MulBcastLast { a: Tref, b: Tref, rows: usize, cols: usize },
    /// out[r,:] = Σ_k w[r,k] · parts[k][r,:]  (gated mixture).
    WeightedSum { parts: Vec<Tref>, w: Tref, rows: usize, part_len: usize },
    /// Elementwise x·ln x, defined as 0 for x ≤ 0.
    EntropyTerm { a: Tref },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::AddSuffix { .. } => "add_suffix",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddConst { .. } => "add_const",
            Op::Repeat { .. } => "repeat",
            Op::RepeatChunks { .. } => "repeat_chunks",
            Op::GatherChunks { .. } => "gather_chunks",
            Op::Concat { .. } => "concat",
            Op::SwapMid { .. } => "swap_mid",
            Op::Attention { .. } => "attention",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Gelu { .. } => "gelu",
            Op::Relu { .. } => "relu",
            Op::PowConst { .. } => "pow_const",
            Op::MeanMid { .. } => "mean_mid",
            Op::SumAll { .. } => "sum_all",
            Op::MeanAll { .. } => "mean_all",
            Op::GatherScalars { .. } => "gather_scalars",
            Op::MulBcastLast { .. } => "mul_bcast_last",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::EntropyTerm { .. } => "entropy_term",
        }
    }
}

/// Gradients of a scalar root with respect to every tracked node.
pub struct Grads {
    by_node: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient buffer for `node`, if the node was tracked and reached.
    pub fn get(&self, node: Tref) -> Option<&[f64]> {
        self.by_node[node.0].as_deref()
    }
}

/// Dynamic Wengert tape: forward values plus the recipe to differentiate them.
#[derive(Default)]
pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<Vec<f64>>,
    tracked: Vec<bool>,
}

/// Numerically stable in-place row softmax (max subtraction), shared by the
/// tape op and by evaluation code that works outside any tape.
pub fn softmax_rows(data: &mut [f64], cols: usize) {
    assert!(cols > 0 && data.len() % cols == 0);
    for row in data.chunks_exact_mut(cols) {
        let mut max = f64::NEG_INFINITY;
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = math::exp(*v - max);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn node_count(&self) -> usize {
        self.ops.len()
    }

    /// Forward value of a node.
    pub fn val(&self, t: Tref) -> &[f64] {
        &self.vals[t.0]
    }

    /// Element count of a node's buffer.
    pub fn len_of(&self, t: Tref) -> usize {
        self.vals[t.0].len()
    }

    /// Inserts a leaf holding `data`. `track` marks it as a differentiation
    /// target (parameters); inputs and constants pass `false`.
    pub fn leaf(&mut self, data: Vec<f64>, track: bool) -> Result<Tref, TapeError> {
        scan_finite("leaf", &data)?;
        Ok(self.push(Op::Leaf, data, track))
    }

    fn push(&mut self, op: Op, val: Vec<f64>, tracked: bool) -> Tref {
        self.ops.push(op);
        self.vals.push(val);
        self.tracked.push(tracked);
        Tref(self.ops.len() - 1)
    }

    fn emit(&mut self, op: Op, val: Vec<f64>, inputs: &[Tref]) -> Result<Tref, TapeError> {
        scan_finite(op.name(), &val)?;
        let tracked = inputs.iter().any(|t| self.tracked[t.0]);
        Ok(self.push(op, val, tracked))
    }

    fn want(&self, op: &'static str, t: Tref, len: usize, what: &str) -> Result<(), TapeError> {
        if self.vals[t.0].len() != len {
            return Err(TapeError::Shape(format!(
                "{op}: {what} has {} elements, expected {len}",
                self.vals[t.0].len()
            )));
        }
        Ok(())
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// C = op(A)·op(B); `op` transposes when the flag is set. op(A) is m×k,
    /// op(B) is k×n, C is m×n.
    pub fn matmul(
        &mut self,
        a: Tref,
        b: Tref,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
    ) -> Result<Tref, TapeError> {
        self.want("matmul", a, m * k, "lhs")?;
        self.want("matmul", b, k * n, "rhs")?;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &self.vals[a.0], ta, &self.vals[b.0], tb, 0.0, &mut out);
        self.emit(Op::Matmul { a, b, m, k, n, ta, tb }, out, &[a, b])
    }

    /// out[r,c] = a[r,c] + b[c].
    pub fn add_suffix(
        &mut self,
        a: Tref,
        b: Tref,
        rows: usize,
        cols: usize,
    ) -> Result<Tref, TapeError> {
        self.want("add_suffix", a, rows * cols, "matrix")?;
        self.want("add_suffix", b, cols, "suffix vector")?;
        let mut out = self.vals[a.0].clone();
        for row in out.chunks_exact_mut(cols) {
            for (v, bv) in row.iter_mut().zip(&self.vals[b.0]) {
                *v += *bv;
            }
        }
        self.emit(Op::AddSuffix { a, b, rows, cols }, out, &[a, b])
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: Tref, b: Tref) -> Result<Tref, TapeError> {
        self.want("add", b, self.vals[a.0].len(), "rhs")?;
        let out = zip_map(&self.vals[a.0], &self.vals[b.0], |x, y| x + y);
        self.emit(Op::Add { a, b }, out, &[a, b])
    }

    pub fn sub(&mut self, a: Tref, b: Tref) -> Result<Tref, TapeError> {
        self.want("sub", b, self.vals[a.0].len(), "rhs")?;
        let out = zip_map(&self.vals[a.0], &self.vals[b.0], |x, y| x - y);
        self.emit(Op::Sub { a, b }, out, &[a, b])
    }

    pub fn mul(&mut self, a: Tref, b: Tref) -> Result<Tref, TapeError> {
        self.want("mul", b, self.vals[a.0].len(), "rhs")?;
        let out = zip_map(&self.vals[a.0], &self.vals[b.0], |x, y| x * y);
        self.emit(Op::Mul { a, b }, out, &[a, b])
    }

    pub fn scale(&mut self, a: Tref, c: f64) -> Result<Tref, TapeError> {
        let out = self.vals[a.0].iter().map(|x| x * c).collect();
        self.emit(Op::Scale { a, c }, out, &[a])
    }

    pub fn add_const(&mut self, a: Tref, c: f64) -> Result<Tref, TapeError> {
        let out = self.vals[a.0].iter().map(|x| x + c).collect();
        self.emit(Op::AddConst { a }, out, &[a])
    }

    pub fn gelu(&mut self, a: Tref) -> Result<Tref, TapeError> {
        let out = self.vals[a.0].iter().map(|&x| math::gelu(x)).collect();
        self.emit(Op::Gelu { a }, out, &[a])
    }

    pub fn relu(&mut self, a: Tref) -> Result<Tref, TapeError> {
        let out = self.vals[a.0].iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        self.emit(Op::Relu { a }, out, &[a])
    }

    /// Elementwise a^p. Callers must keep the base in the op's smooth domain
    /// (positive for fractional p); guard with [`Tape::add_const`].
    pub fn pow_const(&mut self, a: Tref, p: f64) -> Result<Tref, TapeError> {
        let out = self.vals[a.0]
            .iter()
            .map(|&x| {
                if p == 2.0 {
                    x * x
                } else if p == 0.5 {
                    math::sqrt(x)
                } else if p == -0.5 {
                    1.0 / math::sqrt(x)
                } else {
                    math::powf(x, p)
                }
            })
            .collect();
        self.emit(Op::PowConst { a, p }, out, &[a])
    }

    /// Elementwise x·ln x with the continuous extension 0 at x ≤ 0.
    pub fn entropy_term(&mut self, a: Tref) -> Result<Tref, TapeError> {
        let out = self.vals[a.0]
            .iter()
            .map(|&x| if x > 0.0 { x * math::ln(x) } else { 0.0 })
            .collect();
        self.emit(Op::EntropyTerm { a }, out, &[a])
    }

    // ── Data movement ───────────────────────────────────────────────────

    pub fn repeat(&mut self, a: Tref, times: usize) -> Result<Tref, TapeError> {
        let src = &self.vals[a.0];
        let mut out = Vec::with_capacity(src.len() * times);
        for _ in 0..times {
            out.extend_from_slice(src);
        }
        self.emit(Op::Repeat { a, times }, out, &[a])
    }

    /// Repeats every consecutive `chunk`-sized block `times` times.
    pub fn repeat_chunks(&mut self, a: Tref, chunk: usize, times: usize) -> Result<Tref, TapeError> {
        let src = &self.vals[a.0];
        if chunk == 0 || src.len() % chunk != 0 {
            return Err(TapeError::Shape(format!(
                "repeat_chunks: buffer of {} not divisible into chunks of {chunk}",
                src.len()
            )));
        }
        let mut out = Vec::with_capacity(src.len() * times);
        for c in src.chunks_exact(chunk) {
            for _ in 0..times {
                out.extend_from_slice(c);
            }
        }
        self.emit(Op::RepeatChunks { a, chunk, times }, out, &[a])
    }

    /// out chunk i = a chunk idx[i]. Covers slicing (contiguous idx) and
    /// group gathering (arbitrary idx, duplicates allowed).
    pub fn gather_chunks(&mut self, a: Tref, chunk: usize, idx: &[usize]) -> Result<Tref, TapeError> {
        let src = &self.vals[a.0];
        if chunk == 0 || src.len() % chunk != 0 {
            return Err(TapeError::Shape(format!(
                "gather_chunks: buffer of {} not divisible into chunks of {chunk}",
                src.len()
            )));
        }
        let src_chunks = src.len() / chunk;
        if let Some(&bad) = idx.iter().find(|&&i| i >= src_chunks) {
            return Err(TapeError::Shape(format!(
                "gather_chunks: index {bad} out of {src_chunks} chunks"
            )));
        }
        let mut out = Vec::with_capacity(idx.len() * chunk);
        for &i in idx {
            out.extend_from_slice(&src[i * chunk..(i + 1) * chunk]);
        }
        self.emit(
            Op::GatherChunks { a, chunk, idx: idx.to_vec(), src_chunks },
            out,
            &[a],
        )
    }

    /// Concatenates parts row-wise: each part p is (outer, inners[p]); the
    /// output is (outer, Σ inners).
    pub fn concat_rows(
        &mut self,
        parts: &[Tref],
        outer: usize,
        inners: &[usize],
    ) -> Result<Tref, TapeError> {
        if parts.is_empty() || parts.len() != inners.len() {
            return Err(TapeError::Shape(format!(
                "concat: {} parts vs {} inner widths",
                parts.len(),
                inners.len()
            )));
        }
        for (p, &w) in parts.iter().zip(inners) {
            self.want("concat", *p, outer * w, "part")?;
        }
        let total: usize = inners.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(inners) {
                out.extend_from_slice(&self.vals[p.0][o * w..(o + 1) * w]);
            }
        }
        self.emit(
            Op::Concat { parts: parts.to_vec(), outer, inners: inners.to_vec() },
            out,
            parts,
        )
    }

    /// Swaps the two middle axes of an (outer, d1, d2, inner) view.
    pub fn swap_mid(
        &mut self,
        a: Tref,
        outer: usize,
        d1: usize,
        d2: usize,
        inner: usize,
    ) -> Result<Tref, TapeError> {
        self.want("swap_mid", a, outer * d1 * d2 * inner, "input")?;
        let src = &self.vals[a.0];
        let mut out = vec![0.0; src.len()];
        swap_mid_into(src, &mut out, outer, d1, d2, inner);
        self.emit(Op::SwapMid { a, outer, d1, d2, inner }, out, &[a])
    }

    /// out row i = a row rows[i] (row length `row_len`); rows are chunks.
    pub fn gather_rows(&mut self, a: Tref, row_len: usize, rows: &[usize]) -> Result<Tref, TapeError> {
        self.gather_chunks(a, row_len, rows)
    }

    /// out[i] = a[idx[i]] over flat indices.
    pub fn gather_scalars(&mut self, a: Tref, idx: &[usize]) -> Result<Tref, TapeError> {
        let src = &self.vals[a.0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(TapeError::Shape(format!(
                "gather_scalars: index {bad} out of {} elements",
                src.len()
            )));
        }
        let out = idx.iter().map(|&i| src[i]).collect();
        self.emit(
            Op::GatherScalars { a, idx: idx.to_vec(), src_len: src.len() },
            out,
            &[a],
        )
    }

    // ── Normalization and attention ─────────────────────────────────────

    /// Row softmax with max-subtraction stability.
    pub fn softmax(&mut self, a: Tref, rows: usize, cols: usize) -> Result<Tref, TapeError> {
        self.want("softmax", a, rows * cols, "input")?;
        let mut out = self.vals[a.0].clone();
        softmax_rows(&mut out, cols);
        self.emit(Op::Softmax { a, rows, cols }, out, &[a])
    }

    /// Row log-softmax (logits minus row log-sum-exp).
    pub fn log_softmax(&mut self, a: Tref, rows: usize, cols: usize) -> Result<Tref, TapeError> {
        self.want("log_softmax", a, rows * cols, "input")?;
        let mut out = self.vals[a.0].clone();
        for row in out.chunks_exact_mut(cols) {
            let mut max = f64::NEG_INFINITY;
            for &v in row.iter() {
                if v > max {
                    max = v;
                }
            }
            let mut sum = 0.0;
            for &v in row.iter() {
                sum += math::exp(v - max);
            }
            let lse = max + math::ln(sum);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.emit(Op::LogSoftmax { a, rows, cols }, out, &[a])
    }

    /// Row layer normalization with affine (γ, β), ε in the variance
    /// denominator.
    pub fn layer_norm(
        &mut self,
        a: Tref,
        gamma: Tref,
        beta: Tref,
        rows: usize,
        cols: usize,
        eps: f64,
    ) -> Result<Tref, TapeError> {
        self.want("layer_norm", a, rows * cols, "input")?;
        self.want("layer_norm", gamma, cols, "gamma")?;
        self.want("layer_norm", beta, cols, "beta")?;
        let src = &self.vals[a.0];
        let g = &self.vals[gamma.0];
        let be = &self.vals[beta.0];
        let mut out = vec![0.0; rows * cols];
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / math::sqrt(var + eps);
            rstd[r] = rs;
            for c in 0..cols {
                let xh = (row[c] - mean) * rs;
                xhat[r * cols + c] = xh;
                out[r * cols + c] = g[c] * xh + be[c];
            }
        }
        self.emit(
            Op::LayerNorm { a, gamma, beta, rows, cols, xhat, rstd },
            out,
            &[a, gamma, beta],
        )
    }

    /// Fused multi-head self-attention over packed QKV.
    ///
    /// `qkv` holds (seqs·len) rows of [q | k | v] (each `width` wide); the
    /// output is (seqs·len) rows of `width`, heads concatenated. Softmax
    /// attention probabilities are saved for the backward pass.
    pub fn attention_packed(
        &mut self,
        qkv: Tref,
        seqs: usize,
        len: usize,
        width: usize,
        heads: usize,
    ) -> Result<Tref, TapeError> {
        if heads == 0 || width % heads != 0 {
            return Err(TapeError::Shape(format!(
                "attention: width {width} not divisible by {heads} heads"
            )));
        }
        self.want("attention", qkv, seqs * len * 3 * width, "packed qkv")?;
        let dh = width / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let src = &self.vals[qkv.0];
        let row_w = 3 * width;
        let mut out = vec![0.0; seqs * len * width];
        let mut probs = vec![0.0; seqs * heads * len * len];
        let mut scores = vec![0.0; len * len];
        for s in 0..seqs {
            let base = s * len * row_w;
            for h in 0..heads {
                let qo = h * dh;
                let ko = width + h * dh;
                let vo = 2 * width + h * dh;
                // scores[i][j] = scale · q_i · k_j
                for i in 0..len {
                    let qrow = &src[base + i * row_w + qo..base + i * row_w + qo + dh];
                    for j in 0..len {
                        let krow = &src[base + j * row_w + ko..base + j * row_w + ko + dh];
                        let mut dot = 0.0;
                        for d in 0..dh {
                            dot += qrow[d] * krow[d];
                        }
                        scores[i * len + j] = dot * scale;
                    }
                }
                softmax_rows(&mut scores, len);
                probs[(s * heads + h) * len * len..(s * heads + h + 1) * len * len]
                    .copy_from_slice(&scores);
                // out_i = Σ_j P[i][j] · v_j
                for i in 0..len {
                    let dst = &mut out[(s * len + i) * width + h * dh..(s * len + i) * width + h * dh + dh];
                    for j in 0..len {
                        let p = scores[i * len + j];
                        let vrow = &src[base + j * row_w + vo..base + j * row_w + vo + dh];
                        for d in 0..dh {
                            dst[d] += p * vrow[d];
                        }
                    }
                }
            }
        }
        self.emit(Op::Attention { qkv, seqs, len, width, heads, probs }, out, &[qkv])
    }

    /// Standard multi-head attention over separate q, k, v buffers, each
    /// (seqs·len) rows of `width`. Packs them and runs the fused kernel.
    pub fn multi_head_attention(
        &mut self,
        q: Tref,
        k: Tref,
        v: Tref,
        seqs: usize,
        len: usize,
        width: usize,
        heads: usize,
    ) -> Result<Tref, TapeError> {
        let packed = self.concat_rows(&[q, k, v], seqs * len, &[width, width, width])?;
        self.attention_packed(packed, seqs, len, width, heads)
    }

    // ── Reductions and mixing ───────────────────────────────────────────

    /// Mean over the middle axis of an (outer, mid, inner) view.
    pub fn mean_mid(
        &mut self,
        a: Tref,
        outer: usize,
        mid: usize,
        inner: usize,
    ) -> Result<Tref, TapeError> {
        self.want("mean_mid", a, outer * mid * inner, "input")?;
        if mid == 0 {
            return Err(TapeError::Shape("mean_mid: empty middle axis".into()));
        }
        let src = &self.vals[a.0];
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let row = &src[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                for i in 0..inner {
                    out[o * inner + i] += row[i];
                }
            }
        }
        let inv = 1.0 / mid as f64;
        for v in out.iter_mut() {
            *v *= inv;
        }
        self.emit(Op::MeanMid { a, outer, mid, inner }, out, &[a])
    }

    /// Sum of all elements (scalar output).
    pub fn sum_all(&mut self, a: Tref) -> Result<Tref, TapeError> {
        let s = self.vals[a.0].iter().sum();
        self.emit(Op::SumAll { a }, vec![s], &[a])
    }

    /// Mean of all elements (scalar output).
    pub fn mean_all(&mut self, a: Tref) -> Result<Tref, TapeError> {
        let len = self.vals[a.0].len();
        if len == 0 {
            return Err(TapeError::Shape("mean_all: empty input".into()));
        }
        let s: f64 = self.vals[a.0].iter().sum();
        self.emit(Op::MeanAll { a }, vec![s / len as f64], &[a])
    }

    /// out[r,c] = a[r,c] · b[r].
    pub fn mul_bcast_last(
        &mut self,
        a: Tref,
        b: Tref,
        rows: usize,
        cols: usize,
    ) -> Result<Tref, TapeError> {
        self.want("mul_bcast_last", a, rows * cols, "matrix")?;
        self.want("mul_bcast_last", b, rows, "row factors")?;
        let src = &self.vals[a.0];
        let f = &self.vals[b.0];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = src[r * cols + c] * f[r];
            }
        }
        self.emit(Op::MulBcastLast { a, b, rows, cols }, out, &[a, b])
    }

    /// out[r,:] = Σ_k w[r,k] · parts[k][r,:] — the gate-weighted expert
    /// mixture. `w` is (rows, K) with K = parts.len(); every part is
    /// (rows, part_len).
    pub fn weighted_sum(
        &mut self,
        parts: &[Tref],
        w: Tref,
        rows: usize,
        part_len: usize,
    ) -> Result<Tref, TapeError> {
        if parts.is_empty() {
            return Err(TapeError::Shape("weighted_sum: no parts".into()));
        }
        let kk = parts.len();
        self.want("weighted_sum", w, rows * kk, "weights")?;
        for p in parts {
            self.want("weighted_sum", *p, rows * part_len, "part")?;
        }
        let mut out = vec![0.0; rows * part_len];
        for (k, p) in parts.iter().enumerate() {
            let pv = &self.vals[p.0];
            let wv = &self.vals[w.0];
            for r in 0..rows {
                let wk = wv[r * kk + k];
                let dst = &mut out[r * part_len..(r + 1) * part_len];
                let srow = &pv[r * part_len..(r + 1) * part_len];
                for i in 0..part_len {
                    dst[i] += wk * srow[i];
                }
            }
        }
        let mut inputs = parts.to_vec();
        inputs.push(w);
        self.emit(
            Op::WeightedSum { parts: parts.to_vec(), w, rows, part_len },
            out,
            &inputs,
        )
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root; accumulates gradients for every
    /// tracked node reachable from it.
    pub fn backward(&self, root: Tref) -> Result<Grads, TapeError> {
        let n = self.ops.len();
        if self.vals[root.0].len() != 1 {
            return Err(TapeError::NotScalar { len: self.vals[root.0].len() });
        }
        let mut g: Vec<Option<Vec<f64>>> = vec![None; n];
        g[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            if !self.tracked[id] {
                continue;
            }
            let Some(dout) = g[id].take() else { continue };
            self.apply_vjp(id, &dout, &mut g);
            g[id] = Some(dout);
        }
        Ok(Grads { by_node: g })
    }

    fn acc<'a>(
        g: &'a mut Vec<Option<Vec<f64>>>,
        tracked: &[bool],
        t: Tref,
        len: usize,
    ) -> Option<&'a mut Vec<f64>> {
        if !tracked[t.0] {
            return None;
        }
        Some(g[t.0].get_or_insert_with(|| vec![0.0; len]))
    }

    #[allow(clippy::too_many_lines)]
    fn apply_vjp(&self, id: usize, dout: &[f64], g: &mut Vec<Option<Vec<f64>>>) {
        let tracked = &self.tracked;
        match &self.ops[id] {
            Op::Leaf => {}
            Op::Matmul { a, b, m, k, n, ta, tb } => {
                let (m, k, n) = (*m, *k, *n);
                if tracked[a.0] {
                    let da = Self::acc(g, tracked, *a, m * k).unwrap();
                    if !*ta {
                        // dA += dC · op(B)ᵀ
                        gemm(m, n, k, 1.0, dout, false, &self.vals[b.0], !*tb, 1.0, da);
                    } else {
                        // stored A is (k, m): dA += op(B) · dCᵀ
                        gemm(k, n, m, 1.0, &self.vals[b.0], *tb, dout, true, 1.0, da);
                    }
                }
                if tracked[b.0] {
                    let db = Self::acc(g, tracked, *b, k * n).unwrap();
                    if !*tb {
                        // dB += op(A)ᵀ · dC
                        gemm(k, m, n, 1.0, &self.vals[a.0], !*ta, dout, false, 1.0, db);
                    } else {
                        // stored B is (n, k): dB += dCᵀ · op(A)
                        gemm(n, m, k, 1.0, dout, true, &self.vals[a.0], *ta, 1.0, db);
                    }
                }
            }
            Op::AddSuffix { a, b, rows, cols } => {
                if let Some(da) = Self::acc(g, tracked, *a, rows * cols) {
                    for (dv, &dz) in da.iter_mut().zip(dout) {
                        *dv += dz;
                    }
                }
                if let Some(db) = Self::acc(g, tracked, *b, *cols) {
                    for row in dout.chunks_exact(*cols) {
                        for (dv, &dz) in db.iter_mut().zip(row) {
                            *dv += dz;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for t in [a, b] {
                    if let Some(dt) = Self::acc(g, tracked, *t, dout.len()) {
                        for (dv, &dz) in dt.iter_mut().zip(dout) {
                            *dv += dz;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(da) = Self::acc(g, tracked, *a, dout.len()) {
                    for (dv, &dz) in da.iter_mut().zip(dout) {
                        *dv += dz;
                    }
                }
                if let Some(db) = Self::acc(g, tracked, *b, dout.len()) {
                    for (dv, &dz) in db.iter_mut().zip(dout) {
                        *dv -= dz;
                    }
                }
            }
            Op::Mul { a, b } => {
                if let Some(da) = Self::acc(g, tracked, *a, dout.len()) {
                    for i in 0..dout.len() {
                        da[i] += dout[i] * self.vals[b.0][i];
                    }
                }
                if let Some(db) = Self::acc(g, tracked, *b, dout.len()) {
                    for i in 0..dout.len() {
                        db[i] += dout[i] * self.vals[a.0][i];
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(da) = Self::acc(g, tracked, *a, dout.len()) {
                    for (dv, &dz) in da.iter_mut().zip(dout) {
                        *dv += c * dz;
                    }
                }
            }
            Op::AddConst { a } => {
                if let Some(da) = Self::acc(g, tracked, *a, dout.len()) {
                    for (dv, &dz) in da.iter_mut().zip(dout) {
                        *dv += dz;
                    }
                }
            }
            Op::Repeat { a, times } => {
                let len = self.vals[a.0].len();
                if let Some(da) = Self::acc(g, tracked, *a, len) {
                    for t in 0..*times {
                        for i in 0..len {
                            da[i] += dout[t * len + i];
                        }
                    }
                }
            }
            Op::RepeatChunks { a, chunk, times } => {
                let len = self.vals[a.0].len();
                if let Some(da) = Self::acc(g, tracked, *a, len) {
                    let chunks = len / chunk;
                    for cidx in 0..chunks {
                        for t in 0..*times {
                            let src = &dout[(cidx * times + t) * chunk..(cidx * times + t + 1) * chunk];
                            let dst = &mut da[cidx * chunk..(cidx + 1) * chunk];
                            for i in 0..*chunk {
                                dst[i] += src[i];
                            }
                        }
                    }
                }
            }
            Op::GatherChunks { a, chunk, idx, src_chunks } => {
                if let Some(da) = Self::acc(g, tracked, *a, src_chunks * chunk) {
                    for (i, &srcc) in idx.iter().enumerate() {
                        let src = &dout[i * chunk..(i + 1) * chunk];
                        let dst = &mut da[srcc * chunk..(srcc + 1) * chunk];
                        for d in 0..*chunk {
                            dst[d] += src[d];
                        }
                    }
                }
            }
            Op::Concat { parts, outer, inners } => {
                let total: usize = inners.iter().sum();
                let mut off = 0;
                for (p, &w) in parts.iter().zip(inners) {
                    if let Some(dp) = Self::acc(g, tracked, *p, outer * w) {
                        for o in 0..*outer {
                            let src = &dout[o * total + off..o * total + off + w];
                            let dst = &mut dp[o * w..(o + 1) * w];
                            for i in 0..w {
                                dst[i] += src[i];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SwapMid { a, outer, d1, d2, inner } => {
                if let Some(da) = Self::acc(g, tracked, *a, outer * d1 * d2 * inner) {
                    // forward: out[(o, y, x, i)] = in[(o, x, y, i)]; reverse swaps back.
                    let mut tmp = vec![0.0; dout.len()];
                    swap_mid_into(dout, &mut tmp, *outer, *d2, *d1, *inner);
                    for (dv, &dz) in da.iter_mut().zip(&tmp) {
                        *dv += dz;
                    }
                }
            }
            Op::Attention { qkv, seqs, len, width, heads, probs } => {
                if let Some(dqkv) = Self::acc(g, tracked, *qkv, seqs * len * 3 * width) {
                    let dh = width / heads;
                    let scale = 1.0 / math::sqrt(dh as f64);
                    let src = &self.vals[qkv.0];
                    let row_w = 3 * width;
                    let mut dp = vec![0.0; len * len];
                    let mut ds = vec![0.0; len * len];
                    for s in 0..*seqs {
                        let base = s * len * row_w;
                        for h in 0..*heads {
                            let qo = h * dh;
                            let ko = width + h * dh;
                            let vo = 2 * width + h * dh;
                            let p = &probs[(s * heads + h) * len * len..(s * heads + h + 1) * len * len];
                            // dV_j += Σ_i P[i][j] · dOut_i ; dP[i][j] = dOut_i · v_j
                            for i in 0..*len {
                                let dorow = &dout[(s * len + i) * width + h * dh
                                    ..(s * len + i) * width + h * dh + dh];
                                for j in 0..*len {
                                    let vrow = &src[base + j * row_w + vo..base + j * row_w + vo + dh];
                                    let mut dot = 0.0;
                                    for d in 0..dh {
                                        dot += dorow[d] * vrow[d];
                                    }
                                    dp[i * len + j] = dot;
                                }
                            }
                            for j in 0..*len {
                                let dv = &mut dqkv[base + j * row_w + vo..base + j * row_w + vo + dh];
                                for i in 0..*len {
                                    let pij = p[i * len + j];
                                    let dorow = &dout[(s * len + i) * width + h * dh
                                        ..(s * len + i) * width + h * dh + dh];
                                    for d in 0..dh {
                                        dv[d] += pij * dorow[d];
                                    }
                                }
                            }
                            // softmax backward: dS = P ∘ (dP − rowdot(dP, P)), then · scale
                            for i in 0..*len {
                                let prow = &p[i * len..(i + 1) * len];
                                let dprow = &dp[i * len..(i + 1) * len];
                                let mut dot = 0.0;
                                for j in 0..*len {
                                    dot += prow[j] * dprow[j];
                                }
                                for j in 0..*len {
                                    ds[i * len + j] = prow[j] * (dprow[j] - dot) * scale;
                                }
                            }
                            // dQ_i += Σ_j dS[i][j] · k_j ; dK_j += Σ_i dS[i][j] · q_i
                            for i in 0..*len {
                                let dq = base + i * row_w + qo;
                                for j in 0..*len {
                                    let dsij = ds[i * len + j];
                                    if dsij == 0.0 {
                                        continue;
                                    }
                                    let krow = &src[base + j * row_w + ko..base + j * row_w + ko + dh];
                                    for d in 0..dh {
                                        dqkv[dq + d] += dsij * krow[d];
                                    }
                                }
                            }
                            for j in 0..*len {
                                let dk = base + j * row_w + ko;
                                for i in 0..*len {
                                    let dsij = ds[i * len + j];
                                    if dsij == 0.0 {
                                        continue;
                                    }
                                    let qrow = &src[base + i * row_w + qo..base + i * row_w + qo + dh];
                                    for d in 0..dh {
                                        dqkv[dk + d] += dsij * qrow[d];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { a, gamma, beta, rows, cols, xhat, rstd } => {
                let gval = &self.vals[gamma.0];
                if let Some(dbeta) = Self::acc(g, tracked, *beta, *cols) {
                    for row in dout.chunks_exact(*cols) {
                        for (dv, &dz) in dbeta.iter_mut().zip(row) {
                            *dv += dz;
                        }
                    }
                }
                if let Some(dgamma) = Self::acc(g, tracked, *gamma, *cols) {
                    for (r, row) in dout.chunks_exact(*cols).enumerate() {
                        for c in 0..*cols {
                            dgamma[c] += row[c] * xhat[r * cols + c];
                        }
                    }
                }
                if let Some(da) = Self::acc(g, tracked, *a, rows * cols) {
                    let inv_cols = 1.0 / *cols as f64;
                    for r in 0..*rows {
                        let dorow = &dout[r * cols..(r + 1) * cols];
                        let xrow = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for c in 0..*cols {
                            let dxh = dorow[c] * gval[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xrow[c];
                        }
                        mean_dxh *= inv_cols;
                        mean_dxh_xh *= inv_cols;
                        let rs = rstd[r];
                        for c in 0..*cols {
                            let dxh = dorow[c] * gval[c];
                            da[r * cols + c] += rs * (dxh - mean_dxh - xrow[c] * mean_dxh_xh);
                        }
                    }
                }
            }
            Op::Softmax { a, rows, cols } => {
                if let Some(da) = Self::acc(g, tracked, *a, rows * cols) {
                    let p = &self.vals[id];
                    for r in 0..*rows {
                        let prow = &p[r * cols..(r + 1) * cols];
                        let dorow = &dout[r * cols..(r + 1) * cols];
                        let mut dot = 0.0;
                        for c in 0..*cols {
                            dot += prow[c] * dorow[c];
                        }
                        for c in 0..*cols {
                            da[r * cols + c] += prow[c] * (dorow[c] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { a, rows, cols } => {
                if let Some(da) = Self::acc(g, tracked, *a, rows * cols) {
                    let out = &self.vals[id];
                    for r in 0..*rows {
                        let orow = &out[r * cols..(r + 1) * cols];
                        let dorow = &dout[r * cols..(r + 1) * cols];
                        let sum: f64 = dorow.iter().sum();
                        for c in 0..*cols {
                            da[r * cols + c] += dorow[c] - math::exp(orow[c]) * sum;
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                if let Some(da) = Self::acc(g, tracked, *a, dout.len()) {
                    for i in 0..dout.len() {
                        da[i] += dout[i] * math::gelu_grad(self.vals[a.0][i]);
                    }
                }
            }
            Op::Relu { a } => {
                if let Some(da) = Self::acc(g, tracked, *a, dout.len()) {
                    for i in 0..dout.len() {
                        if self.vals[a.0][i] > 0.0 {
                            da[i] += dout[i];
                        }
                    }
                }
            }
            Op::PowConst { a, p } => {
                if let Some(da) = Self::acc(g, tracked, *a, dout.len()) {
                    let x = &self.vals[a.0];
                    let y = &self.vals[id];
                    for i in 0..dout.len() {
                        let d = if *p == 2.0 {
                            2.0 * x[i]
                        } else if *p == 0.5 {
                            0.5 / y[i]
                        } else if *p == -0.5 {
                            -0.5 * y[i] / x[i]
                        } else {
                            p * math::powf(x[i], p - 1.0)
                        };
                        da[i] += dout[i] * d;
                    }
                }
            }
            Op::MeanMid { a, outer, mid, inner } => {
                if let Some(da) = Self::acc(g, tracked, *a, outer * mid * inner) {
                    let inv = 1.0 / *mid as f64;
                    for o in 0..*outer {
                        let dorow = &dout[o * inner..(o + 1) * inner];
                        for m in 0..*mid {
                            let dst = &mut da[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                            for i in 0..*inner {
                                dst[i] += dorow[i] * inv;
                            }
                        }
                    }
                }
            }
            Op::SumAll { a } => {
                if let Some(da) = Self::acc(g, tracked, *a, self.vals[a.0].len()) {
                    for dv in da.iter_mut() {
                        *dv += dout[0];
                    }
                }
            }
            Op::MeanAll { a } => {
                let len = self.vals[a.0].len();
                if let Some(da) = Self::acc(g, tracked, *a, len) {
                    let dz = dout[0] / len as f64;
                    for dv in da.iter_mut() {
                        *dv += dz;
                    }
                }
            }
            Op::GatherScalars { a, idx, src_len } => {
                if let Some(da) = Self::acc(g, tracked, *a, *src_len) {
                    for (i, &j) in idx.iter().enumerate() {
                        da[j] += dout[i];
                    }
                }
            }
            Op::MulBcastLast { a, b, rows, cols } => {
                if let Some(da) = Self::acc(g, tracked, *a, rows * cols) {
                    let f = &self.vals[b.0];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            da[r * cols + c] += dout[r * cols + c] * f[r];
                        }
                    }
                }
                if let Some(db) = Self::acc(g, tracked, *b, *rows) {
                    let x = &self.vals[a.0];
                    for r in 0..*rows {
                        let mut dot = 0.0;
                        for c in 0..*cols {
                            dot += dout[r * cols + c] * x[r * cols + c];
                        }
                        db[r] += dot;
                    }
                }
            }
            Op::WeightedSum { parts, w, rows, part_len } => {
                let kk = parts.len();
                let wv = &self.vals[w.0];
                for (k, p) in parts.iter().enumerate() {
                    if let Some(dp) = Self::acc(g, tracked, *p, rows * part_len) {
                        for r in 0..*rows {
                            let wk = wv[r * kk + k];
                            let src = &dout[r * part_len..(r + 1) * part_len];
                            let dst = &mut dp[r * part_len..(r + 1) * part_len];
                            for i in 0..*part_len {
                                dst[i] += wk * src[i];
                            }
                        }
                    }
                }
                if let Some(dw) = Self::acc(g, tracked, *w, rows * kk) {
                    for (k, p) in parts.iter().enumerate() {
                        let pv = &self.vals[p.0];
                        for r in 0..*rows {
                            let mut dot = 0.0;
                            for i in 0..*part_len {
                                dot += dout[r * part_len + i] * pv[r * part_len + i];
                            }
                            dw[r * kk + k] += dot;
                        }
                    }
                }
            }
            Op::EntropyTerm { a } => {
                if let Some(da) = Self::acc(g, tracked, *a, dout.len()) {
                    let x = &self.vals[a.0];
                    for i in 0..dout.len() {
                        if x[i] > 0.0 {
                            da[i] += dout[i] * (math::ln(x[i]) + 1.0);
                        }
                    }
                }
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn scan_finite(op: &'static str, data: &[f64]) -> Result<(), TapeError> {
    for (index, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(TapeError::NonFinite { op, index });
        }
    }
    Ok(())
}

fn swap_mid_into(src: &[f64], dst: &mut [f64], outer: usize, d1: usize, d2: usize, inner: usize) {
    // dst[(o, y, x, i)] = src[(o, x, y, i)] for x in d1, y in d2.
    for o in 0..outer {
        for x in 0..d1 {
            for y in 0..d2 {
                let s = ((o * d1 + x) * d2 + y) * inner;
                let d = ((o * d2 + y) * d1 + x) * inner;
                dst[d..d + inner].copy_from_slice(&src[s..s + inner]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    /// Central-difference gradient of `f` at `x0`, perturbing one leaf.
    fn fd_grad(f: impl Fn(&[f64]) -> f64, x0: &[f64], eps: f64) -> Vec<f64> {
        let mut grad = vec![0.0; x0.len()];
        let mut x = x0.to_vec();
        for i in 0..x.len() {
            let keep = x[i];
            x[i] = keep + eps;
            let fp = f(&x);
            x[i] = keep - eps;
            let fm = f(&x);
            x[i] = keep;
            grad[i] = (fp - fm) / (2.0 * eps);
        }
        grad
    }

    fn assert_close(analytic: &[f64], fd: &[f64], tol: f64, what: &str) {
        assert_eq!(analytic.len(), fd.len());
        for i in 0..fd.len() {
            let denom = analytic[i].abs().max(fd[i].abs()).max(1e-6);
            let rel = (analytic[i] - fd[i]).abs() / denom;
            assert!(
                rel < tol,
                "{what}[{i}]: analytic {} vs fd {} (rel {rel:.3e})",
                analytic[i],
                fd[i]
            );
        }
    }

    /// Generic harness: builds a scalar with `build`, compares tape gradients
    /// on the single tracked leaf against central differences.
    fn check_grad(
        x0: &[f64],
        tol: f64,
        what: &str,
        build: impl Fn(&mut Tape, Tref) -> Tref,
    ) {
        let run = |x: &[f64]| -> f64 {
            let mut t = Tape::new();
            let leaf = t.leaf(x.to_vec(), true).unwrap();
            let root = build(&mut t, leaf);
            t.val(root)[0]
        };
        let mut t = Tape::new();
        let leaf = t.leaf(x0.to_vec(), true).unwrap();
        let root = build(&mut t, leaf);
        let grads = t.backward(root).unwrap();
        let analytic = grads.get(leaf).unwrap();
        let fd = fd_grad(run, x0, 1e-6);
        assert_close(analytic, &fd, 1e-5, what);
        let _ = tol;
    }

    #[test]
    fn softmax_known_values() {
        // softmax([0,0]) = [0.5,0.5]; softmax([ln 2, 0]) = [2/3, 1/3].
        let mut t = Tape::new();
        let a = t.leaf(vec![0.0, 0.0, core::f64::consts::LN_2, 0.0], false).unwrap();
        let s = t.softmax(a, 2, 2).unwrap();
        let v = t.val(s);
        assert!((v[0] - 0.5).abs() < 1e-15 && (v[1] - 0.5).abs() < 1e-15);
        assert!((v[2] - 2.0 / 3.0).abs() < 1e-15);
        assert!((v[3] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_simplex_under_extreme_inputs() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1e4, -1e4, 0.0, 5e3, -5e3, 1e4], false).unwrap();
        let s = t.softmax(a, 2, 3).unwrap();
        for row in t.val(s).chunks_exact(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn square_gradient_is_two_x() {
        // f(x) = x·x at x=3 → grad 6.
        let mut t = Tape::new();
        let x = t.leaf(vec![3.0], true).unwrap();
        let y = t.mul(x, x).unwrap();
        let root = t.sum_all(y).unwrap();
        let grads = t.backward(root).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], true).unwrap();
        assert!(matches!(t.backward(x), Err(TapeError::NotScalar { len: 2 })));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut t = Tape::new();
        let x = t.leaf(vec![-1.0], false).unwrap();
        // (-1)^0.5 = NaN → error naming the op.
        let e = t.pow_const(x, 0.5).unwrap_err();
        assert!(matches!(e, TapeError::NonFinite { op: "pow_const", .. }));
    }

    #[test]
    fn log_softmax_cross_entropy_grad_is_probs_minus_onehot() {
        // d(−log softmax(z)[y])/dz = softmax(z) − onehot(y).
        let logits = vec![0.3, -1.2, 2.0];
        let target = 1usize;
        let mut t = Tape::new();
        let z = t.leaf(logits.clone(), true).unwrap();
        let ls = t.log_softmax(z, 1, 3).unwrap();
        let picked = t.gather_scalars(ls, &[target]).unwrap();
        let m = t.mean_all(picked).unwrap();
        let root = t.scale(m, -1.0).unwrap();
        let grads = t.backward(root).unwrap();
        let mut probs = logits.clone();
        softmax_rows(&mut probs, 3);
        probs[target] -= 1.0;
        assert_close(grads.get(z).unwrap(), &probs, 1e-12, "ce grad");
    }

    #[test]
    fn uniform_attention_averages_values() {
        // One head, zero q/k: softmax uniform → every output row = mean of v rows.
        let len = 4;
        let width = 3;
        let mut t = Tape::new();
        let q = t.leaf(vec![0.0; len * width], false).unwrap();
        let k = t.leaf(vec![0.0; len * width], false).unwrap();
        let vdata: Vec<f64> = (0..len * width).map(|i| i as f64).collect();
        let v = t.leaf(vdata.clone(), false).unwrap();
        let out = t.multi_head_attention(q, k, v, 1, len, width, 1).unwrap();
        let mut mean = vec![0.0; width];
        for row in vdata.chunks_exact(width) {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += x / len as f64;
            }
        }
        for row in t.val(out).chunks_exact(width) {
            for (c, &x) in row.iter().enumerate() {
                assert!((x - mean[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_shape_rejects_bad_heads() {
        let mut t = Tape::new();
        let qkv = t.leaf(vec![0.0; 2 * 3 * 3 * 5], false).unwrap();
        assert!(t.attention_packed(qkv, 2, 3, 5, 2).is_err());
    }

    // ── Finite-difference checks per primitive ──────────────────────────

    #[test]
    fn grad_matmul_all_transpose_combinations() {
        for &(ta, tb) in &[(false, false), (false, true), (true, false), (true, true)] {
            let (m, k, n) = (2usize, 3usize, 2usize);
            let data: Vec<f64> = (0..(m * k + k * n))
                .map(|i| (i as f64) * 0.3 - 1.1)
                .collect();
            check_grad(&data, 1e-6, "matmul", move |t, leaf| {
                let a = t.gather_scalars(leaf, &(0..m * k).collect::<Vec<_>>()).unwrap();
                let b = t
                    .gather_scalars(leaf, &(m * k..m * k + k * n).collect::<Vec<_>>())
                    .unwrap();
                let c = t.matmul(a, b, m, k, n, ta, tb).unwrap();
                let sq = t.mul(c, c).unwrap();
                t.sum_all(sq).unwrap()
            });
        }
    }

    #[test]
    fn grad_layer_norm() {
        let data = vec![0.5, -1.0, 2.0, 0.1, 1.5, -0.4, 0.9, 1.1, -1.7, 0.2, 0.8, -0.6];
        // 2 rows × 4 cols input, then gamma (4), beta (4) — one leaf split.
        check_grad(&data[..], 1e-6, "layer_norm", |t, leaf| {
            let a = t.gather_scalars(leaf, &(0..8).collect::<Vec<_>>()).unwrap();
            let gamma = t.gather_scalars(leaf, &[8, 9, 10, 11]).unwrap();
            let beta = t.gather_scalars(leaf, &[4, 5, 6, 7]).unwrap();
            let y = t.layer_norm(a, gamma, beta, 2, 4, 1e-5).unwrap();
            let sq = t.mul(y, y).unwrap();
            t.sum_all(sq).unwrap()
        });
    }

    #[test]
    fn grad_attention_packed() {
        // 1 seq × 3 tokens × width 4 × 2 heads: 3·12 = 36 packed values.
        let data: Vec<f64> = (0..36).map(|i| ((i * 7 % 11) as f64) * 0.2 - 1.0).collect();
        check_grad(&data, 1e-6, "attention", |t, leaf| {
            let out = t.attention_packed(leaf, 1, 3, 4, 2).unwrap();
            let sq = t.mul(out, out).unwrap();
            t.sum_all(sq).unwrap()
        });
    }

    #[test]
    fn grad_softmax_and_log_softmax() {
        let data = vec![0.3, -0.8, 1.2, 0.0, 2.0, -1.5];
        check_grad(&data, 1e-6, "softmax", |t, leaf| {
            let s = t.softmax(leaf, 2, 3).unwrap();
            let w = t.leaf(vec![0.2, -1.0, 0.5, 1.3, 0.7, -0.1], false).unwrap();
            let m = t.mul(s, w).unwrap();
            t.sum_all(m).unwrap()
        });
        check_grad(&data, 1e-6, "log_softmax", |t, leaf| {
            let s = t.log_softmax(leaf, 2, 3).unwrap();
            let w = t.leaf(vec![0.2, -1.0, 0.5, 1.3, 0.7, -0.1], false).unwrap();
            let m = t.mul(s, w).unwrap();
            t.sum_all(m).unwrap()
        });
    }

    #[test]
    fn grad_gelu_relu_pow_entropy() {
        let data = vec![0.8, 0.2, 1.7, 0.05, 0.4, 2.2];
        check_grad(&data, 1e-6, "gelu", |t, leaf| {
            let y = t.gelu(leaf).unwrap();
            t.sum_all(y).unwrap()
        });
        check_grad(&data, 1e-6, "relu_shifted", |t, leaf| {
            // keep away from the kink at 0
            let y = t.add_const(leaf, -1.0).unwrap();
            let r = t.relu(y).unwrap();
            t.sum_all(r).unwrap()
        });
        check_grad(&data, 1e-6, "pow_half", |t, leaf| {
            let y = t.pow_const(leaf, 0.5).unwrap();
            t.sum_all(y).unwrap()
        });
        check_grad(&data, 1e-6, "pow_neg_half", |t, leaf| {
            let y = t.pow_const(leaf, -0.5).unwrap();
            t.sum_all(y).unwrap()
        });
        check_grad(&data, 1e-6, "entropy_term", |t, leaf| {
            let y = t.entropy_term(leaf).unwrap();
            t.sum_all(y).unwrap()
        });
    }

    #[test]
    fn grad_movement_ops() {
        let data = vec![0.5, -1.0, 2.0, 0.1, 1.5, -0.4];
        check_grad(&data, 1e-6, "repeat", |t, leaf| {
            let y = t.repeat(leaf, 3).unwrap();
            let sq = t.mul(y, y).unwrap();
            t.sum_all(sq).unwrap()
        });
        check_grad(&data, 1e-6, "repeat_chunks", |t, leaf| {
            let y = t.repeat_chunks(leaf, 2, 2).unwrap();
            let sq = t.mul(y, y).unwrap();
            t.sum_all(sq).unwrap()
        });
        check_grad(&data, 1e-6, "gather_chunks_dup", |t, leaf| {
            let y = t.gather_chunks(leaf, 3, &[1, 0, 1]).unwrap();
            let sq = t.mul(y, y).unwrap();
            t.sum_all(sq).unwrap()
        });
        check_grad(&data, 1e-6, "swap_mid", |t, leaf| {
            let y = t.swap_mid(leaf, 1, 2, 3, 1).unwrap();
            let w = t.leaf(vec![0.3, 1.0, -0.7, 0.2, 0.9, -1.4], false).unwrap();
            let m = t.mul(y, w).unwrap();
            t.sum_all(m).unwrap()
        });
        check_grad(&data, 1e-6, "concat", |t, leaf| {
            let a = t.gather_scalars(leaf, &[0, 1, 2, 3]).unwrap();
            let b = t.gather_scalars(leaf, &[4, 5]).unwrap();
            let y = t.concat_rows(&[a, b], 2, &[2, 1]).unwrap();
            let sq = t.mul(y, y).unwrap();
            t.sum_all(sq).unwrap()
        });
    }

    #[test]
    fn grad_reductions_and_mixing() {
        let data = vec![0.5, -1.0, 2.0, 0.1, 1.5, -0.4, 0.6, 1.2];
        check_grad(&data, 1e-6, "mean_mid", |t, leaf| {
            let y = t.mean_mid(leaf, 2, 2, 2).unwrap();
            let sq = t.mul(y, y).unwrap();
            t.sum_all(sq).unwrap()
        });
        check_grad(&data, 1e-6, "mul_bcast_last", |t, leaf| {
            let a = t.gather_scalars(leaf, &[0, 1, 2, 3, 4, 5]).unwrap();
            let b = t.gather_scalars(leaf, &[6, 7]).unwrap();
            let y = t.mul_bcast_last(a, b, 2, 3).unwrap();
            let sq = t.mul(y, y).unwrap();
            t.sum_all(sq).unwrap()
        });
        check_grad(&data, 1e-6, "weighted_sum", |t, leaf| {
            let p0 = t.gather_scalars(leaf, &[0, 1, 2, 3]).unwrap();
            let p1 = t.gather_scalars(leaf, &[4, 5, 6, 7]).unwrap();
            let w = t.gather_scalars(leaf, &[0, 5, 2, 7]).unwrap();
            let y = t.weighted_sum(&[p0, p1], w, 2, 2).unwrap();
            let sq = t.mul(y, y).unwrap();
            t.sum_all(sq).unwrap()
        });
        check_grad(&data, 1e-6, "add_suffix", |t, leaf| {
            let a = t.gather_scalars(leaf, &[0, 1, 2, 3, 4, 5]).unwrap();
            let b = t.gather_scalars(leaf, &[6, 7]).unwrap();
            let ab = t.concat_rows(&[a], 1, &[6]).unwrap();
            let y = t.add_suffix(ab, b, 3, 2).unwrap();
            let sq = t.mul(y, y).unwrap();
            t.sum_all(sq).unwrap()
        });
    }

    #[test]
    fn backward_of_independent_subgraphs_is_concatenation() {
        // Root = f(x) + g(y) → grads match standalone computations exactly.
        let mut t = Tape::new();
        let x = t.leaf(vec![1.5, -0.5], true).unwrap();
        let y = t.leaf(vec![2.0, 0.25], true).unwrap();
        let fx = t.mul(x, x).unwrap();
        let gy = t.gelu(y).unwrap();
        let sf = t.sum_all(fx).unwrap();
        let sg = t.sum_all(gy).unwrap();
        let root = t.add(sf, sg).unwrap();
        let grads = t.backward(root).unwrap();

        let mut t2 = Tape::new();
        let x2 = t2.leaf(vec![1.5, -0.5], true).unwrap();
        let fx2 = t2.mul(x2, x2).unwrap();
        let sf2 = t2.sum_all(fx2).unwrap();
        let gx2 = t2.backward(sf2).unwrap();
        assert_eq!(grads.get(x).unwrap(), gx2.get(x2).unwrap());

        let mut t3 = Tape::new();
        let y3 = t3.leaf(vec![2.0, 0.25], true).unwrap();
        let gy3 = t3.gelu(y3).unwrap();
        let sg3 = t3.sum_all(gy3).unwrap();
        let gy3b = t3.backward(sg3).unwrap();
        assert_eq!(grads.get(y).unwrap(), gy3b.get(y3).unwrap());
    }

    #[test]
    fn forward_backward_bitwise_deterministic() {
        let data: Vec<f64> = (0..24).map(|i| (i as f64) * 0.17 - 2.0).collect();
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(data.clone(), true).unwrap();
            let s = t.softmax(x, 4, 6).unwrap();
            let a = t.attention_packed(x, 1, 2, 4, 2).unwrap();
            let sa = t.sum_all(a).unwrap();
            let ss = t.sum_all(s).unwrap();
            let root = t.add(sa, ss).unwrap();
            let grads = t.backward(root).unwrap();
            (t.val(root)[0].to_bits(), grads.get(x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }
}
