//! Parameter registry and neural building blocks on top of the tape.
//!
//! [`ParamSet`] owns every trainable value in one flat buffer, so the
//! optimizer and the finite-difference checker see a single vector. Each
//! registered tensor carries a [`ParamRole`] describing where it sits in the
//! architecture; roles partition parameters into shared ones and ones owned
//! by a single task, which is what task masking and the gate-size accounting
//! rely on.
//!
//! [`Ax`] pairs a tape node with its logical shape. The tape itself is
//! shape-free (flat buffers plus per-op dims), so this layer is where
//! dimension mismatches are caught before an op is emitted.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, TapeError, Tref};

/// Variance-denominator epsilon for all layer normalization in the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Where a parameter tensor sits in the architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Input embedding: linear lift plus positional encodings.
    Embed,
    /// Expert `index` of stage `stage` (0-based).
    Expert { stage: usize, index: usize },
    /// The shared mixture gate of stage `stage`.
    MainGate { stage: usize },
    /// Task `task`'s private gate at stage `stage`.
    TaskGate { task: usize, stage: usize },
    /// Task `task`'s prediction head.
    Head { task: usize },
}

/// Which loss terms may touch a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    /// Updated by every active task.
    Shared,
    /// Updated only when task `0` is active.
    Task(usize),
}

impl ParamRole {
    /// Task-private roles map to their task; everything else is shared.
    pub fn owner(&self) -> Owner {
        match *self {
            ParamRole::TaskGate { task, .. } | ParamRole::Head { task } => Owner::Task(task),
            _ => Owner::Shared,
        }
    }
}

/// Handle to one registered parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Metadata for one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub role: ParamRole,
}

impl ParamInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// All trainable parameters in one flat f64 buffer with per-tensor metadata.
#[derive(Default)]
pub struct ParamSet {
    data: Vec<f64>,
    infos: Vec<ParamInfo>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a zero-initialized tensor and returns its handle.
    /// Registration order is the flat-buffer layout order and must be
    /// deterministic across runs.
    pub fn alloc(&mut self, name: &str, shape: &[usize], role: ParamRole) -> ParamId {
        let numel: usize = shape.iter().product();
        let offset = self.data.len();
        self.data.resize(offset + numel, 0.0);
        self.infos.push(ParamInfo {
            name: String::from(name),
            shape: shape.to_vec(),
            offset,
            role,
        });
        ParamId(self.infos.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor_count(&self) -> usize {
        self.infos.len()
    }

    pub fn info(&self, id: ParamId) -> &ParamInfo {
        &self.infos[id.0]
    }

    pub fn infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    /// Handles for every registered tensor, in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.infos.len()).map(ParamId)
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn tensor(&self, id: ParamId) -> &[f64] {
        let info = &self.infos[id.0];
        &self.data[info.offset..info.offset + info.numel()]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut [f64] {
        let (offset, numel) = {
            let info = &self.infos[id.0];
            (info.offset, info.numel())
        };
        &mut self.data[offset..offset + numel]
    }

    /// Total element count over tensors whose role satisfies `pred`.
    pub fn count_where(&self, pred: impl Fn(&ParamRole) -> bool) -> usize {
        self.infos
            .iter()
            .filter(|i| pred(&i.role))
            .map(ParamInfo::numel)
            .sum()
    }

    /// Truncated-normal fill: N(0, σ²) resampled until within ±2σ.
    pub fn init_trunc_normal(&mut self, id: ParamId, sigma: f64, rng: &mut ChaCha8Rng) {
        let buf = self.tensor_mut(id);
        for v in buf.iter_mut() {
            *v = trunc_normal_sample(sigma, rng);
        }
    }

    pub fn init_const(&mut self, id: ParamId, value: f64) {
        for v in self.tensor_mut(id).iter_mut() {
            *v = value;
        }
    }

    /// Inserts one tracked leaf per tensor into `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound, TapeError> {
        let mut trefs = Vec::with_capacity(self.infos.len());
        for (i, _) in self.infos.iter().enumerate() {
            let t = tape.leaf(self.tensor(ParamId(i)).to_vec(), true)?;
            trefs.push(t);
        }
        Ok(Bound { trefs })
    }

    /// Flattens tape gradients back into parameter-buffer layout. Tensors the
    /// root never reached get exact zeros.
    pub fn collect_grads(&self, bound: &Bound, grads: &crate::tape::Grads) -> Vec<f64> {
        let mut out = vec![0.0; self.data.len()];
        for (i, info) in self.infos.iter().enumerate() {
            if let Some(gr) = grads.get(bound.trefs[i]) {
                out[info.offset..info.offset + info.numel()].copy_from_slice(gr);
            }
        }
        out
    }
}

/// One N(0,σ²) draw, resampled until it lands within ±2σ.
fn trunc_normal_sample(sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, sigma).expect("sigma must be positive and finite");
    loop {
        let x: f64 = dist.sample(rng);
        if x.abs() <= 2.0 * sigma {
            return x;
        }
    }
}

/// Per-tape binding of every parameter tensor to a tracked leaf.
pub struct Bound {
    trefs: Vec<Tref>,
}

impl Bound {
    pub fn tref(&self, id: ParamId) -> Tref {
        self.trefs[id.0]
    }
}

/// A tape node annotated with its logical shape.
#[derive(Debug, Clone)]
pub struct Ax {
    pub node: Tref,
    pub shape: Vec<usize>,
}

impl Ax {
    pub fn new(node: Tref, shape: &[usize]) -> Self {
        Self { node, shape: shape.to_vec() }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("activation must have at least one axis")
    }

    /// Reinterprets the buffer under a new shape (free: the tape is flat).
    pub fn reshaped(&self, shape: &[usize]) -> Result<Ax, TapeError> {
        let new: usize = shape.iter().product();
        if new != self.numel() {
            return Err(TapeError::Shape(format!(
                "reshape: {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.numel(),
                shape,
                new
            )));
        }
        Ok(Ax::new(self.node, shape))
    }
}

/// Fully connected layer applied to the last axis.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, d_in: usize, d_out: usize, role: ParamRole) -> Self {
        let w = params.alloc(&format!("{name}.weight"), &[d_in, d_out], role);
        let b = params.alloc(&format!("{name}.bias"), &[d_out], role);
        Self { w, b, d_in, d_out }
    }

    /// y = x·W + b over the last axis: (..., d_in) → (..., d_out).
    pub fn apply(&self, tape: &mut Tape, bound: &Bound, x: &Ax) -> Result<Ax, TapeError> {
        if x.last_dim() != self.d_in {
            return Err(TapeError::Shape(format!(
                "linear: input last dim {} != layer d_in {}",
                x.last_dim(),
                self.d_in
            )));
        }
        let rows = x.numel() / self.d_in;
        let prod = tape.matmul(x.node, bound.tref(self.w), rows, self.d_in, self.d_out, false, false)?;
        let out = tape.add_suffix(prod, bound.tref(self.b), rows, self.d_out)?;
        let mut shape = x.shape.clone();
        *shape.last_mut().unwrap() = self.d_out;
        Ok(Ax { node: out, shape })
    }
}

/// Layer normalization over the last axis with affine parameters.
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize, role: ParamRole) -> Self {
        let gamma = params.alloc(&format!("{name}.gamma"), &[dim], role);
        let beta = params.alloc(&format!("{name}.beta"), &[dim], role);
        Self { gamma, beta, dim }
    }

    pub fn apply(&self, tape: &mut Tape, bound: &Bound, x: &Ax) -> Result<Ax, TapeError> {
        if x.last_dim() != self.dim {
            return Err(TapeError::Shape(format!(
                "layer_norm: input last dim {} != {}",
                x.last_dim(),
                self.dim
            )));
        }
        let rows = x.numel() / self.dim;
        let out = tape.layer_norm(
            x.node,
            bound.tref(self.gamma),
            bound.tref(self.beta),
            rows,
            self.dim,
            LAYER_NORM_EPS,
        )?;
        Ok(Ax { node: out, shape: x.shape.clone() })
    }
}

/// Pre-norm transformer encoder block: x + MHA(LN(x)), then x + MLP(LN(x)).
pub struct EncoderBlock {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    pub width: usize,
    pub heads: usize,
}

impl EncoderBlock {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        role: ParamRole,
    ) -> Self {
        assert!(heads > 0 && width % heads == 0, "width must divide into heads");
        let hidden = width * mlp_ratio;
        Self {
            ln1: LayerNorm::new(params, &format!("{name}.ln1"), width, role),
            qkv: Linear::new(params, &format!("{name}.qkv"), width, 3 * width, role),
            proj: Linear::new(params, &format!("{name}.proj"), width, width, role),
            ln2: LayerNorm::new(params, &format!("{name}.ln2"), width, role),
            fc1: Linear::new(params, &format!("{name}.fc1"), width, hidden, role),
            fc2: Linear::new(params, &format!("{name}.fc2"), hidden, width, role),
            width,
            heads,
        }
    }

    /// x is (seqs, len, width); attention mixes within each length-`len`
    /// sequence independently.
    pub fn apply(&self, tape: &mut Tape, bound: &Bound, x: &Ax) -> Result<Ax, TapeError> {
        let [seqs, len, width] = x.shape[..] else {
            return Err(TapeError::Shape(format!(
                "encoder block expects (seqs, len, width), got {:?}",
                x.shape
            )));
        };
        if width != self.width {
            return Err(TapeError::Shape(format!(
                "encoder block width {} vs input width {width}",
                self.width
            )));
        }
        let normed = self.ln1.apply(tape, bound, x)?;
        let qkv = self.qkv.apply(tape, bound, &normed)?;
        let attn = tape.attention_packed(qkv.node, seqs, len, width, self.heads)?;
        let attn = Ax::new(attn, &x.shape);
        let attn = self.proj.apply(tape, bound, &attn)?;
        let x1 = Ax::new(tape.add(x.node, attn.node)?, &x.shape);

        let normed2 = self.ln2.apply(tape, bound, &x1)?;
        let h = self.fc1.apply(tape, bound, &normed2)?;
        let h = Ax::new(tape.gelu(h.node)?, &h.shape);
        let h = self.fc2.apply(tape, bound, &h)?;
        Ok(Ax::new(tape.add(x1.node, h.node)?, &x.shape))
    }
}

/// Stack of encoder blocks at one width.
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
}

impl Encoder {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        depth: usize,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        role: ParamRole,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| EncoderBlock::new(params, &format!("{name}.block{i}"), width, heads, mlp_ratio, role))
            .collect();
        Self { blocks }
    }

    pub fn apply(&self, tape: &mut Tape, bound: &Bound, x: &Ax) -> Result<Ax, TapeError> {
        let mut cur = x.clone();
        for b in &self.blocks {
            cur = b.apply(tape, bound, &cur)?;
        }
        Ok(cur)
    }
}
