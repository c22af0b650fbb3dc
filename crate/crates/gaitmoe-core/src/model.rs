//! The multi-stage mixture-of-movement-experts model.
//!
//! Architecture (four stages over a 17-joint 2D pose window):
//! - An input embedding lifts per-joint (x, y) to the stage-1 width and adds
//!   learned per-joint and per-frame position encodings.
//! - Each stage holds K_s independently parameterized experts. An expert runs
//!   a spatial-attention encoder over the incoming units, merges fixed unit
//!   groups through per-group linear projections (joints → limbs → limb
//!   groups → body), then runs a temporal-attention encoder with a learned
//!   CLS token prepended per unit. The CLS outputs, mean-pooled over units,
//!   form the expert's fixed-width summary; the remaining tokens form its
//!   feature map for the next stage.
//! - A main gate per stage produces simplex weights over experts from the
//!   stage input; the next stage consumes the gate-weighted mixture of
//!   expert feature maps.
//! - Each task owns one gate per stage (structurally identical to the main
//!   gate, scaled by an amplifier) that mixes expert CLS summaries into a
//!   per-task, per-stage representation. Concatenating a task's four stage
//!   representations and passing them through a small MLP head yields that
//!   task's output.
//!
//! Deactivated tasks are not merely ignored at the loss: their gates and
//! heads are never recorded on the tape, so their private parameters receive
//! exactly zero gradient.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::nn::{Ax, Bound, Encoder, Linear, ParamId, ParamRole, ParamSet};
use crate::rng::{stream, Stream};
use crate::tape::{Tape, TapeError, Tref};
use crate::tasks::{TaskKind, TaskSpec};

/// Joint count of the input skeleton (0 nose, 1–2 eyes, 3–4 ears, 5–6
/// shoulders, 7–8 elbows, 9–10 wrists, 11–12 hips, 13–14 knees, 15–16
/// ankles).
pub const NUM_JOINTS: usize = 17;

/// Number of stages in the hierarchy.
pub const NUM_STAGES: usize = 4;

const GROUPS_S1: [&[usize]; 17] = [
    &[0], &[1], &[2], &[3], &[4], &[5], &[6], &[7], &[8], &[9], &[10], &[11], &[12], &[13],
    &[14], &[15], &[16],
];
/// head, left arm, right arm, left leg, right leg.
const GROUPS_S2: [&[usize]; 5] = [&[0, 1, 2, 3, 4], &[5, 7, 9], &[6, 8, 10], &[11, 13, 15], &[12, 14, 16]];
/// upper body (head + arms), lower body (legs).
const GROUPS_S3: [&[usize]; 2] = [&[0, 1, 2], &[3, 4]];
/// whole body.
const GROUPS_S4: [&[usize]; 1] = [&[0, 1]];

/// Unit groups merged at the end of stage `stage` (0-based). Stage 0 keeps
/// the 17 joints as singletons; later stages coarsen limbs into the body.
pub fn stage_groups(stage: usize) -> &'static [&'static [usize]] {
    match stage {
        0 => &GROUPS_S1,
        1 => &GROUPS_S2,
        2 => &GROUPS_S3,
        3 => &GROUPS_S4,
        _ => panic!("stage out of range"),
    }
}

/// Unit count entering each stage: 17 joints, then one unit per group of the
/// previous stage.
pub fn stage_in_units(stage: usize) -> usize {
    match stage {
        0 => NUM_JOINTS,
        s => stage_groups(s - 1).len(),
    }
}

/// Structural hyperparameters of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Channel widths c_1..c_4 at each stage's output. Stage 1 both consumes
    /// and produces c_1 (the embedding width).
    pub widths: [usize; 4],
    /// Attention heads per stage (both encoders of that stage).
    pub heads: [usize; 4],
    /// Encoder depth (blocks per attention encoder) per stage.
    pub depths: [usize; 4],
    /// Experts per stage (K_s).
    pub experts: [usize; 4],
    /// MLP hidden ratio inside encoder blocks.
    pub mlp_ratio: usize,
    /// Frames per input window (n).
    pub window: usize,
    /// Hidden width of each task head's MLP.
    pub head_hidden: usize,
    /// Identity-embedding width (d_id).
    pub id_dim: usize,
    /// Main-gate amplifier (expert-sized gates at 1.0).
    pub main_gate_amp: f64,
    /// Task-gate amplifier ("half as many parameters" at 0.5).
    pub task_gate_amp: f64,
}

impl ModelConfig {
    /// Desk-scale default: trains in minutes on one core.
    pub fn desk_default() -> Self {
        Self {
            widths: [16, 32, 64, 128],
            heads: [2, 2, 4, 4],
            depths: [1, 1, 1, 1],
            experts: [4, 4, 4, 4],
            mlp_ratio: 2,
            window: 30,
            head_hidden: 64,
            id_dim: 64,
            main_gate_amp: 1.0,
            task_gate_amp: 0.5,
        }
    }

    /// Smallest config that still exercises every code path; the
    /// finite-difference harness runs on this.
    pub fn tiny() -> Self {
        Self {
            widths: [4, 8, 8, 8],
            heads: [2, 2, 2, 2],
            depths: [1, 1, 1, 1],
            experts: [2, 2, 2, 2],
            mlp_ratio: 2,
            window: 6,
            head_hidden: 8,
            id_dim: 8,
            main_gate_amp: 1.0,
            task_gate_amp: 0.5,
        }
    }

    /// Width entering stage `s` (0-based).
    pub fn in_width(&self, s: usize) -> usize {
        if s == 0 {
            self.widths[0]
        } else {
            self.widths[s - 1]
        }
    }

    /// Width leaving stage `s` (0-based).
    pub fn out_width(&self, s: usize) -> usize {
        self.widths[s]
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.window < 2 {
            return Err(format!("window must be at least 2 frames, got {}", self.window));
        }
        if self.mlp_ratio == 0 || self.head_hidden == 0 || self.id_dim == 0 {
            return Err("mlp_ratio, head_hidden, and id_dim must be positive".into());
        }
        if !(self.main_gate_amp > 0.0) || !(self.task_gate_amp > 0.0) {
            return Err("gate amplifiers must be positive".into());
        }
        for s in 0..NUM_STAGES {
            if self.widths[s] == 0 || self.heads[s] == 0 || self.depths[s] == 0 || self.experts[s] == 0
            {
                return Err(format!("stage {s}: widths, heads, depths, experts must be positive"));
            }
            if s > 0 && self.widths[s] < self.widths[s - 1] {
                return Err(format!(
                    "widths must be non-decreasing across stages, got {:?}",
                    self.widths
                ));
            }
            for (what, w) in [("input", self.in_width(s)), ("output", self.out_width(s))] {
                if w % self.heads[s] != 0 {
                    return Err(format!(
                        "stage {s}: {what} width {w} not divisible by {} heads",
                        self.heads[s]
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Applies an amplifier to (width, heads, depth).
///
/// Heads scale directly (rounded, min 1) and depth scales by ceiling (min 1).
/// Width scales by √amplifier, rounded to a positive multiple of the scaled
/// head count: encoder parameters grow quadratically in width, so √a on the
/// width makes the total parameter count scale ≈ a when depth stays fixed,
/// which is what "half as many parameters" at a = 0.5 asks for.
pub fn amplified_dims(width: usize, heads: usize, depth: usize, a: f64) -> (usize, usize, usize) {
    let h = (math::round(a * heads as f64) as usize).max(1);
    let w_raw = width as f64 * math::sqrt(a);
    let mult = (math::round(w_raw / h as f64) as usize).max(1);
    let d = if a >= 1.0 {
        (math::round(a * depth as f64) as usize).max(1)
    } else {
        // ceil for sub-unity amplifiers so depth never collapses to zero
        let scaled = a * depth as f64;
        let fl = math::floor(scaled);
        let c = if scaled > fl { fl + 1.0 } else { fl };
        (c as usize).max(1)
    };
    (mult * h, h, d)
}

// ── Components ──────────────────────────────────────────────────────────

/// Input embedding: (x, y) lift plus learned position encodings.
struct Embed {
    lift: Linear,
    /// (17, c_1): added per joint, broadcast over batch and frames.
    joint_pe: ParamId,
    /// (window, c_1): added per frame, broadcast over batch and joints.
    frame_pe: ParamId,
    window: usize,
    width: usize,
}

impl Embed {
    fn new(params: &mut ParamSet, window: usize, width: usize) -> Self {
        let lift = Linear::new(params, "embed.lift", 2, width, ParamRole::Embed);
        let joint_pe = params.alloc("embed.joint_pe", &[NUM_JOINTS, width], ParamRole::Embed);
        let frame_pe = params.alloc("embed.frame_pe", &[window, width], ParamRole::Embed);
        Self { lift, joint_pe, frame_pe, window, width }
    }

    /// (B, n, 17, 2) → (B, n, 17, c_1).
    fn apply(&self, tape: &mut Tape, bound: &Bound, x: &Ax) -> Result<Ax, TapeError> {
        let [b, n, j, two] = x.shape[..] else {
            return Err(TapeError::Shape(format!("embed expects 4 axes, got {:?}", x.shape)));
        };
        if j != NUM_JOINTS || two != 2 {
            return Err(TapeError::Shape(format!(
                "embed expects (batch, frames, {NUM_JOINTS}, 2), got {:?}",
                x.shape
            )));
        }
        if n != self.window {
            return Err(TapeError::Shape(format!(
                "embed built for window {}, got {n} frames",
                self.window
            )));
        }
        let lifted = self.lift.apply(tape, bound, x)?;
        let c = self.width;
        // Per-joint encoding repeats every frame: suffix of length 17·c.
        let with_joint = tape.add_suffix(lifted.node, bound.tref(self.joint_pe), b * n, j * c)?;
        // Per-frame encoding: expand (n, c) to (n, 17, c) then add per sample.
        let frame_exp = tape.repeat_chunks(bound.tref(self.frame_pe), c, j)?;
        let with_frame = tape.add_suffix(with_joint, frame_exp, b, n * j * c)?;
        Ok(Ax::new(with_frame, &[b, n, j, c]))
    }
}

/// Shared spatial-encode → group-merge plumbing used by experts and gates.
///
/// `x` is (B, n, j_in, w_in); output is (B, n, j_out, w_out) where j_out is
/// the group count.
fn encode_and_merge(
    tape: &mut Tape,
    bound: &Bound,
    spatial: &Encoder,
    merges: &[Linear],
    groups: &'static [&'static [usize]],
    x: &Ax,
) -> Result<Ax, TapeError> {
    let [b, n, j, w] = x.shape[..] else {
        return Err(TapeError::Shape(format!("expected (B, n, j, w), got {:?}", x.shape)));
    };
    let flat = x.reshaped(&[b * n, j, w])?;
    let encoded = spatial.apply(tape, bound, &flat)?;
    let mut parts = Vec::with_capacity(groups.len());
    let mut inners = Vec::with_capacity(groups.len());
    let w_out = merges[0].d_out;
    for (g, merge) in groups.iter().zip(merges) {
        // Gather this group's member units for every (sample, frame) row.
        let mut idx = Vec::with_capacity(b * n * g.len());
        for bn in 0..b * n {
            for &u in g.iter() {
                idx.push(bn * j + u);
            }
        }
        let gathered = tape.gather_chunks(encoded.node, w, &idx)?;
        let gx = Ax::new(gathered, &[b * n, g.len() * w]);
        let merged = merge.apply(tape, bound, &gx)?;
        parts.push(merged.node);
        inners.push(w_out);
    }
    let stacked = tape.concat_rows(&parts, b * n, &inners)?;
    Ax::new(stacked, &[b * n, groups.len() * w_out]).reshaped(&[b, n, groups.len(), w_out])
}

/// One expert: spatial encoder → group merge → temporal encoder with CLS.
struct Expert {
    spatial: Encoder,
    merges: Vec<Linear>,
    temporal: Encoder,
    cls: ParamId,
    groups: &'static [&'static [usize]],
    out_width: usize,
}

impl Expert {
    fn new(
        params: &mut ParamSet,
        name: &str,
        role: ParamRole,
        groups: &'static [&'static [usize]],
        in_width: usize,
        out_width: usize,
        heads: usize,
        depth: usize,
        mlp_ratio: usize,
    ) -> Self {
        let spatial = Encoder::new(params, &format!("{name}.spatial"), depth, in_width, heads, mlp_ratio, role);
        let merges = groups
            .iter()
            .enumerate()
            .map(|(gi, g)| {
                Linear::new(params, &format!("{name}.merge{gi}"), g.len() * in_width, out_width, role)
            })
            .collect();
        let temporal = Encoder::new(params, &format!("{name}.temporal"), depth, out_width, heads, mlp_ratio, role);
        let cls = params.alloc(&format!("{name}.cls"), &[out_width], role);
        Self { spatial, merges, temporal, cls, groups, out_width }
    }

    /// (B, n, j_in, c_in) → feature map (B, n, j_out, c_out) plus CLS summary
    /// (B, c_out). The CLS slot is never part of the feature map.
    fn apply(&self, tape: &mut Tape, bound: &Bound, x: &Ax) -> Result<(Ax, Ax), TapeError> {
        let [b, n, _, _] = x.shape[..] else {
            return Err(TapeError::Shape(format!("expert expects (B, n, j, c), got {:?}", x.shape)));
        };
        let merged = encode_and_merge(tape, bound, &self.spatial, &self.merges, self.groups, x)?;
        let j_out = self.groups.len();
        let c = self.out_width;
        // Time-major per unit: (B, j_out, n, c).
        let time_major = tape.swap_mid(merged.node, b, n, j_out, c)?;
        // Prepend the learned CLS token to every unit's frame sequence.
        let cls_rep = tape.repeat(bound.tref(self.cls), b * j_out)?;
        let with_cls = tape.concat_rows(&[cls_rep, time_major], b * j_out, &[c, n * c])?;
        let enc = self
            .temporal
            .apply(tape, bound, &Ax::new(with_cls, &[b * j_out, n + 1, c]))?;
        // CLS output sits at token 0 of each unit sequence.
        let cls_idx: Vec<usize> = (0..b * j_out).map(|s| s * (n + 1)).collect();
        let cls_units = tape.gather_chunks(enc.node, c, &cls_idx)?;
        let cls_summary = tape.mean_mid(cls_units, b, j_out, c)?;
        // Remaining tokens, swapped back to frame-major.
        let mut rest_idx = Vec::with_capacity(b * j_out * n);
        for s in 0..b * j_out {
            for tkn in 1..=n {
                rest_idx.push(s * (n + 1) + tkn);
            }
        }
        let rest = tape.gather_chunks(enc.node, c, &rest_idx)?;
        let frame_major = tape.swap_mid(rest, b, j_out, n, c)?;
        Ok((
            Ax::new(frame_major, &[b, n, j_out, c]),
            Ax::new(cls_summary, &[b, c]),
        ))
    }
}

/// One gate: amplifier-scaled expert structure, mean-pooled, mapped to
/// simplex weights over that stage's experts.
struct Gate {
    adapter: Linear,
    spatial: Encoder,
    merges: Vec<Linear>,
    temporal: Encoder,
    logits: Linear,
    groups: &'static [&'static [usize]],
    k: usize,
}

impl Gate {
    #[allow(clippy::too_many_arguments)]
    fn new(
        params: &mut ParamSet,
        name: &str,
        role: ParamRole,
        groups: &'static [&'static [usize]],
        in_width: usize,
        out_width: usize,
        heads: usize,
        depth: usize,
        mlp_ratio: usize,
        amplifier: f64,
        k: usize,
    ) -> Self {
        let (w1, h, d) = amplified_dims(in_width, heads, depth, amplifier);
        let (w2, _, _) = amplified_dims(out_width, heads, depth, amplifier);
        // w2 must divide into h as well; amplified_dims guarantees multiples
        // of h only when called with the same head count — recompute to the
        // common head count h.
        let w2 = ((w2 + h - 1) / h).max(1) * h;
        let adapter = Linear::new(params, &format!("{name}.adapter"), in_width, w1, role);
        let spatial = Encoder::new(params, &format!("{name}.spatial"), d, w1, h, mlp_ratio, role);
        let merges = groups
            .iter()
            .enumerate()
            .map(|(gi, g)| Linear::new(params, &format!("{name}.merge{gi}"), g.len() * w1, w2, role))
            .collect();
        let temporal = Encoder::new(params, &format!("{name}.temporal"), d, w2, h, mlp_ratio, role);
        let logits = Linear::new(params, &format!("{name}.logits"), w2, k, role);
        Self { adapter, spatial, merges, temporal, logits, groups, k }
    }

    /// (B, n, j_in, c_in) → simplex weights (B, K).
    fn apply(&self, tape: &mut Tape, bound: &Bound, x: &Ax) -> Result<Ax, TapeError> {
        let [b, n, _, _] = x.shape[..] else {
            return Err(TapeError::Shape(format!("gate expects (B, n, j, c), got {:?}", x.shape)));
        };
        let adapted = self.adapter.apply(tape, bound, x)?;
        let merged = encode_and_merge(tape, bound, &self.spatial, &self.merges, self.groups, &adapted)?;
        let j_out = self.groups.len();
        let w2 = self.merges[0].d_out;
        let time_major = tape.swap_mid(merged.node, b, n, j_out, w2)?;
        let enc = self
            .temporal
            .apply(tape, bound, &Ax::new(time_major, &[b * j_out, n, w2]))?;
        // Mean over units and frames in one reduction.
        let pooled = tape.mean_mid(enc.node, b, j_out * n, w2)?;
        let lg = self.logits.apply(tape, bound, &Ax::new(pooled, &[b, w2]))?;
        let alpha = tape.softmax(lg.node, b, self.k)?;
        Ok(Ax::new(alpha, &[b, self.k]))
    }
}

/// One task's prediction head: hidden layer + GELU + output layer.
struct Head {
    hidden: Linear,
    out: Linear,
    kind: TaskKind,
}

impl Head {
    fn new(params: &mut ParamSet, name: &str, task: usize, fused: usize, hidden: usize, spec: &TaskSpec) -> Self {
        let role = ParamRole::Head { task };
        Self {
            hidden: Linear::new(params, &format!("{name}.hidden"), fused, hidden, role),
            out: Linear::new(params, &format!("{name}.out"), hidden, spec.out_dim(), role),
            kind: spec.kind,
        }
    }

    /// Fused (B, Σc_s) → logits (B, C) / prediction (B, 1) / L2-normalized
    /// embedding (B, d_id).
    fn apply(&self, tape: &mut Tape, bound: &Bound, fused: &Ax) -> Result<Ax, TapeError> {
        let h = self.hidden.apply(tape, bound, fused)?;
        let h = Ax::new(tape.gelu(h.node)?, &h.shape);
        let out = self.out.apply(tape, bound, &h)?;
        match self.kind {
            TaskKind::Identification { .. } => l2_normalize_rows(tape, &out),
            _ => Ok(out),
        }
    }
}

/// Row-wise projection onto the unit sphere: x / √(‖x‖² + 1e-12).
pub fn l2_normalize_rows(tape: &mut Tape, x: &Ax) -> Result<Ax, TapeError> {
    let [b, d] = x.shape[..] else {
        return Err(TapeError::Shape(format!("l2 normalize expects (B, d), got {:?}", x.shape)));
    };
    let sq = tape.mul(x.node, x.node)?;
    let mean = tape.mean_mid(sq, b, d, 1)?;
    let sum = tape.scale(mean, d as f64)?;
    let safe = tape.add_const(sum, 1e-12)?;
    let rinv = tape.pow_const(safe, -0.5)?;
    let out = tape.mul_bcast_last(x.node, rinv, b, d)?;
    Ok(Ax::new(out, &[b, d]))
}

/// One stage: K experts, a main gate, and one gate per task.
struct StageModule {
    experts: Vec<Expert>,
    main_gate: Gate,
    task_gates: Vec<Gate>,
    out_width: usize,
    out_units: usize,
}

/// Everything a forward pass produces, still attached to the tape.
pub struct ForwardOut {
    /// Per task: head output, or None when the task was deactivated.
    pub task_outputs: Vec<Option<Ax>>,
    /// Per stage: main-gate weights (B, K_s).
    pub main_alphas: Vec<Ax>,
    /// [stage][task]: task-gate weights (B, K_s); None when deactivated.
    pub task_alphas: Vec<Vec<Option<Ax>>>,
    /// Batch size of this pass.
    pub batch: usize,
}

/// Host-side copy of every gate decision for one batch.
pub struct GateTrace {
    pub batch: usize,
    /// Per stage: (K_s, row-major batch × K_s weights).
    pub main: Vec<(usize, Vec<f64>)>,
    /// [stage][task]: same layout; None when the task was deactivated.
    pub task: Vec<Vec<Option<(usize, Vec<f64>)>>>,
}

impl ForwardOut {
    /// Copies gate weights off the tape.
    pub fn gate_trace(&self, tape: &Tape) -> GateTrace {
        let grab = |ax: &Ax| (ax.shape[1], tape.val(ax.node).to_vec());
        GateTrace {
            batch: self.batch,
            main: self.main_alphas.iter().map(&grab).collect(),
            task: self
                .task_alphas
                .iter()
                .map(|row| row.iter().map(|o| o.as_ref().map(&grab)).collect())
                .collect(),
        }
    }
}

/// The assembled model: parameters plus the recipe to run them on a tape.
pub struct Model {
    pub cfg: ModelConfig,
    pub tasks: Vec<TaskSpec>,
    pub params: ParamSet,
    embed: Embed,
    stages: Vec<StageModule>,
    heads: Vec<Head>,
}

impl Model {
    /// Builds and initializes all parameters. Registration order (and
    /// therefore the flat parameter layout) is fixed: embedding, then stages
    /// in order (experts, main gate, task gates), then heads.
    pub fn new(cfg: ModelConfig, tasks: Vec<TaskSpec>, seed: u64) -> Result<Self, String> {
        cfg.validate()?;
        if tasks.is_empty() {
            return Err("at least one task is required".into());
        }
        for t in &tasks {
            if let TaskKind::Identification { dim } = t.kind {
                if dim != cfg.id_dim {
                    return Err(format!(
                        "identification task '{}' dim {dim} != config id_dim {}",
                        t.name, cfg.id_dim
                    ));
                }
            }
        }
        let mut params = ParamSet::new();
        let embed = Embed::new(&mut params, cfg.window, cfg.widths[0]);
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for s in 0..NUM_STAGES {
            let groups = stage_groups(s);
            let (c_in, c_out) = (cfg.in_width(s), cfg.out_width(s));
            let experts = (0..cfg.experts[s])
                .map(|k| {
                    Expert::new(
                        &mut params,
                        &format!("s{s}.e{k}"),
                        ParamRole::Expert { stage: s, index: k },
                        groups,
                        c_in,
                        c_out,
                        cfg.heads[s],
                        cfg.depths[s],
                        cfg.mlp_ratio,
                    )
                })
                .collect();
            let main_gate = Gate::new(
                &mut params,
                &format!("s{s}.gate"),
                ParamRole::MainGate { stage: s },
                groups,
                c_in,
                c_out,
                cfg.heads[s],
                cfg.depths[s],
                cfg.mlp_ratio,
                cfg.main_gate_amp,
                cfg.experts[s],
            );
            let task_gates = (0..tasks.len())
                .map(|t| {
                    Gate::new(
                        &mut params,
                        &format!("s{s}.t{t}.gate"),
                        ParamRole::TaskGate { task: t, stage: s },
                        groups,
                        c_in,
                        c_out,
                        cfg.heads[s],
                        cfg.depths[s],
                        cfg.mlp_ratio,
                        cfg.task_gate_amp,
                        cfg.experts[s],
                    )
                })
                .collect();
            stages.push(StageModule {
                experts,
                main_gate,
                task_gates,
                out_width: c_out,
                out_units: groups.len(),
            });
        }
        let fused: usize = cfg.widths.iter().sum();
        let heads = tasks
            .iter()
            .enumerate()
            .map(|(t, spec)| Head::new(&mut params, &format!("head.t{t}"), t, fused, cfg.head_hidden, spec))
            .collect();
        let mut model = Self { cfg, tasks, params, embed, stages, heads };
        model.init(seed);
        Ok(model)
    }

    /// Deterministic initialization: truncated-normal weights (σ = 0.02),
    /// zero biases, unit layer-norm gains, zero gate-logit layers so every
    /// gate starts uniform.
    fn init(&mut self, seed: u64) {
        let mut rng = stream(seed, Stream::Init);
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            let name = self.params.info(id).name.clone();
            if name.ends_with(".gamma") {
                self.params.init_const(id, 1.0);
            } else if name.ends_with(".bias") || name.ends_with(".beta") {
                // already zero
            } else if name.ends_with(".logits.weight") {
                // zero → uniform initial gating
            } else {
                self.params.init_trunc_normal(id, 0.02, &mut rng);
            }
        }
    }

    /// Total parameter count.
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Records a full forward pass for `batch` pose windows.
    ///
    /// `input` is row-major (batch, window, 17, 2); `active[t]` marks task
    /// t's gates and head as live. Deactivated tasks contribute no tape
    /// nodes at all.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        input: &[f64],
        batch: usize,
        active: &[bool],
    ) -> Result<ForwardOut, TapeError> {
        let n = self.cfg.window;
        if active.len() != self.tasks.len() {
            return Err(TapeError::Shape(format!(
                "active mask has {} entries for {} tasks",
                active.len(),
                self.tasks.len()
            )));
        }
        if input.len() != batch * n * NUM_JOINTS * 2 {
            return Err(TapeError::Shape(format!(
                "input has {} values, expected batch {batch} × {n} × {NUM_JOINTS} × 2",
                input.len()
            )));
        }
        let x = tape.leaf(input.to_vec(), false)?;
        let mut h = self.embed.apply(tape, bound, &Ax::new(x, &[batch, n, NUM_JOINTS, 2]))?;

        let mut main_alphas = Vec::with_capacity(NUM_STAGES);
        let mut task_alphas: Vec<Vec<Option<Ax>>> = Vec::with_capacity(NUM_STAGES);
        // Per task, per stage: the gate-mixed CLS representation.
        let mut task_stage_reps: Vec<Vec<Ax>> = vec![Vec::new(); self.tasks.len()];

        for stage in &self.stages {
            let mut feats = Vec::with_capacity(stage.experts.len());
            let mut summaries = Vec::with_capacity(stage.experts.len());
            for e in &stage.experts {
                let (z, cls) = e.apply(tape, bound, &h)?;
                feats.push(z.node);
                summaries.push(cls.node);
            }
            let alpha = stage.main_gate.apply(tape, bound, &h)?;
            let part_len = n * stage.out_units * stage.out_width;
            let mixed = tape.weighted_sum(&feats, alpha.node, batch, part_len)?;
            let mut row = Vec::with_capacity(self.tasks.len());
            for (t, gate) in stage.task_gates.iter().enumerate() {
                if !active[t] {
                    row.push(None);
                    continue;
                }
                let ta = gate.apply(tape, bound, &h)?;
                let rep = tape.weighted_sum(&summaries, ta.node, batch, stage.out_width)?;
                task_stage_reps[t].push(Ax::new(rep, &[batch, stage.out_width]));
                row.push(Some(ta));
            }
            task_alphas.push(row);
            main_alphas.push(alpha);
            h = Ax::new(mixed, &[batch, n, stage.out_units, stage.out_width]);
        }

        let mut task_outputs = Vec::with_capacity(self.tasks.len());
        for (t, head) in self.heads.iter().enumerate() {
            if !active[t] {
                task_outputs.push(None);
                continue;
            }
            let reps = &task_stage_reps[t];
            let parts: Vec<Tref> = reps.iter().map(|a| a.node).collect();
            let inners: Vec<usize> = reps.iter().map(|a| a.shape[1]).collect();
            let fused_node = tape.concat_rows(&parts, batch, &inners)?;
            let fused = Ax::new(fused_node, &[batch, inners.iter().sum()]);
            task_outputs.push(Some(head.apply(tape, bound, &fused)?));
        }

        Ok(ForwardOut { task_outputs, main_alphas, task_alphas, batch })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks;

    #[test]
    fn stage_two_groups_partition_all_joints() {
        let mut seen = [false; NUM_JOINTS];
        for g in stage_groups(1) {
            for &u in g.iter() {
                assert!(!seen[u], "joint {u} appears twice");
                seen[u] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(stage_groups(0).len(), 17);
        assert_eq!(stage_groups(1).len(), 5);
        assert_eq!(stage_groups(2).len(), 2);
        assert_eq!(stage_groups(3).len(), 1);
        assert_eq!(stage_in_units(0), 17);
        assert_eq!(stage_in_units(3), 2);
    }

    #[test]
    fn amplifier_identity_at_one() {
        assert_eq!(amplified_dims(16, 2, 1, 1.0), (16, 2, 1));
        assert_eq!(amplified_dims(128, 4, 3, 1.0), (128, 4, 3));
    }

    #[test]
    fn amplifier_half_shrinks_width_by_sqrt() {
        // 16 → round(11.31) = 11 at 1 head; 64 → 46 at 2 heads.
        assert_eq!(amplified_dims(16, 2, 1, 0.5), (11, 1, 1));
        assert_eq!(amplified_dims(64, 4, 1, 0.5), (46, 2, 1));
        // depth never collapses
        assert_eq!(amplified_dims(8, 2, 1, 0.25).2, 1);
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut cfg = ModelConfig::desk_default();
        cfg.heads[2] = 3; // 32 and 64 not divisible by 3
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk_default();
        cfg.widths = [32, 16, 64, 128];
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk_default();
        cfg.window = 1;
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::desk_default().validate().is_ok());
        assert!(ModelConfig::tiny().validate().is_ok());
    }

    #[test]
    fn task_gate_parameter_ratio_near_half_on_default_config() {
        // Build with a single task so there is exactly one task gate per
        // stage to compare against the main gate.
        let cfg = ModelConfig::desk_default();
        let model = Model::new(cfg, tasks::tiny_roster(64)[..1].to_vec(), 11).unwrap();
        for s in 0..NUM_STAGES {
            let main = model
                .params
                .count_where(|r| matches!(r, ParamRole::MainGate { stage } if *stage == s));
            let task = model
                .params
                .count_where(|r| matches!(r, ParamRole::TaskGate { stage, task } if *stage == s && *task == 0));
            let ratio = task as f64 / main as f64;
            assert!(
                (0.4..=0.6).contains(&ratio),
                "stage {s}: task/main gate ratio {ratio:.3} outside [0.4, 0.6]"
            );
        }
    }

    fn tiny_model(seed: u64) -> Model {
        let cfg = ModelConfig::tiny();
        let id_dim = cfg.id_dim;
        Model::new(cfg, tasks::tiny_roster(id_dim), seed).unwrap()
    }

    fn tiny_input(model: &Model, batch: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = stream(seed, Stream::Aux(99));
        (0..batch * model.cfg.window * NUM_JOINTS * 2)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect()
    }

    #[test]
    fn forward_produces_contract_shapes_and_simplex_gates() {
        let model = tiny_model(3);
        let batch = 2;
        let input = tiny_input(&model, batch, 7);
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape).unwrap();
        let out = model
            .forward(&mut tape, &bound, &input, batch, &[true, true, true])
            .unwrap();
        assert_eq!(out.task_outputs.len(), 3);
        assert_eq!(out.task_outputs[0].as_ref().unwrap().shape, &[2, 4]);
        assert_eq!(out.task_outputs[1].as_ref().unwrap().shape, &[2, 1]);
        assert_eq!(out.task_outputs[2].as_ref().unwrap().shape, &[2, 8]);
        // Identity embeddings live on the unit sphere. A fresh-init model
        // emits tiny raw embeddings (~1e-4), where the 1e-12 stability guard
        // inside the normalization is still visible, so the tolerance here is
        // loose; exact unit norms at working magnitudes are covered by
        // l2_normalize_puts_rows_on_unit_sphere.
        let emb = tape.val(out.task_outputs[2].as_ref().unwrap().node);
        for row in emb.chunks_exact(8) {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>();
            assert!(norm <= 1.0 + 1e-9 && norm > 0.99, "embedding norm² {norm}");
        }
        let trace = out.gate_trace(&tape);
        assert_eq!(trace.main.len(), NUM_STAGES);
        for (k, flat) in &trace.main {
            assert_eq!(*k, 2);
            for row in flat.chunks_exact(*k) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
        // fresh model with zero gate-logit layers gates uniformly
        for (_, flat) in &trace.main {
            for &v in flat.iter() {
                assert!((v - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deactivated_tasks_leave_no_trace_and_no_gradient() {
        let model = tiny_model(5);
        let batch = 2;
        let input = tiny_input(&model, batch, 8);
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape).unwrap();
        let out = model
            .forward(&mut tape, &bound, &input, batch, &[true, false, false])
            .unwrap();
        assert!(out.task_outputs[1].is_none() && out.task_outputs[2].is_none());
        let trace = out.gate_trace(&tape);
        assert!(trace.task.iter().all(|row| row[1].is_none() && row[2].is_none()));
        // Backprop through the one live head: deactivated tasks' private
        // parameters must collect exactly zero.
        let logits = out.task_outputs[0].as_ref().unwrap();
        let sq = tape.mul(logits.node, logits.node).unwrap();
        let root = tape.sum_all(sq).unwrap();
        let grads = tape.backward(root).unwrap();
        let flat = model.params.collect_grads(&bound, &grads);
        for info in model.params.infos() {
            let private_to_inactive = matches!(
                info.role.owner(),
                crate::nn::Owner::Task(t) if t != 0
            );
            if private_to_inactive {
                let slice = &flat[info.offset..info.offset + info.numel()];
                assert!(
                    slice.iter().all(|&gv| gv == 0.0),
                    "{} received gradient while deactivated",
                    info.name
                );
            }
        }
        // Shared parameters do get gradient.
        let shared_grad: f64 = model
            .params
            .infos()
            .iter()
            .filter(|i| matches!(i.role, ParamRole::Embed))
            .map(|i| flat[i.offset..i.offset + i.numel()].iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        assert!(shared_grad > 0.0);
    }

    #[test]
    fn single_expert_stages_ignore_gate_parameters() {
        use rand::Rng;
        let mut cfg = ModelConfig::tiny();
        cfg.experts = [1, 1, 1, 1];
        let roster = tasks::tiny_roster(cfg.id_dim);
        let model = Model::new(cfg.clone(), roster.clone(), 21).unwrap();
        let batch = 2;
        let input = tiny_input(&model, batch, 9);
        let run = |m: &Model| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound = m.params.bind(&mut tape).unwrap();
            let out = m
                .forward(&mut tape, &bound, &input, batch, &[true, true, true])
                .unwrap();
            out.task_outputs
                .iter()
                .flat_map(|o| tape.val(o.as_ref().unwrap().node).to_vec())
                .collect()
        };
        let base = run(&model);
        // Randomize every gate parameter (main and task) and rerun.
        let mut scrambled = Model::new(cfg, roster, 21).unwrap();
        let mut rng = stream(77, Stream::Aux(1));
        let ids: Vec<ParamId> = scrambled.params.ids().collect();
        for id in ids {
            let is_gate = matches!(
                scrambled.params.info(id).role,
                ParamRole::MainGate { .. } | ParamRole::TaskGate { .. }
            );
            if is_gate {
                for v in scrambled.params.tensor_mut(id).iter_mut() {
                    *v = rng.gen_range(-2.0..2.0);
                }
            }
        }
        let alt = run(&scrambled);
        let max_delta = base
            .iter()
            .zip(&alt)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_delta < 1e-12, "gate parameters leaked into outputs: {max_delta}");
    }

    #[test]
    fn identical_coordinates_at_different_frames_embed_differently() {
        let model = tiny_model(13);
        let n = model.cfg.window;
        // One sample whose frames are all identical.
        let frame: Vec<f64> = (0..NUM_JOINTS * 2).map(|i| (i as f64) * 0.01).collect();
        let input: Vec<f64> = (0..n).flat_map(|_| frame.clone()).collect();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape).unwrap();
        let x = tape.leaf(input, false).unwrap();
        let h = model
            .embed
            .apply(&mut tape, &bound, &Ax::new(x, &[1, n, NUM_JOINTS, 2]))
            .unwrap();
        let v = tape.val(h.node);
        let c = model.cfg.widths[0];
        let frame0 = &v[0..NUM_JOINTS * c];
        let frame1 = &v[NUM_JOINTS * c..2 * NUM_JOINTS * c];
        assert!(frame0.iter().zip(frame1).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn l2_normalize_puts_rows_on_unit_sphere() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(vec![3.0, -4.0, 0.0, 0.5, 0.5, -0.5], true)
            .unwrap();
        let normed = l2_normalize_rows(&mut tape, &Ax::new(x, &[2, 3])).unwrap();
        // The 1e-12 guard shifts norm² by ε/‖x‖² ≈ 1.3e-12 on the 0.75-norm
        // row, so assert at 1e-11.
        for row in tape.val(normed.node).chunks_exact(3) {
            let norm: f64 = row.iter().map(|v| v * v).sum();
            assert!((norm - 1.0).abs() < 1e-11, "norm² {norm}");
        }
        // Degenerate all-zero rows stay finite (and zero).
        let mut tape = Tape::new();
        let z = tape.leaf(vec![0.0, 0.0], false).unwrap();
        let normed = l2_normalize_rows(&mut tape, &Ax::new(z, &[1, 2])).unwrap();
        assert!(tape.val(normed.node).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn permuting_joints_within_a_group_changes_expert_output() {
        // The merge projection sees concatenated member features in order, so
        // swapping two members of a stage-2 group must change the output. The
        // default σ=0.02 init attenuates the effect below measurability after
        // four stages, so scale every non-normalization weight up first.
        let mut model = tiny_model(17);
        let ids: Vec<ParamId> = model.params.ids().collect();
        let mut rng = stream(41, Stream::Aux(2));
        for id in ids {
            let name = model.params.info(id).name.clone();
            if !(name.ends_with(".gamma") || name.ends_with(".beta")) {
                model.params.init_trunc_normal(id, 0.3, &mut rng);
            }
        }
        let model = model;
        let batch = 1;
        let mut input = tiny_input(&model, batch, 31);
        let run = |inp: &[f64], m: &Model| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound = m.params.bind(&mut tape).unwrap();
            let out = m
                .forward(&mut tape, &bound, inp, batch, &[true, false, false])
                .unwrap();
            tape.val(out.task_outputs[0].as_ref().unwrap().node).to_vec()
        };
        let base = run(&input, &model);
        // Swap joints 5 and 7 (same left-arm group) in every frame.
        let n = model.cfg.window;
        for f in 0..n {
            for d in 0..2 {
                let i5 = (f * NUM_JOINTS + 5) * 2 + d;
                let i7 = (f * NUM_JOINTS + 7) * 2 + d;
                input.swap(i5, i7);
            }
        }
        let swapped = run(&input, &model);
        assert!(base.iter().zip(&swapped).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn forward_is_deterministic() {
        let model = tiny_model(23);
        let batch = 2;
        let input = tiny_input(&model, batch, 3);
        let run = || {
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape).unwrap();
            let out = model
                .forward(&mut tape, &bound, &input, batch, &[true, true, true])
                .unwrap();
            out.task_outputs
                .iter()
                .flat_map(|o| tape.val(o.as_ref().unwrap().node).iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
