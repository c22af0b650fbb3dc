//! Loss construction: per-task losses, gate auxiliaries, and their weighted
//! combination, all recorded on the tape so one backward pass covers
//! everything.
//!
//! Families:
//! - Classification: mean cross-entropy over the batch.
//! - Regression: mean squared error on standardized targets.
//! - Identification: batch-hard triplet loss — per anchor, the hardest
//!   (farthest) positive and hardest (closest) negative are selected from the
//!   forward values, then the hinge is built on the tape through those picks.
//! - Load balancing: per gate, K·Σ_k (ū_k − 1/K)² where ū is the
//!   batch-average weight of expert k; pushes average usage toward uniform.
//! - Entropy regularization: per sample and gate, Shannon entropy of the
//!   gate distribution normalized by ln K; pushes individual decisions
//!   toward one-hot. Single-expert gates contribute zero to both.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::model::ForwardOut;
use crate::tape::{Tape, TapeError, Tref};
use crate::tasks::{TaskKind, TaskSpec};

/// Hinge margin for the triplet loss.
pub const TRIPLET_MARGIN: f64 = 0.2;

/// Guard added under every distance square root; also used by the host-side
/// oracle so tape and oracle compute identical values.
pub const DIST_EPS: f64 = 1e-12;

/// Scalar weights combining the loss terms.
#[derive(Debug, Clone)]
pub struct LossWeights {
    /// Per-task weight w_t, aligned with the task roster.
    pub task: Vec<f64>,
    /// λ for the load-balancing auxiliary.
    pub load_balance: f64,
    /// λ for the entropy regularizer.
    pub entropy: f64,
}

impl LossWeights {
    /// Unit task weights, λ_lb = 0.01, λ_ent = 0.001.
    pub fn defaults(num_tasks: usize) -> Self {
        Self { task: vec![1.0; num_tasks], load_balance: 0.01, entropy: 0.001 }
    }
}

/// Ground truth for one task's batch.
#[derive(Debug, Clone)]
pub enum TaskTargets {
    /// Class index per sample.
    Classes(Vec<usize>),
    /// Standardized scalar per sample.
    Values(Vec<f64>),
    /// Subject index per sample (for triplet mining).
    Identities(Vec<usize>),
}

/// Batch-hard mining outcome: aligned anchor/positive/negative row indices.
/// Empty `anchors` means no anchor had both a positive and a negative.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripletPicks {
    pub anchors: Vec<usize>,
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
}

/// Tape handles of the assembled loss.
pub struct LossGraph {
    pub total: Tref,
    /// Per task: unweighted loss scalar; None when the task is inactive.
    pub per_task: Vec<Option<Tref>>,
    pub load_balance: Tref,
    pub entropy: Tref,
    /// Per task: the triplet selection used, for identification tasks.
    pub picks: Vec<Option<TripletPicks>>,
    /// Set when an identification task found no anchor with both a positive
    /// and a negative in the batch; its loss is exactly zero then.
    pub triplet_no_valid_anchor: bool,
}

/// Host-side copy of all loss values.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub per_task: Vec<Option<f64>>,
    pub load_balance: f64,
    pub entropy: f64,
    pub total: f64,
    pub triplet_no_valid_anchor: bool,
}

impl LossGraph {
    pub fn report(&self, tape: &Tape) -> LossReport {
        LossReport {
            per_task: self
                .per_task
                .iter()
                .map(|o| o.map(|t| tape.val(t)[0]))
                .collect(),
            load_balance: tape.val(self.load_balance)[0],
            entropy: tape.val(self.entropy)[0],
            total: tape.val(self.total)[0],
            triplet_no_valid_anchor: self.triplet_no_valid_anchor,
        }
    }
}

/// Weighted sum of scalars: Σ weight·part, built pairwise on the tape.
fn combine(tape: &mut Tape, parts: &[(Tref, f64)]) -> Result<Tref, TapeError> {
    let mut acc: Option<Tref> = None;
    for &(t, w) in parts {
        let scaled = if w == 1.0 { t } else { tape.scale(t, w)? };
        acc = Some(match acc {
            None => scaled,
            Some(a) => tape.add(a, scaled)?,
        });
    }
    acc.ok_or_else(|| TapeError::Shape("combining zero loss terms".into()))
}

/// Mean cross-entropy of row-major logits (B, C) against class targets.
pub fn cross_entropy(
    tape: &mut Tape,
    logits: Tref,
    batch: usize,
    classes: usize,
    targets: &[usize],
) -> Result<Tref, TapeError> {
    if targets.len() != batch {
        return Err(TapeError::Shape(format!(
            "cross entropy: {} targets for batch {batch}",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= classes) {
        return Err(TapeError::Shape(format!(
            "cross entropy: target class {bad} out of {classes}"
        )));
    }
    let ls = tape.log_softmax(logits, batch, classes)?;
    let idx: Vec<usize> = targets.iter().enumerate().map(|(r, &y)| r * classes + y).collect();
    let picked = tape.gather_scalars(ls, &idx)?;
    let mean = tape.mean_all(picked)?;
    tape.scale(mean, -1.0)
}

/// Mean squared error of predictions (B, 1) against scalar targets.
pub fn mse(tape: &mut Tape, preds: Tref, batch: usize, targets: &[f64]) -> Result<Tref, TapeError> {
    if targets.len() != batch {
        return Err(TapeError::Shape(format!("mse: {} targets for batch {batch}", targets.len())));
    }
    let t = tape.leaf(targets.to_vec(), false)?;
    let diff = tape.sub(preds, t)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean_all(sq)
}

/// Row sums of a (rows, cols) node.
fn row_sums(tape: &mut Tape, x: Tref, rows: usize, cols: usize) -> Result<Tref, TapeError> {
    let mean = tape.mean_mid(x, rows, cols, 1)?;
    tape.scale(mean, cols as f64)
}

/// Guarded Euclidean length per row of (rows, d) differences.
fn row_norms(tape: &mut Tape, diff: Tref, rows: usize, d: usize) -> Result<Tref, TapeError> {
    let sq = tape.mul(diff, diff)?;
    let sums = row_sums(tape, sq, rows, d)?;
    let safe = tape.add_const(sums, DIST_EPS)?;
    tape.pow_const(safe, 0.5)
}

/// Batch-hard mining on embedding values (B, d): per anchor, the farthest
/// same-identity row and the closest other-identity row; ties break toward
/// the lower index. Anchors lacking either are dropped.
pub fn mine_triplets(vals: &[f64], d: usize, ids: &[usize]) -> TripletPicks {
    let batch = ids.len();
    let dist = |i: usize, j: usize| -> f64 {
        let mut s = 0.0;
        for c in 0..d {
            let diff = vals[i * d + c] - vals[j * d + c];
            s += diff * diff;
        }
        math::sqrt(s + DIST_EPS)
    };
    let mut picks = TripletPicks::default();
    for a in 0..batch {
        let mut best_pos: Option<(usize, f64)> = None;
        let mut best_neg: Option<(usize, f64)> = None;
        for j in 0..batch {
            if j == a {
                continue;
            }
            let dj = dist(a, j);
            if ids[j] == ids[a] {
                if best_pos.map_or(true, |(_, dp)| dj > dp) {
                    best_pos = Some((j, dj));
                }
            } else if best_neg.map_or(true, |(_, dn)| dj < dn) {
                best_neg = Some((j, dj));
            }
        }
        if let (Some((p, _)), Some((n, _))) = (best_pos, best_neg) {
            picks.anchors.push(a);
            picks.pos.push(p);
            picks.neg.push(n);
        }
    }
    picks
}

/// Batch-hard triplet loss on L2-normalized embeddings (B, d), built on the
/// tape through the given selection so gradients flow to the chosen rows.
fn triplet_from_picks(
    tape: &mut Tape,
    emb: Tref,
    d: usize,
    picks: &TripletPicks,
    margin: f64,
) -> Result<Tref, TapeError> {
    if picks.anchors.is_empty() {
        // No mineable anchor: the loss is exactly zero and cannot move
        // parameters; callers surface the flag as a warning.
        return tape.leaf(vec![0.0], false);
    }
    let m = picks.anchors.len();
    let a_rows = tape.gather_rows(emb, d, &picks.anchors)?;
    let p_rows = tape.gather_rows(emb, d, &picks.pos)?;
    let n_rows = tape.gather_rows(emb, d, &picks.neg)?;
    let dp_diff = tape.sub(a_rows, p_rows)?;
    let dn_diff = tape.sub(a_rows, n_rows)?;
    let d_pos = row_norms(tape, dp_diff, m, d)?;
    let d_neg = row_norms(tape, dn_diff, m, d)?;
    let gap = tape.sub(d_pos, d_neg)?;
    let shifted = tape.add_const(gap, margin)?;
    let hinged = tape.relu(shifted)?;
    tape.mean_all(hinged)
}

/// Load-balancing penalty for one gate's weights (B, K):
/// K · Σ_k (ū_k − 1/K)².
fn load_balance_one(tape: &mut Tape, alpha: Tref, batch: usize, k: usize) -> Result<Tref, TapeError> {
    let mean_usage = tape.mean_mid(alpha, 1, batch, k)?;
    let centered = tape.add_const(mean_usage, -1.0 / k as f64)?;
    let sq = tape.pow_const(centered, 2.0)?;
    let sum = tape.sum_all(sq)?;
    tape.scale(sum, k as f64)
}

/// Normalized-entropy penalty for one gate's weights (B, K):
/// mean over samples of −Σ_k α ln α / ln K. Zero for K = 1.
fn entropy_one(tape: &mut Tape, alpha: Tref, batch: usize, k: usize) -> Result<Tref, TapeError> {
    if k == 1 {
        return tape.leaf(vec![0.0], false);
    }
    let terms = tape.entropy_term(alpha)?;
    let sums = row_sums(tape, terms, batch, k)?;
    let mean = tape.mean_all(sums)?;
    tape.scale(mean, -1.0 / math::ln(k as f64))
}

/// Assembles the full training loss for one forward pass.
///
/// `targets[t]` must be present exactly for active tasks (where
/// `fwd.task_outputs[t]` is Some). Gate auxiliaries average over every gate
/// recorded on the tape: the four main gates plus four gates per active
/// task.
pub fn build_loss(
    tape: &mut Tape,
    fwd: &ForwardOut,
    tasks: &[TaskSpec],
    targets: &[Option<TaskTargets>],
    weights: &LossWeights,
    margin: f64,
) -> Result<LossGraph, TapeError> {
    if targets.len() != tasks.len() || weights.task.len() != tasks.len() {
        return Err(TapeError::Shape(format!(
            "loss: {} targets / {} weights for {} tasks",
            targets.len(),
            weights.task.len(),
            tasks.len()
        )));
    }
    let batch = fwd.batch;
    let mut per_task: Vec<Option<Tref>> = vec![None; tasks.len()];
    let mut no_valid_anchor = false;
    for (t, spec) in tasks.iter().enumerate() {
        let Some(out) = fwd.task_outputs[t].as_ref() else {
            if targets[t].is_some() {
                return Err(TapeError::Shape(format!(
                    "loss: targets given for deactivated task '{}'",
                    spec.name
                )));
            }
            continue;
        };
        let tgt = targets[t].as_ref().ok_or_else(|| {
            TapeError::Shape(format!("loss: no targets for active task '{}'", spec.name))
        })?;
        let loss = match (spec.kind, tgt) {
            (TaskKind::Classification { classes }, TaskTargets::Classes(ys)) => {
                cross_entropy(tape, out.node, batch, classes, ys)?
            }
            (TaskKind::Regression, TaskTargets::Values(vs)) => mse(tape, out.node, batch, vs)?,
            (TaskKind::Identification { dim }, TaskTargets::Identities(ids)) => {
                let tl = triplet_batch_hard(tape, out.node, batch, dim, ids, margin)?;
                no_valid_anchor |= tl.no_valid_anchor;
                tl.loss
            }
            _ => {
                return Err(TapeError::Shape(format!(
                    "loss: target kind does not match task '{}'",
                    spec.name
                )))
            }
        };
        per_task[t] = Some(loss);
    }

    // Gate auxiliaries over every live gate.
    let mut lb_terms = Vec::new();
    let mut ent_terms = Vec::new();
    for alpha in &fwd.main_alphas {
        let k = alpha.shape[1];
        lb_terms.push(load_balance_one(tape, alpha.node, batch, k)?);
        ent_terms.push(entropy_one(tape, alpha.node, batch, k)?);
    }
    for row in &fwd.task_alphas {
        for alpha in row.iter().flatten() {
            let k = alpha.shape[1];
            lb_terms.push(load_balance_one(tape, alpha.node, batch, k)?);
            ent_terms.push(entropy_one(tape, alpha.node, batch, k)?);
        }
    }
    let gate_count = lb_terms.len() as f64;
    let lb_sum = combine(tape, &lb_terms.iter().map(|&t| (t, 1.0)).collect::<Vec<_>>())?;
    let load_balance = tape.scale(lb_sum, 1.0 / gate_count)?;
    let ent_sum = combine(tape, &ent_terms.iter().map(|&t| (t, 1.0)).collect::<Vec<_>>())?;
    let entropy = tape.scale(ent_sum, 1.0 / gate_count)?;

    let mut parts: Vec<(Tref, f64)> = Vec::new();
    for (t, loss) in per_task.iter().enumerate() {
        if let Some(l) = loss {
            parts.push((*l, weights.task[t]));
        }
    }
    parts.push((load_balance, weights.load_balance));
    parts.push((entropy, weights.entropy));
    let total = combine(tape, &parts)?;
    Ok(LossGraph { total, per_task, load_balance, entropy, triplet_no_valid_anchor: no_valid_anchor })
}

/// Host-side oracle: exhaustive triplet enumeration. For every anchor with at
/// least one positive and one negative, the hinge maximized over all its
/// (positive, negative) pairs; averaged over such anchors. Equals batch-hard
/// selection because the hinge is monotone in both distances.
pub fn triplet_exhaustive_oracle(emb: &[f64], d: usize, ids: &[usize], margin: f64) -> f64 {
    let batch = ids.len();
    let dist = |i: usize, j: usize| -> f64 {
        let mut s = 0.0;
        for c in 0..d {
            let diff = emb[i * d + c] - emb[j * d + c];
            s += diff * diff;
        }
        math::sqrt(s + DIST_EPS)
    };
    let mut sum = 0.0;
    let mut count = 0usize;
    for a in 0..batch {
        let mut worst: Option<f64> = None;
        for p in 0..batch {
            if p == a || ids[p] != ids[a] {
                continue;
            }
            for n in 0..batch {
                if ids[n] == ids[a] {
                    continue;
                }
                let hinge = (margin + dist(a, p) - dist(a, n)).max(0.0);
                worst = Some(worst.map_or(hinge, |w: f64| w.max(hinge)));
            }
        }
        if let Some(w) = worst {
            sum += w;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use rand::Rng;

    #[test]
    fn cross_entropy_matches_closed_form() {
        // Two rows; manual −ln softmax[y].
        let logits = vec![1.0, 2.0, 0.5, -0.3, 0.0, 0.9];
        let targets = [2usize, 0usize];
        let mut tape = Tape::new();
        let lg = tape.leaf(logits.clone(), true).unwrap();
        let loss = cross_entropy(&mut tape, lg, 2, 3, &targets).unwrap();
        let mut expect = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            let row = &logits[r * 3..(r + 1) * 3];
            let lse = math::ln(row.iter().map(|&v| math::exp(v)).sum::<f64>());
            expect += -(row[y] - lse);
        }
        expect /= 2.0;
        assert!((tape.val(loss)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn mse_matches_closed_form() {
        let mut tape = Tape::new();
        let p = tape.leaf(vec![1.0, -2.0, 0.5], true).unwrap();
        let loss = mse(&mut tape, p, 3, &[0.5, -1.0, 0.5]).unwrap();
        // ((0.5)² + (−1)² + 0²)/3 = 1.25/3
        assert!((tape.val(loss)[0] - 1.25 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn triplet_matches_exhaustive_oracle_on_random_batches() {
        let mut rng = stream(3, Stream::Aux(11));
        for case in 0..50 {
            let batch = 2 + (case % 7);
            let d = 3 + (case % 4);
            let emb: Vec<f64> = (0..batch * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ids: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..3usize)).collect();
            let mut tape = Tape::new();
            let e = tape.leaf(emb.clone(), true).unwrap();
            let tl = triplet_batch_hard(&mut tape, e, batch, d, &ids, TRIPLET_MARGIN).unwrap();
            let got = tape.val(tl.loss)[0];
            let want = triplet_exhaustive_oracle(&emb, d, &ids, TRIPLET_MARGIN);
            assert!(
                (got - want).abs() < 1e-12,
                "case {case}: batch-hard {got} vs exhaustive {want}"
            );
        }
    }

    #[test]
    fn triplet_without_valid_anchor_is_zero_and_flagged() {
        let mut tape = Tape::new();
        let e = tape.leaf(vec![0.1, 0.9, -0.4, 0.2], true).unwrap();
        // All identities distinct → no positives anywhere.
        let tl = triplet_batch_hard(&mut tape, e, 2, 2, &[0, 1], TRIPLET_MARGIN).unwrap();
        assert!(tl.no_valid_anchor);
        assert_eq!(tape.val(tl.loss)[0], 0.0);
    }

    #[test]
    fn load_balance_on_collapsed_gate_is_one() {
        // Single sample, K=2, all weight on expert 0: 2·((1−½)² + (0−½)²) = 1.
        let mut tape = Tape::new();
        let a = tape.leaf(vec![1.0, 0.0], true).unwrap();
        let lb = load_balance_one(&mut tape, a, 1, 2).unwrap();
        assert!((tape.val(lb)[0] - 1.0).abs() < 1e-12);
        // Uniform usage scores zero.
        let u = tape.leaf(vec![0.5, 0.5, 0.5, 0.5], true).unwrap();
        let lb = load_balance_one(&mut tape, u, 2, 2).unwrap();
        assert!(tape.val(lb)[0].abs() < 1e-15);
    }

    #[test]
    fn entropy_is_one_at_uniform_and_zero_at_onehot() {
        let mut tape = Tape::new();
        let u = tape.leaf(vec![0.25; 8], true).unwrap();
        let ent = entropy_one(&mut tape, u, 2, 4).unwrap();
        assert!((tape.val(ent)[0] - 1.0).abs() < 1e-12);
        let oh = tape.leaf(vec![1.0, 0.0, 0.0, 0.0], true).unwrap();
        let ent = entropy_one(&mut tape, oh, 1, 4).unwrap();
        assert!(tape.val(ent)[0].abs() < 1e-15);
        // K = 1 contributes exactly zero.
        let k1 = tape.leaf(vec![1.0, 1.0], true).unwrap();
        let ent = entropy_one(&mut tape, k1, 2, 1).unwrap();
        assert_eq!(tape.val(ent)[0], 0.0);
    }

    #[test]
    fn full_loss_report_is_consistent_and_backward_runs() {
        use crate::model::{Model, ModelConfig, NUM_JOINTS};
        use crate::tasks;

        let cfg = ModelConfig::tiny();
        let id_dim = cfg.id_dim;
        let window = cfg.window;
        let model = Model::new(cfg, tasks::tiny_roster(id_dim), 5).unwrap();
        let batch = 4;
        let mut rng = stream(13, Stream::Aux(1));
        let input: Vec<f64> = (0..batch * window * NUM_JOINTS * 2)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape).unwrap();
        let fwd = model
            .forward(&mut tape, &bound, &input, batch, &[true, true, true])
            .unwrap();
        let targets = vec![
            Some(TaskTargets::Classes(vec![0, 3, 1, 2])),
            Some(TaskTargets::Values(vec![0.2, -0.4, 1.1, 0.0])),
            Some(TaskTargets::Identities(vec![0, 0, 1, 1])),
        ];
        let weights = LossWeights::defaults(3);
        let graph = build_loss(&mut tape, &fwd, &model.tasks, &targets, &weights, TRIPLET_MARGIN)
            .unwrap();
        let report = graph.report(&tape);
        assert!(!report.triplet_no_valid_anchor);
        let mut expect = 0.0;
        for (t, l) in report.per_task.iter().enumerate() {
            expect += weights.task[t] * l.unwrap();
        }
        expect += weights.load_balance * report.load_balance;
        expect += weights.entropy * report.entropy;
        assert!(
            (report.total - expect).abs() < 1e-9,
            "total {} vs recombined parts {}",
            report.total,
            expect
        );
        // Fresh init gates are uniform: normalized entropy is exactly at its
        // maximum and the balance penalty is at its minimum.
        assert!((report.entropy - 1.0).abs() < 1e-6, "entropy {}", report.entropy);
        assert!(report.load_balance < 1e-6, "load balance {}", report.load_balance);
        // One backward over the combined scalar reaches the embedding table.
        let grads = tape.backward(graph.total).unwrap();
        let some_param = bound.tref(model.params.ids().next().unwrap());
        let g = grads.get(some_param).expect("first parameter tensor has a gradient");
        assert!(g.iter().any(|&v| v != 0.0), "gradient is all zeros");
    }

    #[test]
    fn missing_targets_for_active_task_is_an_error() {
        use crate::model::{Model, ModelConfig, NUM_JOINTS};
        use crate::tasks;

        let cfg = ModelConfig::tiny();
        let id_dim = cfg.id_dim;
        let window = cfg.window;
        let model = Model::new(cfg, tasks::tiny_roster(id_dim), 5).unwrap();
        let batch = 2;
        let mut rng = stream(13, Stream::Aux(2));
        let input: Vec<f64> = (0..batch * window * NUM_JOINTS * 2)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape).unwrap();
        let fwd = model
            .forward(&mut tape, &bound, &input, batch, &[true, true, true])
            .unwrap();
        let targets = vec![Some(TaskTargets::Classes(vec![0, 1])), None, None];
        let weights = LossWeights::defaults(3);
        let err = build_loss(&mut tape, &fwd, &model.tasks, &targets, &weights, TRIPLET_MARGIN);
        assert!(err.is_err());
    }

    #[test]
    fn combine_matches_hand_example() {
        // 1·2 + 1·2 + 1·2 + 0.01·0.5 + 0.001·0.8 = 6.0058.
        let mut tape = Tape::new();
        let mut parts = Vec::new();
        for _ in 0..3 {
            parts.push((tape.leaf(vec![2.0], true).unwrap(), 1.0));
        }
        parts.push((tape.leaf(vec![0.5], true).unwrap(), 0.01));
        parts.push((tape.leaf(vec![0.8], true).unwrap(), 0.001));
        let total = combine(&mut tape, &parts).unwrap();
        assert!((tape.val(total)[0] - 6.0058).abs() < 1e-12);
    }
}
