//! Supervised training of the refinement head: Hungarian assignment of
//! predicted segments to ground truth on temporal IoU, junk-labelled targets
//! for the unmatched, cross-entropy plus smooth-L1 losses, and an Adam loop
//! over one video per step.

use crate::error::{Error, Result};
use crate::metrics::{CorpusEval, MetricsConfig};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::segments::{
    encode_offsets, extract_segments, tiou, BoundaryOffsets, LabelSequence, Segment,
};
use crate::tensor::{Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lambda_ce: f64,
    pub lambda_reg: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            lambda_ce: 1.0,
            lambda_reg: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".to_string()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".to_string()));
        }
        if self.weight_decay < 0.0 || self.lambda_ce < 0.0 || self.lambda_reg < 0.0 {
            return Err(Error::Config("negative loss weight".to_string()));
        }
        Ok(())
    }
}

/// Outcome of the one-to-one segment assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// (pred index, gt index, tIoU), ordered by pred index; tIoU > 0 always.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

// Square minimal-assignment solver (potentials + augmenting paths, O(n^3)).
// Returns for each row its assigned column. Deterministic: scan order is
// fixed and strict comparisons prefer the first minimum.
fn assign_min_cost(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1]; // column j -> row (1-based, 0 = free)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=n {
        if matched_row[j] > 0 {
            row_to_col[matched_row[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// One-to-one matching maximizing total tIoU (cost 1 − tIoU), with
/// zero-tIoU pairs dropped afterwards. Among equal-total optima, pairs are
/// canonicalized toward the lexicographically smallest pairing by exact
/// tie-preserving exchanges.
pub fn hungarian_match(preds: &[Segment], gts: &[Segment]) -> MatchResult {
    let (n, m) = (preds.len(), gts.len());
    if n == 0 || m == 0 {
        return MatchResult {
            pairs: Vec::new(),
            unmatched_preds: (0..n).collect(),
            unmatched_gts: (0..m).collect(),
        };
    }
    let iou: Vec<Vec<f64>> =
        preds.iter().map(|p| gts.iter().map(|g| tiou(p, g)).collect()).collect();
    let dim = n.max(m);
    // Padding entries behave like tIoU-0 pairs (cost 1).
    let cost: Vec<Vec<f64>> = (0..dim)
        .map(|i| {
            (0..dim)
                .map(|j| if i < n && j < m { 1.0 - iou[i][j] } else { 1.0 })
                .collect()
        })
        .collect();
    let row_to_col = assign_min_cost(&cost);

    let mut assigned: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        let j = row_to_col[i];
        if j < m && iou[i][j] > 0.0 {
            assigned[i] = Some(j);
        }
    }
    canonicalize_ties(&mut assigned, &iou);

    let mut pairs = Vec::new();
    let mut unmatched_preds = Vec::new();
    let mut gt_taken = vec![false; m];
    for (i, slot) in assigned.iter().enumerate() {
        match slot {
            Some(j) => {
                pairs.push((i, *j, iou[i][*j]));
                gt_taken[*j] = true;
            }
            None => unmatched_preds.push(i),
        }
    }
    let unmatched_gts = (0..m).filter(|&j| !gt_taken[j]).collect();
    MatchResult { pairs, unmatched_preds, unmatched_gts }
}

// Exchange passes that keep the total tIoU bit-identical while moving the
// pairing toward the lexicographically smallest representative: uncross
// pairs with exactly equal sums, and shift a match to an earlier pred with
// equal tIoU. Each exchange strictly lowers the pair-list order, so the
// loop terminates.
fn canonicalize_ties(assigned: &mut [Option<usize>], iou: &[Vec<f64>]) {
    let n = assigned.len();
    loop {
        let mut changed = false;
        for i1 in 0..n {
            for i2 in i1 + 1..n {
                match (assigned[i1], assigned[i2]) {
                    (Some(j1), Some(j2)) if j1 > j2 => {
                        let straight = iou[i1][j2] + iou[i2][j1];
                        let crossed = iou[i1][j1] + iou[i2][j2];
                        if straight == crossed && iou[i1][j2] > 0.0 && iou[i2][j1] > 0.0 {
                            assigned[i1] = Some(j2);
                            assigned[i2] = Some(j1);
                            changed = true;
                        }
                    }
                    (None, Some(j)) => {
                        if iou[i1][j] == iou[i2][j] && iou[i1][j] > 0.0 {
                            assigned[i1] = Some(j);
                            assigned[i2] = None;
                            changed = true;
                        }
                    }
                    _ => {}
                }
            }
        }
        if !changed {
            return;
        }
    }
}

/// Training target of one predicted segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentTarget {
    /// Class id in 0..=|C|; |C| is the junk class.
    pub class: usize,
    /// Offsets toward the matched ground-truth segment; None for junk.
    pub offsets: Option<BoundaryOffsets>,
}

/// Per-segment targets: matched segments carry the ground-truth class and
/// encoded offsets, unmatched ones the junk class.
pub fn build_targets(
    matching: &MatchResult,
    preds: &[Segment],
    gts: &[Segment],
    num_classes: usize,
) -> Vec<SegmentTarget> {
    let mut targets: Vec<SegmentTarget> = preds
        .iter()
        .map(|_| SegmentTarget { class: num_classes, offsets: None })
        .collect();
    for &(pi, gi, _) in &matching.pairs {
        targets[pi] = SegmentTarget {
            class: gts[gi].label,
            offsets: Some(encode_offsets(&preds[pi], &gts[gi])),
        };
    }
    targets
}

/// Loss node plus detached term values for logging.
pub struct LossBreakdown {
    pub total: Var,
    pub ce: f64,
    pub reg: f64,
}

/// λ1·CE(class logits vs targets, averaged over all segments) +
/// λ2·smoothL1(offsets vs encoded targets, averaged over matched segments).
/// Cross entropy consumes pre-softmax logits through a stable log-softmax.
pub fn refinement_loss(
    graph: &mut crate::tensor::Graph,
    class_logits: Var,
    offsets: Var,
    targets: &[SegmentTarget],
    lambda_ce: f64,
    lambda_reg: f64,
) -> Result<LossBreakdown> {
    let n = targets.len();
    let logits_shape = graph.value(class_logits).shape().to_vec();
    if logits_shape[0] != n {
        return Err(Error::Contract(format!(
            "loss: {} logits rows vs {} targets",
            logits_shape[0], n
        )));
    }
    let classes_incl_junk = logits_shape[1];
    if let Some(bad) = targets.iter().find(|t| t.class >= classes_incl_junk) {
        return Err(Error::Contract(format!(
            "loss: class target {} out of range {}",
            bad.class, classes_incl_junk
        )));
    }

    let log_probs = graph.log_softmax_lastdim(class_logits)?;
    let mut onehot = Tensor::zeros(vec![n, classes_incl_junk]);
    for (i, t) in targets.iter().enumerate() {
        onehot.data_mut()[i * classes_incl_junk + t.class] = 1.0;
    }
    let oh = graph.constant(onehot);
    let picked = graph.mul(log_probs, oh)?;
    let summed = graph.sum_all(picked)?;
    let ce = graph.mul_scalar(summed, -1.0 / n as f64)?;

    let matched: Vec<(usize, BoundaryOffsets)> = targets
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.offsets.map(|o| (i, o)))
        .collect();
    let reg = if matched.is_empty() {
        None
    } else {
        // Constant selector picks matched rows; unmatched offsets get an
        // exactly-zero gradient through its transpose.
        let mut selector = Tensor::zeros(vec![matched.len(), n]);
        let mut target = Tensor::zeros(vec![matched.len(), 2]);
        for (row, (i, off)) in matched.iter().enumerate() {
            selector.data_mut()[row * n + i] = 1.0;
            target.data_mut()[row * 2] = off.center;
            target.data_mut()[row * 2 + 1] = off.log_len;
        }
        let sel = graph.constant(selector);
        let picked_offsets = graph.matmul(sel, offsets)?;
        Some(graph.smooth_l1_mean(picked_offsets, &target)?)
    };

    let ce_value = graph.value(ce).first();
    let ce_term = graph.mul_scalar(ce, lambda_ce)?;
    let (total, reg_value) = match reg {
        Some(r) => {
            let reg_value = graph.value(r).first();
            let reg_term = graph.mul_scalar(r, lambda_reg)?;
            (graph.add(ce_term, reg_term)?, reg_value)
        }
        None => (ce_term, 0.0),
    };
    Ok(LossBreakdown { total, ce: ce_value, reg: reg_value })
}

/// Adam with decoupled weight decay (p -= lr·wd·p after the moment step).
/// Decay skips parameters flagged decay=false (biases, category table).
pub struct Adam {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64, weight_decay: f64) -> Self {
        let m = store.iter().map(|e| Tensor::zeros(e.value.shape().to_vec())).collect();
        let v = store.iter().map(|e| Tensor::zeros(e.value.shape().to_vec())).collect();
        Adam {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            m,
            v,
        }
    }

    /// One update over the whole store; `grads[i] = None` means zero
    /// gradient for that parameter this step.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), store.len(), "gradient slice misaligned with store");
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for idx in 0..store.len() {
            let entry = store.entry_mut(idx);
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let p = entry.value.data_mut();
            let apply_decay = entry.decay && self.weight_decay > 0.0;
            for j in 0..p.len() {
                let g = grads[idx].as_ref().map_or(0.0, |t| t.data()[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                if apply_decay {
                    p[j] -= self.learning_rate * self.weight_decay * p[j];
                }
            }
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// One training example: backbone outputs plus ground truth.
#[derive(Debug, Clone)]
pub struct TrainVideo {
    pub id: String,
    pub features: Tensor,
    pub init_pred: LabelSequence,
    pub gt: LabelSequence,
}

/// Result of a training run. `log` is line-oriented TSV:
/// epoch, video id, loss_ce, loss_reg, total.
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub log: String,
    pub final_epoch_mean_loss: f64,
    /// Epoch with the best validation edit score, when validation ran.
    pub best_epoch: Option<usize>,
    pub best_validation_edit: Option<f64>,
}

/// Trains the model in place: one video per optimization step, epochs in
/// deterministically shuffled order. With a validation set, the parameters
/// from the best-edit epoch are restored at the end.
pub fn train(
    model: &mut Model,
    videos: &[TrainVideo],
    cfg: &TrainConfig,
    validation: Option<&[TrainVideo]>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::Config("training set is empty".to_string()));
    }

    // Matching depends only on the fixed initial segments; compute once.
    struct Prepared<'a> {
        video: &'a TrainVideo,
        targets: Vec<SegmentTarget>,
    }
    let mut prepared = Vec::with_capacity(videos.len());
    for v in videos {
        if v.init_pred.is_empty() || v.gt.is_empty() {
            return Err(Error::Config(format!("video {} has no frames", v.id)));
        }
        let segments = extract_segments(&v.init_pred);
        let gt_segments = extract_segments(&v.gt);
        let matching = hungarian_match(&segments, &gt_segments);
        let targets = build_targets(&matching, &segments, &gt_segments, model.config.num_classes);
        prepared.push(Prepared { video: v, targets });
    }

    let mut adam = Adam::new(&model.params, cfg.learning_rate, cfg.weight_decay);
    let mut log = String::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut final_epoch_mean = 0.0;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for &vi in &order {
            let p = &prepared[vi];
            let mut pass = model.forward_video(&p.video.features, &p.video.init_pred)?;
            let parts = refinement_loss(
                &mut pass.forward.graph,
                pass.class_logits,
                pass.offsets,
                &p.targets,
                cfg.lambda_ce,
                cfg.lambda_reg,
            )?;
            let total_value = pass.forward.graph.value(parts.total).first();
            pass.forward.graph.backward(parts.total)?;
            let grads = pass.forward.param_grads();
            drop(pass);
            adam.step(&mut model.params, &grads);
            epoch_total += total_value;
            writeln!(
                log,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                epoch, p.video.id, parts.ce, parts.reg, total_value
            )
            .expect("log write");
        }
        final_epoch_mean = epoch_total / prepared.len() as f64;

        if let Some(val) = validation {
            let edit = evaluate_edit(model, val)?;
            let improved = best.as_ref().map_or(true, |(_, b, _)| edit > *b);
            if improved {
                best = Some((epoch, edit, model.params.clone()));
            }
        }
    }

    let (best_epoch, best_validation_edit) = match best {
        Some((epoch, edit, params)) => {
            model.params = params;
            (Some(epoch), Some(edit))
        }
        None => (None, None),
    };
    Ok(TrainOutcome {
        epochs_run: cfg.epochs,
        log,
        final_epoch_mean_loss: final_epoch_mean,
        best_epoch,
        best_validation_edit,
    })
}

fn evaluate_edit(model: &Model, videos: &[TrainVideo]) -> Result<f64> {
    let mut eval = CorpusEval::new(MetricsConfig::default());
    for v in videos {
        let refined = model.infer(&v.features, &v.init_pred)?;
        eval.add_video(&v.id, &refined.labels, &v.gt)?;
    }
    Ok(eval.corpus_row().edit)
}
