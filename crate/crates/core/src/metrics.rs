//! Evaluation metrics for frame-wise segmentations: frame accuracy,
//! segmental edit score, and segmental F1 at overlap thresholds
//! {0.10, 0.25, 0.50}, with corpus aggregation.

use crate::error::{Error, Result};
use crate::segments::{extract_segments, tiou, LabelSequence, Segment};
use serde::{Deserialize, Serialize};

pub const F1_THRESHOLDS: [f64; 3] = [0.10, 0.25, 0.50];

/// Metric knobs; `ignored_classes` drops those ids from segment-level
/// metrics and skips ground-truth frames with them in accuracy.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub ignored_classes: Vec<usize>,
}

/// One row of the evaluation table, in the conventional column order
/// F1@10, F1@25, F1@50, Edit, Acc — all in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub f1: [f64; 3],
    pub edit: f64,
    pub acc: f64,
}

impl MetricRow {
    pub fn tsv_header() -> &'static str {
        "f1@10\tf1@25\tf1@50\tedit\tacc"
    }

    pub fn to_tsv(&self) -> String {
        format!(
            "{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            self.f1[0], self.f1[1], self.f1[2], self.edit, self.acc
        )
    }
}

/// Per-video rows plus the corpus aggregate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_video: Vec<(String, MetricRow)>,
    pub corpus: MetricRow,
}

impl EvalReport {
    pub fn to_tsv(&self) -> String {
        let mut out = format!("video\t{}\n", MetricRow::tsv_header());
        for (id, row) in &self.per_video {
            out.push_str(&format!("{}\t{}\n", id, row.to_tsv()));
        }
        out.push_str(&format!("corpus\t{}\n", self.corpus.to_tsv()));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

/// Percent of frames whose predicted label equals the ground truth.
pub fn frame_accuracy(pred: &LabelSequence, gt: &LabelSequence) -> Result<f64> {
    let (correct, total) = accuracy_counts(pred, gt, &[])?;
    Ok(100.0 * correct as f64 / total.max(1) as f64)
}

fn accuracy_counts(
    pred: &LabelSequence,
    gt: &LabelSequence,
    ignored: &[usize],
) -> Result<(u64, u64)> {
    if pred.len() != gt.len() {
        return Err(Error::Contract(format!(
            "frame_accuracy: length mismatch, pred {} vs gt {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut correct = 0u64;
    let mut total = 0u64;
    for (p, g) in pred.labels().iter().zip(gt.labels()) {
        if ignored.contains(g) {
            continue;
        }
        total += 1;
        if p == g {
            correct += 1;
        }
    }
    Ok((correct, total))
}

fn segment_labels(seq: &LabelSequence, ignored: &[usize]) -> Vec<usize> {
    extract_segments(seq)
        .into_iter()
        .filter(|s| !ignored.contains(&s.label))
        .map(|s| s.label)
        .collect()
}

fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Segmental edit score: 100·(1 − Levenshtein(pred labels, gt labels) /
/// max(len_pred, len_gt)) over the ordered segment-label sequences.
pub fn edit_score(pred: &LabelSequence, gt: &LabelSequence) -> f64 {
    edit_score_with(pred, gt, &[])
}

pub fn edit_score_with(pred: &LabelSequence, gt: &LabelSequence, ignored: &[usize]) -> f64 {
    let a = segment_labels(pred, ignored);
    let b = segment_labels(gt, ignored);
    let denom = a.len().max(b.len());
    if denom == 0 {
        return 100.0;
    }
    100.0 * (1.0 - levenshtein(&a, &b) as f64 / denom as f64)
}

/// TP/FP/FN counts of the greedy segmental matching at threshold `k`:
/// each predicted segment, in temporal order, claims the not-yet-matched
/// same-class ground-truth segment with the best tIoU (ties toward the
/// earlier one) and counts as a true positive if that tIoU exceeds `k`.
pub fn f1_counts(
    pred_segments: &[Segment],
    gt_segments: &[Segment],
    k: f64,
) -> (u64, u64, u64) {
    let mut hit = vec![false; gt_segments.len()];
    let mut tp = 0u64;
    let mut fp = 0u64;
    for p in pred_segments {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt_segments.iter().enumerate() {
            if hit[j] || g.label != p.label {
                continue;
            }
            let iou = tiou(p, g);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, iou)) if iou > k => {
                tp += 1;
                hit[j] = true;
            }
            _ => fp += 1,
        }
    }
    let fn_ = hit.iter().filter(|&&h| !h).count() as u64;
    (tp, fp, fn_)
}

fn prf(tp: u64, fp: u64, fn_: u64) -> (f64, f64, f64) {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (100.0 * precision, 100.0 * recall, 100.0 * f1)
}

/// (precision, recall, F1) in percent at overlap threshold `k`.
pub fn f1_at(pred: &LabelSequence, gt: &LabelSequence, k: f64) -> Result<(f64, f64, f64)> {
    if !(0.0..1.0).contains(&k) || k == 0.0 {
        return Err(Error::Contract(format!("f1 threshold must be in (0,1), got {k}")));
    }
    let (tp, fp, fn_) = f1_counts(&extract_segments(pred), &extract_segments(gt), k);
    Ok(prf(tp, fp, fn_))
}

/// Streaming corpus evaluation. F1 accumulates TP/FP/FN across videos
/// before the final ratio, accuracy accumulates frames, edit averages the
/// per-video scores.
#[derive(Debug, Clone)]
pub struct CorpusEval {
    cfg: MetricsConfig,
    correct: u64,
    total: u64,
    edit_sum: f64,
    videos: usize,
    tp: [u64; 3],
    fp: [u64; 3],
    fn_: [u64; 3],
    per_video: Vec<(String, MetricRow)>,
}

impl CorpusEval {
    pub fn new(cfg: MetricsConfig) -> Self {
        CorpusEval {
            cfg,
            correct: 0,
            total: 0,
            edit_sum: 0.0,
            videos: 0,
            tp: [0; 3],
            fp: [0; 3],
            fn_: [0; 3],
            per_video: Vec::new(),
        }
    }

    pub fn add_video(&mut self, id: &str, pred: &LabelSequence, gt: &LabelSequence) -> Result<MetricRow> {
        let ignored = &self.cfg.ignored_classes;
        let (correct, total) = accuracy_counts(pred, gt, ignored)?;
        self.correct += correct;
        self.total += total;

        let edit = edit_score_with(pred, gt, ignored);
        self.edit_sum += edit;
        self.videos += 1;

        let pred_segs: Vec<Segment> = extract_segments(pred)
            .into_iter()
            .filter(|s| !ignored.contains(&s.label))
            .collect();
        let gt_segs: Vec<Segment> = extract_segments(gt)
            .into_iter()
            .filter(|s| !ignored.contains(&s.label))
            .collect();

        let mut f1 = [0.0; 3];
        for (i, &k) in F1_THRESHOLDS.iter().enumerate() {
            let (tp, fp, fn_) = f1_counts(&pred_segs, &gt_segs, k);
            self.tp[i] += tp;
            self.fp[i] += fp;
            self.fn_[i] += fn_;
            f1[i] = prf(tp, fp, fn_).2;
        }
        let row = MetricRow {
            f1,
            edit,
            acc: 100.0 * correct as f64 / total.max(1) as f64,
        };
        self.per_video.push((id.to_string(), row));
        Ok(row)
    }

    pub fn corpus_row(&self) -> MetricRow {
        let mut f1 = [0.0; 3];
        for i in 0..3 {
            f1[i] = prf(self.tp[i], self.fp[i], self.fn_[i]).2;
        }
        MetricRow {
            f1,
            edit: if self.videos == 0 { 0.0 } else { self.edit_sum / self.videos as f64 },
            acc: 100.0 * self.correct as f64 / self.total.max(1) as f64,
        }
    }

    pub fn report(&self) -> EvalReport {
        EvalReport { per_video: self.per_video.clone(), corpus: self.corpus_row() }
    }
}
