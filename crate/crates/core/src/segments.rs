//! The non-learned algebra of action segments: run-length extraction,
//! temporal IoU, the boundary offset codec, binary segment masks, and mask
//! voting. Everything here is a pure function over immutable values.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Per-frame class ids for one video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSequence(pub Vec<usize>);

impl LabelSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }
}

/// A maximal run of one class: inclusive frame interval [start, end].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub label: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn new(label: usize, start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Segment { label, start, end }
    }

    /// Frame-count length (single-frame segments have length 1).
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn center(&self) -> f64 {
        (self.start + self.end) as f64 / 2.0
    }
}

/// Continuous center/log-length offsets between a predicted segment and its
/// target, both unitless.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryOffsets {
    /// Center offset normalized by the predicted segment's length.
    pub center: f64,
    /// Log of predicted-over-target length ratio.
    pub log_len: f64,
}

/// Binary occupancy vector of length T with exactly one contiguous run of 1s.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMask(pub Vec<bool>);

/// Maximal same-label runs in temporal order.
pub fn extract_segments(seq: &LabelSequence) -> Vec<Segment> {
    let labels = seq.labels();
    let mut out = Vec::new();
    if labels.is_empty() {
        return out;
    }
    let mut start = 0;
    for t in 1..labels.len() {
        if labels[t] != labels[start] {
            out.push(Segment::new(labels[start], start, t - 1));
            start = t;
        }
    }
    out.push(Segment::new(labels[start], start, labels.len() - 1));
    out
}

/// Inverse of [`extract_segments`] for back-to-back segment lists.
pub fn expand_segments(segments: &[Segment]) -> LabelSequence {
    let mut labels = Vec::new();
    for s in segments {
        labels.resize(s.end + 1, s.label);
        for t in s.start..=s.end {
            labels[t] = s.label;
        }
    }
    LabelSequence(labels)
}

/// Temporal intersection-over-union, counted in frames over inclusive
/// intervals. Labels are ignored.
pub fn tiou(a: &Segment, b: &Segment) -> f64 {
    let inter_start = a.start.max(b.start);
    let inter_end = a.end.min(b.end);
    if inter_start > inter_end {
        return 0.0;
    }
    let inter = (inter_end - inter_start + 1) as f64;
    let union = (a.len() + b.len()) as f64 - inter;
    inter / union
}

/// Offsets that map `pred` onto `gt` (Eq. of the boundary codec): center
/// offset normalized by pred's length, log length ratio. Uses frame-count
/// length throughout so single-frame segments stay finite.
pub fn encode_offsets(pred: &Segment, gt: &Segment) -> BoundaryOffsets {
    let pred_len = pred.len() as f64;
    BoundaryOffsets {
        center: (pred.center() - gt.center()) / pred_len,
        log_len: (pred_len / gt.len() as f64).ln(),
    }
}

/// Refined center and frame-count length in continuous coordinates, before
/// any rounding or clipping. Exact inverse of [`encode_offsets`].
pub fn decode_offsets_continuous(pred: &Segment, off: &BoundaryOffsets) -> (f64, f64) {
    let pred_len = pred.len() as f64;
    let center = pred.center() - off.center * pred_len;
    let len = pred_len * (-off.log_len).exp();
    (center, len)
}

/// Apply offsets to `pred` and discretize: endpoints from the continuous
/// center ± (len-1)/2, rounded to nearest frame, clipped to [0, T-1], with a
/// one-frame floor at the decoded center for degenerate lengths.
pub fn decode_offsets(pred: &Segment, off: &BoundaryOffsets, t_len: usize) -> Segment {
    let (center, len) = decode_offsets_continuous(pred, off);
    let last = (t_len - 1) as f64;
    let (s, e) = if len < 1.0 {
        let c = center.round().clamp(0.0, last);
        (c, c)
    } else {
        let half = (len - 1.0) / 2.0;
        let s = (center - half).round().clamp(0.0, last);
        let e = (center + half).round().clamp(0.0, last);
        if s <= e {
            (s, e)
        } else {
            (e, s)
        }
    };
    Segment::new(pred.label, s as usize, e as usize)
}

/// Binary mask of length `t_len`, 1 inside [start, end].
pub fn segment_to_mask(seg: &Segment, t_len: usize) -> SegmentMask {
    let mut m = vec![false; t_len];
    for slot in m.iter_mut().take(seg.end + 1).skip(seg.start) {
        *slot = true;
    }
    SegmentMask(m)
}

/// Recover the segment from a contiguous mask. Errors on empty or
/// non-contiguous masks.
pub fn mask_to_segment(mask: &SegmentMask, label: usize) -> Result<Segment> {
    let first = mask.0.iter().position(|&v| v);
    let last = mask.0.iter().rposition(|&v| v);
    match (first, last) {
        (Some(s), Some(e)) => {
            if mask.0[s..=e].iter().all(|&v| v) {
                Ok(Segment::new(label, s, e))
            } else {
                Err(Error::Contract("mask is not a single contiguous run".to_string()))
            }
        }
        _ => Err(Error::Contract("mask has no active frames".to_string())),
    }
}

/// Fuse per-segment class distributions through binary masks into per-frame
/// scores: P(t,c) = Σ_i mask[i][t] · probs[i][c].
///
/// `probs` rows must already have the junk column dropped (N×|C|). Frames
/// covered by no mask fall back to the label in `fallback`. Argmax ties break
/// toward the lowest class id.
pub fn mask_vote(
    masks: &[SegmentMask],
    probs: &Tensor,
    fallback: &LabelSequence,
) -> Result<(Tensor, LabelSequence)> {
    let n = masks.len();
    if probs.rank() != 2 || probs.rows() != n {
        return Err(Error::Contract(format!(
            "mask_vote: probs shape {:?} does not match {} masks",
            probs.shape(),
            n
        )));
    }
    let t_len = fallback.len();
    if masks.iter().any(|m| m.0.len() != t_len) {
        return Err(Error::Contract("mask_vote: mask length != sequence length".to_string()));
    }
    let classes = probs.cols();
    let mut scores = Tensor::zeros(vec![t_len, classes]);
    let mut covered = vec![false; t_len];
    for (i, mask) in masks.iter().enumerate() {
        let prow = probs.row(i);
        for (t, &on) in mask.0.iter().enumerate() {
            if on {
                covered[t] = true;
                let srow = &mut scores.data_mut()[t * classes..(t + 1) * classes];
                for (s, &p) in srow.iter_mut().zip(prow) {
                    *s += p;
                }
            }
        }
    }
    let mut labels = Vec::with_capacity(t_len);
    for t in 0..t_len {
        if covered[t] {
            labels.push(argmax(scores.row(t)));
        } else {
            labels.push(fallback.labels()[t]);
        }
    }
    Ok((scores, LabelSequence(labels)))
}

/// Index of the largest value; ties break toward the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
