//! Temporal event spans and span-level matching.
//!
//! An event is a maximal run of consecutive positive segments of one class.
//! Predicted and ground-truth events of the same class are matched one to
//! one, greedily by descending IoU; a pair counts when its IoU clears the
//! threshold. Two disjoint maximal runs can never both overlap one interval
//! at IoU >= 0.5, so each span has at most one eligible partner and greedy
//! matching is exact at that threshold.

use crate::error::{Error, Result};
use crate::labels::BinMatrix;
use crate::metrics::Counts;

/// Which matrix a span was extracted from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Channel {
    Audio,
    Visual,
    /// Elementwise AND of the modalities.
    Both,
    /// Elementwise OR of the modalities.
    Union,
}

/// Inclusive run of positive segments, `start <= end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventSpan {
    pub class: usize,
    pub channel: Channel,
    pub start: usize,
    pub end: usize,
}

impl EventSpan {
    /// Number of segments covered; at least 1.
    pub fn span_len(&self) -> usize {
        self.end - self.start + 1
    }
}

/// Maximal positive runs per class, sorted by (class, start).
pub fn extract_events(labels: &BinMatrix, channel: Channel) -> Vec<EventSpan> {
    let mut spans = Vec::new();
    for class in 0..labels.classes() {
        let mut run_start: Option<usize> = None;
        for t in 0..labels.segments() {
            match (labels.get(t, class), run_start) {
                (true, None) => run_start = Some(t),
                (false, Some(s)) => {
                    spans.push(EventSpan { class, channel, start: s, end: t - 1 });
                    run_start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = run_start {
            spans.push(EventSpan { class, channel, start: s, end: labels.segments() - 1 });
        }
    }
    spans
}

/// Intersection over union of two inclusive spans.
pub fn span_iou(a: &EventSpan, b: &EventSpan) -> f64 {
    let inter_lo = a.start.max(b.start);
    let inter_hi = a.end.min(b.end);
    if inter_hi < inter_lo {
        return 0.0;
    }
    let inter = (inter_hi - inter_lo + 1) as f64;
    let union = (a.span_len() + b.span_len()) as f64 - inter;
    inter / union
}

/// TP/FP/FN from greedy one-to-one matching at the given IoU threshold.
/// Matching is within-class; candidate pairs are taken in descending IoU
/// order, ties broken by (prediction index, ground-truth index).
pub fn event_counts(pred: &[EventSpan], gt: &[EventSpan], iou_min: f64) -> Result<Counts> {
    if !(0.0..=1.0).contains(&iou_min) {
        return Err(Error::Config(format!("IoU threshold {iou_min} outside [0, 1]")));
    }
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            if p.class != g.class {
                continue;
            }
            let iou = span_iou(p, g);
            if iou >= iou_min {
                candidates.push((iou, i, j));
            }
        }
    }
    // Stable sort keeps (i, j) order among equal IoUs.
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut tp = 0u64;
    for (_, i, j) in candidates {
        if !pred_used[i] && !gt_used[j] {
            pred_used[i] = true;
            gt_used[j] = true;
            tp += 1;
        }
    }
    Ok(Counts {
        tp,
        fp: pred.len() as u64 - tp,
        fneg: gt.len() as u64 - tp,
    })
}

pub fn event_f(pred: &[EventSpan], gt: &[EventSpan], iou_min: f64) -> Result<f64> {
    Ok(event_counts(pred, gt, iou_min)?.f())
}
