//! Single-event per-segment classification: inference rule and accuracy.
//!
//! The label space has the background as its last column. A segment is
//! assigned a real class only when both modalities agree it is there with
//! probability above 0.5; otherwise it falls back to background.

use crate::error::{Error, Result};
use crate::labels::DenseLabels;
use crate::tensor::Tensor;

/// Per-segment class decisions from per-modality probabilities [T, C+1]
/// whose last column is background. Returns indices in 0..=C where C means
/// background. Among real classes cleared by both modalities, the one with
/// the largest min(p_audio, p_visual) wins; exact ties go to the lower index.
pub fn ave_infer(p_audio: &Tensor, p_visual: &Tensor) -> Result<Vec<usize>> {
    if p_audio.rank() != 2 || p_audio.shape() != p_visual.shape() {
        return Err(Error::dim(
            "segment classification",
            format!("matching [T, C+1], audio {:?}", p_audio.shape()),
            format!("visual {:?}", p_visual.shape()),
        ));
    }
    let cols = p_audio.cols();
    if cols < 2 {
        return Err(Error::dim("segment classification", "at least 2 columns", format!("{cols}")));
    }
    let background = cols - 1;
    let mut out = Vec::with_capacity(p_audio.rows());
    for t in 0..p_audio.rows() {
        let mut best: Option<(f64, usize)> = None;
        for c in 0..background {
            let (pa, pv) = (p_audio.at(t, c), p_visual.at(t, c));
            if pa > 0.5 && pv > 0.5 {
                let score = pa.min(pv);
                if best.map_or(true, |(s, _)| score > s) {
                    best = Some((score, c));
                }
            }
        }
        out.push(best.map_or(background, |(_, c)| c));
    }
    Ok(out)
}

/// Ground-truth class per segment from dense labels over the real classes
/// (no background column). Both modalities must agree and carry at most one
/// class per segment; an empty segment is background (= classes()).
pub fn ave_gt_classes(gt: &DenseLabels) -> Result<Vec<usize>> {
    let background = gt.classes();
    let mut out = Vec::with_capacity(gt.segments());
    for t in 0..gt.segments() {
        if gt.audio.row(t) != gt.visual.row(t) {
            return Err(Error::Validation(format!(
                "segment {t}: single-event ground truth must align across modalities"
            )));
        }
        let on: Vec<usize> = (0..background).filter(|&c| gt.audio.get(t, c)).collect();
        match on.len() {
            0 => out.push(background),
            1 => out.push(on[0]),
            n => {
                return Err(Error::Validation(format!(
                    "segment {t}: single-event ground truth has {n} classes"
                )))
            }
        }
    }
    Ok(out)
}

/// Fraction of segments whose predicted class matches exactly.
pub fn ave_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::dim("segment accuracy", format!("{} segments", gt.len()), format!("{}", pred.len())));
    }
    if pred.is_empty() {
        return Err(Error::Validation("segment accuracy over zero segments".into()));
    }
    let hits = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}
