//! Class-dependent threshold calibration against held-out dense labels.
//!
//! For every (class, modality) pair, scans a grid of candidate thresholds
//! and keeps the one maximizing that class's segment-level F-score over the
//! calibration corpus. The scan runs ascending and replaces on ties, so
//! equal scores resolve to the larger threshold (fewer spurious positives on
//! unseen data).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::labels::{DenseLabels, TeacherLogits, Thresholds, WeakLabel};

/// One video's worth of calibration evidence.
#[derive(Debug, Clone, Copy)]
pub struct CalibrationItem<'a> {
    pub logits: &'a TeacherLogits,
    pub truth: &'a DenseLabels,
    pub weak: &'a WeakLabel,
}

/// Candidate grid. With `lo`/`hi` unset the scan covers the observed
/// per-class logit range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdGrid {
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub steps: usize,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        ThresholdGrid { lo: None, hi: None, steps: 64 }
    }
}

impl ThresholdGrid {
    fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::Config(format!("threshold grid needs at least 2 steps, got {}", self.steps)));
        }
        if let (Some(lo), Some(hi)) = (self.lo, self.hi) {
            if !(lo <= hi) {
                return Err(Error::Config(format!("threshold grid lo {lo} exceeds hi {hi}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassCalibration {
    pub class_index: usize,
    pub theta: f64,
    pub f_score: f64,
    /// No positive ground-truth cell existed; theta was pinned to the grid top.
    pub absent: bool,
    pub positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub visual: Vec<ClassCalibration>,
    pub audio: Vec<ClassCalibration>,
    pub steps: usize,
    pub video_filter: bool,
}

/// Calibrates per-class thresholds for both modalities.
///
/// `video_filter` must match how the thresholds will be used downstream:
/// when on, cells outside the video-level label can never fire, in the scan
/// and in later elaboration alike.
pub fn calibrate(
    items: &[CalibrationItem],
    grid: &ThresholdGrid,
    video_filter: bool,
) -> Result<(Thresholds, CalibrationReport)> {
    grid.validate()?;
    if items.is_empty() {
        return Err(Error::Validation("calibration needs at least one video".into()));
    }
    let c_len = items[0].logits.classes();
    for it in items {
        if it.logits.classes() != c_len || it.truth.classes() != c_len || it.weak.len() != c_len {
            return Err(Error::dim(
                "calibration corpus",
                format!("{c_len} classes"),
                format!(
                    "logits {}, truth {}, weak {}",
                    it.logits.classes(),
                    it.truth.classes(),
                    it.weak.len()
                ),
            ));
        }
        if it.truth.segments() != it.logits.segments() {
            return Err(Error::dim(
                "calibration corpus",
                format!("{} segments of logits", it.logits.segments()),
                format!("{} of labels", it.truth.segments()),
            ));
        }
    }

    let mut visual_rows = Vec::with_capacity(c_len);
    let mut audio_rows = Vec::with_capacity(c_len);
    for class in 0..c_len {
        visual_rows.push(calibrate_cell(items, grid, video_filter, class, Modality::Visual)?);
        audio_rows.push(calibrate_cell(items, grid, video_filter, class, Modality::Audio)?);
    }
    let thresholds = Thresholds::new(
        visual_rows.iter().map(|r| r.theta).collect(),
        audio_rows.iter().map(|r| r.theta).collect(),
    )?;
    let report = CalibrationReport {
        visual: visual_rows,
        audio: audio_rows,
        steps: grid.steps,
        video_filter,
    };
    Ok((thresholds, report))
}

#[derive(Clone, Copy)]
enum Modality {
    Visual,
    Audio,
}

/// (logit, ground truth, eligible under the video filter) per cell.
type Cell = (f64, bool, bool);

fn calibrate_cell(
    items: &[CalibrationItem],
    grid: &ThresholdGrid,
    video_filter: bool,
    class: usize,
    modality: Modality,
) -> Result<ClassCalibration> {
    let mut cells: Vec<Cell> = Vec::new();
    for it in items {
        let (z, gt) = match modality {
            Modality::Visual => (&it.logits.visual, &it.truth.visual),
            Modality::Audio => (&it.logits.audio, &it.truth.audio),
        };
        let keep = !video_filter || it.weak.is_set(class);
        for t in 0..it.logits.segments() {
            let v = z.at(t, class);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("teacher logit for video '{}'", it.logits.video_id)));
            }
            cells.push((v, gt.get(t, class), keep));
        }
    }

    let lo = grid
        .lo
        .unwrap_or_else(|| cells.iter().map(|c| c.0).fold(f64::INFINITY, f64::min));
    let hi = grid
        .hi
        .unwrap_or_else(|| cells.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max));
    let positives = cells.iter().filter(|c| c.1).count();
    if positives == 0 {
        // Nothing to fit; the top of the grid predicts nothing, which is
        // exactly right for a class never observed in this modality.
        return Ok(ClassCalibration {
            class_index: class,
            theta: hi,
            f_score: f_at(hi, &cells),
            absent: true,
            positives,
        });
    }

    let mut best_theta = lo;
    let mut best_f = f64::NEG_INFINITY;
    for i in 0..grid.steps {
        let frac = i as f64 / (grid.steps - 1) as f64;
        let theta = lo + frac * (hi - lo);
        let f = f_at(theta, &cells);
        if f >= best_f {
            best_f = f;
            best_theta = theta;
        }
    }
    Ok(ClassCalibration {
        class_index: class,
        theta: best_theta,
        f_score: best_f,
        absent: false,
        positives,
    })
}

/// Segment F-score of the thresholded prediction over one class's cells.
/// An empty prediction against empty ground truth counts as perfect.
fn f_at(theta: f64, cells: &[Cell]) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for &(z, gt, keep) in cells {
        let pred = keep && z > theta;
        match (pred, gt) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if 2 * tp + fp + fneg == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    }
}
