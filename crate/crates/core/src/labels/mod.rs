//! Weak labels, teacher logits, and pseudo-label construction.
//!
//! The central operation is [`elaborate`]: thresholding per-segment teacher
//! logits class by class and intersecting with the video-level weak label to
//! produce dense per-segment, per-modality pseudo labels. Calibration of the
//! class-dependent thresholds lives in [`calibrate`], file formats in [`io`],
//! and the shipped caption/threshold table in [`prompts`].

pub mod calibrate;
pub mod io;
pub mod prompts;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dense binary matrix, segments by classes, one modality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinMatrix {
    t: usize,
    c: usize,
    data: Vec<u8>,
}

impl BinMatrix {
    pub fn zeros(t: usize, c: usize) -> Self {
        BinMatrix { t, c, data: vec![0; t * c] }
    }

    pub fn from_rows(t: usize, c: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != t * c {
            return Err(Error::dim("binary matrix", format!("{t}x{c}"), format!("{} values", data.len())));
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Validation(format!("binary matrix value {bad} outside {{0, 1}}")));
        }
        Ok(BinMatrix { t, c, data })
    }

    pub fn segments(&self) -> usize {
        self.t
    }

    pub fn classes(&self) -> usize {
        self.c
    }

    pub fn get(&self, t: usize, c: usize) -> bool {
        self.data[t * self.c + c] == 1
    }

    pub fn set(&mut self, t: usize, c: usize, v: bool) {
        self.data[t * self.c + c] = u8::from(v);
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn row(&self, t: usize) -> &[u8] {
        &self.data[t * self.c..(t + 1) * self.c]
    }

    /// Per-segment probabilities as targets: 0.0 or 1.0.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![self.t, self.c], self.data.iter().map(|&v| v as f64).collect())
            .expect("consistent dims")
    }

    pub fn and(&self, other: &BinMatrix) -> Result<BinMatrix> {
        self.zip(other, |a, b| a & b)
    }

    pub fn or(&self, other: &BinMatrix) -> Result<BinMatrix> {
        self.zip(other, |a, b| a | b)
    }

    fn zip(&self, other: &BinMatrix, f: impl Fn(u8, u8) -> u8) -> Result<BinMatrix> {
        if self.t != other.t || self.c != other.c {
            return Err(Error::dim(
                "binary matrix combine",
                format!("{}x{}", self.t, self.c),
                format!("{}x{}", other.t, other.c),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(BinMatrix { t: self.t, c: self.c, data })
    }
}

/// Per-segment labels for both modalities of one video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseLabels {
    pub audio: BinMatrix,
    pub visual: BinMatrix,
}

impl DenseLabels {
    pub fn zeros(t: usize, c: usize) -> Self {
        DenseLabels { audio: BinMatrix::zeros(t, c), visual: BinMatrix::zeros(t, c) }
    }

    pub fn new(audio: BinMatrix, visual: BinMatrix) -> Result<Self> {
        if audio.segments() != visual.segments() || audio.classes() != visual.classes() {
            return Err(Error::dim(
                "dense labels",
                format!("{}x{}", audio.segments(), audio.classes()),
                format!("{}x{}", visual.segments(), visual.classes()),
            ));
        }
        Ok(DenseLabels { audio, visual })
    }

    pub fn segments(&self) -> usize {
        self.audio.segments()
    }

    pub fn classes(&self) -> usize {
        self.audio.classes()
    }

    /// Video-level label implied by these dense labels: a class is on iff it
    /// is on in some segment of either modality.
    pub fn implied_weak(&self) -> WeakLabel {
        let c = self.classes();
        let mut out = vec![0u8; c];
        for t in 0..self.segments() {
            for k in 0..c {
                if self.audio.get(t, k) || self.visual.get(t, k) {
                    out[k] = 1;
                }
            }
        }
        WeakLabel::new(out).expect("binary by construction")
    }
}

/// Video-level multi-hot label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeakLabel(Vec<u8>);

impl WeakLabel {
    pub fn new(data: Vec<u8>) -> Result<Self> {
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Validation(format!("weak label value {bad} outside {{0, 1}}")));
        }
        Ok(WeakLabel(data))
    }

    pub fn zeros(c: usize) -> Self {
        WeakLabel(vec![0; c])
    }

    pub fn from_classes(classes: &[usize], c: usize) -> Result<Self> {
        let mut data = vec![0u8; c];
        for &k in classes {
            if k >= c {
                return Err(Error::Validation(format!("class index {k} outside {c} classes")));
            }
            data[k] = 1;
        }
        Ok(WeakLabel(data))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_set(&self, c: usize) -> bool {
        self.0[c] == 1
    }

    pub fn data(&self) -> &[u8] {
        &self.0
    }

    pub fn active_classes(&self) -> Vec<usize> {
        (0..self.len()).filter(|&c| self.is_set(c)).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![self.len()], self.0.iter().map(|&v| v as f64).collect())
            .expect("rank 1")
    }

    /// Appends one extra class, used for background-extended label spaces.
    pub fn extended(&self, last: bool) -> WeakLabel {
        let mut data = self.0.clone();
        data.push(u8::from(last));
        WeakLabel(data)
    }
}

/// Per-segment logits from the two frozen teachers for one video. Shapes are
/// [T, C]; `visual` comes from the image teacher, `audio` from the audio one.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherLogits {
    pub video_id: String,
    pub visual: Tensor,
    pub audio: Tensor,
}

impl TeacherLogits {
    pub fn new(video_id: String, visual: Tensor, audio: Tensor) -> Result<Self> {
        if visual.rank() != 2 || visual.shape() != audio.shape() {
            return Err(Error::dim(
                "teacher logits",
                format!("matching [T, C], visual {:?}", visual.shape()),
                format!("audio {:?}", audio.shape()),
            ));
        }
        Ok(TeacherLogits { video_id, visual, audio })
    }

    pub fn segments(&self) -> usize {
        self.visual.rows()
    }

    pub fn classes(&self) -> usize {
        self.visual.cols()
    }
}

/// Class-dependent decision thresholds, one per class per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Thresholds {
    pub visual: Vec<f64>,
    pub audio: Vec<f64>,
}

impl Thresholds {
    pub fn new(visual: Vec<f64>, audio: Vec<f64>) -> Result<Self> {
        if visual.len() != audio.len() {
            return Err(Error::dim("thresholds", format!("{} visual", visual.len()), format!("{} audio", audio.len())));
        }
        Ok(Thresholds { visual, audio })
    }

    pub fn uniform(c: usize, theta: f64) -> Self {
        Thresholds { visual: vec![theta; c], audio: vec![theta; c] }
    }

    pub fn classes(&self) -> usize {
        self.visual.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ElaborateOpts {
    /// Keep only classes named by the video-level label.
    pub video_filter: bool,
    /// Treat the teachers as interchangeable: a segment-class cell fires for
    /// both modalities when either teacher clears its threshold.
    pub modality_agnostic: bool,
}

impl Default for ElaborateOpts {
    fn default() -> Self {
        ElaborateOpts { video_filter: true, modality_agnostic: false }
    }
}

/// Turns teacher logits into dense per-segment pseudo labels.
///
/// Modality-aware: label[m][t,c] = (z[m][t,c] > theta[m][c]) and weak[c].
/// The comparison is strict, so a logit exactly at the threshold stays off.
/// With `video_filter` off the weak-label intersection is skipped.
pub fn elaborate(
    logits: &TeacherLogits,
    thresholds: &Thresholds,
    weak: &WeakLabel,
    opts: &ElaborateOpts,
) -> Result<DenseLabels> {
    let (t_len, c_len) = (logits.segments(), logits.classes());
    if thresholds.classes() != c_len {
        return Err(Error::dim("elaborate", format!("{c_len} thresholds"), format!("{}", thresholds.classes())));
    }
    if weak.len() != c_len {
        return Err(Error::dim("elaborate", format!("weak label of {c_len}"), format!("{}", weak.len())));
    }
    let mut audio = BinMatrix::zeros(t_len, c_len);
    let mut visual = BinMatrix::zeros(t_len, c_len);
    for t in 0..t_len {
        for c in 0..c_len {
            let keep = !opts.video_filter || weak.is_set(c);
            if !keep {
                continue;
            }
            let vis_fired = logits.visual.at(t, c) > thresholds.visual[c];
            let aud_fired = logits.audio.at(t, c) > thresholds.audio[c];
            if opts.modality_agnostic {
                let fired = vis_fired || aud_fired;
                visual.set(t, c, fired);
                audio.set(t, c, fired);
            } else {
                visual.set(t, c, vis_fired);
                audio.set(t, c, aud_fired);
            }
        }
    }
    DenseLabels::new(audio, visual)
}

/// Label smoothing: 1 -> 1 - eps, 0 -> eps.
pub fn smooth_labels(weak: &WeakLabel, eps: f64) -> Result<Tensor> {
    if !(0.0..=0.5).contains(&eps) {
        return Err(Error::Config(format!("smoothing epsilon {eps} outside [0, 0.5]")));
    }
    let data = weak
        .data()
        .iter()
        .map(|&y| if y == 1 { 1.0 - eps } else { eps })
        .collect();
    Tensor::from_vec(vec![weak.len()], data)
}

/// Per-segment teacher distributions for distillation: a softmax over
/// classes of each teacher's logits, one row per segment.
#[derive(Debug, Clone, PartialEq)]
pub struct KdTargets {
    pub visual: Tensor,
    pub audio: Tensor,
}

pub fn kd_targets(logits: &TeacherLogits) -> Result<KdTargets> {
    if !logits.visual.is_finite() || !logits.audio.is_finite() {
        return Err(Error::NonFinite("teacher logits".into()));
    }
    Ok(KdTargets {
        visual: logits.visual.softmax_rows(),
        audio: logits.audio.softmax_rows(),
    })
}

/// Adds a background column: background is on exactly when no real class is
/// on in that segment of that modality.
pub fn extend_background(dense: &DenseLabels) -> DenseLabels {
    let (t_len, c_len) = (dense.segments(), dense.classes());
    let extend_one = |m: &BinMatrix| {
        let mut out = BinMatrix::zeros(t_len, c_len + 1);
        for t in 0..t_len {
            let mut any = false;
            for c in 0..c_len {
                let v = m.get(t, c);
                out.set(t, c, v);
                any |= v;
            }
            out.set(t, c_len, !any);
        }
        out
    };
    DenseLabels { audio: extend_one(&dense.audio), visual: extend_one(&dense.visual) }
}

/// Frame-by-class similarity logits from embedding matrices: plain dot
/// products between frame embeddings [T, d] and class embeddings [C, d].
pub fn teacher_logits_from_embeddings(frames: &Tensor, classes: &Tensor) -> Result<Tensor> {
    if frames.rank() != 2 || classes.rank() != 2 || frames.cols() != classes.cols() {
        return Err(Error::dim(
            "teacher logits from embeddings",
            format!("[T, d] x [C, d], frames {:?}", frames.shape()),
            format!("classes {:?}", classes.shape()),
        ));
    }
    frames.matmul(&classes.transposed())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits_from(vals_v: Vec<f64>, vals_a: Vec<f64>, t: usize, c: usize) -> TeacherLogits {
        TeacherLogits::new(
            "vid".into(),
            Tensor::matrix(t, c, vals_v).unwrap(),
            Tensor::matrix(t, c, vals_a).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_weak_label_with_filter_gives_all_zeros() {
        let lg = logits_from(vec![99.0; 6], vec![99.0; 6], 2, 3);
        let th = Thresholds::uniform(3, 0.0);
        let weak = WeakLabel::zeros(3);
        let out = elaborate(&lg, &th, &weak, &ElaborateOpts::default()).unwrap();
        assert_eq!(out.audio.count_ones(), 0);
        assert_eq!(out.visual.count_ones(), 0);
    }

    #[test]
    fn threshold_comparison_is_strict() {
        // One class with theta_visual = 14: logit 15 fires, 14 and 13 do not.
        let lg = logits_from(vec![15.0, 14.0, 13.0], vec![0.0, 0.0, 0.0], 3, 1);
        let th = Thresholds::new(vec![14.0], vec![100.0]).unwrap();
        let weak = WeakLabel::new(vec![1]).unwrap();
        let out = elaborate(&lg, &th, &weak, &ElaborateOpts::default()).unwrap();
        assert!(out.visual.get(0, 0));
        assert!(!out.visual.get(1, 0));
        assert!(!out.visual.get(2, 0));
        assert_eq!(out.audio.count_ones(), 0);
    }

    #[test]
    fn all_mode_combinations_match_scalar_loop() {
        let t_len = 4;
        let c_len = 5;
        let zv: Vec<f64> = (0..20).map(|i| ((i * 7919 % 100) as f64) / 10.0 - 5.0).collect();
        let za: Vec<f64> = (0..20).map(|i| ((i * 104729 % 100) as f64) / 10.0 - 5.0).collect();
        let lg = logits_from(zv.clone(), za.clone(), t_len, c_len);
        let th = Thresholds::new(
            vec![-1.0, 0.0, 1.0, 2.0, -3.0],
            vec![0.5, -0.5, 1.5, -2.5, 3.0],
        )
        .unwrap();
        let weak = WeakLabel::new(vec![1, 0, 1, 1, 0]).unwrap();
        for filter in [true, false] {
            for agnostic in [true, false] {
                let opts = ElaborateOpts { video_filter: filter, modality_agnostic: agnostic };
                let out = elaborate(&lg, &th, &weak, &opts).unwrap();
                for t in 0..t_len {
                    for c in 0..c_len {
                        let keep = !filter || weak.is_set(c);
                        let vf = zv[t * c_len + c] > th.visual[c];
                        let af = za[t * c_len + c] > th.audio[c];
                        let (want_v, want_a) = if agnostic {
                            ((vf || af) && keep, (vf || af) && keep)
                        } else {
                            (vf && keep, af && keep)
                        };
                        assert_eq!(out.visual.get(t, c), want_v, "t={t} c={c} {opts:?}");
                        assert_eq!(out.audio.get(t, c), want_a, "t={t} c={c} {opts:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn filtered_labels_are_a_subset_of_unfiltered() {
        let lg = logits_from(
            (0..12).map(|i| i as f64 - 6.0).collect(),
            (0..12).map(|i| 5.5 - i as f64).collect(),
            4,
            3,
        );
        let th = Thresholds::uniform(3, -0.5);
        let weak = WeakLabel::new(vec![1, 0, 1]).unwrap();
        let with = elaborate(&lg, &th, &weak, &ElaborateOpts { video_filter: true, modality_agnostic: false }).unwrap();
        let without = elaborate(&lg, &th, &weak, &ElaborateOpts { video_filter: false, modality_agnostic: false }).unwrap();
        for t in 0..4 {
            for c in 0..3 {
                assert!(!with.audio.get(t, c) || without.audio.get(t, c));
                assert!(!with.visual.get(t, c) || without.visual.get(t, c));
            }
        }
    }

    #[test]
    fn aware_labels_are_a_subset_of_agnostic() {
        let lg = logits_from(
            (0..12).map(|i| (i as f64 * 1.7).sin() * 4.0).collect(),
            (0..12).map(|i| (i as f64 * 0.9).cos() * 4.0).collect(),
            4,
            3,
        );
        let th = Thresholds::uniform(3, 0.0);
        let weak = WeakLabel::new(vec![1, 1, 1]).unwrap();
        let aware = elaborate(&lg, &th, &weak, &ElaborateOpts::default()).unwrap();
        let agnostic = elaborate(&lg, &th, &weak, &ElaborateOpts { video_filter: true, modality_agnostic: true }).unwrap();
        for t in 0..4 {
            for c in 0..3 {
                assert!(!aware.audio.get(t, c) || agnostic.audio.get(t, c));
                assert!(!aware.visual.get(t, c) || agnostic.visual.get(t, c));
            }
        }
    }

    #[test]
    fn smoothing_examples() {
        let weak = WeakLabel::new(vec![1, 0]).unwrap();
        let s0 = smooth_labels(&weak, 0.0).unwrap();
        assert_eq!(s0.data(), &[1.0, 0.0]);
        let s = smooth_labels(&weak, 0.1).unwrap();
        assert!((s.data()[0] - 0.9).abs() < 1e-15);
        assert!((s.data()[1] - 0.1).abs() < 1e-15);
        assert!(smooth_labels(&weak, 0.7).is_err());
    }

    #[test]
    fn smoothing_round_trips_through_binarization() {
        let weak = WeakLabel::new(vec![1, 0, 1, 1, 0, 0]).unwrap();
        let s = smooth_labels(&weak, 0.25).unwrap();
        let back: Vec<u8> = s.data().iter().map(|&v| u8::from(v > 0.5)).collect();
        assert_eq!(back, weak.data());
    }

    #[test]
    fn kd_targets_are_row_distributions_preserving_argmax() {
        let lg = logits_from(
            vec![3.0, 1.0, -1.0, 0.0, 5.0, 2.0],
            vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0],
            2,
            3,
        );
        let kd = kd_targets(&lg).unwrap();
        for t in 0..2 {
            let row: Vec<f64> = (0..3).map(|c| kd.visual.at(t, c)).collect();
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let arg = (0..3).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            let logit_arg = (0..3)
                .max_by(|&a, &b| lg.visual.at(t, a).total_cmp(&lg.visual.at(t, b)))
                .unwrap();
            assert_eq!(arg, logit_arg);
        }
        // Uniform logits give uniform targets.
        let row: Vec<f64> = (0..3).map(|c| kd.audio.at(0, c)).collect();
        for v in row {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn background_extension_is_exclusive() {
        let mut dense = DenseLabels::zeros(3, 2);
        dense.audio.set(0, 1, true);
        dense.visual.set(2, 0, true);
        let ext = extend_background(&dense);
        assert_eq!(ext.classes(), 3);
        for t in 0..3 {
            for m in [&ext.audio, &ext.visual] {
                let real: bool = (0..2).any(|c| m.get(t, c));
                assert_eq!(m.get(t, 2), !real, "background must complement real classes");
            }
        }
        assert!(!ext.audio.get(0, 2));
        assert!(ext.audio.get(1, 2));
    }

    #[test]
    fn embedding_logits_match_scalar_dot_products() {
        let frames = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.31).sin()).collect()).unwrap();
        let classes = Tensor::matrix(2, 4, (0..8).map(|i| (i as f64 * 0.77).cos()).collect()).unwrap();
        let z = teacher_logits_from_embeddings(&frames, &classes).unwrap();
        assert_eq!(z.shape(), &[3, 2]);
        for t in 0..3 {
            for c in 0..2 {
                let mut dot = 0.0;
                for e in 0..4 {
                    dot += frames.at(t, e) * classes.at(c, e);
                }
                assert!((z.at(t, c) - dot).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn orthogonal_embeddings_give_zero_logits() {
        let frames = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let classes = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        let z = teacher_logits_from_embeddings(&frames, &classes).unwrap();
        assert_eq!(z.data(), &[0.0]);
    }

    #[test]
    fn implied_weak_is_or_over_segments_and_modalities() {
        let mut dense = DenseLabels::zeros(2, 3);
        dense.audio.set(0, 0, true);
        dense.visual.set(1, 2, true);
        let weak = dense.implied_weak();
        assert_eq!(weak.data(), &[1, 0, 1]);
    }
}
