//! Evaluation protocol: segment- and event-level F-scores over the four
//! modality channels (audio, visual, their AND, their OR), single-event
//! accuracy, pseudo-label fidelity, and the modality non-alignment analysis.
//!
//! Scores are reported x100. Corpus aggregation is macro by default (mean of
//! per-video F), with micro (pooled counts) behind a flag; reports name the
//! mode used. Empty-vs-empty comparisons score 1: a video with no events and
//! no predictions is a perfect parse.

pub mod ave;
pub mod events;

pub use ave::{ave_accuracy, ave_gt_classes, ave_infer};
pub use events::{event_counts, event_f, extract_events, span_iou, Channel, EventSpan};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{BinMatrix, DenseLabels};
use crate::tensor::Tensor;

/// True/false positive/negative tallies. `fneg` is the miss count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fneg: u64,
}

impl Counts {
    pub fn f(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fneg;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    pub fn add(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fneg += other.fneg;
    }
}

/// Thresholds probabilities into binary labels with a strict comparison:
/// a probability exactly at the threshold stays off.
pub fn binarize(probs: &Tensor, threshold: f64) -> Result<BinMatrix> {
    if probs.rank() != 2 {
        return Err(Error::dim("binarize", "[T, C]", format!("{:?}", probs.shape())));
    }
    if let Some(bad) = probs.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Validation(format!("probability {bad} outside [0, 1]")));
    }
    let data = probs.data().iter().map(|&p| u8::from(p > threshold)).collect();
    BinMatrix::from_rows(probs.rows(), probs.cols(), data)
}

/// Cell-level counts of one prediction matrix against ground truth.
pub fn segment_counts(pred: &BinMatrix, gt: &BinMatrix) -> Result<Counts> {
    if pred.segments() != gt.segments() || pred.classes() != gt.classes() {
        return Err(Error::dim(
            "segment counts",
            format!("{}x{}", gt.segments(), gt.classes()),
            format!("{}x{}", pred.segments(), pred.classes()),
        ));
    }
    let mut counts = Counts::default();
    for (p, g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (1, 1) => counts.tp += 1,
            (1, 0) => counts.fp += 1,
            (0, 1) => counts.fneg += 1,
            _ => {}
        }
    }
    Ok(counts)
}

pub fn segment_f(pred: &BinMatrix, gt: &BinMatrix) -> Result<f64> {
    Ok(segment_counts(pred, gt)?.f())
}

/// One video's binarized predictions plus the probabilities they came from.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub video_id: String,
    pub labels: DenseLabels,
    pub p_audio: Tensor,
    pub p_visual: Tensor,
}

impl Prediction {
    pub fn from_probs(video_id: String, p_audio: Tensor, p_visual: Tensor, threshold: f64) -> Result<Self> {
        if p_audio.rank() != 2 || p_audio.shape() != p_visual.shape() {
            return Err(Error::dim(
                "prediction",
                format!("matching [T, C], audio {:?}", p_audio.shape()),
                format!("visual {:?}", p_visual.shape()),
            ));
        }
        let labels = DenseLabels::new(binarize(&p_audio, threshold)?, binarize(&p_visual, threshold)?)?;
        Ok(Prediction { video_id, labels, p_audio, p_visual })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Mean of per-video F-scores.
    Macro,
    /// F of counts pooled over all videos.
    Micro,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOpts {
    pub aggregation: Aggregation,
    pub iou_min: f64,
}

impl Default for EvalOpts {
    fn default() -> Self {
        EvalOpts { aggregation: Aggregation::Macro, iou_min: 0.5 }
    }
}

/// The five corpus scores of one level, x100.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelScores {
    pub audio: f64,
    pub visual: f64,
    pub audio_visual: f64,
    pub type_at_av: f64,
    pub event_at_av: f64,
}

/// Segment-level F per class, pooled over all videos' cells, x100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassF {
    pub class_index: usize,
    pub audio: f64,
    pub visual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonalignmentReport {
    /// Segment-level events: (video, segment, class) cells on in either modality.
    pub total_events: u64,
    /// Events on in exactly one modality.
    pub nonaligned_events: u64,
    /// Non-aligned events predicted in exactly the correct modality.
    pub success_count: u64,
    pub success_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub segment: LevelScores,
    pub event: LevelScores,
    pub aggregation: Aggregation,
    pub videos: usize,
    pub per_class: Vec<PerClassF>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ave_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonalignment: Option<NonalignmentReport>,
}

/// Channel order used throughout: audio, visual, AND, OR.
const CHANNELS: usize = 4;

struct VideoTallies {
    seg: [Counts; CHANNELS],
    evt: [Counts; CHANNELS],
    per_class: Vec<(Counts, Counts)>,
}

fn video_tallies(pred: &DenseLabels, gt: &DenseLabels, iou_min: f64) -> Result<VideoTallies> {
    if pred.segments() != gt.segments() || pred.classes() != gt.classes() {
        return Err(Error::dim(
            "corpus evaluation",
            format!("{}x{}", gt.segments(), gt.classes()),
            format!("{}x{}", pred.segments(), pred.classes()),
        ));
    }
    let pred_mats = [
        pred.audio.clone(),
        pred.visual.clone(),
        pred.audio.and(&pred.visual)?,
        pred.audio.or(&pred.visual)?,
    ];
    let gt_mats = [
        gt.audio.clone(),
        gt.visual.clone(),
        gt.audio.and(&gt.visual)?,
        gt.audio.or(&gt.visual)?,
    ];
    let tags = [Channel::Audio, Channel::Visual, Channel::Both, Channel::Union];
    let mut seg = [Counts::default(); CHANNELS];
    let mut evt = [Counts::default(); CHANNELS];
    for i in 0..CHANNELS {
        seg[i] = segment_counts(&pred_mats[i], &gt_mats[i])?;
        let p_spans = extract_events(&pred_mats[i], tags[i]);
        let g_spans = extract_events(&gt_mats[i], tags[i]);
        evt[i] = event_counts(&p_spans, &g_spans, iou_min)?;
    }
    let mut per_class = vec![(Counts::default(), Counts::default()); pred.classes()];
    for t in 0..pred.segments() {
        for c in 0..pred.classes() {
            tally_cell(&mut per_class[c].0, pred.audio.get(t, c), gt.audio.get(t, c));
            tally_cell(&mut per_class[c].1, pred.visual.get(t, c), gt.visual.get(t, c));
        }
    }
    Ok(VideoTallies { seg, evt, per_class })
}

fn tally_cell(counts: &mut Counts, pred: bool, gt: bool) {
    match (pred, gt) {
        (true, true) => counts.tp += 1,
        (true, false) => counts.fp += 1,
        (false, true) => counts.fneg += 1,
        _ => {}
    }
}

/// Full corpus evaluation over aligned (prediction, ground truth) pairs.
pub fn evaluate_corpus(pairs: &[(&DenseLabels, &DenseLabels)], opts: &EvalOpts) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::Validation("corpus evaluation over zero videos".into()));
    }
    let classes = pairs[0].1.classes();
    for (_, gt) in pairs {
        if gt.classes() != classes {
            return Err(Error::dim("corpus evaluation", format!("{classes} classes"), format!("{}", gt.classes())));
        }
    }
    // Per-video work runs in parallel; the collect preserves corpus order so
    // every reduction below is order-deterministic.
    let tallies: Vec<VideoTallies> = pairs
        .par_iter()
        .map(|(pred, gt)| video_tallies(pred, gt, opts.iou_min))
        .collect::<Result<_>>()?;

    let channel_scores = |level: fn(&VideoTallies) -> &[Counts; CHANNELS]| -> [f64; CHANNELS] {
        let mut out = [0.0; CHANNELS];
        match opts.aggregation {
            Aggregation::Macro => {
                for v in &tallies {
                    for i in 0..CHANNELS {
                        out[i] += level(v)[i].f();
                    }
                }
                for s in &mut out {
                    *s *= 100.0 / tallies.len() as f64;
                }
            }
            Aggregation::Micro => {
                let mut pooled = [Counts::default(); CHANNELS];
                for v in &tallies {
                    for i in 0..CHANNELS {
                        pooled[i].add(&level(v)[i]);
                    }
                }
                for i in 0..CHANNELS {
                    out[i] = pooled[i].f() * 100.0;
                }
            }
        }
        out
    };
    let pack = |s: [f64; CHANNELS]| LevelScores {
        audio: s[0],
        visual: s[1],
        audio_visual: s[2],
        type_at_av: (s[0] + s[1] + s[2]) / 3.0,
        event_at_av: s[3],
    };
    let segment = pack(channel_scores(|v| &v.seg));
    let event = pack(channel_scores(|v| &v.evt));

    let mut per_class_counts = vec![(Counts::default(), Counts::default()); classes];
    for v in &tallies {
        for (acc, one) in per_class_counts.iter_mut().zip(&v.per_class) {
            acc.0.add(&one.0);
            acc.1.add(&one.1);
        }
    }
    let per_class = per_class_counts
        .iter()
        .enumerate()
        .map(|(class_index, (a, v))| PerClassF {
            class_index,
            audio: a.f() * 100.0,
            visual: v.f() * 100.0,
        })
        .collect();

    Ok(MetricsReport {
        segment,
        event,
        aggregation: opts.aggregation,
        videos: pairs.len(),
        per_class,
        ave_accuracy: None,
        nonalignment: None,
    })
}

/// Scores pseudo labels as if they were predictions; returns the
/// segment-level scores, which is what label quality is judged by.
pub fn label_fidelity(pairs: &[(&DenseLabels, &DenseLabels)], opts: &EvalOpts) -> Result<LevelScores> {
    Ok(evaluate_corpus(pairs, opts)?.segment)
}

/// Counts segment-level events present in exactly one modality and how often
/// the prediction confines the class to that same modality.
pub fn nonalignment_report(pairs: &[(&DenseLabels, &DenseLabels)]) -> Result<NonalignmentReport> {
    let mut total = 0u64;
    let mut nonaligned = 0u64;
    let mut success = 0u64;
    for (pred, gt) in pairs {
        if pred.segments() != gt.segments() || pred.classes() != gt.classes() {
            return Err(Error::dim(
                "non-alignment report",
                format!("{}x{}", gt.segments(), gt.classes()),
                format!("{}x{}", pred.segments(), pred.classes()),
            ));
        }
        for t in 0..gt.segments() {
            for c in 0..gt.classes() {
                let (ga, gv) = (gt.audio.get(t, c), gt.visual.get(t, c));
                if ga || gv {
                    total += 1;
                }
                if ga ^ gv {
                    nonaligned += 1;
                    let (pa, pv) = (pred.audio.get(t, c), pred.visual.get(t, c));
                    if pa == ga && pv == gv {
                        success += 1;
                    }
                }
            }
        }
    }
    Ok(NonalignmentReport {
        total_events: total,
        nonaligned_events: nonaligned,
        success_count: success,
        success_rate: (nonaligned > 0).then(|| success as f64 / nonaligned as f64),
    })
}

impl MetricsReport {
    /// Aligned-column plain-text rendering.
    pub fn to_text(&self) -> String {
        let mode = match self.aggregation {
            Aggregation::Macro => "macro",
            Aggregation::Micro => "micro",
        };
        let mut out = format!("aggregation: {mode} over {} videos\n", self.videos);
        out.push_str("level     audio  visual     av  type@av  event@av\n");
        for (name, s) in [("segment", &self.segment), ("event", &self.event)] {
            out.push_str(&format!(
                "{name:<8} {:>6.2} {:>7.2} {:>6.2} {:>8.2} {:>9.2}\n",
                s.audio, s.visual, s.audio_visual, s.type_at_av, s.event_at_av
            ));
        }
        if let Some(acc) = self.ave_accuracy {
            out.push_str(&format!("segment accuracy: {:.2}\n", acc * 100.0));
        }
        if let Some(na) = &self.nonalignment {
            let rate = na
                .success_rate
                .map_or("n/a".to_string(), |r| format!("{:.1}%", r * 100.0));
            out.push_str(&format!(
                "non-aligned events: {} of {}, prediction success {} ({rate})\n",
                na.nonaligned_events, na.total_events, na.success_count
            ));
        }
        out
    }

    /// Per-class segment F table as CSV, one row per class.
    pub fn per_class_csv(&self, class_names: &[String]) -> Result<String> {
        if class_names.len() != self.per_class.len() {
            return Err(Error::dim(
                "per-class table",
                format!("{} names", self.per_class.len()),
                format!("{}", class_names.len()),
            ));
        }
        let mut out = String::from("class,audio_f,visual_f\n");
        for row in &self.per_class {
            out.push_str(&format!(
                "{},{:.4},{:.4}\n",
                class_names[row.class_index], row.audio, row.visual
            ));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(t: usize, c: usize, bits: &[u8]) -> BinMatrix {
        BinMatrix::from_rows(t, c, bits.to_vec()).unwrap()
    }

    fn random_dense(rng: &mut ChaCha8Rng, t: usize, c: usize, p: f64) -> DenseLabels {
        let draw = |rng: &mut ChaCha8Rng| -> Vec<u8> {
            (0..t * c).map(|_| u8::from(rng.random::<f64>() < p)).collect()
        };
        DenseLabels::new(mat(t, c, &draw(rng)), mat(t, c, &draw(rng))).unwrap()
    }

    #[test]
    fn binarize_boundary_and_idempotence() {
        let probs = Tensor::matrix(1, 3, vec![0.5, 0.5, 0.5]).unwrap();
        assert_eq!(binarize(&probs, 0.5).unwrap().count_ones(), 0);
        let probs = Tensor::matrix(1, 3, vec![0.0, 1e-9, 0.9]).unwrap();
        assert_eq!(binarize(&probs, 0.0).unwrap().data(), &[0, 1, 1]);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let raw = Tensor::matrix(4, 5, (0..20).map(|_| rng.random::<f64>()).collect()).unwrap();
        for thr in [0.5, 0.7, 0.9] {
            let once = binarize(&raw, thr).unwrap();
            let twice = binarize(&once.to_tensor(), 0.5).unwrap();
            assert_eq!(once, twice);
        }
        assert!(binarize(&Tensor::matrix(1, 1, vec![1.5]).unwrap(), 0.5).is_err());
    }

    #[test]
    fn segment_f_closed_forms() {
        let gt = mat(2, 2, &[1, 0, 0, 1]);
        assert_eq!(segment_f(&gt, &gt).unwrap(), 1.0);
        // All-ones prediction vs k=2 positives out of N=4 cells: 2k/(k+N).
        let ones = mat(2, 2, &[1, 1, 1, 1]);
        assert!((segment_f(&ones, &gt).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        let empty = mat(2, 2, &[0, 0, 0, 0]);
        assert_eq!(segment_f(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn segment_f_matches_set_oracle_exhaustively() {
        // All 2^4 x 2^4 prediction/GT pairs at T=2, C=2, against an oracle
        // that counts via explicit index sets.
        for pb in 0u16..16 {
            for gb in 0u16..16 {
                let p: Vec<u8> = (0..4).map(|i| ((pb >> i) & 1) as u8).collect();
                let g: Vec<u8> = (0..4).map(|i| ((gb >> i) & 1) as u8).collect();
                let pred = mat(2, 2, &p);
                let gt = mat(2, 2, &g);
                let pset: std::collections::BTreeSet<usize> =
                    (0..4).filter(|&i| p[i] == 1).collect();
                let gset: std::collections::BTreeSet<usize> =
                    (0..4).filter(|&i| g[i] == 1).collect();
                let tp = pset.intersection(&gset).count() as f64;
                let fp = pset.difference(&gset).count() as f64;
                let fneg = gset.difference(&pset).count() as f64;
                let want = if 2.0 * tp + fp + fneg == 0.0 { 1.0 } else { 2.0 * tp / (2.0 * tp + fp + fneg) };
                assert_eq!(segment_f(&pred, &gt).unwrap(), want, "pb={pb} gb={gb}");
            }
        }
    }

    #[test]
    fn perfect_predictions_score_100_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let videos: Vec<DenseLabels> = (0..5).map(|_| random_dense(&mut rng, 6, 3, 0.3)).collect();
        let pairs: Vec<(&DenseLabels, &DenseLabels)> = videos.iter().map(|v| (v, v)).collect();
        for agg in [Aggregation::Macro, Aggregation::Micro] {
            let report = evaluate_corpus(&pairs, &EvalOpts { aggregation: agg, iou_min: 0.5 }).unwrap();
            for s in [&report.segment, &report.event] {
                for v in [s.audio, s.visual, s.audio_visual, s.type_at_av, s.event_at_av] {
                    assert!((v - 100.0).abs() < 1e-9, "{v}");
                }
            }
            for pc in &report.per_class {
                assert!((pc.audio - 100.0).abs() < 1e-9 && (pc.visual - 100.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn hand_counted_single_video_case() {
        // T=2, C=1. GT: audio-only event in segment 0. Prediction fires both
        // modalities in segment 0.
        let gt = DenseLabels::new(mat(2, 1, &[1, 0]), mat(2, 1, &[0, 0])).unwrap();
        let pred = DenseLabels::new(mat(2, 1, &[1, 0]), mat(2, 1, &[1, 0])).unwrap();
        let report = evaluate_corpus(&[(&pred, &gt)], &EvalOpts::default()).unwrap();
        // Audio exact: 100. Visual: one FP against empty GT: 0. AND: pred
        // has the cell, GT does not: 0. OR: both reduce to the same cell: 100.
        assert_eq!(report.segment.audio, 100.0);
        assert_eq!(report.segment.visual, 0.0);
        assert_eq!(report.segment.audio_visual, 0.0);
        assert!((report.segment.type_at_av - 100.0 / 3.0).abs() < 1e-9);
        assert_eq!(report.segment.event_at_av, 100.0);
        assert_eq!(report.event.audio, 100.0);
        assert_eq!(report.event.visual, 0.0);
        assert_eq!(report.event.audio_visual, 0.0);
        assert_eq!(report.event.event_at_av, 100.0);
    }

    #[test]
    fn type_is_the_mean_of_the_three_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let preds: Vec<DenseLabels> = (0..8).map(|_| random_dense(&mut rng, 5, 4, 0.4)).collect();
        let gts: Vec<DenseLabels> = (0..8).map(|_| random_dense(&mut rng, 5, 4, 0.4)).collect();
        let pairs: Vec<(&DenseLabels, &DenseLabels)> =
            preds.iter().zip(&gts).map(|(p, g)| (p, g)).collect();
        for agg in [Aggregation::Macro, Aggregation::Micro] {
            let report = evaluate_corpus(&pairs, &EvalOpts { aggregation: agg, iou_min: 0.5 }).unwrap();
            for s in [&report.segment, &report.event] {
                let mean = (s.audio + s.visual + s.audio_visual) / 3.0;
                assert!((s.type_at_av - mean).abs() < 1e-9);
                for v in [s.audio, s.visual, s.audio_visual, s.type_at_av, s.event_at_av] {
                    assert!((0.0..=100.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn and_positives_never_exceed_or_positives() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let pred = random_dense(&mut rng, 6, 3, 0.5);
            let gt = random_dense(&mut rng, 6, 3, 0.5);
            let both = segment_counts(&pred.audio.and(&pred.visual).unwrap(), &gt.audio.and(&gt.visual).unwrap()).unwrap();
            let either = segment_counts(&pred.audio.or(&pred.visual).unwrap(), &gt.audio.or(&gt.visual).unwrap()).unwrap();
            assert!(both.tp <= either.tp);
        }
    }

    #[test]
    fn scores_are_invariant_to_video_order_and_class_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let preds: Vec<DenseLabels> = (0..6).map(|_| random_dense(&mut rng, 4, 3, 0.4)).collect();
        let gts: Vec<DenseLabels> = (0..6).map(|_| random_dense(&mut rng, 4, 3, 0.4)).collect();
        let pairs: Vec<(&DenseLabels, &DenseLabels)> =
            preds.iter().zip(&gts).map(|(p, g)| (p, g)).collect();
        let base = evaluate_corpus(&pairs, &EvalOpts::default()).unwrap();

        let mut reversed = pairs.clone();
        reversed.reverse();
        let rev = evaluate_corpus(&reversed, &EvalOpts::default()).unwrap();
        assert!((base.segment.type_at_av - rev.segment.type_at_av).abs() < 1e-9);
        assert!((base.event.type_at_av - rev.event.type_at_av).abs() < 1e-9);

        // Relabel classes by the cycle 0->1->2->0 on both sides.
        let perm = [1usize, 2, 0];
        let relabel = |d: &DenseLabels| {
            let mut out = DenseLabels::zeros(4, 3);
            for t in 0..4 {
                for c in 0..3 {
                    out.audio.set(t, perm[c], d.audio.get(t, c));
                    out.visual.set(t, perm[c], d.visual.get(t, c));
                }
            }
            out
        };
        let rp: Vec<DenseLabels> = preds.iter().map(relabel).collect();
        let rg: Vec<DenseLabels> = gts.iter().map(relabel).collect();
        let rpairs: Vec<(&DenseLabels, &DenseLabels)> = rp.iter().zip(&rg).map(|(p, g)| (p, g)).collect();
        let rel = evaluate_corpus(&rpairs, &EvalOpts::default()).unwrap();
        for (a, b) in [
            (base.segment.audio, rel.segment.audio),
            (base.segment.event_at_av, rel.segment.event_at_av),
            (base.event.audio_visual, rel.event.audio_visual),
        ] {
            assert!((a - b).abs() < 1e-9);
        }
        for c in 0..3 {
            assert!((base.per_class[c].audio - rel.per_class[perm[c]].audio).abs() < 1e-9);
        }
    }

    #[test]
    fn macro_and_micro_differ_as_hand_computed() {
        // Video 1 perfect (F=1), video 2 one false positive (F=0).
        let gt1 = DenseLabels::new(mat(1, 1, &[1]), mat(1, 1, &[1])).unwrap();
        let gt2 = DenseLabels::new(mat(1, 1, &[0]), mat(1, 1, &[0])).unwrap();
        let pred = gt1.clone();
        let pairs = [(&pred, &gt1), (&pred, &gt2)];
        let mac = evaluate_corpus(&pairs, &EvalOpts { aggregation: Aggregation::Macro, iou_min: 0.5 }).unwrap();
        assert!((mac.segment.audio - 50.0).abs() < 1e-9);
        // Micro pools tp=1, fp=1: 2/(2+1).
        let mic = evaluate_corpus(&pairs, &EvalOpts { aggregation: Aggregation::Micro, iou_min: 0.5 }).unwrap();
        assert!((mic.segment.audio - 200.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn per_class_table_pools_cells_per_class() {
        // Class 0 predicted perfectly, class 1 completely missed.
        let gt = DenseLabels::new(mat(2, 2, &[1, 1, 0, 1]), mat(2, 2, &[1, 0, 1, 0])).unwrap();
        let mut pred = gt.clone();
        pred.audio.set(0, 1, false);
        pred.audio.set(1, 1, false);
        let report = evaluate_corpus(&[(&pred, &gt)], &EvalOpts::default()).unwrap();
        assert_eq!(report.per_class[0].audio, 100.0);
        assert_eq!(report.per_class[0].visual, 100.0);
        assert_eq!(report.per_class[1].audio, 0.0);
        assert_eq!(report.per_class[1].visual, 100.0);

        let csv = report
            .per_class_csv(&["drum".to_string(), "violin".to_string()])
            .unwrap();
        assert!(csv.starts_with("class,audio_f,visual_f\n"));
        assert!(csv.contains("drum,100.0000,100.0000"));
        assert!(report.per_class_csv(&["one".to_string()]).is_err());
    }

    #[test]
    fn fidelity_of_exact_pseudo_labels_is_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let videos: Vec<DenseLabels> = (0..4).map(|_| random_dense(&mut rng, 5, 3, 0.3)).collect();
        let pairs: Vec<(&DenseLabels, &DenseLabels)> = videos.iter().map(|v| (v, v)).collect();
        let f = label_fidelity(&pairs, &EvalOpts::default()).unwrap();
        assert_eq!(f.audio, 100.0);
        assert_eq!(f.visual, 100.0);
        assert_eq!(f.audio_visual, 100.0);
    }

    #[test]
    fn nonalignment_counting_and_success_rule() {
        // GT: class 0 audio-only in segment 0 (non-aligned), class 1 in both
        // modalities in segment 1 (aligned).
        let gt = DenseLabels::new(mat(2, 2, &[1, 0, 0, 1]), mat(2, 2, &[0, 0, 0, 1])).unwrap();
        // Prediction confines class 0 to audio: success.
        let good = DenseLabels::new(mat(2, 2, &[1, 0, 0, 1]), mat(2, 2, &[0, 0, 0, 1])).unwrap();
        let r = nonalignment_report(&[(&good, &gt)]).unwrap();
        assert_eq!(r.total_events, 2);
        assert_eq!(r.nonaligned_events, 1);
        assert_eq!(r.success_count, 1);
        assert_eq!(r.success_rate, Some(1.0));

        // Prediction fires both modalities for the non-aligned event: failure.
        let both = DenseLabels::new(mat(2, 2, &[1, 0, 0, 1]), mat(2, 2, &[1, 0, 0, 1])).unwrap();
        let r = nonalignment_report(&[(&both, &gt)]).unwrap();
        assert_eq!(r.success_count, 0);

        // Aligned-everywhere GT: no non-aligned events, rate undefined.
        let aligned = DenseLabels::new(mat(1, 1, &[1]), mat(1, 1, &[1])).unwrap();
        let r = nonalignment_report(&[(&aligned, &aligned)]).unwrap();
        assert_eq!(r.nonaligned_events, 0);
        assert_eq!(r.success_rate, None);
    }

    #[test]
    fn report_text_and_json_round_trip() {
        let gt = DenseLabels::new(mat(2, 1, &[1, 0]), mat(2, 1, &[0, 0])).unwrap();
        let pred = DenseLabels::new(mat(2, 1, &[1, 0]), mat(2, 1, &[1, 0])).unwrap();
        let mut report = evaluate_corpus(&[(&pred, &gt)], &EvalOpts::default()).unwrap();
        report.ave_accuracy = Some(0.7);
        report.nonalignment = nonalignment_report(&[(&pred, &gt)]).ok();
        let text = report.to_text();
        assert!(text.contains("macro over 1 videos"), "{text}");
        assert!(text.contains("segment"), "{text}");
        let json = serde_json::to_string(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn mismatched_or_empty_corpora_are_rejected() {
        let a = DenseLabels::zeros(2, 2);
        let b = DenseLabels::zeros(3, 2);
        assert!(evaluate_corpus(&[(&a, &b)], &EvalOpts::default()).is_err());
        assert!(evaluate_corpus(&[], &EvalOpts::default()).is_err());
        assert!(nonalignment_report(&[(&a, &b)]).is_err());
    }

    #[test]
    fn prediction_builder_binarizes_at_half() {
        let pa = Tensor::matrix(2, 2, vec![0.6, 0.5, 0.4, 0.9]).unwrap();
        let pv = Tensor::matrix(2, 2, vec![0.1, 0.51, 0.0, 0.5]).unwrap();
        let pred = Prediction::from_probs("v".into(), pa, pv, 0.5).unwrap();
        assert_eq!(pred.labels.audio.data(), &[1, 0, 0, 1]);
        assert_eq!(pred.labels.visual.data(), &[0, 1, 0, 0]);
    }
}
