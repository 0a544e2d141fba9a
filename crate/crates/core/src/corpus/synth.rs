//! Parameterized synthetic corpus generator.
//!
//! Videos get 1..k events, each an interval of segments in one or both
//! modalities. Features are class-prototype sums plus Gaussian noise, so a
//! shallow model can learn them. Teacher logits are planted Gaussians whose
//! mean depends on the cell's ground truth, optionally leaking onto a
//! confusable partner class. Everything is deterministic per seed.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    audio_feature_path, visual_feature_path, Corpus, Manifest, ManifestRow, VideoSample,
    BOOKKEEPING_FILE, CLASSES_FILE, DENSE_GT_FILE, FEATURES_DIR, MANIFEST_FILE,
    ORACLE_THRESHOLDS_FILE, TEACHER_LOGITS_FILE,
};
use crate::error::{Error, Result};
use crate::labels::io::{write_dense_labels, write_teacher_logits};
use crate::labels::prompts::{write_thresholds, PromptTable};
use crate::labels::{DenseLabels, TeacherLogits, Thresholds};
use crate::tensor::io::write_tensor;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    pub segments: usize,
    pub classes: usize,
    pub events_min: usize,
    pub events_max: usize,
    /// Probability an event is audio-only / visual-only / in both modalities.
    pub mix_audio: f64,
    pub mix_visual: f64,
    pub mix_both: f64,
    pub span_min: usize,
    pub span_max: usize,
    pub dim_audio: usize,
    pub dim_visual: usize,
    pub feature_noise: f64,
    pub logit_pos_mean: f64,
    pub logit_neg_mean: f64,
    pub logit_noise: f64,
    /// Probability that an active cell also plants a positive-mean logit on
    /// its partner class (pairs 0-1, 2-3, ...), imitating teacher confusion.
    pub confusion: f64,
    /// Single aligned event per video with aligned modalities, for the
    /// single-event task. Overrides events and mix settings.
    pub ave_style: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_videos: 100,
            segments: 10,
            classes: 25,
            events_min: 1,
            events_max: 3,
            mix_audio: 0.25,
            mix_visual: 0.25,
            mix_both: 0.5,
            span_min: 2,
            span_max: 10,
            dim_audio: 128,
            dim_visual: 512,
            feature_noise: 0.1,
            logit_pos_mean: 10.0,
            logit_neg_mean: 0.0,
            logit_noise: 4.8,
            confusion: 0.0,
            ave_style: false,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<SyntheticSpec> {
        let mut spec = SyntheticSpec::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse("<spec>", Some(idx + 1), format!("expected key = value, got '{line}'")))?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| Error::parse("<spec>", Some(idx + 1), format!("bad {what} '{value}'"));
            let as_usize = || value.parse::<usize>().map_err(|_| bad("integer"));
            let as_f64 = || value.parse::<f64>().map_err(|_| bad("number"));
            let as_bool = || match value {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(bad("flag")),
            };
            match key {
                "num_videos" => spec.num_videos = as_usize()?,
                "segments" => spec.segments = as_usize()?,
                "classes" => spec.classes = as_usize()?,
                "events_min" => spec.events_min = as_usize()?,
                "events_max" => spec.events_max = as_usize()?,
                "mix_audio" => spec.mix_audio = as_f64()?,
                "mix_visual" => spec.mix_visual = as_f64()?,
                "mix_both" => spec.mix_both = as_f64()?,
                "span_min" => spec.span_min = as_usize()?,
                "span_max" => spec.span_max = as_usize()?,
                "dim_audio" => spec.dim_audio = as_usize()?,
                "dim_visual" => spec.dim_visual = as_usize()?,
                "feature_noise" => spec.feature_noise = as_f64()?,
                "logit_pos_mean" => spec.logit_pos_mean = as_f64()?,
                "logit_neg_mean" => spec.logit_neg_mean = as_f64()?,
                "logit_noise" => spec.logit_noise = as_f64()?,
                "confusion" => spec.confusion = as_f64()?,
                "ave_style" => spec.ave_style = as_bool()?,
                "seed" => spec.seed = value.parse::<u64>().map_err(|_| bad("seed"))?,
                other => {
                    return Err(Error::parse("<spec>", Some(idx + 1), format!("unknown key '{other}'")));
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SyntheticSpec> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SyntheticSpec::parse(&text).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse { path: path.display().to_string(), line, msg },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_videos == 0 || self.segments == 0 || self.classes == 0 {
            return fail("num_videos, segments, and classes must be at least 1".into());
        }
        if self.events_min > self.events_max || self.events_max > self.classes {
            return fail(format!(
                "events range {}..={} invalid for {} classes",
                self.events_min, self.events_max, self.classes
            ));
        }
        let mix = [self.mix_audio, self.mix_visual, self.mix_both];
        if mix.iter().any(|p| !(0.0..=1.0).contains(p)) || (mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return fail(format!("modality mix {mix:?} must be probabilities summing to 1"));
        }
        if self.span_min == 0 || self.span_min > self.span_max {
            return fail(format!("span range {}..={} invalid", self.span_min, self.span_max));
        }
        if self.dim_audio == 0 || self.dim_visual == 0 {
            return fail("feature dimensions must be at least 1".into());
        }
        if self.feature_noise < 0.0 || self.logit_noise < 0.0 {
            return fail("noise scales must be non-negative".into());
        }
        if !self.logit_pos_mean.is_finite() || !self.logit_neg_mean.is_finite() {
            return fail("logit means must be finite".into());
        }
        if !(0.0..=1.0).contains(&self.confusion) {
            return fail(format!("confusion {} outside [0, 1]", self.confusion));
        }
        Ok(())
    }
}

/// Generator-side statistics, written as `bookkeeping.json`. The event
/// counts come from the placement records, independently of the dense label
/// matrices, so they can cross-check the evaluation code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bookkeeping {
    pub spec: SyntheticSpec,
    pub videos: usize,
    /// Segment-level events: (video, segment, class) active in either modality.
    pub total_events: u64,
    /// Segment-level events active in exactly one modality.
    pub nonaligned_events: u64,
    /// Placed interval events over the whole corpus.
    pub video_level_events: u64,
    pub per_class_events: Vec<u64>,
}

pub struct GeneratedCorpus {
    pub corpus: Corpus,
    pub logits: Vec<TeacherLogits>,
    /// Midpoint thresholds that separate planted positives from negatives
    /// when the logit noise is small.
    pub thresholds: Thresholds,
    pub bookkeeping: Bookkeeping,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum EventModality {
    Audio,
    Visual,
    Both,
}

struct PlacedEvent {
    class: usize,
    modality: EventModality,
    start: usize,
    end: usize,
}

pub fn class_names(classes: usize) -> Vec<String> {
    if classes == PromptTable::llp_default().rows.len() {
        PromptTable::llp_default().classes()
    } else {
        (0..classes).map(|c| format!("event_{c:02}")).collect()
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: impl AsRef<Path>) -> Result<GeneratedCorpus> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir.join(FEATURES_DIR)).map_err(|e| Error::io(out_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let feature_dist = Normal::new(0.0, spec.feature_noise).expect("validated");
    let pos_dist = Normal::new(spec.logit_pos_mean, spec.logit_noise).expect("validated");
    let neg_dist = Normal::new(spec.logit_neg_mean, spec.logit_noise).expect("validated");
    let proto_dist = Normal::new(0.0, 1.0).expect("constant");

    let mut proto_audio = Vec::with_capacity(spec.classes);
    let mut proto_visual = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        proto_audio.push(draw_vec(&mut rng, &proto_dist, spec.dim_audio));
        proto_visual.push(draw_vec(&mut rng, &proto_dist, spec.dim_visual));
    }

    let names = class_names(spec.classes);
    let mut rows = Vec::with_capacity(spec.num_videos);
    let mut videos = Vec::with_capacity(spec.num_videos);
    let mut logits = Vec::with_capacity(spec.num_videos);
    let mut total_events = 0u64;
    let mut nonaligned_events = 0u64;
    let mut video_level_events = 0u64;
    let mut per_class_events = vec![0u64; spec.classes];

    for v in 0..spec.num_videos {
        let video_id = format!("vid_{v:05}");
        let events = place_events(spec, &mut rng);
        video_level_events += events.len() as u64;
        for e in &events {
            per_class_events[e.class] += 1;
        }

        let mut dense = DenseLabels::zeros(spec.segments, spec.classes);
        for e in &events {
            for t in e.start..=e.end {
                if e.modality != EventModality::Visual {
                    dense.audio.set(t, e.class, true);
                }
                if e.modality != EventModality::Audio {
                    dense.visual.set(t, e.class, true);
                }
            }
        }
        let weak = dense.implied_weak();

        // Independent non-alignment tally straight from the event records.
        let mut audio_cells = BTreeSet::new();
        let mut visual_cells = BTreeSet::new();
        for e in &events {
            for t in e.start..=e.end {
                if e.modality != EventModality::Visual {
                    audio_cells.insert((t, e.class));
                }
                if e.modality != EventModality::Audio {
                    visual_cells.insert((t, e.class));
                }
            }
        }
        total_events += audio_cells.union(&visual_cells).count() as u64;
        nonaligned_events += audio_cells.symmetric_difference(&visual_cells).count() as u64;

        let feats_audio = features_for(&dense.audio, &proto_audio, spec.dim_audio, &feature_dist, &mut rng);
        let feats_visual = features_for(&dense.visual, &proto_visual, spec.dim_visual, &feature_dist, &mut rng);
        let z_audio = logits_for(&dense.audio, spec, &pos_dist, &neg_dist, &mut rng);
        let z_visual = logits_for(&dense.visual, spec, &pos_dist, &neg_dist, &mut rng);
        logits.push(TeacherLogits::new(video_id.clone(), z_visual, z_audio)?);

        let mut event_classes: Vec<usize> = weak.active_classes();
        event_classes.sort_unstable();
        rows.push(ManifestRow {
            video_id: video_id.clone(),
            segments: spec.segments,
            events: event_classes.iter().map(|&c| names[c].clone()).collect(),
        });
        videos.push(VideoSample {
            video_id,
            feats_audio,
            feats_visual,
            weak,
            dense_gt: Some(dense),
        });
    }

    let theta = (spec.logit_pos_mean + spec.logit_neg_mean) / 2.0;
    let thresholds = Thresholds::uniform(spec.classes, theta);
    let bookkeeping = Bookkeeping {
        spec: spec.clone(),
        videos: spec.num_videos,
        total_events,
        nonaligned_events,
        video_level_events,
        per_class_events,
    };

    crate::corpus::write_manifest(out_dir.join(MANIFEST_FILE), &Manifest { name: "manifest".into(), rows })?;
    crate::corpus::write_classes(out_dir.join(CLASSES_FILE), &names)?;
    let features_dir = out_dir.join(FEATURES_DIR);
    videos
        .par_iter()
        .map(|s| {
            write_tensor(&audio_feature_path(&features_dir, &s.video_id), &s.feats_audio)?;
            write_tensor(&visual_feature_path(&features_dir, &s.video_id), &s.feats_visual)
        })
        .collect::<Result<Vec<_>>>()?;
    let dense_entries: Vec<(String, DenseLabels)> = videos
        .iter()
        .map(|s| (s.video_id.clone(), s.dense_gt.clone().expect("generator always sets")))
        .collect();
    write_dense_labels(out_dir.join(DENSE_GT_FILE), &dense_entries)?;
    write_teacher_logits(out_dir.join(TEACHER_LOGITS_FILE), &logits)?;
    write_thresholds(out_dir.join(ORACLE_THRESHOLDS_FILE), &names, &thresholds)?;
    let book_json = serde_json::to_string_pretty(&bookkeeping)
        .map_err(|e| Error::Validation(format!("bookkeeping serialization: {e}")))?;
    std::fs::write(out_dir.join(BOOKKEEPING_FILE), book_json + "\n")
        .map_err(|e| Error::io(out_dir.join(BOOKKEEPING_FILE), e))?;

    Ok(GeneratedCorpus {
        corpus: Corpus { classes: names, videos },
        logits,
        thresholds,
        bookkeeping,
    })
}

fn draw_vec(rng: &mut ChaCha8Rng, dist: &Normal<f64>, n: usize) -> Vec<f64> {
    (0..n).map(|_| snap(dist.sample(rng))).collect()
}

/// Serialization narrows to f32; snapping at generation time keeps the
/// in-memory corpus bit-identical with what loads back from disk.
fn snap(v: f64) -> f64 {
    v as f32 as f64
}

fn place_events(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<PlacedEvent> {
    let count = if spec.ave_style {
        1
    } else {
        rng.random_range(spec.events_min..=spec.events_max)
    };
    let classes = sample_distinct(rng, spec.classes, count);
    let mut events = Vec::with_capacity(count);
    for class in classes {
        let modality = if spec.ave_style {
            EventModality::Both
        } else {
            let u: f64 = rng.random();
            if u < spec.mix_audio {
                EventModality::Audio
            } else if u < spec.mix_audio + spec.mix_visual {
                EventModality::Visual
            } else {
                EventModality::Both
            }
        };
        let max_len = spec.span_max.min(spec.segments);
        let min_len = spec.span_min.min(max_len);
        let len = rng.random_range(min_len..=max_len);
        let start = rng.random_range(0..=spec.segments - len);
        events.push(PlacedEvent { class, modality, start, end: start + len - 1 });
    }
    events
}

fn sample_distinct(rng: &mut ChaCha8Rng, population: usize, count: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..population).collect();
    for i in 0..count {
        let j = rng.random_range(i..population);
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}

fn features_for(
    gt: &crate::labels::BinMatrix,
    protos: &[Vec<f64>],
    dim: usize,
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let t_len = gt.segments();
    let mut data = Vec::with_capacity(t_len * dim);
    for t in 0..t_len {
        let mut row = vec![0.0; dim];
        for c in 0..gt.classes() {
            if gt.get(t, c) {
                for (r, p) in row.iter_mut().zip(&protos[c]) {
                    *r += p;
                }
            }
        }
        for r in row {
            data.push(snap(r + noise.sample(rng)));
        }
    }
    Tensor::from_vec(vec![t_len, dim], data).expect("consistent dims")
}

fn logits_for(
    gt: &crate::labels::BinMatrix,
    spec: &SyntheticSpec,
    pos: &Normal<f64>,
    neg: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let (t_len, c_len) = (gt.segments(), gt.classes());
    let mut data = Vec::with_capacity(t_len * c_len);
    for t in 0..t_len {
        for c in 0..c_len {
            let dist = if gt.get(t, c) { pos } else { neg };
            data.push(snap(dist.sample(rng)));
        }
    }
    // Confusion pass: active cells may leak a positive-mean logit onto
    // their partner class where the partner is truly negative.
    if spec.confusion > 0.0 {
        for t in 0..t_len {
            for c in 0..c_len {
                let partner = c ^ 1;
                if partner >= c_len || !gt.get(t, c) || gt.get(t, partner) {
                    continue;
                }
                if rng.random::<f64>() < spec.confusion {
                    data[t * c_len + partner] = snap(pos.sample(rng));
                }
            }
        }
    }
    Tensor::from_vec(vec![t_len, c_len], data).expect("consistent dims")
}
