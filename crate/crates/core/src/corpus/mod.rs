//! Corpus data model and I/O.
//!
//! On disk a corpus is a directory: `manifest.csv` (video_id, T, event
//! names), `classes.txt` (one name per line, order defines the class index),
//! per-video feature tensors under `features/`, and optionally dense ground
//! truth (`dense_gt.txt`), planted teacher logits (`teacher_logits.bin`),
//! separating thresholds (`oracle_thresholds.tsv`), and generator
//! bookkeeping (`bookkeeping.json`).

pub mod synth;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::labels::{DenseLabels, WeakLabel};
use crate::tensor::io::read_tensor;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const CLASSES_FILE: &str = "classes.txt";
pub const FEATURES_DIR: &str = "features";
pub const DENSE_GT_FILE: &str = "dense_gt.txt";
pub const TEACHER_LOGITS_FILE: &str = "teacher_logits.bin";
pub const ORACLE_THRESHOLDS_FILE: &str = "oracle_thresholds.tsv";
pub const BOOKKEEPING_FILE: &str = "bookkeeping.json";

/// One video: per-segment features for both modalities, the video-level
/// label, and dense ground truth where the corpus has it.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub video_id: String,
    pub feats_audio: Tensor,
    pub feats_visual: Tensor,
    pub weak: WeakLabel,
    pub dense_gt: Option<DenseLabels>,
}

impl VideoSample {
    pub fn segments(&self) -> usize {
        self.feats_audio.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub classes: Vec<String>,
    pub videos: Vec<VideoSample>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub video_id: String,
    pub segments: usize,
    pub events: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub name: String,
    pub rows: Vec<ManifestRow>,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::parse(path.display().to_string(), None, e.to_string()))?;
    {
        let headers = reader
            .headers()
            .map_err(|e| Error::parse(path.display().to_string(), Some(1), e.to_string()))?;
        let want = ["video_id", "T", "events"];
        if headers.iter().collect::<Vec<_>>() != want {
            return Err(Error::parse(
                path.display().to_string(),
                Some(1),
                format!("expected header video_id,T,events, got {headers:?}"),
            ));
        }
    }
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| Error::parse(path.display().to_string(), Some(line), e.to_string()))?;
        if record.len() != 3 {
            return Err(Error::parse(
                path.display().to_string(),
                Some(line),
                format!("expected 3 fields, got {}", record.len()),
            ));
        }
        let video_id = record[0].trim().to_string();
        if video_id.is_empty() {
            return Err(Error::parse(path.display().to_string(), Some(line), "empty video id"));
        }
        if !seen.insert(video_id.clone()) {
            return Err(Error::parse(
                path.display().to_string(),
                Some(line),
                format!("duplicate video id '{video_id}'"),
            ));
        }
        let segments: usize = record[1]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path.display().to_string(), Some(line), format!("bad segment count '{}'", &record[1])))?;
        if segments == 0 {
            return Err(Error::parse(path.display().to_string(), Some(line), "segment count must be at least 1"));
        }
        let events: Vec<String> = record[2]
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        rows.push(ManifestRow { video_id, segments, events });
    }
    Ok(Manifest { name, rows })
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path.display().to_string(), None, format!("{other:?}")),
    })?;
    let io_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path.display().to_string(), None, format!("{other:?}")),
    };
    writer.write_record(["video_id", "T", "events"]).map_err(io_err)?;
    for row in &manifest.rows {
        writer
            .write_record([
                row.video_id.as_str(),
                &row.segments.to_string(),
                &row.events.join(","),
            ])
            .map_err(io_err)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read_classes(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut classes = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in text.lines().enumerate() {
        let name = line.trim();
        if name.is_empty() {
            continue;
        }
        if !seen.insert(name.to_string()) {
            return Err(Error::parse(
                path.display().to_string(),
                Some(idx + 1),
                format!("duplicate class name '{name}'"),
            ));
        }
        classes.push(name.to_string());
    }
    if classes.is_empty() {
        return Err(Error::parse(path.display().to_string(), None, "no class names"));
    }
    Ok(classes)
}

pub fn write_classes(path: impl AsRef<Path>, classes: &[String]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for c in classes {
        out.push_str(c);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn audio_feature_path(features_dir: &Path, video_id: &str) -> PathBuf {
    features_dir.join(format!("{video_id}.audio.tnsr"))
}

pub fn visual_feature_path(features_dir: &Path, video_id: &str) -> PathBuf {
    features_dir.join(format!("{video_id}.visual.tnsr"))
}

/// Loads a corpus given its manifest, the feature directory, and optionally
/// a dense ground-truth label file. The class table is read from
/// `classes.txt` next to the manifest. An empty manifest loads as an empty
/// corpus; callers decide whether that deserves a warning.
pub fn load_corpus(
    manifest_path: impl AsRef<Path>,
    features_dir: impl AsRef<Path>,
    dense_path: Option<&Path>,
) -> Result<Corpus> {
    let manifest_path = manifest_path.as_ref();
    let features_dir = features_dir.as_ref();
    let manifest = read_manifest(manifest_path)?;
    let classes_path = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(CLASSES_FILE);
    let classes = read_classes(&classes_path)?;

    let mut dense_by_id = std::collections::BTreeMap::new();
    if let Some(dense_path) = dense_path {
        for (id, labels) in crate::labels::io::read_dense_labels(dense_path)? {
            if labels.classes() != classes.len() {
                return Err(Error::Validation(format!(
                    "dense labels for '{id}' have {} classes, class table has {}",
                    labels.classes(),
                    classes.len()
                )));
            }
            dense_by_id.insert(id, labels);
        }
    }

    let videos: Vec<VideoSample> = manifest
        .rows
        .par_iter()
        .map(|row| {
            let weak = weak_from_events(&row.events, &classes).map_err(|msg| {
                Error::parse(
                    manifest_path.display().to_string(),
                    None,
                    format!("video '{}': {msg}", row.video_id),
                )
            })?;
            let feats_audio = read_tensor(&audio_feature_path(features_dir, &row.video_id))?;
            let feats_visual = read_tensor(&visual_feature_path(features_dir, &row.video_id))?;
            for (tag, t) in [("audio", &feats_audio), ("visual", &feats_visual)] {
                if t.rank() != 2 || t.rows() != row.segments {
                    return Err(Error::Validation(format!(
                        "video '{}': {tag} features are {:?}, manifest declares {} segments",
                        row.video_id,
                        t.shape(),
                        row.segments
                    )));
                }
            }
            let dense_gt = match dense_by_id.get(&row.video_id) {
                Some(d) => {
                    if d.segments() != row.segments {
                        return Err(Error::Validation(format!(
                            "video '{}': dense labels have {} segments, manifest declares {}",
                            row.video_id,
                            d.segments(),
                            row.segments
                        )));
                    }
                    if d.implied_weak() != weak {
                        return Err(Error::Validation(format!(
                            "video '{}': dense labels imply a different video-level label than the manifest",
                            row.video_id
                        )));
                    }
                    Some(d.clone())
                }
                None if dense_path.is_some() => {
                    return Err(Error::Validation(format!(
                        "video '{}' missing from dense label file",
                        row.video_id
                    )));
                }
                None => None,
            };
            Ok(VideoSample {
                video_id: row.video_id.clone(),
                feats_audio,
                feats_visual,
                weak,
                dense_gt,
            })
        })
        .collect::<Result<_>>()?;

    if dense_path.is_some() && dense_by_id.len() != videos.len() {
        return Err(Error::Validation(format!(
            "dense label file has {} records, manifest has {} videos",
            dense_by_id.len(),
            videos.len()
        )));
    }
    Ok(Corpus { classes, videos })
}

/// Convenience loader for the standard directory layout; picks up dense
/// ground truth when the file exists.
pub fn load_corpus_dir(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let dense = dir.join(DENSE_GT_FILE);
    load_corpus(
        dir.join(MANIFEST_FILE),
        dir.join(FEATURES_DIR),
        dense.exists().then_some(dense.as_path()),
    )
}

fn weak_from_events(events: &[String], classes: &[String]) -> std::result::Result<WeakLabel, String> {
    let mut indices = Vec::with_capacity(events.len());
    for name in events {
        match classes.iter().position(|c| c == name) {
            Some(i) => indices.push(i),
            None => return Err(format!("unknown event name '{name}'")),
        }
    }
    WeakLabel::from_classes(&indices, classes.len()).map_err(|e| e.to_string())
}

/// Seeded three-way split, stratified by each video's first event class so
/// per-class presence survives the partition where counts allow. Fractions
/// must sum to 1; a positive fraction that still ends up with zero videos is
/// an error.
pub fn split_corpus(
    videos: Vec<VideoSample>,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Vec<VideoSample>, Vec<VideoSample>, Vec<VideoSample>)> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::Config(format!("split fractions {fractions:?} outside [0, 1]")));
    }
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} do not sum to 1")));
    }
    // Strata keyed by first event class; videos without events share one.
    let mut strata: std::collections::BTreeMap<usize, Vec<usize>> = std::collections::BTreeMap::new();
    for (i, v) in videos.iter().enumerate() {
        let key = v.weak.active_classes().first().copied().unwrap_or(usize::MAX);
        strata.entry(key).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; videos.len()];
    for indices in strata.values() {
        let mut shuffled = indices.clone();
        shuffled.shuffle(&mut rng);
        for (slot, &video_idx) in largest_remainder(shuffled.len(), &fractions)
            .iter()
            .zip(&shuffled)
        {
            assignment[video_idx] = *slot;
        }
    }
    let mut out: [Vec<VideoSample>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (video, slot) in videos.into_iter().zip(&assignment) {
        out[*slot].push(video);
    }
    let [train, val, test] = out;
    for (name, split, frac) in [("train", &train, fractions[0]), ("val", &val, fractions[1]), ("test", &test, fractions[2])] {
        if frac > 0.0 && split.is_empty() {
            return Err(Error::Usage(format!(
                "{name} split is empty although its fraction is {frac}; use more videos or a larger fraction"
            )));
        }
    }
    Ok((train, val, test))
}

/// Slot per position: quotas floor(n*f) topped up by largest fractional
/// remainder, earlier splits first on exact ties.
fn largest_remainder(n: usize, fractions: &[f64; 3]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut i = 0;
    while assigned < n {
        counts[order[i % 3]] += 1;
        assigned += 1;
        i += 1;
    }
    let mut slots = Vec::with_capacity(n);
    for (slot, &count) in counts.iter().enumerate() {
        slots.extend(std::iter::repeat(slot).take(count));
    }
    slots
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, classes: usize, first_event: Option<usize>) -> VideoSample {
        let weak = match first_event {
            Some(c) => WeakLabel::from_classes(&[c], classes).unwrap(),
            None => WeakLabel::zeros(classes),
        };
        VideoSample {
            video_id: id.to_string(),
            feats_audio: Tensor::matrix(2, 3, vec![0.0; 6]).unwrap(),
            feats_visual: Tensor::matrix(2, 3, vec![0.0; 6]).unwrap(),
            weak,
            dense_gt: None,
        }
    }

    #[test]
    fn manifest_round_trips_with_quoted_event_lists() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let manifest = Manifest {
            name: "manifest".into(),
            rows: vec![
                ManifestRow { video_id: "vid1".into(), segments: 10, events: vec!["Dog".into(), "Speech".into()] },
                ManifestRow { video_id: "vid2".into(), segments: 10, events: vec![] },
            ],
        };
        write_manifest(&path, &manifest).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("video_id,T,events\n"), "{text}");
        assert!(text.contains("\"Dog,Speech\""), "{text}");
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, manifest);
    }

    #[test]
    fn manifest_rejects_duplicates_and_bad_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        std::fs::write(&path, "video_id,T,events\nv,10,\nv,10,\n").unwrap();
        let err = read_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
        std::fs::write(&path, "video_id,T,events\nv,zero,\n").unwrap();
        assert!(read_manifest(&path).is_err());
        std::fs::write(&path, "id,T,events\nv,1,\n").unwrap();
        let err = read_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("header"), "{err}");
    }

    #[test]
    fn classes_file_round_trips_and_rejects_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(CLASSES_FILE);
        let classes = vec!["Dog".to_string(), "Cat".to_string()];
        write_classes(&path, &classes).unwrap();
        assert_eq!(read_classes(&path).unwrap(), classes);
        std::fs::write(&path, "Dog\nDog\n").unwrap();
        assert!(read_classes(&path).is_err());
        std::fs::write(&path, "\n\n").unwrap();
        assert!(read_classes(&path).is_err());
    }

    #[test]
    fn unknown_event_names_are_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        write_classes(dir.path().join(CLASSES_FILE), &["Dog".to_string()]).unwrap();
        std::fs::create_dir(dir.path().join(FEATURES_DIR)).unwrap();
        std::fs::write(
            dir.path().join(MANIFEST_FILE),
            "video_id,T,events\nv1,2,Wolf\n",
        )
        .unwrap();
        let err = load_corpus(dir.path().join(MANIFEST_FILE), dir.path().join(FEATURES_DIR), None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("Wolf") && msg.contains("v1"), "{msg}");
    }

    #[test]
    fn empty_manifest_loads_as_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        write_classes(dir.path().join(CLASSES_FILE), &["Dog".to_string()]).unwrap();
        std::fs::create_dir(dir.path().join(FEATURES_DIR)).unwrap();
        std::fs::write(dir.path().join(MANIFEST_FILE), "video_id,T,events\n").unwrap();
        let corpus = load_corpus(dir.path().join(MANIFEST_FILE), dir.path().join(FEATURES_DIR), None).unwrap();
        assert!(corpus.videos.is_empty());
        assert_eq!(corpus.classes.len(), 1);
    }

    #[test]
    fn split_everything_into_train() {
        let videos: Vec<VideoSample> = (0..7).map(|i| sample(&format!("v{i}"), 3, Some(i % 3))).collect();
        let (train, val, test) = split_corpus(videos, [1.0, 0.0, 0.0], 9).unwrap();
        assert_eq!(train.len(), 7);
        assert!(val.is_empty() && test.is_empty());
    }

    #[test]
    fn split_is_an_exact_seeded_partition() {
        let make = || -> Vec<VideoSample> {
            (0..40)
                .map(|i| sample(&format!("v{i}"), 4, if i % 5 == 0 { None } else { Some(i % 4) }))
                .collect()
        };
        let (t1, v1, s1) = split_corpus(make(), [0.5, 0.25, 0.25], 123).unwrap();
        assert_eq!(t1.len() + v1.len() + s1.len(), 40);
        let mut ids: Vec<&str> = t1.iter().chain(&v1).chain(&s1).map(|v| v.video_id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 40, "splits overlap or drop videos");

        let (t2, v2, s2) = split_corpus(make(), [0.5, 0.25, 0.25], 123).unwrap();
        let names = |xs: &[VideoSample]| xs.iter().map(|v| v.video_id.clone()).collect::<Vec<_>>();
        assert_eq!(names(&t1), names(&t2));
        assert_eq!(names(&v1), names(&v2));
        assert_eq!(names(&s1), names(&s2));
    }

    #[test]
    fn positive_fraction_with_empty_split_errors() {
        let videos: Vec<VideoSample> = (0..2).map(|i| sample(&format!("v{i}"), 2, Some(0))).collect();
        let err = split_corpus(videos, [0.5, 0.25, 0.25], 1).unwrap_err();
        assert!(matches!(err, Error::Usage(_)), "{err}");
        let bad = split_corpus(vec![sample("v", 2, None)], [0.6, 0.6, -0.2], 1);
        assert!(bad.is_err());
    }

    #[test]
    fn largest_remainder_is_exact_and_deterministic() {
        for n in 0..50 {
            let slots = largest_remainder(n, &[0.7, 0.2, 0.1]);
            assert_eq!(slots.len(), n);
        }
        // 10 videos at (0.7, 0.2, 0.1): quotas 7, 2, 1 exactly.
        let slots = largest_remainder(10, &[0.7, 0.2, 0.1]);
        let count = |s: usize| slots.iter().filter(|&&x| x == s).count();
        assert_eq!((count(0), count(1), count(2)), (7, 2, 1));
    }
}
