//! Checkpoint and label-file scoring against dense ground truth.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use avparse::corpus::{Corpus, load_corpus_dir};
use avparse::labels::io::read_dense_labels;
use avparse::labels::DenseLabels;
use avparse::metrics::{
    ave_gt_classes, ave_infer, evaluate_corpus, nonalignment_report, Aggregation, EvalOpts,
    LevelScores, MetricsReport, Prediction,
};
use avparse::model::{forward, load_checkpoint, ForwardOutput};
use avparse::Tensor;
use clap::Args;
use rayon::prelude::*;
use serde_json::json;

use super::{check_geometry, parent_dir, require_exists, resolve_out, usage};
use crate::provenance::RunLog;

#[derive(Args)]
pub struct EvalArgs {
    /// Model checkpoint to score.
    #[arg(long, conflicts_with = "labels")]
    pub checkpoint: Option<PathBuf>,

    /// Stored per-segment labels to score as predictions instead.
    #[arg(long)]
    pub labels: Option<PathBuf>,

    /// Corpus directory with dense ground truth.
    #[arg(long)]
    pub corpus: PathBuf,

    /// Output report path (JSON).
    #[arg(long)]
    pub out: PathBuf,

    /// Probability threshold for switching a cell on.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,

    /// Minimum IoU for an event match.
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,

    /// Pool counts across videos instead of averaging per-video F.
    #[arg(long)]
    pub micro: bool,

    /// Write per-class segment F rows to this CSV.
    #[arg(long)]
    pub per_class: Option<PathBuf>,

    /// Add the cross-modal alignment diagnostic to the report.
    #[arg(long)]
    pub nonalignment: bool,
}

pub fn run(args: &EvalArgs, log: RunLog) -> Result<()> {
    require_exists(&args.corpus, "corpus directory")?;
    let corpus = load_corpus_dir(&args.corpus)?;
    if let Some(v) = corpus.videos.iter().find(|v| v.dense_gt.is_none()) {
        return Err(usage(format!(
            "evaluation needs dense ground truth for every video, missing for '{}'",
            v.video_id
        )));
    }

    let (preds, ave_accuracy) = match (&args.checkpoint, &args.labels) {
        (Some(path), None) => model_predictions(path, &corpus, args.threshold)?,
        (None, Some(path)) => (label_predictions(path, &corpus)?, None),
        _ => return Err(usage("pass exactly one of --checkpoint and --labels")),
    };
    let pairs: Vec<(&DenseLabels, &DenseLabels)> = preds
        .iter()
        .zip(&corpus.videos)
        .map(|(p, v)| (p, v.dense_gt.as_ref().expect("checked")))
        .collect();

    let opts = EvalOpts {
        aggregation: if args.micro { Aggregation::Micro } else { Aggregation::Macro },
        iou_min: args.iou,
    };
    let mut report = evaluate_corpus(&pairs, &opts)?;
    report.ave_accuracy = ave_accuracy;
    if args.nonalignment {
        report.nonalignment = Some(nonalignment_report(&pairs)?);
    }

    let out = resolve_out(&args.out);
    let dir = parent_dir(&out)?;
    super::write_json(&out, &report)?;

    print_scores("segment", &report.segment);
    print_scores("event", &report.event);
    if let Some(acc) = report.ave_accuracy {
        println!("segment accuracy: {acc:.2}");
    }
    if let Some(n) = &report.nonalignment {
        match n.success_rate {
            Some(rate) => println!(
                "nonalignment: {} of {} events single-modality, success rate {rate:.4}",
                n.nonaligned_events, n.total_events
            ),
            None => println!(
                "nonalignment: {} of {} events single-modality",
                n.nonaligned_events, n.total_events
            ),
        }
    }

    let mut artifacts = vec![out.clone()];
    if let Some(path) = &args.per_class {
        let path = resolve_out(path);
        write_per_class(&path, &corpus.classes, &report)?;
        artifacts.push(path);
    }

    let config = json!({
        "checkpoint": args.checkpoint.as_ref().map(|p| p.display().to_string()),
        "labels": args.labels.as_ref().map(|p| p.display().to_string()),
        "corpus": args.corpus.display().to_string(),
        "threshold": args.threshold,
        "iou": args.iou,
        "aggregation": if args.micro { "micro" } else { "macro" },
        "nonalignment": args.nonalignment,
    });
    log.finish(&dir, config, &artifacts)
}

fn model_predictions(
    path: &Path,
    corpus: &Corpus,
    threshold: f64,
) -> Result<(Vec<DenseLabels>, Option<f64>)> {
    require_exists(path, "checkpoint file")?;
    let params = load_checkpoint(path)?;
    check_geometry(params.config(), corpus)?;
    let ave_mode = params.config().ave_mode;

    let outs: Vec<ForwardOutput> = corpus
        .videos
        .par_iter()
        .map(|v| forward(&params, &v.feats_audio, &v.feats_visual))
        .collect::<avparse::Result<_>>()?;

    if ave_mode {
        // The background column sits last; dense scoring covers the real
        // classes, the accuracy pools single-label decisions over segments.
        let mut hits = 0usize;
        let mut total = 0usize;
        let mut preds = Vec::with_capacity(outs.len());
        for (out, v) in outs.iter().zip(&corpus.videos) {
            let gt = ave_gt_classes(v.dense_gt.as_ref().expect("checked"))?;
            let inferred = ave_infer(&out.probs_audio, &out.probs_visual)?;
            hits += inferred.iter().zip(&gt).filter(|(a, b)| a == b).count();
            total += gt.len();
            let pred = Prediction::from_probs(
                v.video_id.clone(),
                strip_background(&out.probs_audio),
                strip_background(&out.probs_visual),
                threshold,
            )?;
            preds.push(pred.labels);
        }
        let accuracy = (total > 0).then(|| 100.0 * hits as f64 / total as f64);
        Ok((preds, accuracy))
    } else {
        let preds = outs
            .into_iter()
            .zip(&corpus.videos)
            .map(|(out, v)| -> Result<DenseLabels> {
                let pred = Prediction::from_probs(
                    v.video_id.clone(),
                    out.probs_audio,
                    out.probs_visual,
                    threshold,
                )?;
                Ok(pred.labels)
            })
            .collect::<Result<_>>()?;
        Ok((preds, None))
    }
}

fn label_predictions(path: &Path, corpus: &Corpus) -> Result<Vec<DenseLabels>> {
    require_exists(path, "label file")?;
    let mut by_id: BTreeMap<String, DenseLabels> = read_dense_labels(path)?.into_iter().collect();
    corpus
        .videos
        .iter()
        .map(|v| {
            by_id.remove(&v.video_id).ok_or_else(|| {
                usage(format!("label file has no entry for video '{}'", v.video_id))
            })
        })
        .collect()
}

fn strip_background(probs: &Tensor) -> Tensor {
    let (rows, cols) = (probs.rows(), probs.cols());
    let mut data = Vec::with_capacity(rows * (cols - 1));
    for r in 0..rows {
        for c in 0..cols - 1 {
            data.push(probs.at(r, c));
        }
    }
    Tensor::from_vec(vec![rows, cols - 1], data).expect("one column fewer")
}

fn print_scores(level: &str, s: &LevelScores) {
    println!(
        "{level}: audio {:.2} visual {:.2} audio_visual {:.2} type_at_av {:.2} event_at_av {:.2}",
        s.audio, s.visual, s.audio_visual, s.type_at_av, s.event_at_av
    );
}

/// One row per (modality, class), audio block first.
fn write_per_class(path: &Path, classes: &[String], report: &MetricsReport) -> Result<()> {
    let mut body = String::from("modality,class_index,class,f\n");
    for row in &report.per_class {
        writeln!(body, "audio,{},{},{}", row.class_index, classes[row.class_index], row.audio)
            .expect("string write");
    }
    for row in &report.per_class {
        writeln!(body, "visual,{},{},{}", row.class_index, classes[row.class_index], row.visual)
            .expect("string write");
    }
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}
