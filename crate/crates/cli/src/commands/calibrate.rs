//! Per-class threshold calibration against dense ground truth.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::Result;
use avparse::corpus::{load_corpus_dir, TEACHER_LOGITS_FILE};
use avparse::labels::calibrate::{calibrate, CalibrationItem, ThresholdGrid};
use avparse::labels::io::read_teacher_logits;
use avparse::labels::prompts::write_thresholds;
use avparse::labels::TeacherLogits;
use clap::Args;
use serde_json::json;

use crate::provenance::RunLog;

use super::{parent_dir, require_exists, resolve_out, usage, write_json};

pub const CALIBRATION_FILE: &str = "calibration.json";

#[derive(Args)]
pub struct CalibrateArgs {
    /// Corpus directory; every video needs dense ground truth.
    #[arg(long)]
    pub corpus: PathBuf,

    /// Teacher logits file; defaults to the one inside the corpus.
    #[arg(long)]
    pub logits: Option<PathBuf>,

    /// Output thresholds TSV; a calibration report lands next to it.
    #[arg(long)]
    pub out: PathBuf,

    /// Grid lower bound; defaults to each class's observed logit minimum.
    #[arg(long, allow_negative_numbers = true)]
    pub lo: Option<f64>,

    /// Grid upper bound; defaults to each class's observed logit maximum.
    #[arg(long, allow_negative_numbers = true)]
    pub hi: Option<f64>,

    /// Grid resolution.
    #[arg(long, default_value_t = 64)]
    pub steps: usize,

    /// Scan without the video-level filter; match this to how the
    /// thresholds will be used during elaboration.
    #[arg(long)]
    pub no_video_filter: bool,
}

pub fn run(args: &CalibrateArgs, log: RunLog) -> Result<()> {
    require_exists(&args.corpus, "corpus directory")?;
    let corpus = load_corpus_dir(&args.corpus)?;
    if let Some(v) = corpus.videos.iter().find(|v| v.dense_gt.is_none()) {
        return Err(usage(format!(
            "calibration scans F-scores against dense ground truth, which this corpus \
             lacks (first video without it: '{}'); point at a corpus that ships dense labels",
            v.video_id
        )));
    }
    let logits_path = args
        .logits
        .clone()
        .unwrap_or_else(|| args.corpus.join(TEACHER_LOGITS_FILE));
    require_exists(&logits_path, "teacher logits file")?;

    let all_logits = read_teacher_logits(&logits_path)?;
    let by_id: BTreeMap<&str, &TeacherLogits> =
        all_logits.iter().map(|l| (l.video_id.as_str(), l)).collect();
    let items: Vec<CalibrationItem> = corpus
        .videos
        .iter()
        .map(|v| -> Result<CalibrationItem> {
            let logits = by_id
                .get(v.video_id.as_str())
                .ok_or_else(|| usage(format!("no teacher logits for video '{}'", v.video_id)))?;
            Ok(CalibrationItem {
                logits,
                truth: v.dense_gt.as_ref().expect("checked"),
                weak: &v.weak,
            })
        })
        .collect::<Result<_>>()?;

    let grid = ThresholdGrid { lo: args.lo, hi: args.hi, steps: args.steps };
    let video_filter = !args.no_video_filter;
    let (thresholds, report) = calibrate(&items, &grid, video_filter)?;

    let out = resolve_out(&args.out);
    let dir = parent_dir(&out)?;
    write_thresholds(&out, &corpus.classes, &thresholds)?;
    let report_path = dir.join(CALIBRATION_FILE);
    write_json(&report_path, &report)?;

    for ((name, vis), aud) in corpus.classes.iter().zip(&report.visual).zip(&report.audio) {
        println!(
            "class {name}: visual f {:.4} at {:.6}{}, audio f {:.4} at {:.6}{}",
            vis.f_score,
            vis.theta,
            absent_tag(vis.absent),
            aud.f_score,
            aud.theta,
            absent_tag(aud.absent)
        );
    }

    let config = json!({
        "corpus": args.corpus.display().to_string(),
        "logits": logits_path.display().to_string(),
        "lo": args.lo,
        "hi": args.hi,
        "steps": args.steps,
        "video_filter": video_filter,
    });
    log.finish(&dir, config, &[out, report_path])
}

fn absent_tag(absent: bool) -> &'static str {
    if absent {
        " (absent)"
    } else {
        ""
    }
}
