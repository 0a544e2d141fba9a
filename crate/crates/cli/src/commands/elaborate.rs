//! Dense pseudo-label elaboration over a corpus.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::Result;
use avparse::corpus::{load_corpus_dir, ORACLE_THRESHOLDS_FILE, TEACHER_LOGITS_FILE};
use avparse::labels::io::{read_teacher_logits, write_dense_labels};
use avparse::labels::prompts::read_thresholds;
use avparse::labels::{elaborate, DenseLabels, ElaborateOpts, TeacherLogits};
use avparse::metrics::{label_fidelity, EvalOpts};
use clap::Args;
use serde_json::json;

use crate::provenance::RunLog;

use super::{ensure_dir, require_exists, resolve_out, usage, write_json};

/// Elaborated labels, same format as dense ground truth.
pub const LABELS_FILE: &str = "labels.txt";
pub const FIDELITY_FILE: &str = "fidelity.json";

#[derive(Args)]
pub struct ElaborateArgs {
    /// Corpus directory.
    #[arg(long)]
    pub corpus: PathBuf,

    /// Teacher logits file; defaults to the one inside the corpus.
    #[arg(long)]
    pub logits: Option<PathBuf>,

    /// Caption table (5 columns) or bare thresholds TSV (3 columns);
    /// defaults to the oracle thresholds inside the corpus.
    #[arg(long)]
    pub prompt_table: Option<PathBuf>,

    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,

    /// Drop the video-level filter: thresholded teachers fire freely.
    #[arg(long)]
    pub no_video_filter: bool,

    /// Let either modality's teacher switch on both modality labels.
    #[arg(long)]
    pub modality_agnostic: bool,
}

pub fn run(args: &ElaborateArgs, log: RunLog) -> Result<()> {
    require_exists(&args.corpus, "corpus directory")?;
    let corpus = load_corpus_dir(&args.corpus)?;
    let logits_path = args
        .logits
        .clone()
        .unwrap_or_else(|| args.corpus.join(TEACHER_LOGITS_FILE));
    require_exists(&logits_path, "teacher logits file")?;
    let table_path = args
        .prompt_table
        .clone()
        .unwrap_or_else(|| args.corpus.join(ORACLE_THRESHOLDS_FILE));
    require_exists(&table_path, "threshold table")?;

    let thresholds = read_thresholds(&table_path, &corpus.classes)?;
    let by_id = index_logits(read_teacher_logits(&logits_path)?);
    let opts = ElaborateOpts {
        video_filter: !args.no_video_filter,
        modality_agnostic: args.modality_agnostic,
    };

    let mut entries = Vec::with_capacity(corpus.videos.len());
    for v in &corpus.videos {
        let logits = by_id
            .get(v.video_id.as_str())
            .ok_or_else(|| usage(format!("no teacher logits for video '{}'", v.video_id)))?;
        entries.push((v.video_id.clone(), elaborate(logits, &thresholds, &v.weak, &opts)?));
    }

    let out = resolve_out(&args.out);
    ensure_dir(&out)?;
    let labels_path = out.join(LABELS_FILE);
    write_dense_labels(&labels_path, &entries)?;
    let positives: usize = entries
        .iter()
        .map(|(_, d)| d.audio.count_ones() + d.visual.count_ones())
        .sum();
    println!("labels: {} videos, {positives} positive cells", entries.len());

    let mut artifacts = vec![labels_path];
    if !corpus.videos.is_empty() && corpus.videos.iter().all(|v| v.dense_gt.is_some()) {
        let pairs: Vec<(&DenseLabels, &DenseLabels)> = entries
            .iter()
            .zip(&corpus.videos)
            .map(|((_, p), v)| (p, v.dense_gt.as_ref().expect("checked")))
            .collect();
        let fid = label_fidelity(&pairs, &EvalOpts::default())?;
        println!(
            "fidelity: audio {:.2} visual {:.2} audio_visual {:.2} type_at_av {:.2} event_at_av {:.2}",
            fid.audio, fid.visual, fid.audio_visual, fid.type_at_av, fid.event_at_av
        );
        let fid_path = out.join(FIDELITY_FILE);
        write_json(&fid_path, &fid)?;
        artifacts.push(fid_path);
    } else {
        println!("fidelity: skipped, no dense ground truth in corpus");
    }

    let config = json!({
        "corpus": args.corpus.display().to_string(),
        "logits": logits_path.display().to_string(),
        "prompt_table": table_path.display().to_string(),
        "video_filter": opts.video_filter,
        "modality_agnostic": opts.modality_agnostic,
        "labels_file": LABELS_FILE,
    });
    log.finish(&out, config, &artifacts)
}

fn index_logits(items: Vec<TeacherLogits>) -> BTreeMap<String, TeacherLogits> {
    items.into_iter().map(|l| (l.video_id.clone(), l)).collect()
}
