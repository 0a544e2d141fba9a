//! Model optimization runs.

use std::path::PathBuf;

use anyhow::Result;
use avparse::corpus::{load_corpus_dir, split_corpus, Corpus};
use avparse::labels::io::{read_dense_labels, read_teacher_logits};
use avparse::model::{save_checkpoint, ModelConfig};
use avparse::train::{train, LossMode, TrainAux, TrainConfig};
use clap::Args;
use serde_json::json;

use crate::provenance::{sha256_file, tree_files, RunLog};

use super::{check_geometry, ensure_dir, read_text, require_exists, resolve_out, usage, write_json};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const SNAPSHOTS_DIR: &str = "snapshots";

#[derive(Args)]
pub struct TrainArgs {
    /// Corpus directory.
    #[arg(long)]
    pub corpus: PathBuf,

    /// Per-segment label file; required by objectives with dense targets.
    #[arg(long)]
    pub labels: Option<PathBuf>,

    /// Teacher logits file; required by distillation objectives.
    #[arg(long)]
    pub logits: Option<PathBuf>,

    /// Optimization recipe, `key = value` lines over the standard recipe.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Model geometry, `key = value` lines over the standard preset.
    /// Defaults to the standard preset resized to the corpus.
    #[arg(long)]
    pub model: Option<PathBuf>,

    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,

    /// Objective: base, kd, valor, weak, or mixed:audio=<m>,visual=<m>.
    #[arg(long)]
    pub loss: String,

    /// Fraction of videos held out for validation-based selection.
    #[arg(long, default_value_t = 0.0)]
    pub val_frac: f64,

    /// Seed for the train/validation split.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,

    /// Overrides the recipe's optimization seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(args: &TrainArgs, log: RunLog) -> Result<()> {
    let mode = LossMode::parse(&args.loss)?;
    if mode.requires_dense() && args.labels.is_none() {
        return Err(usage(format!(
            "loss mode {mode} fits per-segment targets; pass --labels with a dense label file"
        )));
    }
    if mode.requires_teacher() && args.logits.is_none() {
        return Err(usage(format!(
            "loss mode {mode} distills teacher outputs; pass --logits with a teacher logits file"
        )));
    }

    require_exists(&args.corpus, "corpus directory")?;
    let corpus = load_corpus_dir(&args.corpus)?;

    let mut cfg = match &args.config {
        Some(path) => {
            require_exists(path, "recipe file")?;
            TrainConfig::parse(&read_text(path)?, &path.display().to_string())?
        }
        None => TrainConfig::standard(),
    };
    cfg.loss_mode = mode;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }

    let model_cfg = match &args.model {
        Some(path) => {
            require_exists(path, "model file")?;
            ModelConfig::parse(&read_text(path)?)?
        }
        None => fitted_model(&corpus),
    };
    check_geometry(&model_cfg, &corpus)?;

    let mut aux = TrainAux::default();
    if let Some(path) = &args.labels {
        require_exists(path, "label file")?;
        for (id, labels) in read_dense_labels(path)? {
            aux.add_dense(id, labels);
        }
    }
    if let Some(path) = &args.logits {
        require_exists(path, "teacher logits file")?;
        aux.add_teacher_logits(&read_teacher_logits(path)?)?;
    }

    let (train_set, val_set, _) =
        split_corpus(corpus.videos, [1.0 - args.val_frac, args.val_frac, 0.0], args.split_seed)?;

    let out = resolve_out(&args.out);
    ensure_dir(&out)?;
    let snapshots = (cfg.checkpoint_every > 0).then(|| out.join(SNAPSHOTS_DIR));
    if let Some(dir) = &snapshots {
        ensure_dir(dir)?;
    }

    let outcome = train(&model_cfg, &cfg, &train_set, &val_set, &aux, snapshots.as_deref())?;

    let ckpt_path = out.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt_path, &outcome.params)?;
    write_json(&out.join(TRAIN_REPORT_FILE), &outcome.report)?;

    let report = &outcome.report;
    println!(
        "trained {}: {} epochs over {} videos, {} params",
        report.loss_mode,
        cfg.epochs,
        train_set.len(),
        report.param_count
    );
    match (report.best_epoch, report.best_val_metric) {
        (Some(epoch), Some(metric)) => {
            println!("selected by {} at epoch {epoch}: {metric:.2}", report.selection)
        }
        _ => println!("selected by {}", report.selection),
    }
    println!("checkpoint sha256: {}", sha256_file(&ckpt_path)?);

    let config = json!({
        "corpus": args.corpus.display().to_string(),
        "labels": args.labels.as_ref().map(|p| p.display().to_string()),
        "logits": args.logits.as_ref().map(|p| p.display().to_string()),
        "loss": report.loss_mode,
        "val_frac": args.val_frac,
        "split_seed": args.split_seed,
        "train_config": cfg.to_text(),
        "model_config": model_cfg.to_text(),
    });
    let artifacts = tree_files(&out)?;
    log.finish(&out, config, &artifacts)
}

/// Standard preset resized to the corpus class count and feature widths.
fn fitted_model(corpus: &Corpus) -> ModelConfig {
    let mut cfg = ModelConfig::standard();
    cfg.num_classes = corpus.classes.len();
    if let Some(v) = corpus.videos.first() {
        cfg.audio_feat_dim = v.feats_audio.cols();
        cfg.visual_feat_dim = v.feats_visual.cols();
    }
    cfg
}
