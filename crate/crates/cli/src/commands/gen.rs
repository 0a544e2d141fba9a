//! Synthetic corpus generation.

use std::path::PathBuf;

use anyhow::Result;
use avparse::corpus::synth::{generate_synthetic, SyntheticSpec};
use clap::Args;

use crate::provenance::{tree_files, RunLog};

use super::{require_exists, resolve_out};

#[derive(Args)]
pub struct GenArgs {
    /// Corpus spec file, `key = value` lines over the defaults.
    #[arg(long)]
    pub spec: PathBuf,

    /// Corpus directory to create.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: &GenArgs, log: RunLog) -> Result<()> {
    require_exists(&args.spec, "spec file")?;
    let spec = SyntheticSpec::load(&args.spec)?;
    let out = resolve_out(&args.out);
    let generated = generate_synthetic(&spec, &out)?;

    let book = &generated.bookkeeping;
    let fraction = if book.total_events == 0 {
        0.0
    } else {
        book.nonaligned_events as f64 / book.total_events as f64
    };
    println!(
        "corpus: {} videos, {} classes, {} segments per video",
        book.videos, spec.classes, spec.segments
    );
    println!(
        "stats: video_level_events={} segment_events={} nonaligned_events={} nonaligned_fraction={fraction:.6}",
        book.video_level_events, book.total_events, book.nonaligned_events
    );

    let artifacts = tree_files(&out)?;
    log.finish(&out, serde_json::to_value(&spec)?, &artifacts)
}
