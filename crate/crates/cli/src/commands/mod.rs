//! Subcommand implementations. Shared conventions: required input paths are
//! checked up front and reported as usage errors; relative output paths
//! resolve under the directory named by `AVPARSE_OUT` when it is set.

pub mod calibrate;
pub mod elaborate;
pub mod eval;
pub mod gen;
pub mod report;
pub mod train;

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// Environment variable naming the default output root.
pub const OUT_ROOT_VAR: &str = "AVPARSE_OUT";

/// Usage and configuration mistakes; `main` turns these into exit code 2.
pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(avparse::Error::Usage(msg.into()))
}

pub fn require_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

pub fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUT_ROOT_VAR) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Parent directory of an output file, created if needed.
pub fn parent_dir(path: &Path) -> Result<PathBuf> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    ensure_dir(&dir)?;
    Ok(dir)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value).context("encoding JSON")? + "\n";
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Model geometry must match the corpus before any heavy work starts.
pub fn check_geometry(model: &avparse::model::ModelConfig, corpus: &avparse::corpus::Corpus) -> Result<()> {
    if model.num_classes != corpus.classes.len() {
        return Err(usage(format!(
            "model covers {} classes, corpus has {}",
            model.num_classes,
            corpus.classes.len()
        )));
    }
    if let Some(v) = corpus.videos.first() {
        let (audio, visual) = (v.feats_audio.cols(), v.feats_visual.cols());
        if model.audio_feat_dim != audio || model.visual_feat_dim != visual {
            return Err(usage(format!(
                "model expects feature widths {}/{}, corpus provides {audio}/{visual}",
                model.audio_feat_dim, model.visual_feat_dim
            )));
        }
    }
    Ok(())
}
