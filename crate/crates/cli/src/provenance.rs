//! `run.json` provenance records: the resolved configuration of a run plus
//! SHA-256 hashes of every artifact it wrote. The file holds an array of
//! records, appended in execution order, so a directory that collects
//! outputs from several subcommands (train, then eval) keeps the history of
//! all of them. Wall-clock data lives only in this file, so all other
//! outputs stay byte-identical across reruns with equal inputs and seeds.

use std::collections::BTreeMap;
use std::ffi::OsStr;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const RUN_FILE: &str = "run.json";

#[derive(Serialize)]
struct RunRecord<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'static str,
    argv: &'a [String],
    jobs: usize,
    config: &'a serde_json::Value,
    started_unix_ms: u64,
    wall_ms: u64,
    artifacts: &'a BTreeMap<String, String>,
}

/// Started when a subcommand begins; `finish` stamps the record to disk.
pub struct RunLog {
    subcommand: &'static str,
    argv: Vec<String>,
    jobs: usize,
    started: Instant,
    started_unix_ms: u64,
}

impl RunLog {
    pub fn start(subcommand: &'static str, jobs: usize) -> RunLog {
        RunLog {
            subcommand,
            argv: std::env::args().skip(1).collect(),
            jobs,
            started: Instant::now(),
            started_unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
        }
    }

    /// Appends this run's record to `run.json` in `dir`, hashing the listed
    /// artifact files. Artifact keys are paths relative to `dir`.
    pub fn finish(self, dir: &Path, config: serde_json::Value, artifacts: &[PathBuf]) -> Result<()> {
        let mut hashes = BTreeMap::new();
        for path in artifacts {
            hashes.insert(relative_name(dir, path), sha256_file(path)?);
        }
        let record = RunRecord {
            tool: "avparse",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: self.subcommand,
            argv: &self.argv,
            jobs: self.jobs,
            config: &config,
            started_unix_ms: self.started_unix_ms,
            wall_ms: self.started.elapsed().as_millis() as u64,
            artifacts: &hashes,
        };
        let path = dir.join(RUN_FILE);
        // An unreadable history never fails the run that is appending to it.
        let mut records: Vec<serde_json::Value> = match std::fs::read_to_string(&path) {
            Ok(text) => match serde_json::from_str(&text) {
                Ok(serde_json::Value::Array(items)) => items,
                Ok(other) => vec![other],
                Err(_) => Vec::new(),
            },
            Err(_) => Vec::new(),
        };
        records.push(serde_json::to_value(&record).context("encoding run record")?);
        let body = serde_json::to_string_pretty(&records).context("encoding run record")? + "\n";
        std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading {} for hashing", path.display()))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Every file under `root` except the provenance record itself, sorted by
/// path so artifact maps are stable.
pub fn tree_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    collect(root, &mut files)?;
    files.sort();
    Ok(files)
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))?;
    for entry in entries {
        let entry = entry.with_context(|| format!("listing {}", dir.display()))?;
        let path = entry.path();
        if path.is_dir() {
            collect(&path, out)?;
        } else if path.file_name() != Some(OsStr::new(RUN_FILE)) {
            out.push(path);
        }
    }
    Ok(())
}

fn relative_name(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.to_string_lossy().replace(std::path::MAIN_SEPARATOR, "/")
}
