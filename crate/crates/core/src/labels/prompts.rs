//! Caption/threshold table and threshold file formats.
//!
//! The shipped table pairs every class with the visual and audio captions
//! used to prompt the frozen teachers, plus hand-tuned logit thresholds. It
//! is a 5-column TSV; a bare threshold file drops the caption columns.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::Thresholds;

const LLP_TABLE: &str = include_str!("../../assets/llp_prompts.tsv");

const TABLE_HEADER: &str = "class\tvisual_caption\taudio_caption\ttheta_visual\ttheta_audio";
const THRESHOLDS_HEADER: &str = "class\ttheta_visual\ttheta_audio";

#[derive(Debug, Clone, PartialEq)]
pub struct PromptRow {
    pub class: String,
    pub visual_caption: String,
    pub audio_caption: String,
    pub theta_visual: f64,
    pub theta_audio: f64,
}

/// Per-class captions and thresholds, in class order.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTable {
    pub rows: Vec<PromptRow>,
}

impl PromptTable {
    /// The shipped 25-class table.
    pub fn llp_default() -> PromptTable {
        PromptTable::parse(LLP_TABLE).expect("shipped table parses")
    }

    pub fn parse(text: &str) -> Result<PromptTable> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse("<prompt table>", Some(1), "empty file"))?;
        if header.trim_end() != TABLE_HEADER {
            return Err(Error::parse(
                "<prompt table>",
                Some(1),
                format!("expected header '{TABLE_HEADER}', got '{header}'"),
            ));
        }
        let mut rows = Vec::new();
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::parse(
                    "<prompt table>",
                    Some(idx + 1),
                    format!("expected 5 tab-separated fields, got {}", fields.len()),
                ));
            }
            let theta_visual = parse_theta(fields[3], idx + 1)?;
            let theta_audio = parse_theta(fields[4], idx + 1)?;
            rows.push(PromptRow {
                class: fields[0].to_string(),
                visual_caption: fields[1].to_string(),
                audio_caption: fields[2].to_string(),
                theta_visual,
                theta_audio,
            });
        }
        if rows.is_empty() {
            return Err(Error::parse("<prompt table>", None, "no data rows"));
        }
        Ok(PromptTable { rows })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PromptTable> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PromptTable::parse(&text).map_err(|e| at_path(e, path))
    }

    pub fn classes(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.class.clone()).collect()
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            visual: self.rows.iter().map(|r| r.theta_visual).collect(),
            audio: self.rows.iter().map(|r| r.theta_audio).collect(),
        }
    }

    /// Checks that the table covers exactly the given classes in order.
    pub fn validate_classes(&self, classes: &[String]) -> Result<()> {
        if self.rows.len() != classes.len() {
            return Err(Error::Validation(format!(
                "caption table has {} classes, corpus has {}",
                self.rows.len(),
                classes.len()
            )));
        }
        for (row, want) in self.rows.iter().zip(classes) {
            if &row.class != want {
                return Err(Error::Validation(format!(
                    "caption table class '{}' does not match corpus class '{want}'",
                    row.class
                )));
            }
        }
        Ok(())
    }
}

fn parse_theta(field: &str, line: usize) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::parse("<prompt table>", Some(line), format!("bad threshold '{field}'")))?;
    if !v.is_finite() {
        return Err(Error::parse("<prompt table>", Some(line), format!("non-finite threshold '{field}'")));
    }
    Ok(v)
}

fn at_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Parse { line, msg, .. } => Error::Parse { path: path.display().to_string(), line, msg },
        other => other,
    }
}

/// Writes per-class thresholds as a 3-column TSV.
pub fn write_thresholds(path: impl AsRef<Path>, classes: &[String], th: &Thresholds) -> Result<()> {
    let path = path.as_ref();
    if classes.len() != th.classes() {
        return Err(Error::dim("thresholds file", format!("{} classes", classes.len()), format!("{}", th.classes())));
    }
    let mut out = String::new();
    out.push_str(THRESHOLDS_HEADER);
    out.push('\n');
    for (i, class) in classes.iter().enumerate() {
        writeln!(out, "{class}\t{}\t{}", th.visual[i], th.audio[i]).expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads thresholds from either a 3-column threshold file or a full
/// 5-column caption table, telling them apart by the header line.
pub fn read_thresholds(path: impl AsRef<Path>, classes: &[String]) -> Result<Thresholds> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header = text.lines().next().unwrap_or("").trim_end();
    if header == TABLE_HEADER {
        let table = PromptTable::parse(&text).map_err(|e| at_path(e, path))?;
        table.validate_classes(classes)?;
        return Ok(table.thresholds());
    }
    if header != THRESHOLDS_HEADER {
        return Err(Error::parse(
            path.display().to_string(),
            Some(1),
            format!("unrecognized header '{header}'; expected '{THRESHOLDS_HEADER}' or the caption table header"),
        ));
    }
    let mut visual = Vec::new();
    let mut audio = Vec::new();
    let mut seen = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                path.display().to_string(),
                Some(idx + 1),
                format!("expected 3 tab-separated fields, got {}", fields.len()),
            ));
        }
        seen.push(fields[0].to_string());
        visual.push(parse_theta(fields[1], idx + 1).map_err(|e| at_path(e, path))?);
        audio.push(parse_theta(fields[2], idx + 1).map_err(|e| at_path(e, path))?);
    }
    if seen != classes {
        return Err(Error::Validation(format!(
            "threshold file classes do not match corpus: file starts {:?}, corpus starts {:?}",
            seen.first(),
            classes.first()
        )));
    }
    Thresholds::new(visual, audio)
}
