//! Comparison tables and plot data for finished runs. Every number is
//! copied from the runs' report files, never recomputed, so tables cannot
//! drift from the evaluations they cite.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use avparse::metrics::MetricsReport;
use avparse::train::TrainReport;
use clap::Args;
use serde_json::json;

use super::{ensure_dir, require_exists, resolve_out, usage};
use crate::provenance::RunLog;

/// Scored results, as written by the eval subcommand.
pub const REPORT_FILE: &str = "report.json";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const SEGMENT_PLOT_FILE: &str = "segment_scores.csv";
pub const EVENT_PLOT_FILE: &str = "event_scores.csv";
pub const PER_CLASS_PLOT_FILE: &str = "per_class.csv";
pub const CURVES_PLOT_FILE: &str = "training_curves.csv";

#[derive(Args)]
pub struct ReportArgs {
    /// Run directories holding a report.json (train_report.json is picked
    /// up when present), or direct paths to report files.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,

    /// Output directory for the comparison and plot CSVs.
    #[arg(long)]
    pub out: PathBuf,
}

struct RunData {
    label: String,
    report: MetricsReport,
    train: Option<TrainReport>,
}

pub fn run(args: &ReportArgs, log: RunLog) -> Result<()> {
    let mut runs = Vec::with_capacity(args.runs.len());
    for path in &args.runs {
        runs.push(load_run(path)?);
    }
    dedup_labels(&mut runs);

    let rows = metric_rows(&runs);
    print_table(&runs, &rows);

    let out = resolve_out(&args.out);
    ensure_dir(&out)?;
    let mut artifacts = Vec::new();

    let comparison = out.join(COMPARISON_FILE);
    write_text(&comparison, &comparison_csv(&runs, &rows))?;
    artifacts.push(comparison);

    let segment = out.join(SEGMENT_PLOT_FILE);
    write_text(&segment, &level_csv(&runs, false))?;
    artifacts.push(segment);

    let event = out.join(EVENT_PLOT_FILE);
    write_text(&event, &level_csv(&runs, true))?;
    artifacts.push(event);

    if runs.iter().any(|r| !r.report.per_class.is_empty()) {
        let per_class = out.join(PER_CLASS_PLOT_FILE);
        write_text(&per_class, &per_class_csv(&runs))?;
        artifacts.push(per_class);
    }
    if runs.iter().any(|r| r.train.is_some()) {
        let curves = out.join(CURVES_PLOT_FILE);
        write_text(&curves, &curves_csv(&runs))?;
        artifacts.push(curves);
    }

    let config = json!({
        "runs": args.runs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "labels": runs.iter().map(|r| r.label.clone()).collect::<Vec<_>>(),
    });
    log.finish(&out, config, &artifacts)
}

fn load_run(path: &Path) -> Result<RunData> {
    require_exists(path, "run path")?;
    let (report_path, dir) = if path.is_dir() {
        (path.join(REPORT_FILE), path.to_path_buf())
    } else {
        (path.to_path_buf(), path.parent().unwrap_or(Path::new(".")).to_path_buf())
    };
    if !report_path.exists() {
        return Err(usage(format!(
            "{} has no {REPORT_FILE}; score the run with eval first",
            path.display()
        )));
    }
    let report: MetricsReport = parse_json(&report_path)?;
    let train_path = dir.join(super::train::TRAIN_REPORT_FILE);
    let train = if train_path.exists() { Some(parse_json(&train_path)?) } else { None };
    let label = dir
        .file_name()
        .map(|n| n.to_string_lossy().replace(',', "_"))
        .unwrap_or_else(|| "run".to_string());
    Ok(RunData { label, report, train })
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| {
        anyhow::Error::new(avparse::Error::parse(path.display().to_string(), None, e.to_string()))
    })
}

fn dedup_labels(runs: &mut [RunData]) {
    for i in 0..runs.len() {
        let mut clashes = 0;
        for j in 0..i {
            if runs[j].label == runs[i].label {
                clashes += 1;
            }
        }
        if clashes > 0 {
            runs[i].label = format!("{}#{}", runs[i].label, clashes + 1);
        }
    }
}

type Row = (String, Vec<Option<f64>>);

fn metric_rows(runs: &[RunData]) -> Vec<Row> {
    let mut rows: Vec<Row> = Vec::new();
    let level = |get: fn(&MetricsReport) -> f64| -> Vec<Option<f64>> {
        runs.iter().map(|r| Some(get(&r.report))).collect()
    };
    rows.push(("segment_audio".into(), level(|r| r.segment.audio)));
    rows.push(("segment_visual".into(), level(|r| r.segment.visual)));
    rows.push(("segment_audio_visual".into(), level(|r| r.segment.audio_visual)));
    rows.push(("segment_type_at_av".into(), level(|r| r.segment.type_at_av)));
    rows.push(("segment_event_at_av".into(), level(|r| r.segment.event_at_av)));
    rows.push(("event_audio".into(), level(|r| r.event.audio)));
    rows.push(("event_visual".into(), level(|r| r.event.visual)));
    rows.push(("event_audio_visual".into(), level(|r| r.event.audio_visual)));
    rows.push(("event_type_at_av".into(), level(|r| r.event.type_at_av)));
    rows.push(("event_event_at_av".into(), level(|r| r.event.event_at_av)));
    if runs.iter().any(|r| r.report.ave_accuracy.is_some()) {
        rows.push((
            "segment_accuracy".into(),
            runs.iter().map(|r| r.report.ave_accuracy).collect(),
        ));
    }
    if runs.iter().any(|r| r.report.nonalignment.is_some()) {
        rows.push((
            "nonalignment_success_rate".into(),
            runs.iter()
                .map(|r| r.report.nonalignment.as_ref().and_then(|n| n.success_rate))
                .collect(),
        ));
    }
    rows
}

/// Delta columns compare every later run against the first one.
fn comparison_csv(runs: &[RunData], rows: &[Row]) -> String {
    let mut body = String::from("metric");
    for r in runs {
        write!(body, ",{}", r.label).expect("string write");
    }
    if runs.len() >= 2 {
        for r in &runs[1..] {
            write!(body, ",delta_{}", r.label).expect("string write");
        }
    }
    body.push('\n');
    for (name, values) in rows {
        body.push_str(name);
        for v in values {
            match v {
                Some(v) => write!(body, ",{v}").expect("string write"),
                None => body.push(','),
            }
        }
        if runs.len() >= 2 {
            for v in &values[1..] {
                match (values[0], v) {
                    (Some(a), Some(b)) => write!(body, ",{}", b - a).expect("string write"),
                    _ => body.push(','),
                }
            }
        }
        body.push('\n');
    }
    body
}

fn print_table(runs: &[RunData], rows: &[Row]) {
    let name_width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
    // Delta headers carry a two-character prefix; keep two spaces of air.
    let col_width = runs.iter().map(|r| r.label.len() + 2).max().unwrap_or(8).max(8) + 2;
    print!("{:<name_width$}", "metric");
    for r in runs {
        print!("{:>col_width$}", r.label);
    }
    for r in runs.iter().skip(1) {
        print!("{:>col_width$}", format!("d:{}", r.label));
    }
    println!();
    for (name, values) in rows {
        print!("{name:<name_width$}");
        for v in values {
            match v {
                Some(v) => print!("{:>col_width$}", format!("{v:.2}")),
                None => print!("{:>col_width$}", "-"),
            }
        }
        for v in values.iter().skip(1) {
            match (values[0], v) {
                (Some(a), Some(b)) => print!("{:>col_width$}", format!("{:+.2}", b - a)),
                _ => print!("{:>col_width$}", "-"),
            }
        }
        println!();
    }
}

fn level_csv(runs: &[RunData], event_level: bool) -> String {
    let mut body = String::from("run,audio,visual,audio_visual,type_at_av,event_at_av\n");
    for r in runs {
        let s = if event_level { &r.report.event } else { &r.report.segment };
        writeln!(
            body,
            "{},{},{},{},{},{}",
            r.label, s.audio, s.visual, s.audio_visual, s.type_at_av, s.event_at_av
        )
        .expect("string write");
    }
    body
}

fn per_class_csv(runs: &[RunData]) -> String {
    let mut body = String::from("run,modality,class_index,f\n");
    for r in runs {
        for row in &r.report.per_class {
            writeln!(body, "{},audio,{},{}", r.label, row.class_index, row.audio)
                .expect("string write");
        }
        for row in &r.report.per_class {
            writeln!(body, "{},visual,{},{}", r.label, row.class_index, row.visual)
                .expect("string write");
        }
    }
    body
}

fn curves_csv(runs: &[RunData]) -> String {
    let mut body =
        String::from("run,epoch,lr,loss_total,loss_video,loss_audio,loss_visual,val_metric\n");
    for r in runs {
        let Some(train) = &r.train else { continue };
        for e in &train.epochs {
            let val = e.val_metric.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                body,
                "{},{},{},{},{},{},{},{val}",
                r.label, e.epoch, e.lr, e.loss_total, e.loss_video, e.loss_audio, e.loss_visual
            )
            .expect("string write");
        }
    }
    body
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}
