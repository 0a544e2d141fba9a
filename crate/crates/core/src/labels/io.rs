//! File formats for dense labels and teacher logits.
//!
//! Dense labels are a line-oriented text format, one record per video:
//! the video id, an `A:` line, T rows of C 0/1 tokens, a `V:` line, and T
//! more rows. Teacher logits are a binary container: per video, a
//! `video_id\tT` text line followed by the visual then audio tensor blobs.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::{BinMatrix, DenseLabels, TeacherLogits};
use crate::tensor::io::{read_tensor_from, write_tensor_to};

pub fn write_dense_labels(path: impl AsRef<Path>, entries: &[(String, DenseLabels)]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (id, dense) in entries {
        if id.trim().is_empty() || id.contains(['\n', '\t']) {
            return Err(Error::Validation(format!("video id '{id}' not writable")));
        }
        writeln!(out, "{id}").expect("string write");
        out.push_str("A:\n");
        push_rows(&mut out, &dense.audio);
        out.push_str("V:\n");
        push_rows(&mut out, &dense.visual);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn push_rows(out: &mut String, m: &BinMatrix) {
    for t in 0..m.segments() {
        let row = m.row(t);
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push(if *v == 1 { '1' } else { '0' });
        }
        out.push('\n');
    }
}

pub fn read_dense_labels(path: impl AsRef<Path>) -> Result<Vec<(String, DenseLabels)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let perr = |line: usize, msg: String| Error::parse(name.clone(), Some(line), msg);

    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
        .peekable();

    let mut entries: Vec<(String, DenseLabels)> = Vec::new();
    let mut classes: Option<usize> = None;
    while let Some((id_line, id)) = lines.next() {
        let id = id.trim().to_string();
        match lines.next() {
            Some((_, l)) if l.trim() == "A:" => {}
            Some((n, l)) => return Err(perr(n, format!("expected 'A:' after video id, got '{l}'"))),
            None => return Err(perr(id_line, "record truncated before 'A:'".into())),
        }
        // Audio rows run until the V: marker; their count fixes T.
        let mut audio_rows: Vec<Vec<u8>> = Vec::new();
        loop {
            match lines.next() {
                Some((_, l)) if l.trim() == "V:" => break,
                Some((n, l)) => audio_rows.push(parse_row(l, n, &mut classes, &perr)?),
                None => return Err(perr(id_line, format!("record '{id}' truncated before 'V:'"))),
            }
        }
        if audio_rows.is_empty() {
            return Err(perr(id_line, format!("record '{id}' has no segments")));
        }
        let t_len = audio_rows.len();
        let mut visual_rows: Vec<Vec<u8>> = Vec::with_capacity(t_len);
        for _ in 0..t_len {
            match lines.next() {
                Some((n, l)) => visual_rows.push(parse_row(l, n, &mut classes, &perr)?),
                None => return Err(perr(id_line, format!("record '{id}' has fewer visual rows than audio rows"))),
            }
        }
        let c_len = classes.expect("set by first row");
        let audio = BinMatrix::from_rows(t_len, c_len, audio_rows.concat())?;
        let visual = BinMatrix::from_rows(t_len, c_len, visual_rows.concat())?;
        entries.push((id, DenseLabels::new(audio, visual)?));
    }
    if entries.is_empty() {
        return Err(Error::parse(name, None, "no label records"));
    }
    Ok(entries)
}

fn parse_row(
    line: &str,
    n: usize,
    classes: &mut Option<usize>,
    perr: &impl Fn(usize, String) -> Error,
) -> Result<Vec<u8>> {
    let mut row = Vec::new();
    for tok in line.split_whitespace() {
        match tok {
            "0" => row.push(0u8),
            "1" => row.push(1u8),
            other => return Err(perr(n, format!("label token '{other}' is not 0 or 1"))),
        }
    }
    match *classes {
        None => *classes = Some(row.len()),
        Some(c) if c != row.len() => {
            return Err(perr(n, format!("row has {} tokens, expected {c}", row.len())));
        }
        _ => {}
    }
    Ok(row)
}

pub fn write_teacher_logits(path: impl AsRef<Path>, items: &[TeacherLogits]) -> Result<()> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        if item.video_id.trim().is_empty() || item.video_id.contains(['\n', '\t']) {
            return Err(Error::Validation(format!("video id '{}' not writable", item.video_id)));
        }
        writeln!(w, "{}\t{}", item.video_id, item.segments()).map_err(|e| Error::io(path, e))?;
        write_tensor_to(&mut w, &item.visual, &name)?;
        write_tensor_to(&mut w, &item.audio, &name)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_teacher_logits(path: impl AsRef<Path>) -> Result<Vec<TeacherLogits>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let name = path.display().to_string();
    let mut items = Vec::new();
    let mut classes: Option<usize> = None;
    loop {
        let mut header = Vec::new();
        let n = r
            .read_until(b'\n', &mut header)
            .map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        let header = String::from_utf8(header)
            .map_err(|_| Error::parse(name.clone(), None, "record header is not utf-8"))?;
        let header = header.trim_end_matches('\n');
        let (id, t_str) = header
            .split_once('\t')
            .ok_or_else(|| Error::parse(name.clone(), None, format!("bad record header '{header}'")))?;
        let t_len: usize = t_str
            .trim()
            .parse()
            .map_err(|_| Error::parse(name.clone(), None, format!("bad segment count '{t_str}'")))?;
        let label = format!("record '{id}'");
        let visual = read_tensor_from(&mut r, &label)?;
        let audio = read_tensor_from(&mut r, &label)?;
        let item = TeacherLogits::new(id.to_string(), visual, audio)?;
        if item.segments() != t_len {
            return Err(Error::parse(
                name.clone(),
                None,
                format!("record '{id}' declares {t_len} segments but blob has {}", item.segments()),
            ));
        }
        match classes {
            None => classes = Some(item.classes()),
            Some(c) if c != item.classes() => {
                return Err(Error::parse(
                    name.clone(),
                    None,
                    format!("record '{id}' has {} classes, earlier records have {c}", item.classes()),
                ));
            }
            _ => {}
        }
        items.push(item);
    }
    if items.is_empty() {
        return Err(Error::parse(name, None, "no logit records"));
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn sample_dense() -> Vec<(String, DenseLabels)> {
        let mut a = DenseLabels::zeros(3, 2);
        a.audio.set(0, 0, true);
        a.visual.set(2, 1, true);
        let mut b = DenseLabels::zeros(2, 2);
        b.audio.set(1, 1, true);
        b.visual.set(1, 1, true);
        vec![("video_a".into(), a), ("video_b".into(), b)]
    }

    #[test]
    fn dense_labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.txt");
        let entries = sample_dense();
        write_dense_labels(&path, &entries).unwrap();
        let back = read_dense_labels(&path).unwrap();
        assert_eq!(back, entries);
    }

    #[test]
    fn dense_labels_written_form_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.txt");
        let mut d = DenseLabels::zeros(2, 3);
        d.audio.set(0, 1, true);
        d.visual.set(1, 0, true);
        write_dense_labels(&path, &[("vid".into(), d)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "vid\nA:\n0 1 0\n0 0 0\nV:\n0 0 0\n1 0 0\n");
    }

    #[test]
    fn dense_labels_reject_bad_tokens_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.txt");
        std::fs::write(&path, "vid\nA:\n0 2\nV:\n0 0\n").unwrap();
        let err = read_dense_labels(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains('2'), "{msg}");
    }

    #[test]
    fn dense_labels_reject_ragged_and_truncated_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.txt");
        std::fs::write(&path, "vid\nA:\n0 1\n0\nV:\n0 0\n0 0\n").unwrap();
        let err = read_dense_labels(&path).unwrap_err();
        assert!(err.to_string().contains("tokens"), "{err}");

        std::fs::write(&path, "vid\nA:\n0 1\nV:\n").unwrap();
        let err = read_dense_labels(&path).unwrap_err();
        assert!(err.to_string().contains("fewer visual rows"), "{err}");

        std::fs::write(&path, "vid\nA:\n0 1\n").unwrap();
        assert!(read_dense_labels(&path).is_err());
    }

    #[test]
    fn teacher_logits_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("logits.bin");
        // Values representable exactly in 32 bits survive untouched.
        let mk = |scale: f64, t: usize, c: usize| {
            Tensor::from_vec(
                vec![t, c],
                (0..t * c).map(|i| (i as f64 - 3.0) * scale).collect(),
            )
            .unwrap()
        };
        let items = vec![
            TeacherLogits::new("one".into(), mk(0.25, 2, 3), mk(0.5, 2, 3)).unwrap(),
            TeacherLogits::new("two".into(), mk(1.5, 4, 3), mk(2.0, 4, 3)).unwrap(),
        ];
        write_teacher_logits(&path, &items).unwrap();
        let back = read_teacher_logits(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back.iter().zip(&items) {
            assert_eq!(a.video_id, b.video_id);
            assert_eq!(a.visual.data(), b.visual.data());
            assert_eq!(a.audio.data(), b.audio.data());
        }
    }

    #[test]
    fn teacher_logits_reject_class_count_drift_and_bad_headers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("logits.bin");
        let items = vec![
            TeacherLogits::new(
                "one".into(),
                Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap(),
                Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap(),
            )
            .unwrap(),
            TeacherLogits::new(
                "two".into(),
                Tensor::matrix(1, 3, vec![0.0, 1.0, 2.0]).unwrap(),
                Tensor::matrix(1, 3, vec![0.0, 1.0, 2.0]).unwrap(),
            )
            .unwrap(),
        ];
        write_teacher_logits(&path, &items).unwrap();
        let err = read_teacher_logits(&path).unwrap_err();
        assert!(err.to_string().contains("classes"), "{err}");

        std::fs::write(&path, b"no_tab_here\n").unwrap();
        assert!(read_teacher_logits(&path).is_err());
    }

    #[test]
    fn teacher_logits_detect_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("logits.bin");
        let item = TeacherLogits::new(
            "one".into(),
            Tensor::matrix(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap(),
            Tensor::matrix(2, 2, vec![4.0, 5.0, 6.0, 7.0]).unwrap(),
        )
        .unwrap();
        write_teacher_logits(&path, &[item]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = read_teacher_logits(&path).unwrap_err();
        assert!(err.to_string().to_lowercase().contains("truncat"), "{err}");
    }
}
