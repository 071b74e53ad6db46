//! The CSV waveform file format.
//!
//! ```text
//! # fs=125 t0=1551657600 patient=P001
//! 0.012
//! 0.015
//! ```
//!
//! A two-column `t,amplitude` variant is also accepted, where `t` is seconds
//! after `t0` and must be strictly increasing. Rows whose amplitude is
//! non-finite (or empty) end the current segment; so do time gaps larger
//! than 1.5 sample periods in the two-column variant.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{SourceSegment, Waveform};
use crate::{Error, Result};

struct Header {
    fs: Option<f64>,
    t0: f64,
    patient: Option<String>,
}

fn parse_header(line: &str) -> Result<Header> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| Error::MalformedHeader(format!("expected '# fs=..', got {line:?}")))?;
    let mut header = Header {
        fs: None,
        t0: 0.0,
        patient: None,
    };
    for token in body.split_whitespace() {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| Error::MalformedHeader(format!("token {token:?} is not key=value")))?;
        let number = || {
            value
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::MalformedHeader(format!("{key}={value:?} is not a number")))
        };
        match key {
            "fs" => {
                let fs = number()?;
                if fs <= 0.0 {
                    return Err(Error::MalformedHeader(format!("fs={value} must be positive")));
                }
                header.fs = Some(fs);
            }
            "t0" => header.t0 = number()?,
            "patient" => header.patient = Some(value.to_string()),
            _ => {}
        }
    }
    Ok(header)
}

/// Parse waveform text. `file_id` names the source in segment ids and is
/// the fallback patient id.
pub fn parse_waveform(text: &str, file_id: &str, fs_hint: Option<f64>) -> Result<Vec<SourceSegment>> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::MalformedHeader("empty file".into()))?;
    let header = parse_header(first.trim())?;
    let patient = header.patient.clone().unwrap_or_else(|| file_id.to_string());

    let mut rows: Vec<(usize, Option<f64>, f64)> = Vec::new();
    let mut two_column = None;
    for (idx, raw) in lines {
        let line_no = idx; // data rows are numbered from 1, after the header
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let first_field = fields.next().unwrap_or("");
        let second_field = fields.next();
        let is_two = *two_column.get_or_insert(second_field.is_some());
        if is_two != second_field.is_some() {
            return Err(Error::Parse {
                line: line_no,
                msg: "inconsistent column count".into(),
            });
        }
        let parse_amp = |s: &str| -> Result<f64> {
            if s.is_empty() {
                return Ok(f64::NAN);
            }
            s.parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad amplitude {s:?}"),
            })
        };
        if is_two {
            let t = match first_field.parse::<f64>() {
                Ok(t) if t.is_finite() => t,
                // tolerate a column-name row before any data
                _ if rows.is_empty() && first_field.chars().any(|c| c.is_alphabetic()) => continue,
                _ => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("bad timestamp {first_field:?}"),
                    })
                }
            };
            if let Some(&(_, Some(prev), _)) = rows.last() {
                if t <= prev {
                    return Err(Error::NonMonotoneTimestamps { line: line_no });
                }
            }
            rows.push((line_no, Some(t), parse_amp(second_field.unwrap())?));
        } else {
            rows.push((line_no, None, parse_amp(first_field)?));
        }
    }

    let fs = match (header.fs, fs_hint) {
        (Some(fs), _) | (None, Some(fs)) => fs,
        (None, None) => infer_fs(&rows).ok_or_else(|| Error::MalformedHeader("fs missing and not inferable".into()))?,
    };

    let mut segments = Vec::new();
    let mut current: Vec<f64> = Vec::new();
    let mut start_time = 0.0;
    let mut prev_t: Option<f64> = None;
    let mut flush = |samples: &mut Vec<f64>, start: f64| -> Result<()> {
        if samples.len() >= 2 {
            let id = format!("{file_id}#{}", segments.len());
            let w = Waveform::new(std::mem::take(samples), fs, header.t0 + start, patient.clone())?;
            segments.push(SourceSegment {
                waveform: w,
                source_file_id: id,
            });
        }
        samples.clear();
        Ok(())
    };
    for (row, &(_, t, amp)) in rows.iter().enumerate() {
        let time = t.unwrap_or(row as f64 / fs);
        let gap = matches!((t, prev_t), (Some(t), Some(p)) if t - p > 1.5 / fs);
        prev_t = t.or(prev_t);
        if !amp.is_finite() || gap {
            flush(&mut current, start_time)?;
            if !amp.is_finite() {
                continue;
            }
        }
        if current.is_empty() {
            start_time = time;
        }
        current.push(amp);
    }
    flush(&mut current, start_time)?;
    Ok(segments)
}

fn infer_fs(rows: &[(usize, Option<f64>, f64)]) -> Option<f64> {
    let mut dts: Vec<f64> = rows.windows(2).filter_map(|w| Some(w[1].1? - w[0].1?)).collect();
    if dts.is_empty() {
        return None;
    }
    dts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(1.0 / dts[dts.len() / 2])
}

/// Load one CSV waveform file.
pub fn load_waveform(path: &Path, fs_hint: Option<f64>) -> Result<Vec<SourceSegment>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_waveform(&text, &file_id, fs_hint)
}

/// Write the single-column variant with 6 decimal places.
pub fn write_waveform(w: &Waveform, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "# fs={} t0={} patient={}", w.fs, w.t0, w.patient_id)?;
    for v in &w.samples {
        writeln!(out, "{v:.6}")?;
    }
    Ok(())
}
