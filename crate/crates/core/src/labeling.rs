//! Retrospective labeling around the onset and fixed-length input windows.
//!
//! Times are minutes relative to the anchor (negative before it). Feature
//! rows are first aggregated to a one-minute grid; a timestep stands for the
//! minute of data ending at its timestamp, so a window's latest timestamp
//! is also the latest instant any of its data comes from.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::biomarkers::{Feature, FeatureMatrix, COLUMN_ORDER_VERSION};
use crate::rng::{self, Purpose};
use crate::{Error, Result};

/// Fraction of gap cells above which a window is discarded.
pub const MAX_GAP_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelParams {
    /// Warning-window length (min).
    pub t_w: f64,
    /// Buffer half-width around `-t_w` (min).
    pub delta_pre: f64,
    /// Blind spot before onset (min).
    pub delta_0: f64,
    /// Start of the labeled horizon (min before onset).
    pub horizon_start: f64,
}

impl LabelParams {
    pub fn new(t_w: f64) -> Self {
        LabelParams {
            t_w,
            delta_pre: 15.0,
            delta_0: 15.0,
            horizon_start: 480.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.t_w, self.delta_pre, self.delta_0, self.horizon_start]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if !finite || self.t_w - self.delta_pre <= self.delta_0 || self.t_w + self.delta_pre >= self.horizon_start {
            return Err(Error::InvalidParams(format!(
                "label params need T_w - delta_pre > delta_0 and T_w + delta_pre < horizon_start: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Zone {
    Warning,
    Normal,
    Buffer,
    LeadTime,
    OutOfRange,
}

impl Zone {
    /// Class label for trainable zones.
    pub fn label(self) -> Option<u8> {
        match self {
            Zone::Warning => Some(1),
            Zone::Normal => Some(0),
            _ => None,
        }
    }
}

/// Zone of time `t` (minutes relative to onset). Boundary points shared by
/// an exclusion interval and a labeled one go to the exclusion.
pub fn assign_label(t: f64, p: &LabelParams) -> Zone {
    let warn_start = -(p.t_w - p.delta_pre);
    let buffer_start = -(p.t_w + p.delta_pre);
    if t.is_nan() || t < -p.horizon_start || t > 0.0 {
        Zone::OutOfRange
    } else if t > -p.delta_0 {
        Zone::LeadTime
    } else if t >= warn_start {
        Zone::Warning
    } else if t >= buffer_start {
        Zone::Buffer
    } else {
        Zone::Normal
    }
}

/// What the relative time axis of a patient is anchored to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Anchor {
    /// A resolved stroke onset (epoch s).
    Onset(f64),
    /// End of a non-event record; only Normal windows are cut.
    PseudoOnset(f64),
}

impl Anchor {
    pub fn epoch(self) -> f64 {
        match self {
            Anchor::Onset(t) | Anchor::PseudoOnset(t) => t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledWindow {
    pub patient_id: String,
    /// Window centre, minutes relative to the anchor.
    pub t_center: f64,
    pub label: u8,
    /// `length x n_features` values, timestep-major.
    pub values: Vec<f64>,
}

/// One-minute medians: `grid[j][f]` for minute `[-horizon + j, -horizon + j + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MinuteGrid {
    pub start_min: i64,
    pub cells: Vec<[Option<f64>; 17]>,
    /// Segment ids present in each minute.
    pub segments: Vec<Vec<usize>>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Aggregate rows with anchor-relative time in `[-horizon, 0)` into minutes.
pub fn minute_grid(m: &FeatureMatrix, anchor_epoch: f64, horizon_min: f64) -> MinuteGrid {
    let start_min = -(horizon_min.ceil() as i64);
    let n = (-start_min) as usize;
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, &t) in m.times.iter().enumerate() {
        let rel = (t - anchor_epoch) / 60.0;
        let j = (rel - start_min as f64).floor();
        if j >= 0.0 && (j as usize) < n {
            buckets[j as usize].push(i);
        }
    }
    let mut cells = Vec::with_capacity(n);
    let mut segments = Vec::with_capacity(n);
    let mut scratch = Vec::new();
    for rows in &buckets {
        let mut cell = [None; 17];
        for (f, slot) in cell.iter_mut().enumerate() {
            scratch.clear();
            scratch.extend(rows.iter().filter_map(|&i| m.rows[i][f]));
            if !scratch.is_empty() {
                *slot = Some(median(&mut scratch));
            }
        }
        cells.push(cell);
        let mut segs: Vec<usize> = rows.iter().map(|&i| m.segments[i]).collect();
        segs.sort_unstable();
        segs.dedup();
        segments.push(segs);
    }
    MinuteGrid {
        start_min,
        cells,
        segments,
    }
}

/// Forward-fill each feature inside the window, then fill leading gaps with
/// the feature's window mean (0 when the whole column is missing).
fn impute(cells: &[[Option<f64>; 17]]) -> Vec<f64> {
    let l = cells.len();
    let mut out = vec![0.0; l * 17];
    for f in 0..17 {
        let present: Vec<f64> = cells.iter().filter_map(|c| c[f]).collect();
        let mean = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        let mut last = None;
        for (t, c) in cells.iter().enumerate() {
            if c[f].is_some() {
                last = c[f];
            }
            out[t * 17 + f] = last.unwrap_or(mean);
        }
    }
    out
}

/// Why a candidate window was not emitted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowStats {
    pub candidates: usize,
    pub emitted: usize,
    pub mixed_zone: usize,
    pub unlabeled_zone: usize,
    pub too_many_gaps: usize,
    pub crosses_segments: usize,
}

/// Cut labeled windows of `length` minutes every `stride` minutes, starting
/// at `-horizon_start`.
pub fn window_dataset(
    m: &FeatureMatrix,
    anchor: Option<Anchor>,
    p: &LabelParams,
    length: usize,
    stride: usize,
) -> Result<(Vec<LabeledWindow>, WindowStats)> {
    p.validate()?;
    if length == 0 || stride == 0 {
        return Err(Error::InvalidParams("window length and stride must be positive".into()));
    }
    let anchor = anchor.ok_or_else(|| Error::OnsetMissing(m.patient_id.clone()))?;
    let grid = minute_grid(m, anchor.epoch(), p.horizon_start);
    let mut stats = WindowStats::default();
    let mut out = Vec::new();
    let mut s = 0;
    while s + length <= grid.cells.len() {
        stats.candidates += 1;
        let start = (grid.start_min + s as i64) as f64;
        let end = start + length as f64;
        // every minute [j, j+1) of data must sit in the same zone
        let zones: Vec<Zone> = (0..length)
            .flat_map(|k| {
                let j = start + k as f64;
                [assign_label(j, p), assign_label(j + 1.0 - 1e-6, p)]
            })
            .collect();
        let zone = zones[0];
        let center = 0.5 * (start + end);
        let cells = &grid.cells[s..s + length];
        let gaps = cells.iter().flat_map(|c| c.iter()).filter(|v| v.is_none()).count();
        let mut segs: Vec<usize> = grid.segments[s..s + length].iter().flatten().copied().collect();
        segs.sort_unstable();
        segs.dedup();

        let emit_zone = match anchor {
            Anchor::Onset(_) => zone.label().is_some(),
            Anchor::PseudoOnset(_) => zone == Zone::Normal,
        };
        if zones.iter().any(|z| *z != zone) {
            stats.mixed_zone += 1;
        } else if !emit_zone || assign_label(center, p) != zone {
            stats.unlabeled_zone += 1;
        } else if segs.len() > 1 {
            stats.crosses_segments += 1;
        } else if gaps as f64 > MAX_GAP_FRACTION * (length * 17) as f64 {
            stats.too_many_gaps += 1;
        } else {
            stats.emitted += 1;
            out.push(LabeledWindow {
                patient_id: m.patient_id.clone(),
                t_center: center,
                label: zone.label().unwrap(),
                values: impute(cells),
            });
        }
        s += stride;
    }
    Ok((out, stats))
}

/// Windows of many patients plus the parameters that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub params: LabelParams,
    pub length: usize,
    pub stride: usize,
    pub windows: Vec<LabeledWindow>,
}

/// Manifest persisted next to the dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub length: usize,
    pub n_features: usize,
    pub column_order_version: u32,
    pub features: Vec<String>,
    pub params: LabelParams,
    pub stride: usize,
    pub n_windows: usize,
    pub n_warning: usize,
    pub n_patients: usize,
}

impl LabeledDataset {
    /// Sort windows by `(patient_id, t_center)`.
    pub fn sort(&mut self) {
        self.windows
            .sort_by(|a, b| a.patient_id.cmp(&b.patient_id).then(a.t_center.total_cmp(&b.t_center)));
    }

    pub fn manifest(&self) -> DatasetManifest {
        let mut patients: Vec<&str> = self.windows.iter().map(|w| w.patient_id.as_str()).collect();
        patients.dedup();
        DatasetManifest {
            length: self.length,
            n_features: 17,
            column_order_version: COLUMN_ORDER_VERSION,
            features: Feature::ALL.iter().map(|f| f.name().to_string()).collect(),
            params: self.params,
            stride: self.stride,
            n_windows: self.windows.len(),
            n_warning: self.windows.iter().filter(|w| w.label == 1).count(),
            n_patients: patients.len(),
        }
    }

    /// `patient_id,t_center,label` then `t{k}_{feature}` columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("patient_id,t_center,label");
        for k in 0..self.length {
            for f in Feature::ALL {
                let _ = write!(out, ",t{k}_{}", f.name());
            }
        }
        out.push('\n');
        for w in &self.windows {
            let _ = write!(out, "{},{},{}", w.patient_id, w.t_center, w.label);
            for v in &w.values {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, manifest: &DatasetManifest) -> Result<Self> {
        let width = manifest.length * manifest.n_features;
        let mut windows = Vec::with_capacity(manifest.n_windows);
        for (i, line) in text.lines().enumerate().skip(1) {
            let bad = |msg: String| Error::Parse { line: i + 1, msg };
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 3 + width {
                return Err(bad(format!("{} cells, expected {}", cells.len(), 3 + width)));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
            windows.push(LabeledWindow {
                patient_id: cells[0].to_string(),
                t_center: num(cells[1])?,
                label: cells[2].parse().map_err(|_| bad(format!("bad label {:?}", cells[2])))?,
                values: cells[3..].iter().map(|c| num(c)).collect::<Result<_>>()?,
            });
        }
        Ok(LabeledDataset {
            params: manifest.params,
            length: manifest.length,
            stride: manifest.stride,
            windows,
        })
    }
}

/// Permute labels across all windows (null-model check).
pub fn permute_labels(windows: &mut [LabeledWindow], seed: u64) {
    let mut labels: Vec<u8> = windows.iter().map(|w| w.label).collect();
    labels.shuffle(&mut rng::stream(seed, Purpose::LabelPermutation, 0));
    for (w, l) in windows.iter_mut().zip(labels) {
        w.label = l;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p360() -> LabelParams {
        LabelParams::new(360.0)
    }

    #[test]
    fn zone_examples() {
        let p = p360();
        assert_eq!(assign_label(-200.0, &p), Zone::Warning);
        assert_eq!(assign_label(-400.0, &p), Zone::Normal);
        assert_eq!(assign_label(-360.0, &p), Zone::Buffer);
        assert_eq!(assign_label(-10.0, &p), Zone::LeadTime);
        assert_eq!(assign_label(-500.0, &p), Zone::OutOfRange);
        assert_eq!(assign_label(1.0, &p), Zone::OutOfRange);
    }

    #[test]
    fn boundaries() {
        let p = p360();
        assert_eq!(assign_label(-15.0, &p), Zone::Warning);
        assert_eq!(assign_label(-345.0, &p), Zone::Warning);
        assert_eq!(assign_label(-375.0, &p), Zone::Buffer);
        assert_eq!(assign_label(-480.0, &p), Zone::Normal);
        assert_eq!(assign_label(0.0, &p), Zone::LeadTime);
    }

    #[test]
    fn invalid_params() {
        assert!(LabelParams {
            delta_pre: 200.0,
            ..p360()
        }
        .validate()
        .is_err());
        assert!(LabelParams {
            horizon_start: 370.0,
            ..p360()
        }
        .validate()
        .is_err());
        assert!(p360().validate().is_ok());
    }

    fn matrix(minutes: std::ops::Range<i64>, anchor: f64) -> FeatureMatrix {
        let times: Vec<f64> = minutes
            .clone()
            .flat_map(|m| (0..4).map(move |k| anchor + m as f64 * 60.0 + 7.0 + k as f64 * 12.0))
            .collect();
        FeatureMatrix {
            patient_id: "p".into(),
            segments: vec![0; times.len()],
            rows: times.iter().map(|t| [Some((t - anchor) / 60.0); 17]).collect(),
            times,
        }
    }

    #[test]
    fn windows_at_stride_thirty() {
        let anchor = 1.0e9;
        let m = matrix(-540..0, anchor);
        let (w, stats) = window_dataset(&m, Some(Anchor::Onset(anchor)), &p360(), 30, 30).unwrap();
        assert_eq!(w.iter().filter(|w| w.label == 1).count(), 10);
        assert_eq!(w.iter().filter(|w| w.label == 0).count(), 3);
        assert_eq!(stats.candidates, 16);
        // timestep k holds the median of the minute ending at start + k + 1
        let first = &w[0];
        assert_eq!(first.t_center, -465.0);
        assert!((first.values[0] - (-480.0 + 25.0 / 60.0)).abs() < 1e-9);
        for win in &w {
            assert!(win.t_center + 15.0 <= -15.0);
        }
    }

    #[test]
    fn pseudo_onset_gives_normal_only() {
        let anchor = 1.0e9;
        let m = matrix(-540..0, anchor);
        let (w, _) = window_dataset(&m, Some(Anchor::PseudoOnset(anchor)), &p360(), 30, 30).unwrap();
        assert_eq!(w.len(), 3);
        assert!(w.iter().all(|w| w.label == 0));
    }

    #[test]
    fn missing_onset_is_an_error() {
        let m = matrix(-10..0, 0.0);
        assert!(matches!(
            window_dataset(&m, None, &p360(), 30, 30),
            Err(Error::OnsetMissing(_))
        ));
    }

    #[test]
    fn gappy_windows_are_dropped_and_small_gaps_filled() {
        let anchor = 0.0;
        let mut m = matrix(-480..0, anchor);
        // remove minutes -470..-460 (10 of 30 = 33% gaps) and -435 (1 minute)
        let keep: Vec<bool> = m
            .times
            .iter()
            .map(|t| {
                let minute = (t / 60.0).floor() as i64;
                !((-470..-460).contains(&minute) || minute == -435)
            })
            .collect();
        let mut k = keep.iter();
        m.rows.retain(|_| *k.next().unwrap());
        let mut k = keep.iter();
        m.times.retain(|_| *k.next().unwrap());
        m.segments.truncate(m.times.len());
        let (w, stats) = window_dataset(&m, Some(Anchor::Onset(anchor)), &p360(), 30, 30).unwrap();
        assert_eq!(stats.too_many_gaps, 1);
        let second = w.iter().find(|w| w.t_center == -435.0).unwrap();
        // minute -435 (timestep 15) is forward-filled from minute -436
        assert_eq!(second.values[15 * 17], second.values[14 * 17]);
    }

    #[test]
    fn windows_do_not_span_segments() {
        let anchor = 0.0;
        let mut m = matrix(-480..0, anchor);
        for (t, s) in m.times.iter().zip(m.segments.iter_mut()) {
            if *t >= -100.0 * 60.0 {
                *s = 1;
            }
        }
        let (w, stats) = window_dataset(&m, Some(Anchor::Onset(anchor)), &p360(), 30, 30).unwrap();
        assert_eq!(stats.crosses_segments, 1);
        assert_eq!(w.iter().filter(|w| w.label == 1).count(), 9);
    }

    #[test]
    fn fully_missing_column_becomes_zero() {
        let cells = vec![[None; 17]; 3];
        assert!(impute(&cells).iter().all(|v| *v == 0.0));
        let mut cells = vec![[Some(1.0); 17]; 3];
        cells[0][2] = None;
        cells[2][2] = Some(3.0);
        cells[1][2] = Some(5.0);
        let v = impute(&cells);
        assert_eq!(v[2], 4.0);
        assert_eq!(v[17 + 2], 5.0);
    }

    #[test]
    fn csv_round_trip_and_permutation() {
        let anchor = 1.0e9;
        let m = matrix(-540..0, anchor);
        let (windows, _) = window_dataset(&m, Some(Anchor::Onset(anchor)), &p360(), 30, 30).unwrap();
        let mut ds = LabeledDataset {
            params: p360(),
            length: 30,
            stride: 30,
            windows,
        };
        ds.sort();
        let manifest = ds.manifest();
        assert_eq!(
            (manifest.n_windows, manifest.n_warning, manifest.n_patients),
            (13, 10, 1)
        );
        let back = LabeledDataset::from_csv(&ds.to_csv(), &manifest).unwrap();
        assert_eq!(back, ds);

        let mut shuffled = ds.windows.clone();
        permute_labels(&mut shuffled, 3);
        let ones = shuffled.iter().filter(|w| w.label == 1).count();
        assert_eq!(ones, 10);
    }
}
