//! Per-beat hemodynamic indicators and the per-patient feature matrix.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ingest::{self, SourceSegment};
use crate::kinematics::{self, DerivativeStack, FiducialSet};
use crate::{Error, Result};

/// Bumped whenever [`Feature::ALL`] changes.
pub const COLUMN_ORDER_VERSION: u32 = 1;
/// Guard for the relative-displacement division.
pub const EPS_BASE: f64 = 1e-9;
/// Minimum number of non-gap baseline beats for a valid baseline.
pub const MIN_BASELINE_BEATS: usize = 30;
pub const DEFAULT_BASELINE_WINDOW_S: f64 = 3600.0;
pub const DEFAULT_CV_WINDOW: usize = 30;

/// The 17 matrix columns, in their fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Feature {
    TSp,
    Si,
    AOff,
    RSysDia,
    TuTpi,
    TbTpi,
    Tv,
    TuTaTpi,
    CvTpi,
    CvPa,
    TSpRel,
    ASpRel,
    SiRel,
    DsiRel,
    TcRel,
    AOffRel,
    AOnRel,
}

impl Feature {
    pub const ALL: [Feature; 17] = [
        Feature::TSp,
        Feature::Si,
        Feature::AOff,
        Feature::RSysDia,
        Feature::TuTpi,
        Feature::TbTpi,
        Feature::Tv,
        Feature::TuTaTpi,
        Feature::CvTpi,
        Feature::CvPa,
        Feature::TSpRel,
        Feature::ASpRel,
        Feature::SiRel,
        Feature::DsiRel,
        Feature::TcRel,
        Feature::AOffRel,
        Feature::AOnRel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::TSp => "T_sp",
            Feature::Si => "SI",
            Feature::AOff => "A_off",
            Feature::RSysDia => "R_sysdia",
            Feature::TuTpi => "T_u_Tpi",
            Feature::TbTpi => "T_b_Tpi",
            Feature::Tv => "T_v",
            Feature::TuTaTpi => "T_u_TaTpi",
            Feature::CvTpi => "CV_Tpi",
            Feature::CvPa => "CV_PA",
            Feature::TSpRel => "T_sp_Rel",
            Feature::ASpRel => "A_sp_Rel",
            Feature::SiRel => "SI_Rel",
            Feature::DsiRel => "DSI_Rel",
            Feature::TcRel => "T_c_Rel",
            Feature::AOffRel => "A_off_Rel",
            Feature::AOnRel => "A_on_Rel",
        }
    }

    pub fn from_name(s: &str) -> Option<Feature> {
        Feature::ALL.into_iter().find(|f| f.name() == s)
    }

    /// Position in [`Feature::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Absolute per-beat quantities; `None` marks a gap.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BeatFeatureVector {
    pub t_sp: Option<f64>,
    pub si: Option<f64>,
    pub a_off: Option<f64>,
    pub r_sysdia: Option<f64>,
    pub t_u_tpi: Option<f64>,
    pub t_b_tpi: Option<f64>,
    pub t_v: Option<f64>,
    pub t_u_ta_tpi: Option<f64>,
    pub a_sp: Option<f64>,
    pub a_on: Option<f64>,
    pub t_c: Option<f64>,
    pub dsi: Option<f64>,
    pub t_pi: Option<f64>,
    /// Onset-referenced pulse amplitude `ppg[sp] - ppg[on]`.
    pub amplitude: Option<f64>,
}

/// Bases that get a relative-displacement column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelBase {
    TSp,
    ASp,
    Si,
    Dsi,
    Tc,
    AOff,
    AOn,
}

impl RelBase {
    pub const ALL: [RelBase; 7] = [
        RelBase::TSp,
        RelBase::ASp,
        RelBase::Si,
        RelBase::Dsi,
        RelBase::Tc,
        RelBase::AOff,
        RelBase::AOn,
    ];

    fn of(self, b: &BeatFeatureVector) -> Option<f64> {
        match self {
            RelBase::TSp => b.t_sp,
            RelBase::ASp => b.a_sp,
            RelBase::Si => b.si,
            RelBase::Dsi => b.dsi,
            RelBase::Tc => b.t_c,
            RelBase::AOff => b.a_off,
            RelBase::AOn => b.a_on,
        }
    }

    fn column(self) -> Feature {
        match self {
            RelBase::TSp => Feature::TSpRel,
            RelBase::ASp => Feature::ASpRel,
            RelBase::Si => Feature::SiRel,
            RelBase::Dsi => Feature::DsiRel,
            RelBase::Tc => Feature::TcRel,
            RelBase::AOff => Feature::AOffRel,
            RelBase::AOn => Feature::AOnRel,
        }
    }
}

/// Indicators of one beat.
pub fn beat_features(f: &FiducialSet, d: &DerivativeStack) -> BeatFeatureVector {
    let fs = d.fs;
    let ppg = &d.ppg;
    let secs = |from: usize, to: usize| (to as f64 - from as f64) / fs;
    let t_pi = secs(f.on, f.off);
    let amplitude = ppg[f.sp] - ppg[f.on];
    let (t_sys, t_dia) = match f.dn {
        Some(dn) => (Some(secs(f.on, dn)), Some(secs(dn, f.off))),
        None => (None, None),
    };
    BeatFeatureVector {
        t_sp: Some(secs(f.on, f.sp)),
        si: t_sys.map(|ts| amplitude / ts),
        a_off: Some(ppg[f.off] - ppg[f.on]),
        r_sysdia: t_sys.zip(t_dia).map(|(s, d)| s / d),
        t_u_tpi: Some(secs(f.on, f.u) / t_pi),
        t_b_tpi: Some(secs(f.on, f.b) / t_pi),
        t_v: Some(secs(f.sp, f.v)),
        t_u_ta_tpi: Some(secs(f.a, f.u) / t_pi),
        a_sp: Some(ppg[f.sp]),
        a_on: Some(ppg[f.on]),
        t_c: f.c.map(|c| secs(f.on, c)),
        dsi: f.dn.map(|dn| (ppg[dn] - ppg[f.on]) / amplitude),
        t_pi: Some(t_pi),
        amplitude: Some(amplitude),
    }
}

/// One valid beat placed in time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeatRecord {
    /// Epoch seconds of the pulse onset.
    pub time: f64,
    /// Index of the source segment the beat came from.
    pub segment: usize,
    pub features: BeatFeatureVector,
}

/// Per-feature baseline mean; `None` when fewer than
/// [`MIN_BASELINE_BEATS`] non-gap beats fell in the window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineEntry {
    pub mu_base: Option<f64>,
    pub n_base: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineStats {
    pub start: f64,
    pub window_s: f64,
    pub entries: Vec<(RelBase, BaselineEntry)>,
}

impl BaselineStats {
    pub fn get(&self, base: RelBase) -> BaselineEntry {
        self.entries.iter().find(|(b, _)| *b == base).map(|e| e.1).unwrap()
    }
}

/// Mean of each relative base over beats with time in
/// `[first beat, first beat + window_s]`.
pub fn baseline_stats(beats: &[BeatRecord], window_s: f64) -> BaselineStats {
    let start = beats.first().map_or(0.0, |b| b.time);
    let in_window: Vec<&BeatRecord> = beats
        .iter()
        .filter(|b| b.time >= start && b.time <= start + window_s)
        .collect();
    let entries = RelBase::ALL
        .iter()
        .map(|&base| {
            let vals: Vec<f64> = in_window.iter().filter_map(|b| base.of(&b.features)).collect();
            let n = vals.len();
            let mu = (n >= MIN_BASELINE_BEATS).then(|| vals.iter().sum::<f64>() / n as f64);
            (base, BaselineEntry { mu_base: mu, n_base: n })
        })
        .collect();
    BaselineStats {
        start,
        window_s,
        entries,
    }
}

/// `(x - mu) / |mu|`, or a gap when `|mu| < EPS_BASE`.
pub fn relative_displacement(x: f64, mu_base: f64) -> Option<f64> {
    (mu_base.abs() >= EPS_BASE).then(|| (x - mu_base) / mu_base.abs())
}

/// Trailing coefficient of variation over the last `window` non-gap values.
/// Gap positions, the warm-up and near-zero means yield gaps.
pub fn rolling_cv(series: &[Option<f64>], window: usize) -> Result<Vec<Option<f64>>> {
    if window < 2 {
        return Err(Error::InvalidParams(format!("cv window {window} < 2")));
    }
    let mut recent: std::collections::VecDeque<f64> = std::collections::VecDeque::with_capacity(window);
    let mut out = Vec::with_capacity(series.len());
    for v in series {
        let Some(v) = *v else {
            out.push(None);
            continue;
        };
        if recent.len() == window {
            recent.pop_front();
        }
        recent.push_back(v);
        if recent.len() < window {
            out.push(None);
            continue;
        }
        let n = window as f64;
        let mean = recent.iter().sum::<f64>() / n;
        if mean.abs() < 1e-9 {
            out.push(None);
            continue;
        }
        let var = recent.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        out.push(Some(var.sqrt() / mean));
    }
    Ok(out)
}

/// Time-ordered per-beat rows of the 17 indicators for one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub patient_id: String,
    /// Epoch seconds per row, strictly increasing.
    pub times: Vec<f64>,
    pub segments: Vec<usize>,
    pub rows: Vec<[Option<f64>; 17]>,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, f: Feature) -> Vec<Option<f64>> {
        self.rows.iter().map(|r| r[f.index()]).collect()
    }
}

/// Assemble the matrix. Beats must be time-ordered; CV windows restart at
/// every segment boundary.
pub fn build_feature_matrix(
    patient_id: &str,
    beats: &[BeatRecord],
    baselines: &BaselineStats,
    cv_window: usize,
) -> Result<FeatureMatrix> {
    if beats.windows(2).any(|w| w[1].time <= w[0].time) {
        return Err(Error::InvalidParams(format!(
            "beats of {patient_id} are not strictly time-ordered"
        )));
    }
    let mut cv_tpi = Vec::with_capacity(beats.len());
    let mut cv_pa = Vec::with_capacity(beats.len());
    let mut start = 0;
    while start < beats.len() {
        let seg = beats[start].segment;
        let end = start + beats[start..].iter().take_while(|b| b.segment == seg).count();
        let tpi: Vec<Option<f64>> = beats[start..end].iter().map(|b| b.features.t_pi).collect();
        let pa: Vec<Option<f64>> = beats[start..end].iter().map(|b| b.features.amplitude).collect();
        cv_tpi.extend(rolling_cv(&tpi, cv_window)?);
        cv_pa.extend(rolling_cv(&pa, cv_window)?);
        start = end;
    }

    let rows = beats
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let f = &b.features;
            let mut row = [None; 17];
            row[Feature::TSp.index()] = f.t_sp;
            row[Feature::Si.index()] = f.si;
            row[Feature::AOff.index()] = f.a_off;
            row[Feature::RSysDia.index()] = f.r_sysdia;
            row[Feature::TuTpi.index()] = f.t_u_tpi;
            row[Feature::TbTpi.index()] = f.t_b_tpi;
            row[Feature::Tv.index()] = f.t_v;
            row[Feature::TuTaTpi.index()] = f.t_u_ta_tpi;
            row[Feature::CvTpi.index()] = cv_tpi[i];
            row[Feature::CvPa.index()] = cv_pa[i];
            for base in RelBase::ALL {
                let mu = baselines.get(base).mu_base;
                row[base.column().index()] = base.of(f).zip(mu).and_then(|(x, mu)| relative_displacement(x, mu));
            }
            row
        })
        .collect();
    Ok(FeatureMatrix {
        patient_id: patient_id.to_string(),
        times: beats.iter().map(|b| b.time).collect(),
        segments: beats.iter().map(|b| b.segment).collect(),
        rows,
    })
}

/// Counters describing what extraction dropped.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionStats {
    pub segments: usize,
    pub segments_skipped: usize,
    pub beats_detected: usize,
    pub beats_invalid: usize,
}

/// Beats of every segment of one patient: band-pass, resample, derivatives,
/// beat detection and fiducials. Segments too short to process are skipped.
pub fn extract_beats(segments: &[SourceSegment]) -> Result<(Vec<BeatRecord>, ExtractionStats)> {
    let mut stats = ExtractionStats::default();
    let mut beats = Vec::new();
    for (seg_idx, seg) in segments.iter().enumerate() {
        stats.segments += 1;
        let pre = match ingest::preprocess(seg) {
            Ok(p) => p,
            Err(Error::SegmentTooShort { .. }) => {
                log::warn!("{}: segment too short to filter, skipped", seg.source_file_id);
                stats.segments_skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let w = &pre.waveform;
        let d = kinematics::derivatives(w)?;
        let spans = match kinematics::detect_beats(&d) {
            Ok(s) => s,
            Err(Error::NoPeaks | Error::SegmentTooShort { .. }) => {
                log::warn!("{}: no beats detected, skipped", seg.source_file_id);
                stats.segments_skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        for span in spans {
            stats.beats_detected += 1;
            match kinematics::locate_fiducials(&d, span) {
                Ok(f) => beats.push(BeatRecord {
                    time: w.time_of(f.on),
                    segment: seg_idx,
                    features: beat_features(&f, &d),
                }),
                Err(_) => stats.beats_invalid += 1,
            }
        }
    }
    beats.sort_by(|a, b| a.time.total_cmp(&b.time));
    beats.dedup_by(|b, a| b.time <= a.time);
    Ok((beats, stats))
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// CSV with `time,segment` followed by the 17 columns; gaps are empty cells.
pub fn write_matrix_csv(m: &FeatureMatrix, out: &mut impl Write) -> std::io::Result<()> {
    let header: Vec<&str> = ["time", "segment"]
        .into_iter()
        .chain(Feature::ALL.iter().map(|f| f.name()))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for ((t, s), row) in m.times.iter().zip(&m.segments).zip(&m.rows) {
        let cells: Vec<String> = row.iter().map(|v| fmt_cell(*v)).collect();
        writeln!(out, "{t},{s},{}", cells.join(","))?;
    }
    Ok(())
}

/// Inverse of [`write_matrix_csv`].
pub fn read_matrix_csv(patient_id: &str, text: &str) -> Result<FeatureMatrix> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::MalformedHeader("empty feature matrix".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let expected: Vec<&str> = ["time", "segment"]
        .into_iter()
        .chain(Feature::ALL.iter().map(|f| f.name()))
        .collect();
    if cols != expected {
        return Err(Error::MalformedHeader(format!(
            "feature columns {cols:?} differ from version {COLUMN_ORDER_VERSION}"
        )));
    }
    let mut m = FeatureMatrix {
        patient_id: patient_id.to_string(),
        times: Vec::new(),
        segments: Vec::new(),
        rows: Vec::new(),
    };
    for (i, line) in lines.enumerate() {
        let bad = |msg: String| Error::Parse { line: i + 1, msg };
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != expected.len() {
            return Err(bad(format!("{} cells, expected {}", cells.len(), expected.len())));
        }
        m.times
            .push(cells[0].parse().map_err(|_| bad(format!("bad time {:?}", cells[0])))?);
        m.segments.push(
            cells[1]
                .parse()
                .map_err(|_| bad(format!("bad segment {:?}", cells[1])))?,
        );
        let mut row = [None; 17];
        for (k, c) in cells[2..].iter().enumerate() {
            if !c.is_empty() {
                row[k] = Some(c.parse().map_err(|_| bad(format!("bad value {c:?}")))?);
            }
        }
        m.rows.push(row);
    }
    Ok(m)
}
