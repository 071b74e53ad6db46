//! Two-stage feature filtering: effect-size screen, then correlation pruning.

use serde::{Deserialize, Serialize};

use crate::biomarkers::Feature;
use crate::labeling::{LabeledDataset, LabeledWindow};
use crate::{Error, Result};

pub const DEFAULT_D_MIN: f64 = 0.05;
pub const DEFAULT_R_MAX: f64 = 0.80;

fn mean_var(x: &[f64]) -> (f64, f64) {
    // sum / n need not round back to a repeated value
    if x.iter().all(|v| *v == x[0]) {
        return (x[0], 0.0);
    }
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Cohen's d of `b` relative to `a` with a pooled, Bessel-corrected SD.
/// Zero pooled spread gives 0 for equal means and a signed infinity otherwise.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidParams(
            "cohens_d needs at least two values per group".into(),
        ));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = (((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0)).sqrt();
    let diff = mb - ma;
    if pooled == 0.0 {
        return Ok(if diff == 0.0 {
            0.0
        } else {
            diff.signum() * f64::INFINITY
        });
    }
    Ok(diff / pooled)
}

/// Product-moment correlation; `None` when either side has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DropReason {
    LowEffect,
    Redundant { with: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDecision {
    pub feature: String,
    pub cohens_d: f64,
    pub kept: bool,
    pub dropped_reason: Option<DropReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelatedPair {
    pub a: String,
    pub b: String,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub d_min: f64,
    pub r_max: f64,
    pub features: Vec<FeatureDecision>,
    /// Pairs among effect-screen survivors with |r| above `r_max`, in pruning order.
    pub pearson_pairs: Vec<CorrelatedPair>,
}

impl SelectionReport {
    pub fn kept(&self) -> Vec<String> {
        self.features
            .iter()
            .filter(|f| f.kept)
            .map(|f| f.feature.clone())
            .collect()
    }

    /// Canonical indices of kept columns.
    pub fn kept_features(&self) -> Vec<Feature> {
        self.features
            .iter()
            .filter(|f| f.kept)
            .filter_map(|f| Feature::from_name(&f.feature))
            .collect()
    }
}

/// Run both stages on named per-window columns. Column order is the
/// tie-break order (later column loses).
pub fn select_columns(
    names: &[String],
    columns: &[Vec<f64>],
    labels: &[u8],
    d_min: f64,
    r_max: f64,
) -> Result<SelectionReport> {
    if names.len() != columns.len() || columns.iter().any(|c| c.len() != labels.len()) {
        return Err(Error::ShapeMismatch("selection columns and labels disagree".into()));
    }
    let mut features = Vec::with_capacity(names.len());
    for (name, col) in names.iter().zip(columns) {
        let pick = |class: bool| -> Vec<f64> {
            col.iter()
                .zip(labels)
                .filter(|(_, l)| (**l != 0) == class)
                .map(|(v, _)| *v)
                .collect()
        };
        let (a, b) = (pick(false), pick(true));
        let d = cohens_d(&a, &b)?;
        let kept = d.abs() > d_min;
        features.push(FeatureDecision {
            feature: name.clone(),
            cohens_d: d,
            kept,
            dropped_reason: (!kept).then_some(DropReason::LowEffect),
        });
    }

    let survivors: Vec<usize> = (0..names.len()).filter(|&i| features[i].kept).collect();
    let mut pairs = Vec::new();
    for (x, &i) in survivors.iter().enumerate() {
        for &j in &survivors[x + 1..] {
            let r = pearson(&columns[i], &columns[j]).unwrap_or(0.0);
            if r.abs() > r_max {
                pairs.push((i, j, r));
            }
        }
    }
    pairs.sort_by(|p, q| q.2.abs().total_cmp(&p.2.abs()).then((p.0, p.1).cmp(&(q.0, q.1))));
    for &(i, j, _) in &pairs {
        if !(features[i].kept && features[j].kept) {
            continue;
        }
        let (di, dj) = (features[i].cohens_d.abs(), features[j].cohens_d.abs());
        let (victim, winner) = if di < dj {
            (i, j)
        } else if dj < di {
            (j, i)
        } else {
            (i.max(j), i.min(j))
        };
        features[victim].kept = false;
        features[victim].dropped_reason = Some(DropReason::Redundant {
            with: names[winner].clone(),
        });
    }
    if !features.iter().any(|f| f.kept) {
        return Err(Error::EmptySelection);
    }
    Ok(SelectionReport {
        d_min,
        r_max,
        features,
        pearson_pairs: pairs
            .into_iter()
            .map(|(i, j, r)| CorrelatedPair {
                a: names[i].clone(),
                b: names[j].clone(),
                r,
            })
            .collect(),
    })
}

/// Per-window mean of every feature column: `out[f][w]`.
pub fn window_means(windows: &[LabeledWindow], length: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = (0..17).map(|_| Vec::with_capacity(windows.len())).collect();
    for w in windows {
        for (f, col) in out.iter_mut().enumerate() {
            col.push((0..length).map(|t| w.values[t * 17 + f]).sum::<f64>() / length as f64);
        }
    }
    out
}

/// Select among the 17 biomarkers using Normal vs Warning window means.
pub fn select_windows(windows: &[LabeledWindow], length: usize, d_min: f64, r_max: f64) -> Result<SelectionReport> {
    let labels: Vec<u8> = windows.iter().map(|w| w.label).collect();
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(Error::InvalidParams(
            "selection needs both Normal and Warning windows".into(),
        ));
    }
    let names: Vec<String> = Feature::ALL.iter().map(|f| f.name().to_string()).collect();
    select_columns(&names, &window_means(windows, length), &labels, d_min, r_max)
}

pub fn select_features(ds: &LabeledDataset, d_min: f64, r_max: f64) -> Result<SelectionReport> {
    select_windows(&ds.windows, ds.length, d_min, r_max)
}
