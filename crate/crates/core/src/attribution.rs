//! Exact Shapley attribution by enumerating every feature coalition.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::biomarkers::Feature;
use crate::labeling::LabeledWindow;
use crate::resnet1d::{Batch, Mode, ModelCheckpoint};
use crate::{Error, Result};

/// Largest feature count accepted for 2^F enumeration.
pub const MAX_FEATURES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub phi: Vec<f64>,
    pub base_value: f64,
    pub fx: f64,
}

fn check_features(f: usize) -> Result<()> {
    if f > MAX_FEATURES {
        return Err(Error::TooManyFeatures {
            features: f,
            limit: MAX_FEATURES,
        });
    }
    if f == 0 {
        return Err(Error::InvalidParams("no features to attribute".into()));
    }
    Ok(())
}

/// Shapley values of a game given as its full value table: `values[mask]`
/// is the payoff of the coalition whose members are the set bits of `mask`.
pub fn shapley_from_table(values: &[f64]) -> Result<AttributionResult> {
    let f = values.len().trailing_zeros() as usize;
    if values.len() != 1 << f {
        return Err(Error::ShapeMismatch(format!(
            "value table of {} entries is not a power of two",
            values.len()
        )));
    }
    check_features(f)?;
    // weight for a coalition of size s not containing i: s!(F-s-1)!/F! = 1 / (F * C(F-1, s))
    let mut weights = vec![0.0; f];
    let mut binom = 1.0;
    for (s, w) in weights.iter_mut().enumerate() {
        if s > 0 {
            binom = binom * (f - s) as f64 / s as f64;
        }
        *w = 1.0 / (f as f64 * binom);
    }
    let phi = (0..f)
        .map(|i| {
            let bit = 1usize << i;
            let mut acc = 0.0;
            for mask in 0..values.len() {
                if mask & bit == 0 {
                    acc += weights[mask.count_ones() as usize] * (values[mask | bit] - values[mask]);
                }
            }
            acc
        })
        .collect();
    Ok(AttributionResult {
        phi,
        base_value: values[0],
        fx: values[values.len() - 1],
    })
}

/// Per-coordinate mean of the background set.
pub fn background_mean(background: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = background
        .first()
        .ok_or_else(|| Error::InvalidParams("empty background".into()))?;
    let mut mean = vec![0.0; first.len()];
    for b in background {
        if b.len() != mean.len() {
            return Err(Error::ShapeMismatch("background rows differ in length".into()));
        }
        for (m, v) in mean.iter_mut().zip(b) {
            *m += v;
        }
    }
    let n = background.len() as f64;
    Ok(mean.into_iter().map(|m| m / n).collect())
}

/// Exact Shapley values of `score_fn` at `x`; an absent feature takes its
/// background mean.
pub fn exact_shapley(
    score_fn: impl Fn(&[f64]) -> f64,
    x: &[f64],
    background: &[Vec<f64>],
) -> Result<AttributionResult> {
    check_features(x.len())?;
    let reference = background_mean(background)?;
    if reference.len() != x.len() {
        return Err(Error::ShapeMismatch("instance and background differ in length".into()));
    }
    let values: Vec<f64> = (0..1usize << x.len())
        .map(|mask| {
            let z: Vec<f64> = (0..x.len())
                .map(|i| if mask >> i & 1 == 1 { x[i] } else { reference[i] })
                .collect();
            score_fn(&z)
        })
        .collect();
    shapley_from_table(&values)
}

/// Per-feature means over Normal windows, in the checkpoint's feature order.
pub fn normal_background(windows: &[&LabeledWindow], features: &[Feature], length: usize) -> Result<Vec<f64>> {
    let normals: Vec<&&LabeledWindow> = windows.iter().filter(|w| w.label == 0).collect();
    if normals.is_empty() {
        return Err(Error::InvalidParams(
            "background needs at least one Normal window".into(),
        ));
    }
    let n = (normals.len() * length) as f64;
    Ok(features
        .iter()
        .map(|f| {
            normals
                .iter()
                .map(|w| (0..length).map(|t| w.values[t * 17 + f.index()]).sum::<f64>())
                .sum::<f64>()
                / n
        })
        .collect())
}

const COALITION_CHUNK: usize = 256;

/// Attribute the log-odds `z_warning - z_normal` of a window to the model's
/// input features. A feature outside the coalition has its whole time
/// column replaced by `background[i]` (raw units).
pub fn explain_window(ckpt: &ModelCheckpoint, window: &LabeledWindow, background: &[f64]) -> Result<AttributionResult> {
    let std = &ckpt.standardizer;
    let f = std.features.len();
    let l = ckpt.model.arch.length;
    check_features(f)?;
    if background.len() != f || window.values.len() < l * 17 {
        return Err(Error::ShapeMismatch(
            "window or background does not match the checkpoint".into(),
        ));
    }
    let present: Vec<Vec<f64>> = std
        .features
        .iter()
        .enumerate()
        .map(|(i, feat)| {
            (0..l)
                .map(|t| (window.values[t * 17 + feat.index()] - std.mean[i]) / std.sd[i])
                .collect()
        })
        .collect();
    let absent: Vec<f64> = (0..f).map(|i| (background[i] - std.mean[i]) / std.sd[i]).collect();
    let masks: Vec<usize> = (0..1usize << f).collect();
    let chunks: Vec<Result<Vec<f64>>> = masks
        .par_chunks(COALITION_CHUNK)
        .map(|chunk| {
            let mut data = Vec::with_capacity(chunk.len() * f * l);
            for &mask in chunk {
                for i in 0..f {
                    if mask >> i & 1 == 1 {
                        data.extend_from_slice(&present[i]);
                    } else {
                        data.extend(std::iter::repeat_n(absent[i], l));
                    }
                }
            }
            let logits = ckpt.model.forward(&Batch::new(chunk.len(), f, l, data)?, Mode::Eval)?;
            Ok(logits.iter().map(|z| z[1] - z[0]).collect())
        })
        .collect();
    let mut values = Vec::with_capacity(masks.len());
    for c in chunks {
        values.extend(c?);
    }
    shapley_from_table(&values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub feature: String,
    pub mean_abs_phi: f64,
    pub mean_phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaterfallStep {
    pub feature: String,
    pub phi: f64,
    /// Score after adding this and all earlier contributions.
    pub cumulative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waterfall {
    pub instance: usize,
    pub base_value: f64,
    pub fx: f64,
    pub steps: Vec<WaterfallStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionSummary {
    pub n_instances: usize,
    pub ranking: Vec<RankedFeature>,
    pub waterfall: Waterfall,
}

/// Rank features by mean |phi| (ties keep input order) and lay out the
/// chosen instance as a waterfall in descending |phi|.
pub fn attribution_summary(
    names: &[String],
    results: &[AttributionResult],
    chosen: usize,
) -> Result<AttributionSummary> {
    if results.is_empty() {
        return Err(Error::InvalidParams("no attribution results to summarise".into()));
    }
    if results.iter().any(|r| r.phi.len() != names.len()) || chosen >= results.len() {
        return Err(Error::ShapeMismatch(
            "attribution results do not match feature names".into(),
        ));
    }
    let n = results.len() as f64;
    let mut ranking: Vec<RankedFeature> = names
        .iter()
        .enumerate()
        .map(|(i, name)| RankedFeature {
            feature: name.clone(),
            mean_abs_phi: results.iter().map(|r| r.phi[i].abs()).sum::<f64>() / n,
            mean_phi: results.iter().map(|r| r.phi[i]).sum::<f64>() / n,
        })
        .collect();
    ranking.sort_by(|a, b| b.mean_abs_phi.total_cmp(&a.mean_abs_phi));

    let r = &results[chosen];
    let mut order: Vec<usize> = (0..names.len()).collect();
    order.sort_by(|&a, &b| r.phi[b].abs().total_cmp(&r.phi[a].abs()));
    let mut cumulative = r.base_value;
    let steps = order
        .into_iter()
        .map(|i| {
            cumulative += r.phi[i];
            WaterfallStep {
                feature: names[i].clone(),
                phi: r.phi[i],
                cumulative,
            }
        })
        .collect();
    Ok(AttributionSummary {
        n_instances: results.len(),
        ranking,
        waterfall: Waterfall {
            instance: chosen,
            base_value: r.base_value,
            fx: r.fx,
            steps,
        },
    })
}

/// One row per explained instance: `instance,base_value,fx,<phi per feature>`.
pub fn phi_csv(names: &[String], results: &[AttributionResult]) -> String {
    let mut out = String::from("instance,base_value,fx");
    for n in names {
        let _ = write!(out, ",{n}");
    }
    out.push('\n');
    for (k, r) in results.iter().enumerate() {
        let _ = write!(out, "{k},{},{}", r.base_value, r.fx);
        for p in &r.phi {
            let _ = write!(out, ",{p}");
        }
        out.push('\n');
    }
    out
}
