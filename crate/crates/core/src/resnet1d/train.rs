use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::ModelCheckpoint;
use super::optim::{adam_step, AdamState};
use super::{ArchSpec, Batch, Model};
use crate::biomarkers::Feature;
use crate::evaluation::{evaluate, macro_f1, MetricReport, ScoredWindow, TableRow, THRESHOLD};
use crate::labeling::{LabeledDataset, LabeledWindow};
use crate::rng::{self, Purpose};
use crate::selection::{select_windows, SelectionReport};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda_pos: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-4,
            lambda_pos: 3.0,
            batch: 64,
            epochs: 50,
            seed: 0,
            folds: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && self.lambda_pos > 0.0
            && self.batch > 0
            && self.epochs > 0
            && self.folds >= 2;
        if !ok {
            return Err(Error::InvalidParams(format!("train config out of range: {self:?}")));
        }
        Ok(())
    }
}

/// Per-feature z-scoring fitted on training windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub features: Vec<Feature>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit(windows: &[&LabeledWindow], length: usize, features: &[Feature]) -> Self {
        let mut mean = Vec::with_capacity(features.len());
        let mut sd = Vec::with_capacity(features.len());
        for f in features {
            let vals: Vec<f64> = windows
                .iter()
                .flat_map(|w| (0..length).map(move |t| w.values[t * 17 + f.index()]))
                .collect();
            let n = vals.len().max(1) as f64;
            let m = vals.iter().sum::<f64>() / n;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            mean.push(m);
            sd.push(if v > 0.0 { v.sqrt() } else { 1.0 });
        }
        Standardizer {
            features: features.to_vec(),
            mean,
            sd,
        }
    }

    /// Model input for the given windows, `B x F x L`.
    pub fn batch(&self, windows: &[&LabeledWindow], length: usize) -> Result<Batch> {
        let f = self.features.len();
        let mut data = Vec::with_capacity(windows.len() * f * length);
        for w in windows {
            for (i, feat) in self.features.iter().enumerate() {
                for t in 0..length {
                    data.push((w.values[t * 17 + feat.index()] - self.mean[i]) / self.sd[i]);
                }
            }
        }
        Batch::new(windows.len(), f, length, data)
    }
}

const EVAL_CHUNK: usize = 256;

/// Positive-class probabilities in eval mode.
pub(crate) fn predict(
    model: &Model,
    std: &Standardizer,
    windows: &[&LabeledWindow],
    length: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(EVAL_CHUNK) {
        out.extend(model.predict_proba(&std.batch(chunk, length)?)?);
    }
    Ok(out)
}

/// Seeded patient split: warning-bearing and normal-only patients are each
/// shuffled and dealt round-robin, the second group continuing where the
/// first stopped.
pub fn patient_folds(patients: &[(String, bool)], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    let unique: BTreeMap<&str, bool> = patients.iter().map(|(p, w)| (p.as_str(), *w)).collect();
    if k == 0 || unique.len() < k {
        return Err(Error::FewerPatientsThanFolds {
            patients: unique.len(),
            folds: k,
        });
    }
    let mut pos: Vec<&str> = unique.iter().filter(|(_, w)| **w).map(|(p, _)| *p).collect();
    let mut neg: Vec<&str> = unique.iter().filter(|(_, w)| !**w).map(|(p, _)| *p).collect();
    pos.shuffle(&mut rng::stream(seed, Purpose::Folds, 0));
    neg.shuffle(&mut rng::stream(seed, Purpose::Folds, 1));
    let mut folds = vec![Vec::new(); k];
    for (i, p) in pos.iter().chain(neg.iter()).enumerate() {
        folds[i % k].push(p.to_string());
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutcome {
    pub fold: usize,
    pub train_patients: Vec<String>,
    pub val_patients: Vec<String>,
    pub selection: SelectionReport,
    pub checkpoint: ModelCheckpoint,
    pub report: MetricReport,
    pub scores: Vec<ScoredWindow>,
    pub history: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub folds: Vec<FoldOutcome>,
}

impl CvResult {
    pub fn table_row(&self, window_min: u32, dataset: &str) -> TableRow {
        TableRow {
            window_min,
            dataset: dataset.to_string(),
            folds: self.folds.iter().map(|f| f.report).collect(),
        }
    }

    pub fn scores(&self) -> Vec<ScoredWindow> {
        self.folds.iter().flat_map(|f| f.scores.iter().cloned()).collect()
    }
}

/// Train on `train`, keep the epoch with the best validation macro-F1
/// (earliest on ties). Returns the model, its epoch (1-based) and score.
pub fn train_fold(
    arch: &ArchSpec,
    cfg: &TrainConfig,
    std: &Standardizer,
    train: &[&LabeledWindow],
    val: &[&LabeledWindow],
    fold: usize,
) -> Result<(Model, usize, f64, Vec<EpochLog>)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidParams(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let length = arch.length;
    let mut model = Model::init(arch, cfg.seed ^ (fold as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))?;
    let decay = model.decay_mask();
    let mut adam = AdamState::new(model.params.len());
    let val_labels: Vec<u8> = val.iter().map(|w| w.label).collect();
    let mut best: Option<(Model, usize, f64)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng::stream(
            cfg.seed,
            Purpose::Shuffle,
            ((fold as u64) << 32) | epoch as u64,
        ));
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch) {
            let ws: Vec<&LabeledWindow> = idx.iter().map(|&i| train[i]).collect();
            let labels: Vec<u8> = ws.iter().map(|w| w.label).collect();
            let (loss, grad, stats) = model.loss_and_grad(&std.batch(&ws, length)?, &labels, cfg.lambda_pos)?;
            model.update_running(&stats);
            adam_step(&mut model.params, &grad, &decay, &mut adam, cfg);
            loss_sum += loss * ws.len() as f64;
        }
        let probs = predict(&model, std, val, length)?;
        let preds: Vec<u8> = probs.iter().map(|&p| u8::from(p >= THRESHOLD)).collect();
        let f1 = macro_f1(&preds, &val_labels)?;
        log::debug!(
            "fold {fold} epoch {epoch}: loss {:.4} val macro-F1 {f1:.4}",
            loss_sum / train.len() as f64
        );
        history.push(EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_macro_f1: f1,
        });
        if best.as_ref().is_none_or(|b| f1 > b.2) {
            best = Some((model.clone(), epoch, f1));
        }
    }
    let (m, e, f) = best.expect("at least one epoch");
    Ok((m, e, f, history))
}

/// Patient-level k-fold cross-validation; feature selection and input
/// scaling are fitted on each training split only.
pub fn train_cv(
    ds: &LabeledDataset,
    arch_template: &ArchSpec,
    cfg: &TrainConfig,
    d_min: f64,
    r_max: f64,
) -> Result<CvResult> {
    cfg.validate()?;
    let mut has_warning: BTreeMap<String, bool> = BTreeMap::new();
    for w in &ds.windows {
        *has_warning.entry(w.patient_id.clone()).or_default() |= w.label == 1;
    }
    let patients: Vec<(String, bool)> = has_warning.into_iter().collect();
    let folds = patient_folds(&patients, cfg.folds, cfg.seed)?;
    let outcomes: Vec<Result<FoldOutcome>> = folds
        .par_iter()
        .enumerate()
        .map(|(k, val_ids)| run_fold(ds, arch_template, cfg, d_min, r_max, k, val_ids))
        .collect();
    Ok(CvResult {
        folds: outcomes.into_iter().collect::<Result<_>>()?,
    })
}

fn run_fold(
    ds: &LabeledDataset,
    arch_template: &ArchSpec,
    cfg: &TrainConfig,
    d_min: f64,
    r_max: f64,
    fold: usize,
    val_ids: &[String],
) -> Result<FoldOutcome> {
    let val_set: BTreeSet<&str> = val_ids.iter().map(String::as_str).collect();
    let (val, train): (Vec<&LabeledWindow>, Vec<&LabeledWindow>) =
        ds.windows.iter().partition(|w| val_set.contains(w.patient_id.as_str()));
    let train_patients: BTreeSet<&str> = train.iter().map(|w| w.patient_id.as_str()).collect();
    if train_patients.iter().any(|p| val_set.contains(p)) {
        return Err(Error::InvalidParams(format!(
            "fold {fold}: patient appears in training and validation"
        )));
    }
    let owned: Vec<LabeledWindow> = train.iter().map(|w| (*w).clone()).collect();
    let selection = select_windows(&owned, ds.length, d_min, r_max)?;
    let features = selection.kept_features();
    let std = Standardizer::fit(&train, ds.length, &features);
    let arch = ArchSpec {
        in_channels: features.len(),
        length: ds.length,
        ..arch_template.clone()
    };
    let (model, epoch, f1, history) = train_fold(&arch, cfg, &std, &train, &val, fold)?;
    log::info!(
        "fold {fold}: best epoch {epoch}, val macro-F1 {f1:.4}, {} features",
        features.len()
    );
    let probs = predict(&model, &std, &val, ds.length)?;
    let labels: Vec<u8> = val.iter().map(|w| w.label).collect();
    let report = evaluate(&probs, &labels)?;
    let scores = val
        .iter()
        .zip(&probs)
        .map(|(w, &p)| ScoredWindow {
            patient_id: w.patient_id.clone(),
            prob: p,
            label: w.label,
        })
        .collect();
    Ok(FoldOutcome {
        fold,
        train_patients: train_patients.iter().map(|s| s.to_string()).collect(),
        val_patients: val_ids.to_vec(),
        selection,
        checkpoint: ModelCheckpoint::new(model, std, ds.params, cfg.seed, fold, epoch, f1),
        report,
        scores,
        history,
    })
}
