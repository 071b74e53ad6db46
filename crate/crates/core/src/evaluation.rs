//! Classification metrics, ROC AUC and stratified subgroup reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Purpose};
use crate::{Error, Result};

/// Decision threshold on the positive-class probability.
pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub f2: f64,
    pub macro_f1: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub n: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f_beta(p: f64, r: f64, beta2: f64) -> f64 {
    if p == 0.0 && r == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * p * r / (beta2 * p + r)
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{a} predictions vs {b} labels")));
    }
    if a == 0 {
        return Err(Error::ShapeMismatch("no predictions".into()));
    }
    Ok(())
}

/// Confusion-matrix metrics for the positive class (label 1). `auc` is left
/// unset; see [`evaluate`] for the full report.
pub fn confusion_metrics(preds: &[u8], labels: &[u8]) -> Result<MetricReport> {
    check_lengths(preds.len(), labels.len())?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &y) in preds.iter().zip(labels) {
        match (p != 0, y != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let n = preds.len();
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let neg_precision = ratio(tn, tn + fn_);
    let neg_recall = ratio(tn, tn + fp);
    let f1 = f_beta(precision, recall, 1.0);
    Ok(MetricReport {
        accuracy: ratio(tp + tn, n),
        recall,
        precision,
        f1,
        f2: f_beta(precision, recall, 4.0),
        macro_f1: 0.5 * (f1 + f_beta(neg_precision, neg_recall, 1.0)),
        auc: None,
        tp,
        fp,
        tn,
        fn_,
        n,
    })
}

/// Unweighted mean of the class-0 and class-1 F1 scores.
pub fn macro_f1(preds: &[u8], labels: &[u8]) -> Result<f64> {
    Ok(confusion_metrics(preds, labels)?.macro_f1)
}

/// Mann-Whitney AUC with tie-averaged ranks. `None` if a class is missing.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    if scores.len() != labels.len() {
        return None;
    }
    let n_pos = labels.iter().filter(|&&y| y != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut pos_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start..end (1-based start+1..=end) share their average
        let avg_rank = (start + 1 + end) as f64 / 2.0;
        let pos_in_tie = order[start..end].iter().filter(|&&i| labels[i] != 0).count();
        pos_rank_sum += avg_rank * pos_in_tie as f64;
        start = end;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Some((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Threshold the positive-class probabilities and report everything.
pub fn evaluate(probs: &[f64], labels: &[u8]) -> Result<MetricReport> {
    let preds: Vec<u8> = probs.iter().map(|&p| u8::from(p >= THRESHOLD)).collect();
    let mut report = confusion_metrics(&preds, labels)?;
    report.auc = roc_auc(probs, labels);
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    Female,
    Male,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgeGroup {
    Under65,
    AtLeast65,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RiskTier {
    /// No comorbidities.
    Low,
    /// One or two.
    Medium,
    /// Three or more.
    High,
}

/// Comorbidity flags that define the risk tier.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comorbidities {
    pub hypertension: bool,
    pub diabetes: bool,
    pub hyperlipidemia: bool,
    pub ckd: bool,
    pub ihd: bool,
}

impl Comorbidities {
    pub fn count(&self) -> usize {
        [
            self.hypertension,
            self.diabetes,
            self.hyperlipidemia,
            self.ckd,
            self.ihd,
        ]
        .iter()
        .filter(|&&f| f)
        .count()
    }

    pub fn tier(&self) -> RiskTier {
        match self.count() {
            0 => RiskTier::Low,
            1 | 2 => RiskTier::Medium,
            _ => RiskTier::High,
        }
    }
}

/// Demographics and comorbidities of one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientStrata {
    pub age: u32,
    pub sex: Sex,
    pub race: String,
    pub comorbidities: Comorbidities,
}

impl PatientStrata {
    pub fn age_group(&self) -> AgeGroup {
        if self.age < 65 {
            AgeGroup::Under65
        } else {
            AgeGroup::AtLeast65
        }
    }

    /// `(dimension, level)` pairs this patient belongs to.
    pub fn memberships(&self) -> [(&'static str, String); 4] {
        [
            ("age", format!("{:?}", self.age_group())),
            ("sex", format!("{:?}", self.sex)),
            ("race", self.race.clone()),
            ("risk_tier", format!("{:?}", self.comorbidities.tier())),
        ]
    }
}

/// One scored evaluation window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredWindow {
    pub patient_id: String,
    pub prob: f64,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    pub dimension: String,
    pub level: String,
    pub n_patients: usize,
    pub metrics: MetricReport,
    /// F1 of the subgroup minus F1 of its complement.
    pub f1_difference: Option<f64>,
    /// Two-sided bootstrap p-value for a zero F1 difference.
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub rows: Vec<SubgroupRow>,
    /// Subgroups that were omitted because no window fell into them.
    pub notes: Vec<String>,
}

fn f1_of(windows: &[&ScoredWindow]) -> Option<f64> {
    if windows.is_empty() {
        return None;
    }
    let preds: Vec<u8> = windows.iter().map(|w| u8::from(w.prob >= THRESHOLD)).collect();
    let labels: Vec<u8> = windows.iter().map(|w| w.label).collect();
    confusion_metrics(&preds, &labels).ok().map(|m| m.f1)
}

/// Metrics per subgroup along every strata dimension, with a bootstrap over
/// patients comparing each subgroup's F1 against the rest of the cohort.
pub fn subgroup_report(
    windows: &[ScoredWindow],
    strata: &BTreeMap<String, PatientStrata>,
    resamples: usize,
    seed: u64,
) -> Result<SubgroupReport> {
    let mut by_patient: BTreeMap<&str, Vec<&ScoredWindow>> = BTreeMap::new();
    for w in windows {
        if !strata.contains_key(&w.patient_id) {
            return Err(Error::InvalidParams(format!("no strata for patient {}", w.patient_id)));
        }
        by_patient.entry(&w.patient_id).or_default().push(w);
    }
    let patients: Vec<&str> = by_patient.keys().copied().collect();

    // Levels observed in the strata table, per dimension.
    let mut levels: BTreeMap<&'static str, BTreeMap<String, Vec<&str>>> = BTreeMap::new();
    for (pid, s) in strata {
        for (dim, level) in s.memberships() {
            let members = levels.entry(dim).or_default().entry(level).or_default();
            if by_patient.contains_key(pid.as_str()) {
                members.push(pid.as_str());
            }
        }
    }

    // Shared bootstrap draws so every subgroup sees the same resamples.
    let mut rng = rng::stream(seed, Purpose::Bootstrap, 0);
    let draws: Vec<Vec<usize>> = (0..resamples)
        .map(|_| {
            (0..patients.len())
                .map(|_| rng.random_range(0..patients.len()))
                .collect()
        })
        .collect();

    let mut report = SubgroupReport {
        rows: Vec::new(),
        notes: Vec::new(),
    };
    for (dim, dim_levels) in &levels {
        for (level, members) in dim_levels {
            if members.is_empty() {
                report
                    .notes
                    .push(format!("{dim}={level}: no evaluation windows, omitted"));
                continue;
            }
            let inside: Vec<&ScoredWindow> = members.iter().flat_map(|p| by_patient[p].iter().copied()).collect();
            let probs: Vec<f64> = inside.iter().map(|w| w.prob).collect();
            let labels: Vec<u8> = inside.iter().map(|w| w.label).collect();
            let metrics = evaluate(&probs, &labels)?;

            let is_member: Vec<bool> = patients.iter().map(|p| members.contains(p)).collect();
            let split = |idx: &mut dyn Iterator<Item = usize>| {
                let (mut a, mut b) = (Vec::new(), Vec::new());
                for i in idx {
                    let target = if is_member[i] { &mut a } else { &mut b };
                    target.extend(by_patient[patients[i]].iter().copied());
                }
                match (f1_of(&a), f1_of(&b)) {
                    (Some(x), Some(y)) => Some(x - y),
                    _ => None,
                }
            };
            let observed = split(&mut (0..patients.len()));
            let p_value = observed.and_then(|_| {
                let diffs: Vec<f64> = draws.iter().filter_map(|d| split(&mut d.iter().copied())).collect();
                if diffs.is_empty() {
                    return None;
                }
                let n = diffs.len() as f64;
                let le = diffs.iter().filter(|&&d| d <= 0.0).count() as f64 / n;
                let ge = diffs.iter().filter(|&&d| d >= 0.0).count() as f64 / n;
                Some((2.0 * le.min(ge)).min(1.0))
            });
            report.rows.push(SubgroupRow {
                dimension: dim.to_string(),
                level: level.clone(),
                n_patients: members.len(),
                metrics,
                f1_difference: observed,
                p_value,
            });
        }
    }
    Ok(report)
}

/// Per-fold metrics for one (window, dataset) cell of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub window_min: u32,
    pub dataset: String,
    pub folds: Vec<MetricReport>,
}

/// Mean and sample SD; SD is 0 for a single value.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

const TABLE_METRICS: [&str; 7] = ["accuracy", "recall", "precision", "f1", "f2", "auc", "macro_f1"];

impl TableRow {
    fn metric(&self, name: &str) -> Vec<f64> {
        self.folds
            .iter()
            .filter_map(|m| match name {
                "accuracy" => Some(m.accuracy),
                "recall" => Some(m.recall),
                "precision" => Some(m.precision),
                "f1" => Some(m.f1),
                "f2" => Some(m.f2),
                "auc" => m.auc,
                "macro_f1" => Some(m.macro_f1),
                _ => None,
            })
            .collect()
    }

    /// `(mean, sd)` across folds; `None` if no fold defines the metric.
    pub fn summary(&self, name: &str) -> Option<(f64, f64)> {
        let v = self.metric(name);
        (!v.is_empty()).then(|| mean_sd(&v))
    }
}

/// CSV with a mean and SD column per metric.
pub fn table_csv(rows: &[TableRow]) -> String {
    let mut out = String::from("window_min,dataset,n_folds");
    for m in TABLE_METRICS {
        let _ = write!(out, ",{m}_mean,{m}_sd");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{},{}", r.window_min, r.dataset, r.folds.len());
        for m in TABLE_METRICS {
            match r.summary(m) {
                Some((mean, sd)) => {
                    let _ = write!(out, ",{mean:.6},{sd:.6}");
                }
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}

/// Fixed-width text table, one line per row, `mean ± sd` cells.
pub fn table_text(rows: &[TableRow]) -> String {
    let mut out = format!("{:<8} {:<14}", "Window", "Dataset");
    for m in TABLE_METRICS {
        let _ = write!(out, " {m:>17}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{:<8} {:<14}",
            format!("{}h", r.window_min as f64 / 60.0),
            r.dataset
        );
        for m in TABLE_METRICS {
            let cell = match r.summary(m) {
                Some((mean, sd)) => format!("{mean:.4} ± {sd:.4}"),
                None => "n/a".to_string(),
            };
            let _ = write!(out, " {cell:>17}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_tp_one_fp() {
        let m = confusion_metrics(&[1, 1], &[1, 0]).unwrap();
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 1.0);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.f2 - 2.5 / 3.0).abs() < 1e-15);
        assert_eq!(m.accuracy, 0.5);
    }

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 1, 0, 1];
        let m = evaluate(&[0.1, 0.9, 0.8, 0.2, 0.7], &y).unwrap();
        for v in [
            m.accuracy,
            m.recall,
            m.precision,
            m.f1,
            m.f2,
            m.macro_f1,
            m.auc.unwrap(),
        ] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn all_positive_on_balanced_labels() {
        assert!((macro_f1(&[1, 1, 1, 1], &[0, 1, 0, 1]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn no_positive_predictions_gives_zero_f_scores() {
        let m = confusion_metrics(&[0, 0], &[1, 0]).unwrap();
        assert_eq!((m.precision, m.f1, m.f2), (0.0, 0.0, 0.0));
    }

    #[test]
    fn auc_basics() {
        assert_eq!(roc_auc(&[0.1, 0.9], &[0, 1]), Some(1.0));
        assert_eq!(roc_auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]), Some(0.5));
        assert_eq!(roc_auc(&[0.3, 0.4], &[1, 1]), None);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        assert!(confusion_metrics(&[1], &[1, 0]).is_err());
        assert!(confusion_metrics(&[], &[]).is_err());
    }

    #[test]
    fn risk_tiers() {
        let c = Comorbidities {
            hypertension: true,
            diabetes: true,
            ckd: true,
            ..Default::default()
        };
        assert_eq!(c.tier(), RiskTier::High);
        assert_eq!(Comorbidities::default().tier(), RiskTier::Low);
        let one = Comorbidities {
            ihd: true,
            ..Default::default()
        };
        assert_eq!(one.tier(), RiskTier::Medium);
    }

    #[test]
    fn mean_sd_uses_bessel_correction() {
        assert_eq!(mean_sd(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
        assert_eq!(mean_sd(&[5.0]), (5.0, 0.0));
    }

    #[test]
    fn table_renders_one_line_per_row() {
        let m = evaluate(&[0.1, 0.9], &[0, 1]).unwrap();
        let rows = vec![
            TableRow {
                window_min: 240,
                dataset: "synthetic".into(),
                folds: vec![m, m],
            },
            TableRow {
                window_min: 360,
                dataset: "synthetic".into(),
                folds: vec![m],
            },
        ];
        assert_eq!(table_csv(&rows).lines().count(), 3);
        let text = table_text(&rows);
        assert!(text.contains("4h") && text.contains("6h"));
        assert!(text.contains("1.0000 ± 0.0000"));
    }
}
