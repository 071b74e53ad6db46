//! Acceptance criteria A1-A10. Each test prints one `A<n> PASS|FAIL` line to
//! stdout (uncaptured) and then asserts.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use ppgwarn_cli::artifacts::{list_files, sha256_file};
use ppgwarn_cli::config::PipelineConfig;
use ppgwarn_cli::stages::{read_scores_csv, CvSummary};
use ppgwarn_core::attribution::{exact_shapley, explain_window, shapley_from_table};
use ppgwarn_core::biomarkers::{baseline_stats, build_feature_matrix, extract_beats, Feature, FeatureMatrix};
use ppgwarn_core::evaluation::{confusion_metrics, macro_f1, roc_auc};
use ppgwarn_core::ingest::SourceSegment;
use ppgwarn_core::kinematics::{derivatives, detect_beats, locate_fiducials};
use ppgwarn_core::labeling::{assign_label, window_dataset, Anchor, LabelParams, LabeledDataset, LabeledWindow, Zone};
use ppgwarn_core::noteanchor::{NoteParser, NoteRecord, OnsetResolution};
use ppgwarn_core::resnet1d::{train_cv, ArchSpec, Batch, Mode, Model, ModelCheckpoint, Standardizer, TrainConfig};
use ppgwarn_core::selection::{cohens_d, pearson};
use ppgwarn_core::synthppg::{synth_cohort, synth_record, BeatModel, CohortParams, DriftSpec, ModelRanges};

fn verdict(id: &str, pass: bool, detail: &str) {
    let line = format!("{id} {}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "{}", line.trim_end());
}

fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// ---------------------------------------------------------------- end to end

struct EndToEnd {
    _tmp: tempfile::TempDir,
    out: PathBuf,
    config: PipelineConfig,
    first_run: Duration,
    first: BTreeMap<String, String>,
    second: BTreeMap<String, String>,
}

fn run_cli(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_ppgwarn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .status()
        .expect("spawn ppgwarn");
    assert!(status.success(), "ppgwarn {args:?} exited with {status}");
}

/// Hash of every artifact under `out`, waveforms excluded for speed (their
/// hashes sit in the cohort manifest, which is compared).
fn snapshot(out: &Path) -> BTreeMap<String, String> {
    list_files(out)
        .unwrap()
        .into_iter()
        .filter(|p| !p.starts_with("cohort/waveforms"))
        .map(|p| (p.to_string_lossy().into_owned(), sha256_file(&out.join(&p)).unwrap()))
        .collect()
}

/// `run-all` on the shipped demo config, twice into the same directory.
fn end_to_end() -> &'static EndToEnd {
    static RUN: OnceLock<EndToEnd> = OnceLock::new();
    RUN.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("demo");
        let config_path = workspace_root().join("configs/demo.json");
        let cfg = config_path.to_str().unwrap();
        let out_s = out.to_str().unwrap();
        let t = Instant::now();
        run_cli(&["run-all", "--config", cfg, "--out", out_s]);
        let first_run = t.elapsed();
        let first = snapshot(&out);
        run_cli(&["run-all", "--config", cfg, "--out", out_s, "--jobs", "1"]);
        let second = snapshot(&out);
        let mut config = PipelineConfig::load(&config_path).unwrap();
        config.paths.out = out.clone();
        EndToEnd {
            _tmp: tmp,
            out,
            config,
            first_run,
            first,
            second,
        }
    })
}

fn read_cv(out: &Path, t_w: u32) -> CvSummary {
    serde_json::from_str(&std::fs::read_to_string(out.join(format!("models/w{t_w}/cv.json"))).unwrap()).unwrap()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn a1_end_to_end_synthetic_benchmark() {
    let e = end_to_end();
    let cv = read_cv(&e.out, 360);
    let f1 = mean(cv.folds.iter().map(|f| f.report.macro_f1));
    let aucs: Vec<f64> = cv.folds.iter().filter_map(|f| f.report.auc).collect();
    let auc = mean(aucs.iter().copied());
    let secs = e.first_run.as_secs_f64();
    let report = e.out.join("report/report.md").is_file() && e.out.join("eval/table.csv").is_file();
    let pass = cv.folds.len() == 5 && aucs.len() == 5 && f1 >= 0.90 && auc >= 0.85 && secs < 900.0 && report;
    verdict(
        "A1",
        pass,
        &format!("T_w=360 mean macro-F1 {f1:.4} (>= 0.90), mean AUC {auc:.4} (>= 0.85), run-all {secs:.0} s (< 900 s)"),
    );
}

#[test]
fn a9_determinism() {
    let e = end_to_end();
    let differing: Vec<&String> = e.first.keys().filter(|k| e.first.get(*k) != e.second.get(*k)).collect();
    let ckpts = e.first.keys().filter(|k| k.ends_with(".ckpt")).count();
    let key_files = ["eval/table.csv", "attribution/report.json", "attribution/phi.csv"];
    let pass = differing.is_empty()
        && e.first.len() == e.second.len()
        && ckpts == 15
        && key_files.iter().all(|k| e.first.contains_key(*k));
    verdict(
        "A9",
        pass,
        &format!(
            "{} artifacts ({ckpts} checkpoints) compared across two run-all executions, {} differ {:?}",
            e.first.len(),
            differing.len(),
            differing
        ),
    );
}

#[test]
fn a10_permutation_null() {
    let e = end_to_end();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("null");
    for stage in ["features", "onsets"] {
        let dst = out.join(stage);
        std::fs::create_dir_all(&dst).unwrap();
        for rel in list_files(&e.out.join(stage)).unwrap() {
            std::fs::copy(e.out.join(stage).join(&rel), dst.join(&rel)).unwrap();
        }
    }
    let mut cfg = e.config.clone();
    cfg.synth = None;
    cfg.paths.out = out.clone();
    cfg.labeling.windows = vec![360];
    cfg.labeling.shuffle_labels = true;
    let cfg_path = tmp.path().join("null.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let c = cfg_path.to_str().unwrap();
    for stage in ["label", "train", "eval"] {
        run_cli(&[stage, "--config", c]);
    }
    let scores = read_scores_csv(&std::fs::read_to_string(out.join("models/w360/scores.csv")).unwrap()).unwrap();
    let probs: Vec<f64> = scores.iter().map(|(_, s)| s.prob).collect();
    let labels: Vec<u8> = scores.iter().map(|(_, s)| s.label).collect();
    let auc = roc_auc(&probs, &labels).unwrap();
    verdict(
        "A10",
        (0.4..=0.6).contains(&auc),
        &format!(
            "label-shuffled T_w=360, pooled out-of-fold AUC {auc:.4} over {} windows (in [0.4, 0.6])",
            probs.len()
        ),
    );
}

// ------------------------------------------------------------------ horizons

/// Mean fold macro-F1 at `t_w` on a cohort whose drift runs at `rate` per
/// hour for exactly the warning span before onset.
fn graded_f1(t_w: u32, rate: f64, seed: u64) -> f64 {
    let params = CohortParams {
        drift: DriftSpec {
            delta_tsp: rate,
            delta_asp: -rate,
            span_s: t_w as f64 * 60.0,
            noise_sd: 0.02,
            hr_jitter: 0.02,
        },
        ..CohortParams::default()
    };
    let lp = LabelParams::new(t_w as f64);
    let mut windows = Vec::new();
    for p in synth_cohort(&params, seed).unwrap() {
        let seg = SourceSegment {
            waveform: p.record.waveform.clone(),
            source_file_id: p.patient_id.clone(),
        };
        let (beats, _) = extract_beats(&[seg]).unwrap();
        let base = baseline_stats(&beats, 3600.0);
        let m = build_feature_matrix(&p.patient_id, &beats, &base, 30).unwrap();
        let anchor = match p.onset_epoch {
            Some(t) => Anchor::Onset(t as f64),
            None => Anchor::PseudoOnset(p.record.waveform.end_time()),
        };
        windows.extend(window_dataset(&m, Some(anchor), &lp, 30, 30).unwrap().0);
    }
    let mut ds = LabeledDataset {
        params: lp,
        length: 30,
        stride: 30,
        windows,
    };
    ds.sort();
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let cv = train_cv(&ds, &ArchSpec::standard(1, 30), &cfg, 0.05, 0.8).unwrap();
    mean(cv.folds.iter().map(|f| f.report.macro_f1))
}

#[test]
fn a2_monotone_horizon_trend() {
    // slow enough that no horizon saturates
    let rate = 0.001;
    let (f240, f300, f360) = (
        graded_f1(240, rate, 2024),
        graded_f1(300, rate, 2024),
        graded_f1(360, rate, 2024),
    );
    verdict(
        "A2",
        f360 >= f300 && f300 >= f240 - 0.02,
        &format!(
            "drift {:.2}%/h over each warning span, macro-F1 240: {f240:.4}, 300: {f300:.4}, 360: {f360:.4}; need 360 >= 300 >= 240 - 0.02",
            100.0 * rate
        ),
    );
}

// ------------------------------------------------------------------ gradients

#[test]
fn a3_gradient_fidelity() {
    const H: f64 = 1e-4;
    let mut worst: f64 = 0.0;
    let (mut probed, mut skipped) = (0, 0);
    let mut slots = Vec::new();
    for (arch, seed) in [
        (ArchSpec::standard(4, 16), 31u64),
        (
            ArchSpec {
                norm: false,
                ..ArchSpec::standard(3, 12)
            },
            32,
        ),
    ] {
        let mut m = Model::init(&arch, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut m.params {
            *v += 0.05 * rng.random_range(-1.0..1.0);
        }
        let (b, f, l) = (8, arch.in_channels, arch.length);
        let x = Batch::new(b, f, l, (0..b * f * l).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let labels = [1, 0, 1, 0, 0, 1, 1, 0];
        let (_, grad, _) = m.loss_and_grad(&x, &labels, 3.0).unwrap();
        let at = |p: &[f64]| {
            let mm = Model {
                params: p.to_vec(),
                ..m.clone()
            };
            (
                mm.loss_and_grad(&x, &labels, 3.0).unwrap().0,
                mm.activation_pattern(&x, Mode::Train).unwrap(),
            )
        };
        for slot in m.slots() {
            slots.push(slot.name.clone());
            for _ in 0..10.min(slot.len) {
                let i = slot.offset + rng.random_range(0..slot.len);
                let mut p = m.params.clone();
                p[i] += H;
                let (up, pu) = at(&p);
                p[i] -= 2.0 * H;
                let (down, pd) = at(&p);
                if pu != pd {
                    // the +-H interval crosses a rectifier kink
                    skipped += 1;
                    continue;
                }
                let fd = (up - down) / (2.0 * H);
                worst = worst.max((grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-6));
                probed += 1;
            }
        }
    }
    let kinds = ["conv", "bn", "proj.w", "proj_bn", "head.w", "head.b"];
    let covered = kinds.iter().all(|k| slots.iter().any(|s| s.contains(k)));
    verdict(
        "A3",
        worst < 1e-4 && probed >= 200 && covered,
        &format!("max relative error {worst:.2e} (< 1e-4) over {probed} coordinates, {skipped} kink-crossing probes skipped, all layer types covered: {covered}"),
    );
}

// ------------------------------------------------------------------ Shapley

fn permutation_oracle(values: &[f64], f: usize) -> Vec<f64> {
    fn perms(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
        if k == items.len() {
            out.push(items.clone());
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            perms(items, k + 1, out);
            items.swap(k, i);
        }
    }
    let mut all = Vec::new();
    perms(&mut (0..f).collect(), 0, &mut all);
    let mut phi = vec![0.0; f];
    for p in &all {
        let mut mask = 0;
        for &i in p {
            phi[i] += values[mask | 1 << i] - values[mask];
            mask |= 1 << i;
        }
    }
    phi.iter().map(|v| v / all.len() as f64).collect()
}

#[test]
fn a4_shapley_axioms() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // efficiency on model explanations
    let (f, l) = (6, 8);
    let features: Vec<Feature> = Feature::ALL[..f].to_vec();
    let mut worst_eff: f64 = 0.0;
    let mut worst_dummy: f64 = 0.0;
    for k in 0..100 {
        let model = Model::init(&ArchSpec::standard(f, l), k).unwrap();
        let std = Standardizer {
            features: features.clone(),
            mean: (0..f).map(|_| rng.random_range(-1.0..1.0)).collect(),
            sd: (0..f).map(|_| rng.random_range(0.5..2.0)).collect(),
        };
        let ckpt = ModelCheckpoint::new(model, std, LabelParams::new(360.0), k, 0, 1, 0.0);
        let background: Vec<f64> = (0..f).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut values: Vec<f64> = (0..l * 17).map(|_| rng.random_range(-3.0..3.0)).collect();
        // feature 0 sits at the background everywhere: a dummy
        for t in 0..l {
            values[t * 17 + features[0].index()] = background[0];
        }
        let w = LabeledWindow {
            patient_id: "p".into(),
            t_center: -100.0,
            label: 1,
            values,
        };
        let r = explain_window(&ckpt, &w, &background).unwrap();
        worst_eff = worst_eff.max((r.phi.iter().sum::<f64>() - (r.fx - r.base_value)).abs());
        worst_dummy = worst_dummy.max(r.phi[0].abs());
    }
    // exact agreement with permutation enumeration at F = 3
    let mut worst_perm: f64 = 0.0;
    for _ in 0..200 {
        let values: Vec<f64> = (0..8).map(|_| rng.random_range(-5.0..5.0)).collect();
        let r = shapley_from_table(&values).unwrap();
        for (a, b) in r.phi.iter().zip(permutation_oracle(&values, 3)) {
            worst_perm = worst_perm.max((a - b).abs());
        }
    }
    // a feature the score ignores gets exactly zero
    let r = exact_shapley(|x| x[0] * x[2] + x[2].sin(), &[1.0, 7.0, -2.0], &[vec![0.5, 0.0, 1.0]]).unwrap();
    let pass = worst_eff < 1e-9 && worst_perm <= 1e-12 && r.phi[1] == 0.0 && worst_dummy < 1e-12;
    verdict(
        "A4",
        pass,
        &format!(
            "efficiency residual {worst_eff:.1e} over 100 explanations (< 1e-9), F=3 permutation oracle max diff {worst_perm:.1e} (<= 1e-12), dummy phi {} / model dummy {worst_dummy:.1e}",
            r.phi[1]
        ),
    );
}

// ------------------------------------------------------------------ statistics

fn welford(x: &[f64]) -> (f64, f64) {
    let (mut m, mut s) = (0.0, 0.0);
    for (k, v) in x.iter().enumerate() {
        let d = v - m;
        m += d / (k + 1) as f64;
        s += d * (v - m);
    }
    (m, s)
}

fn cohens_d_oracle(a: &[f64], b: &[f64]) -> f64 {
    let (ma, sa) = welford(a);
    let (mb, sb) = welford(b);
    let pooled = ((sa + sb) / (a.len() + b.len() - 2) as f64).sqrt();
    if pooled == 0.0 {
        if ma == mb {
            0.0
        } else {
            (mb - ma).signum() * f64::INFINITY
        }
    } else {
        (mb - ma) / pooled
    }
}

fn pearson_oracle(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut ma, mut mb, mut c) = (0.0, 0.0, 0.0);
    for (k, (x, y)) in a.iter().zip(b).enumerate() {
        let n = (k + 1) as f64;
        let dx = x - ma;
        ma += dx / n;
        mb += (y - mb) / n;
        c += dx * (y - mb);
    }
    let (_, sa) = welford(a);
    let (_, sb) = welford(b);
    (sa != 0.0 && sb != 0.0).then(|| c / (sa * sb).sqrt())
}

fn confusion_oracle(p: &[u8], y: &[u8]) -> [f64; 6] {
    let count = |pp: u8, yy: u8| p.iter().zip(y).filter(|(a, b)| **a == pp && **b == yy).count() as f64;
    let (tp, fp, tn, fn_) = (count(1, 1), count(1, 0), count(0, 0), count(0, 1));
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let f1_pos = div(2.0 * tp, 2.0 * tp + fp + fn_);
    let f1_neg = div(2.0 * tn, 2.0 * tn + fn_ + fp);
    [
        (tp + tn) / p.len() as f64,
        div(tp, tp + fn_),
        div(tp, tp + fp),
        f1_pos,
        div(5.0 * tp, 5.0 * tp + 4.0 * fn_ + fp),
        (f1_pos + f1_neg) / 2.0,
    ]
}

fn auc_oracle(s: &[f64], y: &[u8]) -> Option<f64> {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &yi) in y.iter().enumerate() {
        for (j, &yj) in y.iter().enumerate() {
            if yi == 1 && yj == 0 {
                pairs += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0.0).then(|| num / pairs)
}

fn close(a: f64, b: f64) -> bool {
    if a.is_finite() {
        (a - b).abs() <= 1e-12 * a.abs().max(1.0)
    } else {
        a == b
    }
}

#[test]
fn a5_statistical_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut fails = BTreeMap::<&str, usize>::new();
    let mut ties = 0;
    for k in 0..1000 {
        let (na, nb) = (rng.random_range(2..40), rng.random_range(2..40));
        let scale = 10f64.powi(rng.random_range(-3..4));
        let mut draw = |n: usize, shift: f64| -> Vec<f64> {
            if k % 50 == 0 {
                vec![shift; n]
            } else {
                (0..n).map(|_| shift + scale * rng.random_range(-1.0..1.0)).collect()
            }
        };
        let a = draw(na, 0.0);
        let b = draw(nb, scale * 0.3);
        if !close(cohens_d(&a, &b).unwrap(), cohens_d_oracle(&a, &b)) {
            *fails.entry("cohens_d").or_default() += 1;
        }
        let n = rng.random_range(2..60);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| 0.7 * v + rng.random_range(-1.0..1.0) * scale)
            .collect();
        let ok = match (pearson(&x, &y), pearson_oracle(&x, &y)) {
            (Some(r), Some(o)) => close(r, o),
            (None, None) => true,
            _ => false,
        };
        if !ok {
            *fails.entry("pearson").or_default() += 1;
        }

        let n = rng.random_range(1..80);
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let preds: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let m = confusion_metrics(&preds, &labels).unwrap();
        let got = [m.accuracy, m.recall, m.precision, m.f1, m.f2, m.macro_f1];
        if got
            .iter()
            .zip(confusion_oracle(&preds, &labels))
            .any(|(g, o)| !close(*g, o))
        {
            *fails.entry("confusion").or_default() += 1;
        }
        if !close(macro_f1(&preds, &labels).unwrap(), confusion_oracle(&preds, &labels)[5]) {
            *fails.entry("macro_f1").or_default() += 1;
        }
        // coarse scores force ties
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 / 5.0).collect();
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        ties += usize::from(sorted.windows(2).any(|w| w[0] == w[1]));
        let ok = match (roc_auc(&scores, &labels), auc_oracle(&scores, &labels)) {
            (Some(a), Some(o)) => close(a, o),
            (None, None) => true,
            _ => false,
        };
        if !ok {
            *fails.entry("roc_auc").or_default() += 1;
        }
    }
    verdict(
        "A5",
        fails.is_empty() && ties > 500,
        &format!("1000 instances each of cohens_d, pearson, confusion metrics, macro-F1, roc_auc ({ties} with tied scores) vs brute force at 1e-12; mismatches {fails:?}"),
    );
}

// ------------------------------------------------------------------ labeling

fn zone_oracle(t: f64, p: &LabelParams) -> Zone {
    let intervals = [
        (Zone::Normal, -p.horizon_start, true, -(p.t_w + p.delta_pre), false),
        (
            Zone::Buffer,
            -(p.t_w + p.delta_pre),
            true,
            -(p.t_w - p.delta_pre),
            false,
        ),
        (Zone::Warning, -(p.t_w - p.delta_pre), true, -p.delta_0, true),
        (Zone::LeadTime, -p.delta_0, false, 0.0, true),
    ];
    for (z, lo, lo_closed, hi, hi_closed) in intervals {
        let above = if lo_closed { t >= lo } else { t > lo };
        let below = if hi_closed { t <= hi } else { t < hi };
        if above && below {
            return z;
        }
    }
    Zone::OutOfRange
}

fn synthetic_matrix(rng: &mut ChaCha8Rng, anchor: f64) -> FeatureMatrix {
    let mut times = Vec::new();
    let mut t = anchor - 540.0 * 60.0;
    while t < anchor + 60.0 {
        times.push(t);
        t += rng.random_range(0.6..1.4);
    }
    let rows = times
        .iter()
        .map(|_| std::array::from_fn(|_| (rng.random_range(0.0..1.0) > 0.05).then(|| rng.random_range(-1.0..1.0))))
        .collect();
    FeatureMatrix {
        patient_id: "p".into(),
        segments: vec![0; times.len()],
        times,
        rows,
    }
}

#[test]
fn a6_labeling_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    let mut measure_err: f64 = 0.0;
    let mut leaks = 0;
    let mut emitted = 0;
    for t_w in [240.0, 300.0, 360.0] {
        let p = LabelParams::new(t_w);
        let edges = [
            -p.horizon_start,
            -(p.t_w + p.delta_pre),
            -(p.t_w - p.delta_pre),
            -p.delta_0,
            0.0,
        ];
        for k in 0..10_000 {
            let t = if k % 10 == 0 {
                edges[k / 10 % edges.len()]
            } else {
                rng.random_range(-500.0..10.0)
            };
            if assign_label(t, &p) != zone_oracle(t, &p) {
                mismatches += 1;
            }
        }
        // measure of each zone on a 1e-3 min lattice vs its closed form
        let step = 1e-3;
        let mut counts = BTreeMap::new();
        let n = (p.horizon_start / step).round() as i64;
        for i in 0..n {
            let t = -p.horizon_start + (i as f64 + 0.5) * step;
            *counts.entry(format!("{:?}", assign_label(t, &p))).or_insert(0.0) += step;
        }
        let expect = [
            ("Normal", p.horizon_start - p.t_w - p.delta_pre),
            ("Buffer", 2.0 * p.delta_pre),
            ("Warning", p.t_w - p.delta_pre - p.delta_0),
            ("LeadTime", p.delta_0),
        ];
        let total: f64 = expect.iter().map(|e| e.1).sum();
        measure_err = measure_err.max((total - p.horizon_start).abs());
        for (z, m) in expect {
            measure_err = measure_err.max((counts.get(z).copied().unwrap_or(0.0) - m).abs());
        }
        // no emitted window reaches past -delta_0
        for (length, stride) in [(30, 30), (30, 1), (10, 7), (5, 3)] {
            let anchor = 1_551_657_600.0 + 60.0 * rng.random_range(0..1000) as f64;
            let m = synthetic_matrix(&mut rng, anchor);
            for a in [Anchor::Onset(anchor), Anchor::PseudoOnset(anchor)] {
                let (ws, _) = window_dataset(&m, Some(a), &p, length, stride).unwrap();
                for w in &ws {
                    emitted += 1;
                    let (lo, hi) = (w.t_center - length as f64 / 2.0, w.t_center + length as f64 / 2.0);
                    let zone_ok = match w.label {
                        1 => lo >= -(p.t_w - p.delta_pre) && hi <= -p.delta_0,
                        _ => lo >= -p.horizon_start && hi <= -(p.t_w + p.delta_pre),
                    };
                    if hi > -p.delta_0 || !zone_ok {
                        leaks += 1;
                    }
                }
            }
        }
    }
    verdict(
        "A6",
        mismatches == 0 && measure_err < 1e-6 && leaks == 0 && emitted > 1000,
        &format!("3 x 10,000 t vs interval oracle: {mismatches} mismatches; zone measures off by at most {measure_err:.1e}; {leaks} of {emitted} emitted windows violate the lead-time bound"),
    );
}

// ------------------------------------------------------------------ fiducials

fn peak_accuracy(noise: f64, tol: f64) -> (f64, usize) {
    const FS: f64 = 125.0;
    let (mut ok, mut total) = (0, 0);
    for rec in 0..12 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + rec);
        let r = ModelRanges::default();
        let mut u = |(lo, hi): (f64, f64)| rng.random_range(lo..hi);
        let mu1 = u(r.mu1);
        let model = BeatModel {
            a1: 1.0,
            mu1,
            sigma1: u(r.sigma1),
            a2: u(r.amplitude_ratio),
            mu2: mu1 + u(r.separation),
            sigma2: u(r.sigma2),
            baseline: 0.0,
            t_pi: 60.0 / u(r.heart_rate_bpm),
        };
        let drift = DriftSpec {
            noise_sd: noise,
            hr_jitter: 0.02,
            ..DriftSpec::none()
        };
        let record = synth_record(&model, 90.0, FS, &drift, None, &mut rng).unwrap();
        let d = derivatives(&record.waveform).unwrap();
        for s in detect_beats(&d).unwrap() {
            let Ok(f) = locate_fiducials(&d, s) else { continue };
            let onset = s.onset_idx as f64 / FS;
            let truth = record
                .beats
                .iter()
                .min_by(|a, b| (a.onset - onset).abs().total_cmp(&(b.onset - onset).abs()))
                .unwrap();
            total += 1;
            ok += usize::from((f.sp as f64 - truth.sp * FS).abs() <= tol);
        }
    }
    (ok as f64 / total as f64, total)
}

#[test]
fn a7_fiducial_accuracy() {
    let (clean, n_clean) = peak_accuracy(0.0, 2.0);
    let (noisy, n_noisy) = peak_accuracy(0.02, 3.0);
    verdict(
        "A7",
        clean == 1.0 && noisy >= 0.95,
        &format!(
            "systolic peak within 2 samples for {:.2}% of {n_clean} clean beats (100%), within 3 samples for {:.2}% of {n_noisy} beats at 2% noise (>= 95%)",
            100.0 * clean,
            100.0 * noisy
        ),
    );
}

// ------------------------------------------------------------------ notes

#[derive(Deserialize)]
struct RuleCase {
    #[serde(flatten)]
    note: NoteRecord,
    expect_kind: String,
    expect_ts: Option<i64>,
    expect_confidence: Option<String>,
}

#[derive(Deserialize)]
struct GoldCase {
    #[serde(flatten)]
    note: NoteRecord,
    gold_ts: Option<i64>,
}

fn load_jsonl<T: for<'de> Deserialize<'de>>(name: &str) -> Vec<T> {
    let path = workspace_root().join("crates/core/tests/data").join(name);
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn a8_note_parser() {
    let parser = NoteParser::default();
    let rules: Vec<RuleCase> = load_jsonl("rule_cases.jsonl");
    let rule_pass = rules
        .iter()
        .filter(|c| {
            let r = parser.parse_note(&c.note);
            let conf = r.confidence().map(|c| format!("{c:?}").to_lowercase());
            r.kind() == c.expect_kind && r.ts() == c.expect_ts && conf == c.expect_confidence
        })
        .count();
    let has_clock_example = rules.iter().any(|c| c.note.text.contains("onset at 6:30 AM"));
    let gold: Vec<GoldCase> = load_jsonl("gold_corpus.jsonl");
    let (mut resolved, mut within, mut kind_errors) = (0, 0, 0);
    for c in &gold {
        let r = parser.parse_note(&c.note);
        kind_errors += usize::from(c.gold_ts.is_none() != (r == OnsetResolution::NonEvent));
        if let (Some(ts), Some(g)) = (r.ts(), c.gold_ts) {
            resolved += 1;
            within += usize::from((ts - g).abs() <= 15 * 60);
        }
    }
    let rate = within as f64 / resolved as f64;
    verdict(
        "A8",
        rules.len() >= 40 && rule_pass == rules.len() && has_clock_example && rate >= 0.95,
        &format!(
            "rule suite {rule_pass}/{} (100%); gold corpus {within}/{resolved} = {:.1}% within 15 min (>= 95%), {kind_errors} event/non-event disagreements",
            rules.len(),
            100.0 * rate
        ),
    );
}
