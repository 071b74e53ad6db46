//! Pipeline stages. Each reads artifacts of earlier stages from the output
//! directory and writes one or more [`StageDir`]s.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ppgwarn_core::attribution::{
    attribution_summary, explain_window, normal_background, phi_csv, AttributionResult, AttributionSummary,
};
use ppgwarn_core::biomarkers::{
    baseline_stats, build_feature_matrix, extract_beats, read_matrix_csv, write_matrix_csv, ExtractionStats, Feature,
    FeatureMatrix,
};
use ppgwarn_core::evaluation::{
    subgroup_report, table_csv, table_text, MetricReport, PatientStrata, ScoredWindow, TableRow,
};
use ppgwarn_core::ingest::load_waveform;
use ppgwarn_core::labeling::{permute_labels, window_dataset, Anchor, DatasetManifest, LabeledDataset, WindowStats};
use ppgwarn_core::noteanchor::{
    onsets_csv, parse_corpus, read_notes, read_onsets_csv, CorpusReport, Lexicon, NoteParser,
};
use ppgwarn_core::resnet1d::{read_checkpoint, train_cv, write_checkpoint, EpochLog};
use ppgwarn_core::selection::{select_features, SelectionReport};
use ppgwarn_core::synthppg::{synth_cohort, write_cohort};

use crate::artifacts::{Inputs, StageDir};
use crate::config::PipelineConfig;

/// Resolved configuration plus its hash.
pub struct Ctx {
    pub cfg: PipelineConfig,
    pub hash: String,
}

impl Ctx {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        Ok(Ctx { cfg, hash })
    }

    fn out(&self) -> &Path {
        &self.cfg.paths.out
    }

    pub fn dir(&self, rel: &str) -> PathBuf {
        self.out().join(rel)
    }

    fn inputs(&self) -> Inputs {
        Inputs::new(self.out())
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn window_dir(stage: &str, t_w: u32) -> String {
    format!("{stage}/w{t_w}")
}

pub fn synth(ctx: &Ctx) -> Result<()> {
    let params = ctx
        .cfg
        .synth
        .as_ref()
        .ok_or_else(|| anyhow!("no `synth` section in the config"))?;
    let patients = synth_cohort(params, ctx.cfg.seed)?;
    let dir = StageDir::create("synth", &ctx.dir("cohort"))?;
    write_cohort(dir.path(), &patients, params, ctx.cfg.seed)?;
    dir.finish(&ctx.hash, ctx.cfg.seed, ctx.inputs())?;
    info!("synth: {} patients ({} positive)", patients.len(), params.n_pos);
    Ok(())
}

pub fn parse_notes(ctx: &Ctx) -> Result<()> {
    let mut inputs = ctx.inputs();
    let notes_path = ctx.cfg.notes_path();
    inputs.add(&notes_path)?;
    let parser = match &ctx.cfg.paths.lexicon {
        Some(p) => {
            inputs.add(p)?;
            NoteParser::new(Lexicon::load(p)?)
        }
        None => NoteParser::default(),
    };
    let notes = read_notes(&notes_path)?;
    let (onsets, report) = parse_corpus(&parser, &notes);
    let resolutions: Vec<_> = notes
        .iter()
        .map(|n| serde_json::json!({"note_id": n.note_id, "patient_id": n.patient_id, "resolution": parser.parse_note(n)}))
        .collect();
    let dir = StageDir::create("parse-notes", &ctx.dir("onsets"))?;
    dir.write("onsets.csv", onsets_csv(&onsets))?;
    dir.write_json("corpus_report.json", &report)?;
    dir.write_json("resolutions.json", &resolutions)?;
    dir.finish(&ctx.hash, ctx.cfg.seed, inputs)?;
    info!(
        "parse-notes: {} notes, {} onsets, {} non-event patients",
        report.n_notes,
        onsets.len(),
        report.non_event_patients.len()
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientExtraction {
    pub stats: ExtractionStats,
    /// Epoch seconds of the first and last sample across segments.
    pub record_start: f64,
    pub record_end: f64,
    pub n_beats: usize,
}

fn waveform_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing waveforms in {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            let pid = path.file_stem().unwrap().to_string_lossy().into_owned();
            files.push((pid, path));
        }
    }
    files.sort();
    if files.is_empty() {
        bail!("no waveform CSVs in {}", dir.display());
    }
    Ok(files)
}

pub fn extract(ctx: &Ctx) -> Result<()> {
    let files = waveform_files(&ctx.cfg.waveforms_dir())?;
    let mut inputs = ctx.inputs();
    for (_, p) in &files {
        inputs.add(p)?;
    }
    let fc = &ctx.cfg.features;
    let results: Vec<(String, FeatureMatrix, PatientExtraction)> = files
        .par_iter()
        .map(|(pid, path)| {
            let segments = load_waveform(path, None).with_context(|| format!("patient {pid}"))?;
            let (beats, stats) = extract_beats(&segments).with_context(|| format!("patient {pid}"))?;
            let base = baseline_stats(&beats, fc.baseline_window_s);
            let m = build_feature_matrix(pid, &beats, &base, fc.cv_window).with_context(|| format!("patient {pid}"))?;
            let ex = PatientExtraction {
                stats,
                record_start: segments.iter().map(|s| s.waveform.t0).fold(f64::INFINITY, f64::min),
                record_end: segments
                    .iter()
                    .map(|s| s.waveform.end_time())
                    .fold(f64::NEG_INFINITY, f64::max),
                n_beats: beats.len(),
            };
            info!("extract: {pid}: {} beats", beats.len());
            Ok((pid.clone(), m, ex))
        })
        .collect::<Result<_>>()?;
    let dir = StageDir::create("extract", &ctx.dir("features"))?;
    let mut summary = BTreeMap::new();
    for (pid, m, ex) in results {
        let mut buf = Vec::new();
        write_matrix_csv(&m, &mut buf)?;
        dir.write(&format!("{pid}.csv"), buf)?;
        summary.insert(pid, ex);
    }
    dir.write_json("extraction.json", &summary)?;
    dir.finish(&ctx.hash, ctx.cfg.seed, inputs)?;
    Ok(())
}

/// Feature matrices written by `extract`, in patient order.
fn load_features(ctx: &Ctx, inputs: &mut Inputs) -> Result<(Vec<FeatureMatrix>, BTreeMap<String, PatientExtraction>)> {
    let dir = ctx.dir("features");
    let summary_path = dir.join("extraction.json");
    inputs.add(&summary_path)?;
    let summary: BTreeMap<String, PatientExtraction> = read_json(&summary_path)?;
    let mut out = Vec::new();
    for pid in summary.keys() {
        let path = dir.join(format!("{pid}.csv"));
        inputs.add(&path)?;
        out.push(read_matrix_csv(pid, &read_text(&path)?).with_context(|| format!("patient {pid}"))?);
    }
    Ok((out, summary))
}

pub fn label(ctx: &Ctx) -> Result<()> {
    let mut inputs = ctx.inputs();
    let (matrices, summary) = load_features(ctx, &mut inputs)?;
    let onsets_path = ctx.dir("onsets/onsets.csv");
    let report_path = ctx.dir("onsets/corpus_report.json");
    inputs.add(&onsets_path)?;
    inputs.add(&report_path)?;
    let onsets = read_onsets_csv(&read_text(&onsets_path)?)?;
    let report: CorpusReport = read_json(&report_path)?;
    let non_event: BTreeSet<&str> = report.non_event_patients.iter().map(String::as_str).collect();

    let mut anchors = Vec::new();
    for m in &matrices {
        let anchor = if let Some(&t) = onsets.get(&m.patient_id) {
            Anchor::Onset(t as f64)
        } else if non_event.contains(m.patient_id.as_str()) {
            Anchor::PseudoOnset(summary[&m.patient_id].record_end)
        } else {
            warn!(
                "label: {} has neither an onset nor non-event notes; skipped",
                m.patient_id
            );
            continue;
        };
        anchors.push((m, anchor));
    }
    for pid in onsets.keys().filter(|p| !summary.contains_key(*p)) {
        warn!("label: onset for {pid} but no waveform features; skipped");
    }

    let lc = &ctx.cfg.labeling;
    for &t_w in &lc.windows {
        let params = lc.params(t_w);
        let mut windows = Vec::new();
        let mut stats = BTreeMap::new();
        for (m, anchor) in &anchors {
            let (w, s) = window_dataset(m, Some(*anchor), &params, lc.length, lc.stride)?;
            windows.extend(w);
            stats.insert(m.patient_id.clone(), s);
        }
        let mut ds = LabeledDataset {
            params,
            length: lc.length,
            stride: lc.stride,
            windows,
        };
        ds.sort();
        if lc.shuffle_labels {
            permute_labels(&mut ds.windows, ctx.cfg.seed);
        }
        let manifest = ds.manifest();
        info!(
            "label: T_w={t_w}: {} windows ({} warning) from {} patients",
            manifest.n_windows, manifest.n_warning, manifest.n_patients
        );
        let dir = StageDir::create("label", &ctx.dir(&window_dir("labels", t_w)))?;
        dir.write("dataset.csv", ds.to_csv())?;
        dir.write_json("dataset.json", &manifest)?;
        dir.write_json("window_stats.json", &stats as &BTreeMap<String, WindowStats>)?;
        dir.finish(&ctx.hash, ctx.cfg.seed, inputs.clone())?;
    }
    Ok(())
}

fn load_dataset(ctx: &Ctx, t_w: u32, inputs: &mut Inputs) -> Result<LabeledDataset> {
    let dir = ctx.dir(&window_dir("labels", t_w));
    let (csv, json) = (dir.join("dataset.csv"), dir.join("dataset.json"));
    inputs.add(&csv)?;
    inputs.add(&json)?;
    let manifest: DatasetManifest = read_json(&json)?;
    Ok(LabeledDataset::from_csv(&read_text(&csv)?, &manifest)?)
}

pub fn select(ctx: &Ctx) -> Result<()> {
    for &t_w in &ctx.cfg.labeling.windows {
        let mut inputs = ctx.inputs();
        let ds = load_dataset(ctx, t_w, &mut inputs)?;
        let s = &ctx.cfg.selection;
        let report = select_features(&ds, s.d_min, s.r_max)?;
        info!("select: T_w={t_w}: kept {:?}", report.kept());
        let dir = StageDir::create("select", &ctx.dir(&window_dir("selection", t_w)))?;
        dir.write_json("selection.json", &report)?;
        dir.finish(&ctx.hash, ctx.cfg.seed, inputs)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub train_patients: Vec<String>,
    pub val_patients: Vec<String>,
    pub best_epoch: usize,
    pub features: Vec<String>,
    pub selection: SelectionReport,
    pub report: MetricReport,
    pub history: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub window_min: u32,
    pub folds: Vec<FoldSummary>,
}

pub fn scores_csv(rows: &[(usize, ScoredWindow)]) -> String {
    let mut out = String::from("fold,patient_id,label,prob\n");
    for (fold, s) in rows {
        out.push_str(&format!("{fold},{},{},{}\n", s.patient_id, s.label, s.prob));
    }
    out
}

pub fn read_scores_csv(text: &str) -> Result<Vec<(usize, ScoredWindow)>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                bail!("scores line {}: expected 4 fields", i + 2);
            }
            let bad = |what: &str| anyhow!("scores line {}: bad {what}", i + 2);
            Ok((
                f[0].parse().map_err(|_| bad("fold"))?,
                ScoredWindow {
                    patient_id: f[1].to_string(),
                    label: f[2].parse().map_err(|_| bad("label"))?,
                    prob: f[3].parse().map_err(|_| bad("prob"))?,
                },
            ))
        })
        .collect()
}

pub fn train(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    for &t_w in &cfg.labeling.windows {
        let mut inputs = ctx.inputs();
        let ds = load_dataset(ctx, t_w, &mut inputs)?;
        info!(
            "train: T_w={t_w}: {} folds over {} windows",
            cfg.train.folds,
            ds.windows.len()
        );
        let cv = train_cv(
            &ds,
            &cfg.arch_template(),
            &cfg.train_config(),
            cfg.selection.d_min,
            cfg.selection.r_max,
        )?;
        let dir = StageDir::create("train", &ctx.dir(&window_dir("models", t_w)))?;
        let mut folds = Vec::new();
        let mut scores = Vec::new();
        for f in &cv.folds {
            write_checkpoint(&dir.path().join(format!("fold{}.ckpt", f.fold)), &f.checkpoint)?;
            scores.extend(f.scores.iter().map(|s| (f.fold, s.clone())));
            folds.push(FoldSummary {
                fold: f.fold,
                train_patients: f.train_patients.clone(),
                val_patients: f.val_patients.clone(),
                best_epoch: f.checkpoint.epoch,
                features: f.checkpoint.feature_names(),
                selection: f.selection.clone(),
                report: f.report,
                history: f.history.clone(),
            });
        }
        dir.write_json("cv.json", &CvSummary { window_min: t_w, folds })?;
        dir.write("scores.csv", scores_csv(&scores))?;
        dir.finish(&ctx.hash, cfg.seed, inputs)?;
    }
    Ok(())
}

fn load_cv(ctx: &Ctx, t_w: u32, inputs: &mut Inputs) -> Result<CvSummary> {
    let path = ctx.dir(&window_dir("models", t_w)).join("cv.json");
    inputs.add(&path)?;
    read_json(&path)
}

pub fn eval(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut inputs = ctx.inputs();
    let strata_path = cfg.strata_path();
    let strata: Option<BTreeMap<String, PatientStrata>> = if strata_path.is_file() {
        inputs.add(&strata_path)?;
        Some(read_json(&strata_path)?)
    } else {
        warn!(
            "eval: no strata at {}; subgroup analysis skipped",
            strata_path.display()
        );
        None
    };
    let mut rows = Vec::new();
    let mut subgroups = Vec::new();
    for &t_w in &cfg.labeling.windows {
        let cv = load_cv(ctx, t_w, &mut inputs)?;
        rows.push(TableRow {
            window_min: t_w,
            dataset: cfg.dataset.clone(),
            folds: cv.folds.iter().map(|f| f.report).collect(),
        });
        if let Some(strata) = &strata {
            let path = ctx.dir(&window_dir("models", t_w)).join("scores.csv");
            inputs.add(&path)?;
            let scores: Vec<ScoredWindow> = read_scores_csv(&read_text(&path)?)?
                .into_iter()
                .map(|(_, s)| s)
                .collect();
            let report = subgroup_report(&scores, strata, cfg.evaluation.bootstrap_resamples, cfg.seed)?;
            subgroups.push((t_w, report));
        }
    }
    let dir = StageDir::create("eval", &ctx.dir("eval"))?;
    dir.write("table.csv", table_csv(&rows))?;
    dir.write("table.txt", table_text(&rows))?;
    for (t_w, report) in &subgroups {
        dir.write_json(&format!("subgroups_w{t_w}.json"), report)?;
    }
    dir.finish(&ctx.hash, cfg.seed, inputs)?;
    info!("eval:\n{}", table_text(&rows));
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainedWindow {
    pub fold: usize,
    pub patient_id: String,
    pub t_center: f64,
    /// Features of this fold's model, in the order of `result.phi`.
    pub features: Vec<String>,
    pub result: AttributionResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub window_min: u32,
    /// Union of fold features; a feature a fold's model never sees gets phi 0.
    pub features: Vec<String>,
    pub instances: Vec<ExplainedWindow>,
    pub summary: AttributionSummary,
}

/// Up to `n` items taken round-robin across groups, preserving group order.
fn round_robin<T: Clone>(groups: &[Vec<T>], n: usize) -> Vec<T> {
    let mut out = Vec::new();
    let mut i = 0;
    while out.len() < n && groups.iter().any(|g| i < g.len()) {
        out.extend(groups.iter().filter_map(|g| g.get(i).cloned()).take(n - out.len()));
        i += 1;
    }
    out
}

pub fn attribute(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let t_w = cfg.attribution_window();
    let mut inputs = ctx.inputs();
    let ds = load_dataset(ctx, t_w, &mut inputs)?;
    let cv = load_cv(ctx, t_w, &mut inputs)?;
    let mut instances = Vec::new();
    for f in &cv.folds {
        let ckpt_path = ctx.dir(&window_dir("models", t_w)).join(format!("fold{}.ckpt", f.fold));
        inputs.add(&ckpt_path)?;
        let ckpt = read_checkpoint(&ckpt_path)?;
        let train: BTreeSet<&str> = f.train_patients.iter().map(String::as_str).collect();
        let normals: Vec<_> = ds
            .windows
            .iter()
            .filter(|w| w.label == 0 && train.contains(w.patient_id.as_str()))
            .collect();
        let background = normal_background(&normals, &ckpt.standardizer.features, ds.length)?;
        let groups: Vec<Vec<_>> = f
            .val_patients
            .iter()
            .map(|p| {
                ds.windows
                    .iter()
                    .filter(|w| w.label == 1 && &w.patient_id == p)
                    .collect()
            })
            .collect();
        for w in round_robin(&groups, cfg.attribution.instances_per_fold) {
            let result = explain_window(&ckpt, w, &background)?;
            instances.push(ExplainedWindow {
                fold: f.fold,
                patient_id: w.patient_id.clone(),
                t_center: w.t_center,
                features: ckpt.feature_names(),
                result,
            });
        }
    }
    if instances.is_empty() {
        bail!("no warning windows among validation patients for T_w = {t_w}");
    }
    let used: BTreeSet<&str> = instances
        .iter()
        .flat_map(|i| i.features.iter().map(String::as_str))
        .collect();
    let names: Vec<String> = Feature::ALL
        .iter()
        .map(|f| f.name())
        .filter(|n| used.contains(n))
        .map(String::from)
        .collect();
    let expanded: Vec<AttributionResult> = instances
        .iter()
        .map(|i| {
            let phi = names
                .iter()
                .map(|n| i.features.iter().position(|f| f == n).map_or(0.0, |k| i.result.phi[k]))
                .collect();
            AttributionResult {
                phi,
                ..i.result.clone()
            }
        })
        .collect();
    let chosen = (0..expanded.len())
        .max_by(|&a, &b| expanded[a].fx.total_cmp(&expanded[b].fx))
        .expect("non-empty");
    let summary = attribution_summary(&names, &expanded, chosen)?;
    info!(
        "attribute: T_w={t_w}: {} instances; top features {:?}",
        instances.len(),
        summary
            .ranking
            .iter()
            .take(3)
            .map(|r| r.feature.as_str())
            .collect::<Vec<_>>()
    );
    let dir = StageDir::create("attribute", &ctx.dir("attribution"))?;
    dir.write("phi.csv", phi_csv(&names, &expanded))?;
    dir.write_json(
        "report.json",
        &AttributionReport {
            window_min: t_w,
            features: names,
            instances,
            summary,
        },
    )?;
    dir.finish(&ctx.hash, cfg.seed, inputs)?;
    Ok(())
}

pub fn report(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut inputs = ctx.inputs();
    let table_path = ctx.dir("eval/table.txt");
    let attr_path = ctx.dir("attribution/report.json");
    let corpus_path = ctx.dir("onsets/corpus_report.json");
    for p in [&table_path, &attr_path, &corpus_path] {
        inputs.add(p)?;
    }
    let table = read_text(&table_path)?;
    let attr: AttributionReport = read_json(&attr_path)?;
    let corpus: CorpusReport = read_json(&corpus_path)?;

    let mut md = String::new();
    md.push_str(&format!("# ppgwarn report: {}\n\n", cfg.dataset));
    md.push_str(&format!("Seed {}, config `{}`.\n\n", cfg.seed, &ctx.hash[..16]));
    md.push_str(&format!(
        "## Onsets\n\n{} notes over {} patients; {} patients without any event.\n\n",
        corpus.n_notes,
        corpus.n_patients,
        corpus.non_event_patients.len()
    ));
    md.push_str("## Cross-validated performance\n\n```\n");
    md.push_str(&table);
    md.push_str("```\n\n");
    md.push_str(&format!(
        "## Attribution (T_w = {} min, {} warning windows)\n\n| feature | mean abs phi | mean phi |\n|---|---|---|\n",
        attr.window_min, attr.summary.n_instances
    ));
    for r in &attr.summary.ranking {
        md.push_str(&format!(
            "| {} | {:.4} | {:+.4} |\n",
            r.feature, r.mean_abs_phi, r.mean_phi
        ));
    }
    let wf = &attr.summary.waterfall;
    let inst = &attr.instances[wf.instance];
    md.push_str(&format!(
        "\nHighest-scoring window: {} at t = {} min (fold {}), base {:.4} to f(x) {:.4}.\n\n",
        inst.patient_id, inst.t_center, inst.fold, wf.base_value, wf.fx
    ));
    for s in &wf.steps {
        md.push_str(&format!(
            "- {}: {:+.4} (running {:.4})\n",
            s.feature, s.phi, s.cumulative
        ));
    }
    let dir = StageDir::create("report", &ctx.dir("report"))?;
    dir.write("report.md", md)?;
    dir.finish(&ctx.hash, cfg.seed, inputs)?;
    Ok(())
}
