//! Pipeline configuration: a JSON file, then CLI flags and `PPGWARN_*`
//! environment variables on top.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ppgwarn_core::biomarkers::{DEFAULT_BASELINE_WINDOW_S, DEFAULT_CV_WINDOW};
use ppgwarn_core::labeling::LabelParams;
use ppgwarn_core::resnet1d::{ArchSpec, BlockSpec, ConvSpec, TrainConfig};
use ppgwarn_core::selection::{DEFAULT_D_MIN, DEFAULT_R_MAX};
use ppgwarn_core::synthppg::CohortParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub out: PathBuf,
    /// Directory of waveform CSVs; defaults to the synthetic cohort's.
    #[serde(default)]
    pub waveforms: Option<PathBuf>,
    #[serde(default)]
    pub notes: Option<PathBuf>,
    #[serde(default)]
    pub strata: Option<PathBuf>,
    /// Replacement for the built-in note lexicon.
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub cv_window: usize,
    pub baseline_window_s: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            cv_window: DEFAULT_CV_WINDOW,
            baseline_window_s: DEFAULT_BASELINE_WINDOW_S,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelingConfig {
    /// Warning-window lengths T_w (min) to run.
    pub windows: Vec<u32>,
    pub delta_pre: f64,
    pub delta_0: f64,
    pub horizon_start: f64,
    /// Input window length L (min).
    pub length: usize,
    pub stride: usize,
    /// Permute labels across windows (null-model run).
    pub shuffle_labels: bool,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        LabelingConfig {
            windows: vec![360],
            delta_pre: 15.0,
            delta_0: 15.0,
            horizon_start: 480.0,
            length: 30,
            stride: 30,
            shuffle_labels: false,
        }
    }
}

impl LabelingConfig {
    pub fn params(&self, t_w: u32) -> LabelParams {
        LabelParams {
            t_w: t_w as f64,
            delta_pre: self.delta_pre,
            delta_0: self.delta_0,
            horizon_start: self.horizon_start,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub d_min: f64,
    pub r_max: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            d_min: DEFAULT_D_MIN,
            r_max: DEFAULT_R_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda_pos: f64,
    pub batch: usize,
    pub epochs: usize,
    pub folds: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: t.lr,
            weight_decay: t.weight_decay,
            lambda_pos: t.lambda_pos,
            batch: t.batch,
            epochs: t.epochs,
            folds: t.folds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSection {
    pub stem: ConvSpec,
    pub blocks: Vec<BlockSpec>,
    pub norm: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ArchSection {
    fn default() -> Self {
        let a = ArchSpec::standard(1, 1);
        ArchSection {
            stem: a.stem,
            blocks: a.blocks,
            norm: a.norm,
            bn_momentum: a.bn_momentum,
            bn_eps: a.bn_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub bootstrap_resamples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            bootstrap_resamples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionConfig {
    /// T_w whose models are explained; defaults to the longest configured.
    pub window: Option<u32>,
    /// Warning windows explained per fold, taken from its validation patients.
    pub instances_per_fold: usize,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            window: None,
            instances_per_fold: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Mandatory; every random stream derives from it.
    pub seed: u64,
    #[serde(default = "default_dataset")]
    pub dataset: String,
    pub paths: Paths,
    /// Present when `synth` should generate the cohort.
    #[serde(default)]
    pub synth: Option<CohortParams>,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub labeling: LabelingConfig,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub arch: ArchSection,
    #[serde(default)]
    pub evaluation: EvalConfig,
    #[serde(default)]
    pub attribution: AttributionConfig,
}

fn default_dataset() -> String {
    "synthetic".into()
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Check every numeric invariant before any stage runs.
    pub fn validate(&self) -> Result<()> {
        if self.labeling.windows.is_empty() {
            bail!("labeling.windows is empty");
        }
        for &w in &self.labeling.windows {
            self.labeling
                .params(w)
                .validate()
                .with_context(|| format!("labeling for T_w = {w}"))?;
        }
        if self.labeling.length == 0 || self.labeling.stride == 0 {
            bail!("labeling.length and labeling.stride must be positive");
        }
        if self.features.cv_window < 2 || self.features.baseline_window_s <= 0.0 {
            bail!("features.cv_window must be >= 2 and baseline_window_s positive");
        }
        if !(self.selection.d_min >= 0.0 && self.selection.r_max > 0.0 && self.selection.r_max <= 1.0) {
            bail!("selection thresholds out of range: {:?}", self.selection);
        }
        self.train_config().validate()?;
        self.arch_template().validate()?;
        if let Some(s) = &self.synth {
            if s.n_pos + s.n_neg < self.train.folds {
                bail!(
                    "synth cohort has {} patients, fewer than {} folds",
                    s.n_pos + s.n_neg,
                    self.train.folds
                );
            }
        }
        if let Some(w) = self.attribution.window {
            if !self.labeling.windows.contains(&w) {
                bail!("attribution.window {w} is not one of labeling.windows");
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            weight_decay: t.weight_decay,
            lambda_pos: t.lambda_pos,
            batch: t.batch,
            epochs: t.epochs,
            seed: self.seed,
            folds: t.folds,
        }
    }

    /// Architecture with placeholder input shape; filled per fold.
    pub fn arch_template(&self) -> ArchSpec {
        ArchSpec {
            in_channels: 1,
            length: self.labeling.length,
            stem: self.arch.stem,
            blocks: self.arch.blocks.clone(),
            norm: self.arch.norm,
            bn_momentum: self.arch.bn_momentum,
            bn_eps: self.arch.bn_eps,
        }
    }

    pub fn attribution_window(&self) -> u32 {
        self.attribution
            .window
            .unwrap_or_else(|| *self.labeling.windows.iter().max().expect("validated non-empty"))
    }

    pub fn waveforms_dir(&self) -> PathBuf {
        self.paths
            .waveforms
            .clone()
            .unwrap_or_else(|| self.paths.out.join("cohort/waveforms"))
    }

    pub fn notes_path(&self) -> PathBuf {
        self.paths
            .notes
            .clone()
            .unwrap_or_else(|| self.paths.out.join("cohort/notes.jsonl"))
    }

    pub fn strata_path(&self) -> PathBuf {
        self.paths
            .strata
            .clone()
            .unwrap_or_else(|| self.paths.out.join("cohort/strata.json"))
    }

    /// SHA-256 of the serialized effective configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}
