//! Synthetic PPG generator with analytic ground truth.
//!
//! Each beat is the sum of a systolic and a diastolic Gaussian placed at
//! fixed fractions of the beat's interval. Pre-onset drift is injected into
//! the generator parameters so that the whole extraction chain sees it.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::evaluation::{Comorbidities, PatientStrata, Sex};
use crate::ingest::{write_waveform, Waveform};
use crate::noteanchor::NoteRecord;
use crate::rng::{self, Purpose};
use crate::{Error, Result};

/// Two-Gaussian beat template. Centres and widths are fractions of the beat
/// interval `t_pi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeatModel {
    pub a1: f64,
    pub mu1: f64,
    pub sigma1: f64,
    pub a2: f64,
    pub mu2: f64,
    pub sigma2: f64,
    pub baseline: f64,
    /// Mean beat interval (s).
    pub t_pi: f64,
}

impl BeatModel {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.mu1
            && self.mu1 < self.mu2
            && self.mu2 < 1.0
            && self.a1 > self.a2
            && self.a2 >= 0.0
            && self.sigma1 > 0.0
            && self.sigma2 > 0.0
            && self.t_pi > 0.0
            && [self.a1, self.baseline].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!(
                "beat model violates 0<mu1<mu2<1, a1>a2>=0, sigma>0: {self:?}"
            )))
        }
    }

    /// Pulse shape at phase `ph` (fraction of the interval), without baseline.
    fn shape(&self, ph: f64) -> f64 {
        let g = |a: f64, mu: f64, s: f64| a * (-(ph - mu).powi(2) / (2.0 * s * s)).exp();
        g(self.a1, self.mu1, self.sigma1) + g(self.a2, self.mu2, self.sigma2)
    }
}

impl Default for BeatModel {
    fn default() -> Self {
        BeatModel {
            a1: 1.0,
            mu1: 0.22,
            sigma1: 0.05,
            a2: 0.4,
            mu2: 0.52,
            sigma2: 0.09,
            baseline: 0.0,
            t_pi: 1.0,
        }
    }
}

/// Linear pre-onset drift and noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    /// Fractional change of the systolic centre per hour.
    pub delta_tsp: f64,
    /// Fractional change of the systolic amplitude per hour.
    pub delta_asp: f64,
    /// Length of the drift window ending at onset (s).
    pub span_s: f64,
    /// Additive white noise SD as a fraction of `a1`.
    pub noise_sd: f64,
    /// Beat-interval jitter SD as a fraction of `t_pi`.
    pub hr_jitter: f64,
}

impl DriftSpec {
    pub fn none() -> Self {
        DriftSpec {
            delta_tsp: 0.0,
            delta_asp: 0.0,
            span_s: 0.0,
            noise_sd: 0.0,
            hr_jitter: 0.0,
        }
    }

    /// Hours of drift accumulated at `t`, given onset time `onset`.
    fn hours(&self, t: f64, onset: Option<f64>) -> f64 {
        match onset {
            Some(onset) if self.span_s > 0.0 && t >= onset - self.span_s && t < onset => {
                (t - (onset - self.span_s)) / 3600.0
            }
            _ => 0.0,
        }
    }

    fn apply(&self, m: &BeatModel, hours: f64) -> BeatModel {
        BeatModel {
            mu1: m.mu1 * (1.0 + self.delta_tsp * hours),
            a1: m.a1 * (1.0 + self.delta_asp * hours),
            ..*m
        }
    }

    /// Reject drifts that would break the beat model before onset.
    pub fn check(&self, m: &BeatModel) -> Result<()> {
        if !(0.0..0.5).contains(&self.hr_jitter) || self.noise_sd < 0.0 || self.span_s < 0.0 {
            return Err(Error::InvalidParams(format!("bad noise/jitter/span in {self:?}")));
        }
        let worst = self.apply(m, self.span_s / 3600.0);
        worst
            .validate()
            .map_err(|_| Error::InvalidParams(format!("drift {self:?} breaks the beat model by onset: {worst:?}")))
    }
}

/// Analytic truth for one beat; times in seconds from the record start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeatTruth {
    /// Start of the beat's template.
    pub start: f64,
    pub t_pi: f64,
    /// Pulse onset: minimum of the noiseless signal before the peak.
    pub onset: f64,
    /// Systolic peak of the noiseless signal.
    pub sp: f64,
    /// Systolic centre used for this beat (fraction of interval).
    pub mu1: f64,
    /// Systolic amplitude used for this beat.
    pub a1: f64,
    /// `sp - onset`.
    pub t_sp: f64,
    /// Noiseless signal value at `sp`.
    pub a_sp: f64,
}

#[derive(Debug, Clone)]
pub struct SynthRecord {
    pub waveform: Waveform,
    pub beats: Vec<BeatTruth>,
}

struct Beat {
    start: f64,
    model: BeatModel,
}

fn signal_at(beats: &[Beat], k: usize, t: f64) -> f64 {
    let lo = k.saturating_sub(1);
    let hi = (k + 2).min(beats.len());
    beats[lo..hi]
        .iter()
        .map(|b| b.model.shape((t - b.start) / b.model.t_pi))
        .sum()
}

fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, maximise: bool) -> f64 {
    let sign = if maximise { -1.0 } else { 1.0 };
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let (mut fc, mut fd) = (sign * f(c), sign * f(d));
    while hi - lo > 1e-9 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = sign * f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = sign * f(d);
        }
    }
    (lo + hi) / 2.0
}

/// Render one record of `duration_s` seconds starting at `t0`.
///
/// `onset_at` is measured from the record start; drift is active on
/// `[onset_at - span, onset_at)`. Identical arguments give identical output.
pub fn synth_record(
    model: &BeatModel,
    duration_s: f64,
    fs: f64,
    drift: &DriftSpec,
    onset_at: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<SynthRecord> {
    model.validate()?;
    drift.check(model)?;
    if !(duration_s > 0.0 && fs > 0.0) {
        return Err(Error::InvalidParams("duration and fs must be positive".into()));
    }

    // Start the first beat so that the record opens on the inter-beat valley
    // of the undrifted template, like a recording that begins at an onset.
    let valley = golden_section(
        |ph| model.shape(ph) + model.shape(ph + 1.0),
        -0.3,
        (model.mu1 - 1.5 * model.sigma1).max(-0.2),
        false,
    );
    let mut beats = Vec::new();
    let mut start = (-valley * model.t_pi).max(0.0);
    while start < duration_s {
        let jitter: f64 = rng.sample(StandardNormal);
        let t_pi = model.t_pi * (1.0 + drift.hr_jitter * jitter.clamp(-3.0, 3.0));
        let hours = drift.hours(start, onset_at);
        let m = BeatModel {
            t_pi,
            ..drift.apply(model, hours)
        };
        beats.push(Beat { start, model: m });
        start += t_pi;
    }

    let n = (duration_s * fs).floor() as usize;
    let noise_sd = drift.noise_sd * model.a1;
    let mut samples = Vec::with_capacity(n);
    let mut k = 0;
    for i in 0..n {
        let t = i as f64 / fs;
        while k + 1 < beats.len() && beats[k + 1].start <= t {
            k += 1;
        }
        let noise = if noise_sd > 0.0 {
            noise_sd * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        samples.push(model.baseline + signal_at(&beats, k, t) + noise);
    }

    let truth = (0..beats.len())
        .map(|k| {
            let b = &beats[k];
            let m = &b.model;
            let f = |t: f64| signal_at(&beats, k, t);
            let sp = golden_section(
                f,
                b.start + (m.mu1 - 2.0 * m.sigma1) * m.t_pi,
                b.start + (m.mu1 + 2.0 * m.sigma1) * m.t_pi,
                true,
            );
            let onset_lo = if k == 0 {
                0.0
            } else {
                b.start - 0.2 * beats[k - 1].model.t_pi
            };
            let onset_hi = b.start + (m.mu1 - 1.5 * m.sigma1).max(0.0) * m.t_pi;
            let onset = if k == 0 {
                0.0
            } else {
                golden_section(|t| signal_at(&beats, k, t), onset_lo, onset_hi, false)
            };
            BeatTruth {
                start: b.start,
                t_pi: m.t_pi,
                onset,
                sp,
                mu1: m.mu1,
                a1: m.a1,
                t_sp: sp - onset,
                a_sp: model.baseline + signal_at(&beats, k, sp),
            }
        })
        .collect();

    Ok(SynthRecord {
        waveform: Waveform::new(samples, fs, 0.0, "synthetic")?,
        beats: truth,
    })
}

/// Physiological sampling ranges for per-patient beat models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelRanges {
    pub mu1: (f64, f64),
    pub sigma1: (f64, f64),
    /// Separation `mu2 - mu1`.
    pub separation: (f64, f64),
    pub sigma2: (f64, f64),
    /// Ratio `a2 / a1`.
    pub amplitude_ratio: (f64, f64),
    pub heart_rate_bpm: (f64, f64),
}

impl Default for ModelRanges {
    fn default() -> Self {
        ModelRanges {
            mu1: (0.18, 0.26),
            sigma1: (0.045, 0.06),
            separation: (0.28, 0.34),
            sigma2: (0.08, 0.11),
            amplitude_ratio: (0.3, 0.5),
            heart_rate_bpm: (60.0, 90.0),
        }
    }
}

impl ModelRanges {
    fn sample(&self, rng: &mut impl Rng) -> BeatModel {
        let mut u = |(lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
        let mu1 = u(self.mu1);
        let sigma1 = u(self.sigma1);
        let mu2 = mu1 + u(self.separation);
        let sigma2 = u(self.sigma2);
        let ratio = u(self.amplitude_ratio);
        let hr = u(self.heart_rate_bpm);
        BeatModel {
            a1: 1.0,
            mu1,
            sigma1,
            a2: ratio,
            mu2,
            sigma2,
            baseline: 0.0,
            t_pi: 60.0 / hr,
        }
    }
}

/// Cohort parameters. Records end at onset for positives; negatives get
/// drift-free records of the same length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortParams {
    pub n_pos: usize,
    pub n_neg: usize,
    pub duration_min: f64,
    pub fs: f64,
    pub drift: DriftSpec,
    #[serde(default)]
    pub ranges: ModelRanges,
    /// Epoch seconds of the first record's start; minute-aligned.
    pub start_epoch: i64,
}

impl Default for CohortParams {
    fn default() -> Self {
        CohortParams {
            n_pos: 20,
            n_neg: 20,
            duration_min: 540.0,
            fs: 125.0,
            drift: DriftSpec {
                delta_tsp: 0.05,
                delta_asp: -0.05,
                span_s: 360.0 * 60.0,
                noise_sd: 0.02,
                hr_jitter: 0.02,
            },
            ranges: ModelRanges::default(),
            // 2019-03-04 00:00:00 UTC
            start_epoch: 1_551_657_600,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CohortPatient {
    pub patient_id: String,
    pub model: BeatModel,
    pub record: SynthRecord,
    pub onset_epoch: Option<i64>,
    pub strata: PatientStrata,
    pub notes: Vec<NoteRecord>,
}

const RACES: [(&str, f64); 4] = [("White", 0.6), ("Black", 0.2), ("Asian", 0.1), ("Other", 0.1)];
// prevalence of hypertension, diabetes, hyperlipidemia, CKD, IHD
const COMORBIDITY_PREVALENCE: [f64; 5] = [0.6, 0.3, 0.4, 0.15, 0.2];

fn sample_strata(rng: &mut impl Rng) -> PatientStrata {
    let age = rng.random_range(40..=90);
    let sex = if rng.random_bool(0.5) { Sex::Female } else { Sex::Male };
    let mut u: f64 = rng.random();
    let mut race = RACES[RACES.len() - 1].0;
    for (name, p) in RACES {
        if u < p {
            race = name;
            break;
        }
        u -= p;
    }
    let mut flag = |p: f64| rng.random_bool(p);
    let comorbidities = Comorbidities {
        hypertension: flag(COMORBIDITY_PREVALENCE[0]),
        diabetes: flag(COMORBIDITY_PREVALENCE[1]),
        hyperlipidemia: flag(COMORBIDITY_PREVALENCE[2]),
        ckd: flag(COMORBIDITY_PREVALENCE[3]),
        ihd: flag(COMORBIDITY_PREVALENCE[4]),
    };
    PatientStrata {
        age,
        sex,
        race: race.to_string(),
        comorbidities,
    }
}

fn clock(epoch: i64) -> (i64, i64) {
    let secs = epoch.rem_euclid(86_400);
    (secs / 3600, (secs % 3600) / 60)
}

fn twelve_hour(epoch: i64) -> String {
    let (h, m) = clock(epoch);
    let suffix = if h < 12 { "AM" } else { "PM" };
    let h12 = match h % 12 {
        0 => 12,
        h => h,
    };
    format!("{h12}:{m:02} {suffix}")
}

fn positive_notes(pid: &str, onset: i64, rng: &mut impl Rng) -> Vec<NoteRecord> {
    let lag_h: i64 = rng.random_range(1..=6);
    let note_time = onset + lag_h * 3600;
    let side = if rng.random_bool(0.5) { "left" } else { "right" };
    let text = match rng.random_range(0..3) {
        0 => format!(
            "Code stroke activated. Acute ischemic stroke suspected, onset at {} per family. {side} facial droop.",
            twelve_hour(onset)
        ),
        1 => format!(
            "New onset {side} hemiparesis noted. Symptoms began {lag_h} hours ago while at rest. Neurology consulted."
        ),
        _ => {
            let (h, m) = clock(onset);
            format!("Pt with acute stroke symptoms. Last known well {h:02}:{m:02}, {side} sided weakness on arrival.")
        }
    };
    vec![
        NoteRecord {
            note_id: format!("{pid}-n1"),
            patient_id: pid.to_string(),
            note_time: onset - 2 * 3600,
            text: "Routine nursing assessment. Patient resting comfortably, vitals stable.".into(),
        },
        NoteRecord {
            note_id: format!("{pid}-n2"),
            patient_id: pid.to_string(),
            note_time,
            text,
        },
    ]
}

fn negative_notes(pid: &str, end: i64, rng: &mut impl Rng) -> Vec<NoteRecord> {
    let text = match rng.random_range(0..3) {
        0 => "History of CVA in 2010, no acute events today. Ambulating independently.",
        1 => "Patient seen on rounds. No evidence of stroke. Plan discharge tomorrow.",
        _ => "Chest pain resolved. Vitals stable overnight, tolerating diet.",
    };
    vec![NoteRecord {
        note_id: format!("{pid}-n1"),
        patient_id: pid.to_string(),
        note_time: end - 3600,
        text: text.into(),
    }]
}

/// Generate the cohort in memory. Patients `p000..` are positives, the rest
/// negatives; each patient draws from its own random stream.
pub fn synth_cohort(params: &CohortParams, seed: u64) -> Result<Vec<CohortPatient>> {
    if params.n_pos + params.n_neg < 10 {
        return Err(Error::InvalidParams(format!(
            "{} patients are too few for cross-validation (need at least 10)",
            params.n_pos + params.n_neg
        )));
    }
    if params.start_epoch % 60 != 0 {
        return Err(Error::InvalidParams("start_epoch must be minute-aligned".into()));
    }
    let duration_s = params.duration_min * 60.0;
    (0..params.n_pos + params.n_neg)
        .map(|i| {
            let positive = i < params.n_pos;
            let pid = format!("p{i:03}");
            let mut rng = rng::stream(seed, Purpose::Synth, i as u64);
            let mut strata_rng = rng::stream(seed, Purpose::Strata, i as u64);
            let model = params.ranges.sample(&mut rng);
            let drift = if positive {
                params.drift
            } else {
                DriftSpec {
                    delta_tsp: 0.0,
                    delta_asp: 0.0,
                    span_s: 0.0,
                    ..params.drift
                }
            };
            let onset_at = positive.then_some(duration_s);
            let mut record = synth_record(&model, duration_s, params.fs, &drift, onset_at, &mut rng)?;
            // stagger records by 37 minutes so clock times differ per patient
            let t0 = params.start_epoch + i as i64 * 37 * 60;
            record.waveform.t0 = t0 as f64;
            record.waveform.patient_id = pid.clone();
            let end = t0 + (params.duration_min * 60.0).round() as i64;
            let notes = if positive {
                positive_notes(&pid, end, &mut strata_rng)
            } else {
                negative_notes(&pid, end, &mut strata_rng)
            };
            Ok(CohortPatient {
                patient_id: pid,
                model,
                record,
                onset_epoch: positive.then_some(end),
                strata: sample_strata(&mut strata_rng),
                notes,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub seed: u64,
    pub params: CohortParams,
    pub models: BTreeMap<String, BeatModel>,
    pub waveform_files: Vec<String>,
}

/// Write the cohort as `waveforms/<id>.csv`, `notes.jsonl`,
/// `onsets_truth.json`, `strata.json` and `manifest.json` under `dir`.
pub fn write_cohort(dir: &Path, patients: &[CohortPatient], params: &CohortParams, seed: u64) -> Result<()> {
    let wdir = dir.join("waveforms");
    fs::create_dir_all(&wdir).map_err(|e| Error::io(&wdir, e))?;
    let mut files = Vec::new();
    for p in patients {
        let name = format!("waveforms/{}.csv", p.patient_id);
        let path = dir.join(&name);
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(f);
        write_waveform(&p.record.waveform, &mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&path, e))?;
        files.push(name);
    }

    let mut notes = String::new();
    for n in patients.iter().flat_map(|p| &p.notes) {
        notes.push_str(&serde_json::to_string(n)?);
        notes.push('\n');
    }
    let onsets: BTreeMap<&str, Option<i64>> = patients
        .iter()
        .map(|p| (p.patient_id.as_str(), p.onset_epoch))
        .collect();
    let strata: BTreeMap<&str, &PatientStrata> = patients.iter().map(|p| (p.patient_id.as_str(), &p.strata)).collect();
    let manifest = CohortManifest {
        seed,
        params: params.clone(),
        models: patients.iter().map(|p| (p.patient_id.clone(), p.model)).collect(),
        waveform_files: files,
    };
    for (name, body) in [
        ("notes.jsonl", notes),
        ("onsets_truth.json", serde_json::to_string_pretty(&onsets)?),
        ("strata.json", serde_json::to_string_pretty(&strata)?),
        ("manifest.json", serde_json::to_string_pretty(&manifest)?),
    ] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
