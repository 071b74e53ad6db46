//! Waveform records: CSV loading, resampling and zero-phase band-pass filtering.
//!
//! A record file may contain several contiguous runs separated by non-finite
//! amplitudes (probe re-attachment, dropouts). Each run becomes its own
//! [`SourceSegment`] and nothing downstream ever bridges two segments.

mod butterworth;
mod csv_format;

pub use butterworth::{bandpass as butterworth_bandpass, filtfilt, magnitude, settling_samples, Sos};
pub use csv_format::{load_waveform, parse_waveform, write_waveform};

use crate::{Error, Result};

/// Canonical sampling rate every downstream module assumes.
pub const CANONICAL_FS: f64 = 125.0;
/// Default pass band (Hz).
pub const PASSBAND: (f64, f64) = (0.5, 12.0);
/// Prototype order of the band-pass (per pass).
pub const FILTER_ORDER: usize = 4;

/// A uniformly sampled PPG record.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    /// Sampling rate (Hz).
    pub fs: f64,
    /// Absolute time of sample 0, seconds since the epoch.
    pub t0: f64,
    pub patient_id: String,
    pub channel: String,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, fs: f64, t0: f64, patient_id: impl Into<String>) -> Result<Self> {
        let w = Waveform {
            samples,
            fs,
            t0,
            patient_id: patient_id.into(),
            channel: "PPG".to_string(),
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.len() < 2 {
            return Err(Error::InvalidWaveform(format!(
                "{} samples, need at least 2",
                self.samples.len()
            )));
        }
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(Error::InvalidWaveform(format!("sampling rate {}", self.fs)));
        }
        if let Some(i) = self.samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidWaveform(format!("non-finite sample at {i}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Absolute time of sample `i`.
    pub fn time_of(&self, i: usize) -> f64 {
        self.t0 + i as f64 / self.fs
    }

    pub fn end_time(&self) -> f64 {
        self.time_of(self.samples.len() - 1)
    }

    fn with_samples(&self, samples: Vec<f64>, fs: f64) -> Waveform {
        Waveform {
            samples,
            fs,
            t0: self.t0,
            patient_id: self.patient_id.clone(),
            channel: self.channel.clone(),
        }
    }
}

/// One contiguous run of a source file.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSegment {
    pub waveform: Waveform,
    pub source_file_id: String,
}

/// Reflection padding used by [`bandpass_filter`]: max(1 s, 3x the settling
/// time of the cascade to 1e-3 of its impulse-response peak).
pub fn filter_padding(sos: &[Sos], fs: f64) -> usize {
    let settle = settling_samples(sos, 1e-3, (120.0 * fs) as usize);
    (fs.ceil() as usize).max(3 * settle)
}

/// Zero-phase Butterworth band-pass (order 4 per pass, forward-backward).
pub fn bandpass_filter(w: &Waveform, lo: f64, hi: f64) -> Result<Waveform> {
    let nyquist = w.fs / 2.0;
    if !(0.0 < lo && lo < hi && hi < nyquist) {
        return Err(Error::BandOutsideNyquist { lo, hi, nyquist });
    }
    let sos = butterworth_bandpass(FILTER_ORDER, lo, hi, w.fs);
    let pad = filter_padding(&sos, w.fs);
    if w.len() < 3 * pad {
        return Err(Error::SegmentTooShort {
            len: w.len(),
            required: 3 * pad,
        });
    }
    Ok(w.with_samples(filtfilt(&sos, &w.samples, pad), w.fs))
}

/// Linear-interpolation resampling onto a grid starting at `t0`.
pub fn resample(w: &Waveform, target_fs: f64) -> Result<Waveform> {
    if !(target_fs > 0.0 && target_fs.is_finite()) {
        return Err(Error::InvalidParams(format!("target rate {target_fs}")));
    }
    if target_fs == w.fs {
        return Ok(w.clone());
    }
    let n = w.len();
    let m = (((n - 1) as f64) * target_fs / w.fs + 1e-9).floor() as usize + 1;
    let x = &w.samples;
    let out = (0..m)
        .map(|j| {
            let pos = j as f64 * w.fs / target_fs;
            let i = pos.floor() as usize;
            if i >= n - 1 {
                x[n - 1]
            } else {
                let frac = pos - i as f64;
                x[i] + frac * (x[i + 1] - x[i])
            }
        })
        .collect();
    Ok(w.with_samples(out, target_fs))
}

/// Resample to [`CANONICAL_FS`] and apply the default pass band.
pub fn preprocess(seg: &SourceSegment) -> Result<SourceSegment> {
    let resampled = resample(&seg.waveform, CANONICAL_FS)?;
    let filtered = bandpass_filter(&resampled, PASSBAND.0, PASSBAND.1)?;
    Ok(SourceSegment {
        waveform: filtered,
        source_file_id: seg.source_file_id.clone(),
    })
}
