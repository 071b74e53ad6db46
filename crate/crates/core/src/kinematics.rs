//! Pulse kinematics: derivative stack, beat segmentation and fiducial points.

use serde::{Deserialize, Serialize};

use crate::ingest::Waveform;
use crate::{Error, Result};

/// PPG and its first three derivatives on a common index.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeStack {
    /// Smoothed PPG.
    pub ppg: Vec<f64>,
    /// First derivative (units/s).
    pub vpg: Vec<f64>,
    /// Second derivative (units/s^2).
    pub apg: Vec<f64>,
    /// Third derivative (units/s^3).
    pub jerk: Vec<f64>,
    pub fs: f64,
}

impl DerivativeStack {
    pub fn len(&self) -> usize {
        self.ppg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ppg.is_empty()
    }
}

/// Zero-phase 4-point moving average: the mean of the two half-sample
/// aligned 4-point windows, i.e. taps [1, 2, 2, 2, 1] / 8. Edge taps that
/// fall outside the signal are dropped and the remainder renormalised.
fn smooth4(x: &[f64]) -> Vec<f64> {
    const TAPS: [f64; 5] = [1.0, 2.0, 2.0, 2.0, 1.0];
    let n = x.len() as isize;
    (0..n)
        .map(|i| {
            if i >= 2 && i + 2 < n {
                let i = i as usize;
                (x[i - 2] + 2.0 * (x[i - 1] + x[i] + x[i + 1]) + x[i + 2]) / 8.0
            } else {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (k, w) in TAPS.iter().enumerate() {
                    let j = i + k as isize - 2;
                    if (0..n).contains(&j) {
                        acc += w * x[j as usize];
                        wsum += w;
                    }
                }
                acc / wsum
            }
        })
        .collect()
}

/// Central difference, one-sided at the ends.
fn central_diff(s: &[f64], fs: f64) -> Vec<f64> {
    let n = s.len();
    let mut d = Vec::with_capacity(n);
    d.push((s[1] - s[0]) * fs);
    d.extend((1..n - 1).map(|i| (s[i + 1] - s[i - 1]) * fs / 2.0));
    d.push((s[n - 1] - s[n - 2]) * fs);
    d
}

/// Smooth once, then take successive central differences.
pub fn derivatives(w: &Waveform) -> Result<DerivativeStack> {
    if w.len() < 5 {
        return Err(Error::SegmentTooShort {
            len: w.len(),
            required: 5,
        });
    }
    let ppg = smooth4(&w.samples);
    let vpg = central_diff(&ppg, w.fs);
    let apg = central_diff(&vpg, w.fs);
    let jerk = central_diff(&apg, w.fs);
    Ok(DerivativeStack {
        ppg,
        vpg,
        apg,
        jerk,
        fs: w.fs,
    })
}

/// One cardiac cycle, from its onset to the next beat's onset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeatSpan {
    pub onset_idx: usize,
    pub offset_idx: usize,
}

impl BeatSpan {
    pub fn len(&self) -> usize {
        self.offset_idx - self.onset_idx
    }

    pub fn is_empty(&self) -> bool {
        self.offset_idx <= self.onset_idx
    }
}

/// Tunables for [`detect_beats_with`].
#[derive(Debug, Clone, Copy)]
pub struct BeatDetectConfig {
    /// Window for the rolling mean/SD threshold (s).
    pub window_s: f64,
    /// Threshold = rolling mean + `sd_factor` x rolling SD.
    pub sd_factor: f64,
    /// Minimum spacing between systolic peaks (s).
    pub refractory_s: f64,
    pub min_bpm: f64,
    pub max_bpm: f64,
    /// A candidate peak must rise from its preceding valley by at least this
    /// fraction of the largest rise among its neighbours.
    pub min_relative_rise: f64,
}

impl Default for BeatDetectConfig {
    fn default() -> Self {
        BeatDetectConfig {
            window_s: 2.0,
            sd_factor: 0.5,
            refractory_s: 0.3,
            min_bpm: 30.0,
            max_bpm: 220.0,
            min_relative_rise: 0.4,
        }
    }
}

pub fn detect_beats(d: &DerivativeStack) -> Result<Vec<BeatSpan>> {
    detect_beats_with(d, &BeatDetectConfig::default())
}

fn rolling_threshold(x: &[f64], half: usize, sd_factor: f64) -> Vec<f64> {
    let n = x.len();
    let mut sum = vec![0.0; n + 1];
    let mut sq = vec![0.0; n + 1];
    for i in 0..n {
        sum[i + 1] = sum[i] + x[i];
        sq[i + 1] = sq[i] + x[i] * x[i];
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            let m = (hi - lo) as f64;
            let mean = (sum[hi] - sum[lo]) / m;
            let var = ((sq[hi] - sq[lo]) / m - mean * mean).max(0.0);
            mean + sd_factor * var.sqrt()
        })
        .collect()
}

/// Diastolic humps can clear the adaptive threshold outside the refractory
/// period; they rise far less from their valley than true systolic peaks.
fn drop_minor_peaks(x: &[f64], peaks: &[usize], min_relative: f64) -> Vec<usize> {
    const NEIGHBOURS: usize = 5;
    let rises: Vec<f64> = peaks
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let lo = if k == 0 { 0 } else { peaks[k - 1] };
            let valley = x[lo..p].iter().copied().fold(f64::INFINITY, f64::min);
            if valley.is_finite() {
                x[p] - valley
            } else {
                0.0
            }
        })
        .collect();
    peaks
        .iter()
        .enumerate()
        .filter(|&(k, _)| {
            let lo = k.saturating_sub(NEIGHBOURS);
            let hi = (k + NEIGHBOURS + 1).min(peaks.len());
            let reference = rises[lo..hi].iter().copied().fold(0.0, f64::max);
            rises[k] >= min_relative * reference
        })
        .map(|(_, &p)| p)
        .collect()
}

/// Systolic peaks above an adaptive threshold with refractory spacing,
/// onsets as the ppg minimum before each peak, and spans between
/// consecutive onsets whose rate lies within the physiological bounds.
pub fn detect_beats_with(d: &DerivativeStack, cfg: &BeatDetectConfig) -> Result<Vec<BeatSpan>> {
    let x = &d.ppg;
    let n = x.len();
    if (n as f64) < 2.0 * d.fs {
        return Err(Error::SegmentTooShort {
            len: n,
            required: (2.0 * d.fs).ceil() as usize,
        });
    }
    let half = (cfg.window_s * d.fs / 2.0).round() as usize;
    let threshold = rolling_threshold(x, half, cfg.sd_factor);
    let refractory = (cfg.refractory_s * d.fs).round() as usize;

    let mut peaks: Vec<usize> = Vec::new();
    for i in 1..n - 1 {
        if x[i] > x[i - 1] && x[i] >= x[i + 1] && x[i] > threshold[i] {
            match peaks.last_mut() {
                Some(last) if i - *last < refractory => {
                    if x[i] > x[*last] {
                        *last = i;
                    }
                }
                _ => peaks.push(i),
            }
        }
    }
    if peaks.is_empty() {
        return Err(Error::NoPeaks);
    }
    let peaks = drop_minor_peaks(x, &peaks, cfg.min_relative_rise);

    let max_interval = (60.0 / cfg.min_bpm * d.fs).round() as usize;
    let min_interval = (60.0 / cfg.max_bpm * d.fs).round() as usize;

    // argmin over [lo, hi), ties resolved towards the peak
    let argmin_back = |lo: usize, hi: usize| -> usize {
        let mut best = hi - 1;
        for j in (lo..hi).rev() {
            if x[j] < x[best] {
                best = j;
            }
        }
        best
    };

    let mut onsets: Vec<Option<usize>> = Vec::with_capacity(peaks.len());
    onsets.push(None);
    for w in peaks.windows(2) {
        onsets.push(Some(argmin_back(w[0] + 1, w[1])));
    }
    // The first peak has no predecessor: accept the minimum before it only
    // if its rise time is comparable to the other beats'.
    if peaks[0] > 0 {
        let lo = peaks[0].saturating_sub(max_interval);
        let cand = argmin_back(lo, peaks[0]);
        let mut rises: Vec<usize> = peaks
            .iter()
            .zip(&onsets)
            .filter_map(|(p, o)| o.map(|o| p - o))
            .collect();
        rises.sort_unstable();
        let accept = match rises.get(rises.len() / 2) {
            Some(&median) => (peaks[0] - cand) as f64 >= 0.75 * median as f64,
            None => cand > 0,
        };
        if accept {
            onsets[0] = Some(cand);
        }
    }

    let spans = onsets
        .windows(2)
        .filter_map(|w| match (w[0], w[1]) {
            (Some(on), Some(off)) if off > on => Some(BeatSpan {
                onset_idx: on,
                offset_idx: off,
            }),
            _ => None,
        })
        .filter(|s| (min_interval..=max_interval).contains(&s.len()))
        .collect();
    Ok(spans)
}

/// Landmarks of one beat. Indices are absolute sample indices of the
/// segment. Optional points are `None` when not found; they are never
/// interpolated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiducialSet {
    pub on: usize,
    pub sp: usize,
    pub dn: Option<usize>,
    pub off: usize,
    pub u: usize,
    pub v: usize,
    pub w: Option<usize>,
    pub a: usize,
    pub b: usize,
    pub c: Option<usize>,
    pub d: Option<usize>,
    pub e: Option<usize>,
}

impl FiducialSet {
    /// Named points for the debug dump, absent points skipped.
    pub fn named(&self) -> Vec<(&'static str, usize)> {
        let mut out = vec![
            ("on", self.on),
            ("a", self.a),
            ("u", self.u),
            ("b", self.b),
            ("sp", self.sp),
            ("v", self.v),
        ];
        for (name, idx) in [
            ("c", self.c),
            ("d", self.d),
            ("e", self.e),
            ("dn", self.dn),
            ("w", self.w),
        ] {
            if let Some(i) = idx {
                out.push((name, i));
            }
        }
        out.push(("off", self.off));
        out
    }
}

/// Why a beat was excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InvalidBeat {
    /// Systolic peak on the span boundary.
    PeakOnBoundary,
    /// No room between `a` and the systolic peak for the b-wave.
    NoBWave,
    /// No VPG valley after the systolic peak.
    NoVpgValley,
    /// Span outside the stack.
    OutOfRange,
}

fn argmax(x: &[f64], lo: usize, hi: usize) -> usize {
    (lo..hi).fold(lo, |best, i| if x[i] > x[best] { i } else { best })
}

fn argmin(x: &[f64], lo: usize, hi: usize) -> usize {
    (lo..hi).fold(lo, |best, i| if x[i] < x[best] { i } else { best })
}

fn is_local_min(x: &[f64], i: usize) -> bool {
    x[i] < x[i - 1] && x[i] <= x[i + 1]
}

fn is_local_max(x: &[f64], i: usize) -> bool {
    x[i] > x[i - 1] && x[i] >= x[i + 1]
}

fn first_where(lo: usize, hi: usize, pred: impl Fn(usize) -> bool) -> Option<usize> {
    (lo..hi).find(|&i| pred(i))
}

/// Locate every landmark of one beat.
///
/// `dn` is the first ppg minimum after the systolic peak confirmed by a
/// negative-to-positive VPG zero crossing, lying within the first 75% of the
/// cycle and followed by a diastolic rise of at least 1% of the pulse
/// amplitude.
pub fn locate_fiducials(d: &DerivativeStack, span: BeatSpan) -> std::result::Result<FiducialSet, InvalidBeat> {
    let (on, off) = (span.onset_idx, span.offset_idx);
    if off >= d.len() || off <= on + 2 {
        return Err(InvalidBeat::OutOfRange);
    }
    let (ppg, vpg, apg) = (&d.ppg, &d.vpg, &d.apg);

    let sp = argmax(ppg, on, off);
    if sp == on || sp >= off - 1 {
        return Err(InvalidBeat::PeakOnBoundary);
    }
    let u = argmax(vpg, on, sp + 1);
    let a = argmax(apg, on, u + 1);
    if a >= sp {
        return Err(InvalidBeat::NoBWave);
    }
    let b = first_where(a + 1, sp.min(off - 1), |i| is_local_min(apg, i)).unwrap_or_else(|| argmin(apg, a + 1, sp + 1));

    let v = first_where(sp + 1, off - 1, |i| is_local_min(vpg, i)).ok_or(InvalidBeat::NoVpgValley)?;
    let w = first_where(v + 1, off - 1, |i| is_local_max(vpg, i));

    let c = first_where(b + 1, off - 1, |i| is_local_max(apg, i));
    let dd = c.and_then(|c| first_where(c + 1, off - 1, |i| is_local_min(apg, i)));
    let e = dd.and_then(|dd| first_where(dd + 1, off - 1, |i| is_local_max(apg, i)));

    let amplitude = ppg[sp] - ppg[on];
    let notch_limit = on + (0.75 * (off - on) as f64) as usize;
    let rise_window = ((0.15 * (off - on) as f64) as usize).max(2);
    let dn = (sp + 1..notch_limit.min(off - 1))
        .filter(|&i| vpg[i - 1] < 0.0 && vpg[i] >= 0.0)
        .map(|i| if ppg[i - 1] < ppg[i] { i - 1 } else { i })
        .find(|&i| {
            let hi = (i + rise_window).min(off);
            let rise = (i + 1..hi).map(|j| ppg[j]).fold(f64::NEG_INFINITY, f64::max) - ppg[i];
            i > sp && rise >= 0.01 * amplitude
        });

    Ok(FiducialSet {
        on,
        sp,
        dn,
        off,
        u,
        v,
        w,
        a,
        b,
        c,
        d: dd,
        e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn stack(samples: Vec<f64>, fs: f64) -> DerivativeStack {
        derivatives(&Waveform::new(samples, fs, 0.0, "p").unwrap()).unwrap()
    }

    #[test]
    fn ramp_has_constant_velocity() {
        let fs = 125.0;
        let d = stack((0..500).map(|i| 2.0 * i as f64 / fs).collect(), fs);
        for i in 3..497 {
            assert!((d.vpg[i] - 2.0).abs() < 1e-9);
        }
        for i in 4..496 {
            assert!(d.apg[i].abs() < 1e-6, "{i}: {}", d.apg[i]);
        }
    }

    #[test]
    fn quadratic_has_constant_acceleration() {
        let fs = 125.0;
        let d = stack((0..500).map(|i| (i as f64 / fs).powi(2)).collect(), fs);
        for i in 4..496 {
            assert!((d.apg[i] - 2.0).abs() < 1e-6, "{i}: {}", d.apg[i]);
        }
    }

    #[test]
    fn sine_velocity_matches_analytic_derivative() {
        let fs = 125.0;
        let d = stack((0..1000).map(|i| (2.0 * PI * i as f64 / fs).sin()).collect(), fs);
        let worst = (3..997)
            .map(|i| (d.vpg[i] - 2.0 * PI * (2.0 * PI * i as f64 / fs).cos()).abs())
            .fold(0.0, f64::max);
        assert!(worst < 0.05, "{worst}");
    }

    #[test]
    fn too_short_for_derivatives() {
        let w = Waveform::new(vec![0.0; 4], 125.0, 0.0, "p").unwrap();
        assert!(matches!(derivatives(&w), Err(Error::SegmentTooShort { .. })));
    }

    #[test]
    fn constant_signal_has_no_peaks() {
        let d = stack(vec![1.0; 1000], 125.0);
        assert!(matches!(detect_beats(&d), Err(Error::NoPeaks)));
    }

    #[test]
    fn detection_needs_two_seconds() {
        let d = stack(vec![1.0; 200], 125.0);
        assert!(matches!(detect_beats(&d), Err(Error::SegmentTooShort { .. })));
    }

    #[test]
    fn monotone_beat_has_no_notch() {
        // single-Gaussian pulses: no diastolic hump
        let fs = 125.0;
        let x: Vec<f64> = (0..125 * 10)
            .map(|i| {
                let ph = (i % 125) as f64 / 125.0;
                (-(ph - 0.25).powi(2) / (2.0 * 0.08_f64.powi(2))).exp()
            })
            .collect();
        let d = stack(x, fs);
        let spans = detect_beats(&d).unwrap();
        assert!(!spans.is_empty());
        for s in spans {
            let f = locate_fiducials(&d, s).unwrap();
            assert_eq!(f.dn, None);
            assert!(f.on <= f.a && f.a <= f.u && f.u <= f.sp);
        }
    }
}
