//! Butterworth band-pass design as second-order sections and zero-phase
//! (forward-backward) filtering.

use num_complex::Complex64;
use std::f64::consts::PI;

/// One biquad in transposed direct form II; `a[0]` is implicitly 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sos {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Sos {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let num = self.b[0] + self.b[1] * z_inv + self.b[2] * z_inv * z_inv;
        let den = self.a[0] + self.a[1] * z_inv + self.a[2] * z_inv * z_inv;
        num / den
    }
}

/// Magnitude of the cascade at `freq` Hz.
pub fn magnitude(sos: &[Sos], freq: f64, fs: f64) -> f64 {
    let z_inv = Complex64::from_polar(1.0, -2.0 * PI * freq / fs);
    sos.iter()
        .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z_inv))
        .norm()
}

/// Digital Butterworth band-pass with an `order`-pole analog prototype
/// (so `order` biquads), via band transform and the bilinear map with
/// pre-warped edges. Gain is exactly 1 at the geometric centre frequency.
pub fn bandpass(order: usize, lo: f64, hi: f64, fs: f64) -> Vec<Sos> {
    assert!(order >= 1 && 0.0 < lo && lo < hi && hi < fs / 2.0);
    let fs2 = 2.0 * fs;
    let w_lo = fs2 * (PI * lo / fs).tan();
    let w_hi = fs2 * (PI * hi / fs).tan();
    let bw = w_hi - w_lo;
    let w0 = (w_lo * w_hi).sqrt();

    let mut upper = Vec::new();
    let mut real = Vec::new();
    for k in 0..order {
        let theta = PI * (2 * k + 1 + order) as f64 / (2 * order) as f64;
        let proto = Complex64::from_polar(1.0, theta);
        let half = proto * bw / 2.0;
        let disc = (half * half - w0 * w0).sqrt();
        for s in [half + disc, half - disc] {
            let z = (fs2 + s) / (fs2 - s);
            if z.im > 1e-12 {
                upper.push(z);
            } else if z.im.abs() <= 1e-12 {
                real.push(z.re);
            }
        }
    }
    upper.sort_by(|a, b| a.arg().partial_cmp(&b.arg()).unwrap());
    real.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut sections: Vec<Sos> = upper
        .iter()
        .map(|p| Sos {
            b: [1.0, 0.0, -1.0],
            a: [1.0, -2.0 * p.re, p.norm_sqr()],
        })
        .collect();
    for pair in real.chunks(2) {
        let (r1, r2) = (pair[0], pair.get(1).copied().unwrap_or(0.0));
        sections.push(Sos {
            b: [1.0, 0.0, -1.0],
            a: [1.0, -(r1 + r2), r1 * r2],
        });
    }

    let centre = 2.0 * (w0 / fs2).atan() * fs / (2.0 * PI);
    let gain = magnitude(&sections, centre, fs);
    let per_section = gain.powf(-1.0 / sections.len() as f64);
    for s in &mut sections {
        for b in &mut s.b {
            *b *= per_section;
        }
    }
    sections
}

/// Steady-state section states for a unit step input.
fn step_states(sos: &[Sos]) -> Vec<[f64; 2]> {
    let mut scale = 1.0;
    sos.iter()
        .map(|s| {
            let [b0, b1, b2] = s.b;
            let [_, a1, a2] = s.a;
            let g = (b0 + b1 + b2) / (1.0 + a1 + a2);
            let z1 = b2 - a2 * g;
            let z0 = b1 - a1 * g + z1;
            let state = [scale * z0, scale * z1];
            scale *= g;
            state
        })
        .collect()
}

fn run(sos: &[Sos], x: &mut [f64], init: &[[f64; 2]], x0: f64) {
    for (s, zi) in sos.iter().zip(init) {
        let [b0, b1, b2] = s.b;
        let [_, a1, a2] = s.a;
        let (mut z0, mut z1) = (zi[0] * x0, zi[1] * x0);
        for v in x.iter_mut() {
            let input = *v;
            let y = b0 * input + z0;
            z0 = b1 * input - a1 * y + z1;
            z1 = b2 * input - a2 * y;
            *v = y;
        }
    }
}

/// Samples until the impulse response stays below `tol` of its peak.
pub fn settling_samples(sos: &[Sos], tol: f64, max_len: usize) -> usize {
    let mut h = vec![0.0; max_len];
    h[0] = 1.0;
    let zero = vec![[0.0; 2]; sos.len()];
    run(sos, &mut h, &zero, 0.0);
    let peak = h.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    h.iter().rposition(|v| v.abs() > tol * peak).map_or(0, |i| i + 1)
}

/// Forward-backward filtering with odd reflection padding of `pad` samples
/// on each side and steady-state initial conditions. Requires `x.len() > pad`.
pub fn filtfilt(sos: &[Sos], x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    assert!(n > pad, "signal shorter than padding");
    let first = x[0];
    let last = x[n - 1];
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));

    let zi = step_states(sos);
    let x0 = ext[0];
    run(sos, &mut ext, &zi, x0);
    ext.reverse();
    let y0 = ext[0];
    run(sos, &mut ext, &zi, y0);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}
