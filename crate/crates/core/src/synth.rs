//! Speech-like test signals: a drifting harmonic source shaped by moving
//! formant resonances and gated into syllable-sized bursts.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};

const PEAK: f32 = 0.5;
const BLOCK: usize = 160;
const MAX_HARMONIC_HZ: f64 = 7000.0;

struct Formant {
    lo: f64,
    hi: f64,
    width: f64,
    gain: f64,
}

const FORMANTS: [Formant; 3] = [
    Formant { lo: 300.0, hi: 900.0, width: 120.0, gain: 1.0 },
    Formant { lo: 900.0, hi: 2300.0, width: 180.0, gain: 0.6 },
    Formant { lo: 2300.0, hi: 3300.0, width: 250.0, gain: 0.3 },
];

/// Slow random trajectory in [0, 1]: a sum of two low-frequency sinusoids.
struct Drift {
    f: [f64; 2],
    ph: [f64; 2],
}

impl Drift {
    fn new(rng: &mut ChaCha8Rng, max_hz: f64) -> Self {
        Drift {
            f: [rng.random_range(0.1..max_hz), rng.random_range(0.1..max_hz)],
            ph: [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)],
        }
    }

    fn at(&self, t: f64) -> f64 {
        let s = (2.0 * PI * self.f[0] * t + self.ph[0]).sin()
            + 0.5 * (2.0 * PI * self.f[1] * t + self.ph[1]).sin();
        (s / 1.5 + 1.0) / 2.0
    }
}

/// Per-sample burst envelope: raised-cosine syllables separated by short gaps.
fn syllable_envelope(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let mut env = vec![0.0; n];
    let mut pos = (rng.random_range(0.0..0.08) * sr) as usize;
    while pos < n {
        let len = (rng.random_range(0.12..0.32) * sr) as usize;
        let amp = rng.random_range(0.5..1.0);
        for i in 0..len.min(n - pos) {
            let u = i as f64 / len as f64;
            env[pos + i] = amp * (PI * u).sin().powi(2);
        }
        pos += len + (rng.random_range(0.03..0.15) * sr) as usize;
    }
    env
}

pub fn synth_clean(seed: u64, duration_s: f64) -> Result<AudioClip> {
    if !(1.0..=30.0).contains(&duration_s) {
        return Err(Error::Invalid(format!(
            "duration_s must lie in [1, 30], got {duration_s}"
        )));
    }
    let sr = SAMPLE_RATE as f64;
    let n = (duration_s * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let f0_lo: f64 = rng.random_range(80.0..180.0);
    let f0_hi = (f0_lo * rng.random_range(1.2..1.7)).min(300.0);
    let f0_drift = Drift::new(&mut rng, 1.5);
    let formant_drift: Vec<Drift> = FORMANTS.iter().map(|_| Drift::new(&mut rng, 3.0)).collect();
    let env = syllable_envelope(&mut rng, n);

    let mut out = vec![0.0f64; n];
    let mut phase = 0.0f64;
    let mut gains: Vec<f64> = Vec::new();
    for block in (0..n).step_by(BLOCK) {
        let t = block as f64 / sr;
        let f0 = f0_lo + (f0_hi - f0_lo) * f0_drift.at(t);
        let harmonics = (MAX_HARMONIC_HZ / f0) as usize;
        let centres: Vec<f64> = FORMANTS
            .iter()
            .zip(&formant_drift)
            .map(|(f, d)| f.lo + (f.hi - f.lo) * d.at(t))
            .collect();
        gains.clear();
        gains.extend((1..=harmonics).map(|k| {
            let fk = k as f64 * f0;
            let shaped: f64 = FORMANTS
                .iter()
                .zip(&centres)
                .map(|(f, &c)| f.gain * (-((fk - c) / f.width).powi(2)).exp())
                .sum();
            // Glottal roll-off keeps the low harmonics present between formants.
            shaped + 0.05 / k as f64
        }));
        for i in block..(block + BLOCK).min(n) {
            phase += 2.0 * PI * f0 / sr;
            if phase > 2.0 * PI {
                phase -= 2.0 * PI;
            }
            if env[i] == 0.0 {
                continue;
            }
            // sin((k+1)φ) by the Chebyshev recurrence.
            let (s1, c1) = phase.sin_cos();
            let (mut prev, mut cur) = (0.0f64, s1);
            let mut s = 0.0;
            for g in &gains {
                s += g * cur;
                let next = 2.0 * c1 * cur - prev;
                prev = cur;
                cur = next;
            }
            out[i] = s * env[i];
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let g = if peak > 0.0 { PEAK as f64 / peak } else { 0.0 };
    let samples = out.iter().map(|v| (v * g) as f32).collect();
    Ok(AudioClip::new(format!("synth-{seed}"), samples))
}
