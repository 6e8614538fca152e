//! Parametric degradations and the analytic quality oracle.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const LOWPASS_TAPS: usize = 301;
pub const DROPOUT_FRAME: usize = 320;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    pub snr_db: Option<f64>,
    pub bandwidth_hz: Option<f64>,
    pub clip_threshold: Option<f64>,
    pub dropout: Option<f64>,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn clean(seed: u64) -> Self {
        DegradationSpec {
            snr_db: None,
            bandwidth_hz: None,
            clip_threshold: None,
            dropout: None,
            seed,
        }
    }

    pub fn is_clean(&self) -> bool {
        self.snr_db.is_none()
            && self.bandwidth_hz.is_none()
            && self.clip_threshold.is_none()
            && self.dropout.is_none()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if let Some(s) = self.snr_db {
            if !s.is_finite() {
                return bad(format!("snr_db must be finite, got {s}"));
            }
        }
        if let Some(b) = self.bandwidth_hz {
            if !(b > 0.0 && b <= 8000.0) {
                return bad(format!("bandwidth_hz must lie in (0, 8000], got {b}"));
            }
        }
        if let Some(c) = self.clip_threshold {
            if !(c > 0.0 && c <= 1.0) {
                return bad(format!("clip_threshold must lie in (0, 1], got {c}"));
            }
        }
        if let Some(d) = self.dropout {
            if !(0.0..1.0).contains(&d) {
                return bad(format!("dropout must lie in [0, 1), got {d}"));
            }
        }
        Ok(())
    }
}

/// Probabilities and ranges used by [`sample_degradation`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub p_noise: f64,
    pub snr_mean_db: f64,
    pub snr_std_db: f64,
    pub p_bandwidth: f64,
    pub bandwidths_hz: Vec<f64>,
    pub p_clip: f64,
    pub clip_range: [f64; 2],
    pub p_dropout: f64,
    pub dropout_range: [f64; 2],
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            p_noise: 0.67,
            snr_mean_db: 10.0,
            snr_std_db: 10f64.sqrt(),
            p_bandwidth: 0.5,
            bandwidths_hz: vec![2000.0, 4000.0, 6000.0],
            p_clip: 0.25,
            clip_range: [0.1, 0.5],
            p_dropout: 0.25,
            dropout_range: [0.02, 0.2],
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.p_noise, self.p_bandwidth, self.p_clip, self.p_dropout];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("degradation probabilities must lie in [0, 1]".into()));
        }
        if !(self.snr_std_db >= 0.0) || !self.snr_mean_db.is_finite() {
            return Err(Error::Config("snr_std_db must be >= 0 and snr_mean_db finite".into()));
        }
        if self.p_bandwidth > 0.0 && self.bandwidths_hz.is_empty() {
            return Err(Error::Config("bandwidths_hz is empty".into()));
        }
        if self.bandwidths_hz.iter().any(|b| !(*b > 0.0 && *b <= 8000.0)) {
            return Err(Error::Config("bandwidths_hz entries must lie in (0, 8000]".into()));
        }
        let [c0, c1] = self.clip_range;
        if !(c0 > 0.0 && c0 <= c1 && c1 <= 1.0) {
            return Err(Error::Config("clip_range must satisfy 0 < lo <= hi <= 1".into()));
        }
        let [d0, d1] = self.dropout_range;
        if !(d0 >= 0.0 && d0 <= d1 && d1 < 1.0) {
            return Err(Error::Config("dropout_range must satisfy 0 <= lo <= hi < 1".into()));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

pub fn sample_degradation<R: Rng + ?Sized>(rng: &mut R, cfg: &SamplerConfig) -> DegradationSpec {
    let mut spec = DegradationSpec::clean(0);
    if rng.random_bool(cfg.p_noise) {
        let z: f64 = StandardNormal.sample(rng);
        spec.snr_db = Some(cfg.snr_mean_db + cfg.snr_std_db * z);
    }
    if rng.random_bool(cfg.p_bandwidth) {
        let i = rng.random_range(0..cfg.bandwidths_hz.len());
        spec.bandwidth_hz = Some(cfg.bandwidths_hz[i]);
    }
    if rng.random_bool(cfg.p_clip) {
        spec.clip_threshold = Some(uniform(rng, cfg.clip_range));
    }
    if rng.random_bool(cfg.p_dropout) {
        spec.dropout = Some(uniform(rng, cfg.dropout_range));
    }
    spec.seed = rng.next_u64();
    spec
}

/// Blackman-windowed sinc low-pass, unit DC gain.
pub fn lowpass_kernel(cutoff_hz: f64, taps: usize) -> Vec<f64> {
    let fc = cutoff_hz / SAMPLE_RATE as f64;
    let mid = (taps - 1) as f64 / 2.0;
    let mut h: Vec<f64> = (0..taps)
        .map(|i| {
            let t = i as f64 - mid;
            let sinc = if t == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * t).sin() / (PI * t)
            };
            let u = i as f64 / (taps - 1) as f64;
            let w = 0.42 - 0.5 * (2.0 * PI * u).cos() + 0.08 * (4.0 * PI * u).cos();
            sinc * w
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    h
}

/// Zero-delay ("same") convolution with a symmetric kernel.
fn filter_same(x: &[f32], h: &[f64]) -> Vec<f32> {
    let half = h.len() / 2;
    let mut padded = vec![0.0f64; x.len() + 2 * half];
    for (d, &v) in padded[half..].iter_mut().zip(x) {
        *d = v as f64;
    }
    padded
        .windows(h.len())
        .take(x.len())
        .map(|w| {
            let mut acc = [0.0f64; 4];
            let (wc, hc) = (w.chunks_exact(4), h.chunks_exact(4));
            let tail: f64 = wc.remainder().iter().zip(hc.remainder()).map(|(a, b)| a * b).sum();
            for (a, b) in wc.zip(hc) {
                for k in 0..4 {
                    acc[k] += a[k] * b[k];
                }
            }
            (acc[0] + acc[1] + acc[2] + acc[3] + tail) as f32
        })
        .collect()
}

fn power(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64
}

/// White noise scaled so `power(signal) / power(noise)` is exactly the target.
pub fn noise_at_snr(signal: &[f32], snr_db: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let raw: Vec<f64> = (0..signal.len()).map(|_| StandardNormal.sample(rng)).collect();
    let ps = power(signal);
    let pn = raw.iter().map(|v| v * v).sum::<f64>() / raw.len().max(1) as f64;
    if ps == 0.0 || pn == 0.0 {
        return vec![0.0; signal.len()];
    }
    let g = (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    raw.iter().map(|v| (v * g) as f32).collect()
}

pub fn apply_degradation(clip: &AudioClip, spec: &DegradationSpec) -> Result<AudioClip> {
    spec.validate()?;
    let mut out = clip.clone();
    out.metadata = Some(*spec);
    if spec.is_clean() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut x = std::mem::take(&mut out.samples);

    if let Some(bw) = spec.bandwidth_hz {
        if bw < SAMPLE_RATE as f64 / 2.0 {
            x = filter_same(&x, &lowpass_kernel(bw, LOWPASS_TAPS));
        }
    }
    if let Some(snr) = spec.snr_db {
        let n = noise_at_snr(&x, snr, &mut rng);
        x.iter_mut().zip(&n).for_each(|(s, v)| *s += v);
    }
    if let Some(th) = spec.clip_threshold {
        let th = th as f32;
        x.iter_mut().for_each(|s| *s = s.clamp(-th, th));
    }
    if let Some(rate) = spec.dropout {
        for frame in x.chunks_mut(DROPOUT_FRAME) {
            if rng.random_bool(rate) {
                frame.fill(0.0);
            }
        }
    }
    let peak = x.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        x.iter_mut().for_each(|v| *v /= peak);
    }
    out.samples = x;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleQuality {
    pub mos: f64,
}

pub fn oracle_penalty(spec: &DegradationSpec) -> f64 {
    let p_snr = spec.snr_db.map_or(0.0, |s| ((20.0 - s) / 6.0).max(0.0));
    let p_bw = spec
        .bandwidth_hz
        .map_or(0.0, |b| ((8000.0 - b) / 2500.0).max(0.0) * 0.8);
    let p_clip = spec
        .clip_threshold
        .map_or(0.0, |t| (4.0 * (0.5 - t)).max(0.0));
    let p_drop = spec.dropout.map_or(0.0, |r| 12.0 * r);
    p_snr + p_bw + p_clip + p_drop
}

/// Quality logit `2.2 − penalty`.
pub fn oracle_logit(spec: &DegradationSpec) -> f64 {
    2.2 - oracle_penalty(spec)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn oracle_mos(spec: &DegradationSpec) -> OracleQuality {
    oracle_mos_shifted(spec, 1.0, 0.0)
}

/// Oracle seen through a dataset-specific logit scale and shift.
pub fn oracle_mos_shifted(spec: &DegradationSpec, scale: f64, shift: f64) -> OracleQuality {
    if spec.is_clean() {
        return OracleQuality { mos: 5.0 };
    }
    let mos = 1.0 + 4.0 * sigmoid(scale * oracle_logit(spec) + shift);
    OracleQuality {
        mos: mos.clamp(1.0, 5.0),
    }
}
