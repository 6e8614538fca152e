//! Compressed complex spectrogram front end.
//!
//! 320-sample periodic Hann window, 160-sample hop, no centre padding and
//! no trailing partial frame. Magnitudes are power-law compressed while the
//! phase is kept, giving a `(2, 161, T)` real/imaginary feature tensor.

use std::f64::consts::PI;

use rustfft::num_complex::Complex32;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};

pub const FFT_SIZE: usize = 320;
pub const HOP: usize = 160;
pub const NUM_BINS: usize = FFT_SIZE / 2 + 1;
pub const DEFAULT_COMPRESSION: f32 = 0.3;

/// Complex STFT stored bin-major: `bins[f * frames + t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: Vec<Complex32>,
}

impl Spectrogram {
    pub fn at(&self, bin: usize, frame: usize) -> Complex32 {
        self.bins[bin * self.frames + frame]
    }
}

/// `(2, F, T)` tensor data; channel 0 real, channel 1 imaginary.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    pub frames: usize,
    pub data: Vec<f32>,
}

impl FeatureTensor {
    pub fn shape(&self) -> [usize; 3] {
        [2, NUM_BINS, self.frames]
    }

    pub fn zeros(frames: usize) -> Self {
        FeatureTensor {
            frames,
            data: vec![0.0; 2 * NUM_BINS * frames],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub compression: f32,
    /// Peak-normalize the waveform before analysis.
    pub peak_normalize: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            compression: DEFAULT_COMPRESSION,
            peak_normalize: false,
        }
    }
}

pub fn frame_count(len: usize) -> Option<usize> {
    (len >= FFT_SIZE).then(|| (len - FFT_SIZE) / HOP + 1)
}

pub fn periodic_hann(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()) as f32)
        .collect()
}

pub fn stft(clip: &AudioClip) -> Result<Spectrogram> {
    stft_samples(&clip.samples)
}

pub fn stft_samples(samples: &[f32]) -> Result<Spectrogram> {
    let frames = frame_count(samples.len()).ok_or_else(|| {
        Error::Invalid(format!(
            "clip of {} samples is shorter than one {FFT_SIZE}-sample window; zero-pad it before feature extraction",
            samples.len()
        ))
    })?;
    let window = periodic_hann(FFT_SIZE);
    let fft = FftPlanner::<f32>::new().plan_fft_forward(FFT_SIZE);
    let mut buf = vec![Complex32::new(0.0, 0.0); FFT_SIZE];
    let mut bins = vec![Complex32::new(0.0, 0.0); NUM_BINS * frames];
    for t in 0..frames {
        let seg = &samples[t * HOP..t * HOP + FFT_SIZE];
        for ((b, &x), &w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex32::new(x * w, 0.0);
        }
        fft.process(&mut buf);
        for f in 0..NUM_BINS {
            bins[f * frames + t] = buf[f];
        }
    }
    Ok(Spectrogram { frames, bins })
}

/// `m·e^{iφ}` ↦ `(m^c cos φ, m^c sin φ)`.
pub fn compress_bin(z: Complex32, c: f32) -> (f32, f32) {
    let m = z.norm();
    if m == 0.0 {
        return (0.0, 0.0);
    }
    let g = m.powf(c) / m;
    (z.re * g, z.im * g)
}

pub fn compress_spectrogram(spec: &Spectrogram, compression: f32) -> FeatureTensor {
    let plane = NUM_BINS * spec.frames;
    let mut data = vec![0.0; 2 * plane];
    for (i, &z) in spec.bins.iter().enumerate() {
        let (re, im) = compress_bin(z, compression);
        data[i] = re;
        data[plane + i] = im;
    }
    FeatureTensor {
        frames: spec.frames,
        data,
    }
}

pub fn extract(clip: &AudioClip, cfg: &FeatureConfig) -> Result<FeatureTensor> {
    let spec = if cfg.peak_normalize {
        let mut c = clip.clone();
        c.peak_normalize(1.0);
        stft(&c)?
    } else {
        stft(clip)?
    };
    Ok(compress_spectrogram(&spec, cfg.compression))
}
