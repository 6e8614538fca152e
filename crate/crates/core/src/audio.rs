//! WAV ingestion, mono downmix and band-limited resampling to 16 kHz.

use std::f64::consts::PI;
use std::path::Path;

use crate::degrade::DegradationSpec;
use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub clip_id: String,
    pub metadata: Option<DegradationSpec>,
}

impl AudioClip {
    pub fn new(clip_id: impl Into<String>, samples: Vec<f32>) -> Self {
        AudioClip {
            samples,
            sample_rate: SAMPLE_RATE,
            clip_id: clip_id.into(),
            metadata: None,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Scale so the absolute peak equals `peak` (no-op on silence).
    pub fn peak_normalize(&mut self, peak: f32) {
        let max = self.samples.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        if max > 0.0 {
            let g = peak / max;
            self.samples.iter_mut().for_each(|v| *v *= g);
        }
    }
}

/// Read a PCM (16/24/32-bit integer) or 32-bit float WAV file, average its
/// channels and resample to 16 kHz.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let ingest = |message: String| Error::Ingest {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => ingest(other.to_string()),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(ingest("zero channels".into()));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| ingest(e.to_string()))?,
        (hound::SampleFormat::Int, bits @ (16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| ingest(e.to_string()))?
        }
        (fmt, bits) => {
            return Err(ingest(format!("unsupported encoding: {fmt:?} {bits}-bit")));
        }
    };
    let mono: Vec<f32> = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    let mut samples = resample(&mono, spec.sample_rate, SAMPLE_RATE);
    for v in samples.iter_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(ingest("non-finite samples".into()));
    }
    let clip_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(AudioClip::new(clip_id, samples))
}

/// Write 16 kHz mono 16-bit PCM.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Ingest {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &clip.samples {
        w.write_sample(quantize_i16(s)).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}

pub fn quantize_i16(s: f32) -> i16 {
    (s.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

const SINC_HALF_WIDTH: f64 = 16.0;

/// Windowed-sinc (Blackman) resampling. The kernel's cutoff sits at the
/// lower of the two Nyquist rates, so downsampling is anti-aliased.
pub fn resample(input: &[f32], from_rate: u32, to_rate: u32) -> Vec<f32> {
    if from_rate == to_rate || input.is_empty() {
        return input.to_vec();
    }
    let ratio = to_rate as f64 / from_rate as f64;
    let out_len = (input.len() as f64 * ratio).round() as usize;
    // Cutoff relative to the input rate.
    let cutoff = ratio.min(1.0);
    let half = SINC_HALF_WIDTH / cutoff;
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let center = j as f64 / ratio;
        let lo = (center - half).ceil().max(0.0) as usize;
        let hi = ((center + half).floor() as usize).min(input.len() - 1);
        let mut acc = 0.0;
        for (i, &x) in input.iter().enumerate().take(hi + 1).skip(lo) {
            let t = i as f64 - center;
            let arg = t * cutoff;
            let sinc = if arg.abs() < 1e-12 {
                1.0
            } else {
                (PI * arg).sin() / (PI * arg)
            };
            let u = (t / half + 1.0) / 2.0;
            let window = 0.42 - 0.5 * (2.0 * PI * u).cos() + 0.08 * (4.0 * PI * u).cos();
            acc += x as f64 * cutoff * sinc * window;
        }
        out.push(acc as f32);
    }
    out
}
