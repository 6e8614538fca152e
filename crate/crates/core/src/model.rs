//! Convolutional-transformer students, the transformer MOS head and
//! parameter accounting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{conv_out_len, Tape, Var};
use crate::bias::{to_mos, BiasTransform};
use crate::error::{Error, Result};
use crate::features::{FeatureTensor, FFT_SIZE, HOP, NUM_BINS};
use crate::tensor::{ParamId, ParamSet, Tensor};

pub const LEAKY_SLOPE: f32 = 0.1;
pub const MIN_FRAMES: usize = 4;
pub const HEAD_PREFIX: &str = "head.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub in_dim: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub positional_encoding: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            in_dim: 32,
            dim: 32,
            layers: 4,
            heads: 4,
            ff_dim: 64,
            positional_encoding: true,
        }
    }
}

/// What sits on top of the student's encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadSpec {
    /// Learned-query attention pooling followed by a linear readout.
    #[default]
    Pool,
    /// A full transformer head fed by the encoder output.
    Transformer {
        dim: usize,
        layers: usize,
        heads: usize,
        ff_dim: usize,
    },
}

fn default_base_channels() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    #[serde(default)]
    pub variant_id: u8,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    pub max_channels: usize,
    pub num_conv_layers: usize,
    pub transformer_dim: usize,
    pub transformer_layers: usize,
    pub attention_heads: usize,
    /// Feed-forward width; `4 · transformer_dim` when absent.
    #[serde(default)]
    pub ff_dim: Option<usize>,
    #[serde(default)]
    pub head: HeadSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub cin: usize,
    pub cout: usize,
    pub stride: (usize, usize),
}

impl StudentConfig {
    pub fn ff(&self) -> usize {
        self.ff_dim.unwrap_or(4 * self.transformer_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.base_channels == 0 {
            return err("student.base_channels must be positive".into());
        }
        let ratio = self.max_channels / self.base_channels;
        if self.max_channels % self.base_channels != 0 || !ratio.is_power_of_two() {
            return err(format!(
                "student.max_channels ({}) must be base_channels ({}) times a power of two",
                self.max_channels, self.base_channels
            ));
        }
        if self.num_conv_layers < 3 {
            return err("student.num_conv_layers must be at least 3".into());
        }
        if self.transformer_dim == 0 || self.attention_heads == 0 {
            return err("student.transformer_dim and attention_heads must be positive".into());
        }
        if self.transformer_dim % self.attention_heads != 0 {
            return err(format!(
                "student.transformer_dim ({}) not divisible by attention_heads ({})",
                self.transformer_dim, self.attention_heads
            ));
        }
        if self.ff() == 0 {
            return err("student.ff_dim must be positive".into());
        }
        if let HeadSpec::Transformer { dim, heads, ff_dim, .. } = self.head {
            if dim == 0 || heads == 0 || dim % heads != 0 || ff_dim == 0 {
                return err("student.head: dim must be a positive multiple of heads".into());
            }
        }
        Ok(())
    }

    pub fn conv_layers(&self) -> Vec<ConvLayer> {
        let n = self.num_conv_layers;
        let mut cin = 2;
        (0..n)
            .map(|i| {
                let cout = if i < 2 {
                    self.base_channels
                } else {
                    (self.base_channels << (i - 1)).min(self.max_channels)
                };
                let stride = match i {
                    0 | 1 => (1, 1),
                    _ if i == n - 1 => (2, 2),
                    _ => (2, 1),
                };
                let l = ConvLayer { cin, cout, stride };
                cin = cout;
                l
            })
            .collect()
    }

    /// Frequency extent after the conv stack.
    pub fn freq_out(&self) -> usize {
        self.conv_layers()
            .iter()
            .fold(NUM_BINS, |f, l| conv_out_len(f, 3, l.stride.0, 1).unwrap_or(0))
    }

    pub fn frames_out(&self, frames: usize) -> usize {
        self.conv_layers()
            .iter()
            .fold(frames, |t, l| conv_out_len(t, 3, l.stride.1, 1).unwrap_or(0))
    }

    pub fn proj_in(&self) -> usize {
        self.conv_layers().last().map_or(0, |l| l.cout) * self.freq_out()
    }
}

/// Minimum number of samples for a clip to yield `MIN_FRAMES` frames.
pub fn min_clip_samples() -> usize {
    FFT_SIZE + (MIN_FRAMES - 1) * HOP
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: Vec<usize>, std: f32) -> Tensor {
        let n = Normal::new(0.0f32, std).expect("finite std");
        Tensor::from_fn(shape, |_| n.sample(&mut self.rng))
    }
}

fn add_linear(set: &mut ParamSet, init: &mut Init, name: &str, din: usize, dout: usize) -> Result<()> {
    let std = (2.0 / (din + dout) as f32).sqrt();
    set.insert(format!("{name}.w"), init.normal(vec![din, dout], std))?;
    set.insert(format!("{name}.b"), Tensor::zeros(vec![dout]))?;
    Ok(())
}

fn add_layer_norm(set: &mut ParamSet, name: &str, d: usize) -> Result<()> {
    set.insert(format!("{name}.g"), Tensor::from_fn(vec![d], |_| 1.0))?;
    set.insert(format!("{name}.b"), Tensor::zeros(vec![d]))?;
    Ok(())
}

fn add_encoder(set: &mut ParamSet, init: &mut Init, prefix: &str, layers: usize, d: usize, ff: usize) -> Result<()> {
    for l in 0..layers {
        let p = format!("{prefix}{l}");
        add_layer_norm(set, &format!("{p}.ln1"), d)?;
        for m in ["q", "k", "v", "o"] {
            add_linear(set, init, &format!("{p}.attn.{m}"), d, d)?;
        }
        add_layer_norm(set, &format!("{p}.ln2"), d)?;
        add_linear(set, init, &format!("{p}.ff1"), d, ff)?;
        add_linear(set, init, &format!("{p}.ff2"), ff, d)?;
    }
    add_layer_norm(set, &format!("{prefix}.ln"), d)
}

fn add_pool_readout(set: &mut ParamSet, init: &mut Init, prefix: &str, d: usize) -> Result<()> {
    set.insert_with(
        format!("{prefix}pool.q"),
        init.normal(vec![1, d], 0.02),
        false,
    )?;
    add_linear(set, init, &format!("{prefix}out"), d, 1)
}

fn id(set: &ParamSet, name: &str) -> Result<ParamId> {
    set.id(name)
}

pub fn linear<'a>(tape: &mut Tape<'a>, set: &'a ParamSet, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(set, id(set, &format!("{name}.w"))?);
    let b = tape.param(set, id(set, &format!("{name}.b"))?);
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

fn layer_norm<'a>(tape: &mut Tape<'a>, set: &'a ParamSet, name: &str, x: Var) -> Result<Var> {
    let g = tape.param(set, id(set, &format!("{name}.g"))?);
    let b = tape.param(set, id(set, &format!("{name}.b"))?);
    tape.layer_norm(x, g, b)
}

/// Sinusoidal position table `[t, d]`.
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    Tensor::from_fn(vec![t, d], |i| {
        let (pos, j) = (i / d, i % d);
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        let a = pos as f64 * freq;
        (if j % 2 == 0 { a.sin() } else { a.cos() }) as f32
    })
}

/// Pre-norm transformer encoder followed by a final layer norm.
pub fn encoder<'a>(
    tape: &mut Tape<'a>,
    set: &'a ParamSet,
    prefix: &str,
    layers: usize,
    heads: usize,
    mut x: Var,
) -> Result<Var> {
    for l in 0..layers {
        let p = format!("{prefix}{l}");
        let h = layer_norm(tape, set, &format!("{p}.ln1"), x)?;
        let q = linear(tape, set, &format!("{p}.attn.q"), h)?;
        let k = linear(tape, set, &format!("{p}.attn.k"), h)?;
        let v = linear(tape, set, &format!("{p}.attn.v"), h)?;
        let a = tape.attention(q, k, v, heads)?;
        let a = linear(tape, set, &format!("{p}.attn.o"), a)?;
        x = tape.add(x, a)?;
        let h = layer_norm(tape, set, &format!("{p}.ln2"), x)?;
        let h = linear(tape, set, &format!("{p}.ff1"), h)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let h = linear(tape, set, &format!("{p}.ff2"), h)?;
        x = tape.add(x, h)?;
    }
    layer_norm(tape, set, &format!("{prefix}.ln"), x)
}

/// Single learned query attending over the rows of `x`; returns `[1, d]`.
pub fn attention_pool<'a>(tape: &mut Tape<'a>, set: &'a ParamSet, prefix: &str, x: Var) -> Result<Var> {
    let q = tape.param(set, id(set, &format!("{prefix}pool.q"))?);
    tape.attention(q, x, x, 1)
}

fn pool_readout<'a>(tape: &mut Tape<'a>, set: &'a ParamSet, prefix: &str, x: Var) -> Result<Var> {
    let pooled = attention_pool(tape, set, prefix, x)?;
    let y = linear(tape, set, &format!("{prefix}out"), pooled)?;
    tape.reshape(y, &[1])
}

/// Standalone transformer MOS head operating on an embedding sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct MosHead {
    pub config: HeadConfig,
    pub params: ParamSet,
}

impl MosHead {
    pub fn new(config: HeadConfig, seed: u64) -> Result<Self> {
        if config.dim % config.heads != 0 {
            return Err(Error::Config("head dim must be divisible by heads".into()));
        }
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut set = ParamSet::new();
        add_head_params(&mut set, &mut init, HEAD_PREFIX, &config)?;
        Ok(MosHead { config, params: set })
    }

    /// Raw logit for a `[t, in_dim]` embedding sequence.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        head_forward(tape, &self.params, HEAD_PREFIX, &self.config, x)
    }

    pub fn logit(&self, embeddings: &Tensor) -> Result<f32> {
        let mut tape = Tape::inference();
        let x = tape.input(embeddings.shape(), embeddings.data())?;
        let y = self.forward(&mut tape, x)?;
        Ok(tape.scalar(y))
    }
}

fn add_head_params(set: &mut ParamSet, init: &mut Init, prefix: &str, c: &HeadConfig) -> Result<()> {
    add_linear(set, init, &format!("{prefix}in"), c.in_dim, c.dim)?;
    add_encoder(set, init, &format!("{prefix}enc"), c.layers, c.dim, c.ff_dim)?;
    add_pool_readout(set, init, prefix, c.dim)
}

pub fn head_forward<'a>(
    tape: &mut Tape<'a>,
    set: &'a ParamSet,
    prefix: &str,
    c: &HeadConfig,
    x: Var,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::Invalid(format!(
            "MOS head needs a non-empty [frames, {}] sequence, got {s:?}",
            c.in_dim
        )));
    }
    if s[1] != c.in_dim {
        return Err(Error::shape("head", format!("input width {} vs {}", s[1], c.in_dim)));
    }
    let mut h = linear(tape, set, &format!("{prefix}in"), x)?;
    if c.positional_encoding {
        let pe = tape.constant(positional_encoding(s[0], c.dim));
        h = tape.add(h, pe)?;
    }
    let h = encoder(tape, set, &format!("{prefix}enc"), c.layers, c.heads, h)?;
    pool_readout(tape, set, prefix, h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityModel {
    pub config: StudentConfig,
    pub params: ParamSet,
    pub bias: BiasTransform,
}

impl QualityModel {
    pub fn new(config: StudentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut set = ParamSet::new();
        for (i, l) in config.conv_layers().iter().enumerate() {
            let fan_in = l.cin * 9;
            let std = (2.0 / fan_in as f32).sqrt();
            set.insert(format!("conv{i}.w"), init.normal(vec![l.cout, l.cin, 3, 3], std))?;
            set.insert(format!("conv{i}.b"), Tensor::zeros(vec![l.cout]))?;
        }
        let d = config.transformer_dim;
        add_linear(&mut set, &mut init, "proj", config.proj_in(), d)?;
        add_encoder(&mut set, &mut init, "enc", config.transformer_layers, d, config.ff())?;
        match config.head {
            HeadSpec::Pool => add_pool_readout(&mut set, &mut init, HEAD_PREFIX, d)?,
            HeadSpec::Transformer { dim, layers, heads, ff_dim } => {
                let hc = head_config(d, dim, layers, heads, ff_dim);
                add_head_params(&mut set, &mut init, HEAD_PREFIX, &hc)?;
            }
        }
        Ok(QualityModel {
            config,
            params: set,
            bias: BiasTransform::identity(),
        })
    }

    /// Raw logit `[1]` for one clip's features.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, features: &'a FeatureTensor) -> Result<Var> {
        let frames = features.frames;
        if frames < MIN_FRAMES || self.config.frames_out(frames) == 0 {
            return Err(Error::Invalid(format!(
                "clip has {frames} frames; the student needs at least {MIN_FRAMES} ({} samples at 16 kHz)",
                min_clip_samples()
            )));
        }
        let set = &self.params;
        let mut x = tape.input(&features.shape(), &features.data)?;
        for (i, l) in self.config.conv_layers().iter().enumerate() {
            let w = tape.param(set, id(set, &format!("conv{i}.w"))?);
            let b = tape.param(set, id(set, &format!("conv{i}.b"))?);
            x = tape.conv2d(x, w, Some(b), l.stride, (1, 1))?;
            x = tape.leaky_relu(x, LEAKY_SLOPE)?;
        }
        let s = tape.shape(x).to_vec();
        let x = tape.reshape(x, &[s[0] * s[1], s[2]])?;
        let x = tape.transpose(x)?;
        let x = linear(tape, set, "proj", x)?;
        let pe = tape.constant(positional_encoding(s[2], self.config.transformer_dim));
        let x = tape.add(x, pe)?;
        let c = &self.config;
        let x = encoder(tape, set, "enc", c.transformer_layers, c.attention_heads, x)?;
        match c.head {
            HeadSpec::Pool => pool_readout(tape, set, HEAD_PREFIX, x),
            HeadSpec::Transformer { dim, layers, heads, ff_dim } => {
                let hc = head_config(c.transformer_dim, dim, layers, heads, ff_dim);
                head_forward(tape, set, HEAD_PREFIX, &hc, x)
            }
        }
    }

    pub fn logit(&self, features: &FeatureTensor) -> Result<f32> {
        let mut tape = Tape::inference();
        let y = self.forward(&mut tape, features)?;
        Ok(tape.scalar(y))
    }

    pub fn mos(&self, features: &FeatureTensor, dataset: Option<&str>) -> Result<f64> {
        Ok(to_mos(self.logit(features)? as f64, self.bias.get(dataset)))
    }

    /// Backbone weight matrices: rank ≥ 2, outside the MOS head.
    pub fn prunable(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, p)| p.is_matrix() && !p.name.starts_with(HEAD_PREFIX))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn count_parameters(&self, sparse: bool) -> f64 {
        count_parameters(&self.params, sparse)
    }
}

fn head_config(in_dim: usize, dim: usize, layers: usize, heads: usize, ff_dim: usize) -> HeadConfig {
    HeadConfig {
        in_dim,
        dim,
        layers,
        heads,
        ff_dim,
        positional_encoding: true,
    }
}

/// Effective size of one tensor. Masked matrices pay 1.5 per surviving
/// weight (value plus 16-bit index) unless dense storage is cheaper.
pub fn effective_count(dense: usize, nonzero: Option<usize>) -> f64 {
    match nonzero {
        Some(nnz) => (dense as f64).min(1.5 * nnz as f64),
        None => dense as f64,
    }
}

pub fn count_parameters(set: &ParamSet, sparse: bool) -> f64 {
    set.iter()
        .map(|(_, p)| {
            let dense = p.tensor.numel();
            let nnz = p
                .mask
                .as_ref()
                .filter(|_| sparse)
                .map(|m| m.iter().filter(|&&k| k).count());
            effective_count(dense, nnz)
        })
        .sum()
}

/// Closed-form parameter count of a student, independent of instantiation.
pub fn analytic_parameter_count(c: &StudentConfig) -> usize {
    let conv: usize = c.conv_layers().iter().map(|l| l.cout * l.cin * 9 + l.cout).sum();
    let d = c.transformer_dim;
    let proj = c.proj_in() * d + d;
    let enc = encoder_count(c.transformer_layers, d, c.ff());
    let head = match c.head {
        HeadSpec::Pool => d + d + 1,
        HeadSpec::Transformer { dim, layers, heads, ff_dim } => {
            head_parameter_count(&head_config(d, dim, layers, heads, ff_dim))
        }
    };
    conv + proj + enc + head
}

fn encoder_count(layers: usize, d: usize, ff: usize) -> usize {
    let layer = 4 * d + 4 * (d * d + d) + d * ff + ff + ff * d + d;
    layers * layer + 2 * d
}

pub fn head_parameter_count(c: &HeadConfig) -> usize {
    c.in_dim * c.dim + c.dim + encoder_count(c.layers, c.dim, c.ff_dim) + c.dim + c.dim + 1
}
