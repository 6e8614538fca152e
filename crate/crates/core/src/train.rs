//! Labeled-only training, distillation from a teacher, and the shared
//! batch/loss machinery.

use std::collections::BTreeMap;
use std::path::Path;

use log::{info, warn};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::bias::{fit_universal_bias, inverse_to_logit, logit, to_mos, Affine, BiasTransform};
use crate::corpus::{mix_seed, write_lines, Clip, Dataset};
use crate::degrade::oracle_mos;
use crate::error::{Error, Result};
use crate::model::QualityModel;
use crate::optim::{AdamWConfig, AdamWState};
use crate::tensor::{ParamSet, Tensor};

pub const DEFAULT_SAMPLING_CAP: usize = 7000;
const MIN_BIAS_SCALE: f32 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    LabeledOnly,
    Distill,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub total_steps: usize,
    pub validate_every: usize,
    /// Probability that a distillation item carries a ground-truth label.
    pub mix_in_p: f64,
    pub sampling_cap: usize,
    /// Largest tolerated share of unlabeled clips the teacher fails on.
    pub max_skip_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn labeled() -> Self {
        TrainConfig {
            mode: TrainMode::LabeledOnly,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            batch_size: 20,
            total_steps: 72_000,
            validate_every: 1000,
            mix_in_p: 0.0,
            sampling_cap: DEFAULT_SAMPLING_CAP,
            max_skip_rate: 0.01,
            seed: 0,
        }
    }

    pub fn distill() -> Self {
        TrainConfig {
            mode: TrainMode::Distill,
            learning_rate: 2e-5,
            total_steps: 250_000,
            validate_every: 5000,
            mix_in_p: 0.2,
            ..Self::labeled()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.validate_every == 0 {
            return bad("validate_every must be positive");
        }
        if !(0.0..=1.0).contains(&self.mix_in_p) {
            return bad("mix_in_p must lie in [0, 1]");
        }
        if self.sampling_cap == 0 {
            return bad("sampling_cap must be positive");
        }
        if !(0.0..=1.0).contains(&self.max_skip_rate) {
            return bad("max_skip_rate must lie in [0, 1]");
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// Address of one clip inside a list of datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ClipRef {
    pub dataset: usize,
    pub clip: usize,
}

/// Dataset selection probabilities: proportional to `min(size, cap)`.
pub fn dataset_weights(sizes: &[usize], cap: usize) -> Result<Vec<f64>> {
    let w: Vec<f64> = sizes.iter().map(|&n| n.min(cap) as f64).collect();
    let total: f64 = w.iter().sum();
    if total == 0.0 {
        return Err(Error::Invalid("no training clips: every dataset is empty".into()));
    }
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// Draw `n` clips: a dataset with probability ∝ `min(|d|, cap)`, then a
/// uniform clip inside it.
pub fn sample_batch<R: Rng + ?Sized>(sizes: &[usize], cap: usize, n: usize, rng: &mut R) -> Result<Vec<ClipRef>> {
    let weights = dataset_weights(sizes, cap)?;
    let pick = WeightedIndex::new(&weights).map_err(|e| Error::Invalid(e.to_string()))?;
    Ok((0..n)
        .map(|_| {
            let dataset = pick.sample(rng);
            ClipRef {
                dataset,
                clip: rng.random_range(0..sizes[dataset]),
            }
        })
        .collect())
}

fn sizes(sets: &[Dataset]) -> Vec<usize> {
    sets.iter().map(Dataset::len).collect()
}

/// For each of `n` distillation items, whether it takes a ground-truth
/// label (`true`) or a teacher pseudo-label.
pub fn draw_sources<R: Rng + ?Sized>(rng: &mut R, p: f64, n: usize) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(p)).collect()
}

/// How a batch item's logit becomes a MOS.
#[derive(Clone, Copy, Debug)]
pub enum Render<'b> {
    Fixed(Affine),
    Learned { scale: &'b str, shift: &'b str },
}

#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub clip: &'a Clip,
    pub target: f64,
    pub render: Render<'a>,
}

/// Mean squared error between rendered MOS and targets over a batch.
pub fn mse_loss<'a>(
    tape: &mut Tape<'a>,
    model: &'a QualityModel,
    bias: Option<&'a ParamSet>,
    batch: &[Example<'a>],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut total: Option<Var> = None;
    for ex in batch {
        let z = model.forward(tape, &ex.clip.features)?;
        let z = match ex.render {
            Render::Fixed(t) => {
                let z = tape.scale(z, t.scale)?;
                tape.add_scalar(z, t.shift)?
            }
            Render::Learned { scale, shift } => {
                let set = bias.ok_or_else(|| Error::Invalid("learned bias without parameters".into()))?;
                let a = tape.param(set, set.id(scale)?);
                let b = tape.param(set, set.id(shift)?);
                let z = tape.mul(z, a)?;
                tape.add(z, b)?
            }
        };
        let s = tape.sigmoid(z)?;
        let mos = tape.scale(s, 4.0)?;
        let d = tape.add_scalar(mos, 1.0 - ex.target as f32)?;
        let sq = tape.mul(d, d)?;
        total = Some(match total {
            None => sq,
            Some(t) => tape.add(t, sq)?,
        });
    }
    tape.scale(total.expect("non-empty"), 1.0 / batch.len() as f32)
}

/// One forward/backward pass. Returns the loss and the gradients.
pub fn loss_and_grads(model: &QualityModel, bias: Option<&ParamSet>, batch: &[Example<'_>]) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let loss = mse_loss(&mut tape, model, bias, batch)?;
    let value = tape.scalar(loss) as f64;
    let grads = tape.backward(loss)?;
    Ok((value, grads))
}

fn batch_ids(batch: &[Example<'_>]) -> String {
    batch.iter().map(|e| e.clip.id.as_str()).collect::<Vec<_>>().join(", ")
}

/// Re-tag numerical failures with the step and the clips involved.
fn at_step(step: usize, batch: &[Example<'_>], e: Error) -> Error {
    if e.is_numerical() {
        Error::Training {
            step,
            message: format!("{e}; batch [{}]", batch_ids(batch)),
        }
    } else {
        e
    }
}

/// One validation/training record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    /// Mean training loss since the previous record.
    pub train_mse: f64,
    pub val_mse_weighted: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: QualityModel,
    pub history: Vec<HistoryRow>,
    /// Training loss at every step.
    pub step_losses: Vec<f64>,
    pub best_step: Option<usize>,
    pub best_val_mse: Option<f64>,
}

pub const HISTORY_HEADER: &str = "step,train_mse,val_mse_weighted";

pub fn history_csv(rows: &[HistoryRow]) -> Vec<String> {
    let mut out = vec![HISTORY_HEADER.to_string()];
    out.extend(
        rows.iter()
            .map(|r| format!("{},{:.8},{:.8}", r.step, r.train_mse, r.val_mse_weighted)),
    );
    out
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    write_lines(path, &history_csv(rows))
}

/// How per-dataset validation errors are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Pooled over clips, so larger datasets weigh more.
    Clips,
    /// Plain mean of per-dataset errors.
    Datasets,
}

/// Validation MSE of rendered per-dataset MOS against labels.
pub fn validation_mse(model: &QualityModel, val: &[Dataset], weighting: Weighting) -> Result<f64> {
    let mut per: Vec<(usize, f64)> = Vec::new();
    for d in val {
        let mut sum = 0.0;
        let mut n = 0;
        for c in &d.clips {
            let Some(y) = c.mos else { continue };
            let pred = model.mos(&c.features, Some(&d.id))?;
            sum += (pred - y).powi(2);
            n += 1;
        }
        if n > 0 {
            per.push((n, sum));
        }
    }
    if per.is_empty() {
        return Err(Error::Invalid("no labeled validation clips".into()));
    }
    Ok(match weighting {
        Weighting::Clips => {
            per.iter().map(|p| p.1).sum::<f64>() / per.iter().map(|p| p.0).sum::<usize>() as f64
        }
        Weighting::Datasets => per.iter().map(|&(n, s)| s / n as f64).sum::<f64>() / per.len() as f64,
    })
}

pub(crate) fn scale_name(ds: &str) -> String {
    format!("bias.{ds}.scale")
}

pub(crate) fn shift_name(ds: &str) -> String {
    format!("bias.{ds}.shift")
}

/// Learnable per-dataset scale/shift pairs, seeded from `start`.
pub fn bias_params<'d>(ids: impl IntoIterator<Item = &'d str>, start: &BiasTransform) -> Result<ParamSet> {
    let mut set = ParamSet::new();
    for id in ids {
        if set.id(&scale_name(id)).is_ok() {
            continue;
        }
        let t = start.get(Some(id));
        set.insert_with(scale_name(id), Tensor::scalar(t.scale), false)?;
        set.insert_with(shift_name(id), Tensor::scalar(t.shift), false)?;
    }
    Ok(set)
}

fn read_bias(set: &ParamSet, ids: &[String], universal: Affine) -> Result<BiasTransform> {
    let mut bias = BiasTransform {
        universal,
        ..Default::default()
    };
    for id in ids {
        let a = set.by_name(&scale_name(id))?.tensor.data()[0];
        let b = set.by_name(&shift_name(id))?.tensor.data()[0];
        bias.per_dataset.insert(id.clone(), Affine::new(a, b));
    }
    Ok(bias)
}

/// Fit the universal transform of `model` on labeled validation clips.
pub fn fit_model_universal_bias(model: &QualityModel, val: &[Dataset]) -> Result<Affine> {
    let mut samples = Vec::new();
    for d in val {
        for c in &d.clips {
            if let Some(y) = c.mos {
                samples.push((model.logit(&c.features)? as f64, y));
            }
        }
    }
    fit_universal_bias(&samples)
}

struct Best {
    step: usize,
    val: f64,
    model: QualityModel,
}

fn track_best(best: &mut Option<Best>, step: usize, val: f64, model: &QualityModel) {
    if best.as_ref().is_none_or(|b| val < b.val) {
        *best = Some(Best {
            step,
            val,
            model: model.clone(),
        });
    }
}

fn is_checkpoint_step(step: usize, cfg: &TrainConfig) -> bool {
    step % cfg.validate_every == 0 || step == cfg.total_steps
}

/// Supervised training on labeled datasets with learnable per-dataset
/// bias transforms; returns the checkpoint with the lowest clip-weighted
/// validation MSE.
pub fn train_labeled(model: QualityModel, train: &[Dataset], val: &[Dataset], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.mode != TrainMode::LabeledOnly {
        return Err(Error::Config("train_labeled needs mode = labeled_only".into()));
    }
    if cfg.total_steps == 0 {
        return Ok(TrainOutcome {
            model,
            history: Vec::new(),
            step_losses: Vec::new(),
            best_step: None,
            best_val_mse: None,
        });
    }
    for d in train {
        if d.clips.iter().any(|c| c.mos.is_none()) {
            return Err(Error::Invalid(format!("dataset `{}` has unlabeled clips", d.id)));
        }
    }
    let mut model = model;
    let ids: Vec<String> = {
        let mut v: Vec<String> = train.iter().chain(val).map(|d| d.id.clone()).collect();
        v.sort();
        v.dedup();
        v
    };
    let mut bias_set = bias_params(ids.iter().map(String::as_str), &model.bias)?;
    let mut opt = AdamWState::new(cfg.adamw(), &model.params);
    let mut bias_opt = AdamWState::new(
        AdamWConfig {
            weight_decay: 0.0,
            ..cfg.adamw()
        },
        &bias_set,
    );
    let names: Vec<(String, String)> = train.iter().map(|d| (scale_name(&d.id), shift_name(&d.id))).collect();
    let sz = sizes(train);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = TrainOutcome {
        model: model.clone(),
        history: Vec::new(),
        step_losses: Vec::with_capacity(cfg.total_steps),
        best_step: None,
        best_val_mse: None,
    };
    let mut best: Option<Best> = None;
    let mut since = Vec::new();

    for step in 1..=cfg.total_steps {
        let refs = sample_batch(&sz, cfg.sampling_cap, cfg.batch_size, &mut rng)?;
        let batch: Vec<Example<'_>> = refs
            .iter()
            .map(|r| {
                let clip = &train[r.dataset].clips[r.clip];
                let (scale, shift) = &names[r.dataset];
                Example {
                    clip,
                    target: clip.mos.expect("checked above"),
                    render: Render::Learned { scale, shift },
                }
            })
            .collect();
        let (loss, grads) = loss_and_grads(&model, Some(&bias_set), &batch).map_err(|e| at_step(step, &batch, e))?;
        if !loss.is_finite() {
            return Err(at_step(step, &batch, Error::NonFinite { op: "loss".into() }));
        }
        opt.step(&mut model.params, &grads).map_err(|e| at_step(step, &batch, e))?;
        bias_opt.step(&mut bias_set, &grads).map_err(|e| at_step(step, &batch, e))?;
        for (_, p) in bias_set.iter_mut() {
            if p.name.ends_with(".scale") {
                let v = &mut p.tensor.data_mut()[0];
                *v = v.max(MIN_BIAS_SCALE);
            }
        }
        out.step_losses.push(loss);
        since.push(loss);

        if is_checkpoint_step(step, cfg) {
            model.bias = read_bias(&bias_set, &ids, model.bias.universal)?;
            let val_mse = if val.is_empty() {
                f64::NAN
            } else {
                validation_mse(&model, val, Weighting::Clips)?
            };
            let train_mse = since.iter().sum::<f64>() / since.len() as f64;
            since.clear();
            info!("train step {step}: train_mse {train_mse:.5} val_mse {val_mse:.5}");
            out.history.push(HistoryRow {
                step,
                train_mse,
                val_mse_weighted: val_mse,
            });
            if val.is_empty() {
                best = Some(Best {
                    step,
                    val: val_mse,
                    model: model.clone(),
                });
            } else {
                track_best(&mut best, step, val_mse, &model);
            }
        }
    }
    let best = best.expect("at least one validation");
    out.model = best.model;
    if !val.is_empty() {
        out.model.bias.universal = fit_model_universal_bias(&out.model, val)?;
        out.best_val_mse = Some(best.val);
    }
    out.best_step = Some(best.step);
    Ok(out)
}

#[derive(Clone, Debug)]
pub enum TeacherBackend {
    /// Analytic oracle read from the clip's degradation sidecar, plus
    /// seeded Gaussian rater noise.
    Oracle { noise_std: f64, seed: u64 },
    Model(Box<QualityModel>),
}

/// A scoring function clip → MOS on the teacher's universal scale, with
/// the teacher's bias transforms.
#[derive(Clone, Debug)]
pub struct TeacherHandle {
    pub backend: TeacherBackend,
    pub bias: BiasTransform,
}

impl TeacherHandle {
    pub fn oracle(noise_std: f64, seed: u64, bias: BiasTransform) -> Result<Self> {
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(Error::Config("teacher noise_std must be >= 0".into()));
        }
        Ok(TeacherHandle {
            backend: TeacherBackend::Oracle { noise_std, seed },
            bias,
        })
    }

    pub fn model(model: QualityModel) -> Self {
        let bias = model.bias.clone();
        TeacherHandle {
            backend: TeacherBackend::Model(Box::new(model)),
            bias,
        }
    }

    /// Universal-scale MOS for one clip.
    pub fn score(&self, clip: &Clip) -> Result<f64> {
        teacher_score(self, clip)
    }

    /// MOS rendered through the teacher's transform for `dataset`.
    pub fn score_for(&self, clip: &Clip, dataset: Option<&str>) -> Result<f64> {
        let m = self.score(clip)?;
        match &self.backend {
            TeacherBackend::Model(model) => model.mos(&clip.features, dataset),
            TeacherBackend::Oracle { .. } => {
                let p = ((m - 1.0) / 4.0).clamp(1e-9, 1.0 - 1e-9);
                let z_u = logit(p);
                let u = self.bias.universal;
                let d = self.bias.get(dataset);
                // Undo the universal map, then apply the dataset one.
                let z = (z_u - u.shift as f64) / u.scale as f64;
                Ok(to_mos(z, d))
            }
        }
    }
}

pub fn teacher_score(teacher: &TeacherHandle, clip: &Clip) -> Result<f64> {
    match &teacher.backend {
        TeacherBackend::Oracle { noise_std, seed } => {
            let spec = clip
                .spec
                .as_ref()
                .ok_or_else(|| Error::Teacher(format!("{}: no degradation sidecar", clip.id)))?;
            let mos = oracle_mos(spec).mos;
            if *noise_std == 0.0 {
                return Ok(mos);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(*seed, spec.seed));
            let noise = Normal::new(0.0, *noise_std).map_err(|e| Error::Teacher(e.to_string()))?;
            Ok((mos + noise.sample(&mut rng)).clamp(1.0, 5.0))
        }
        TeacherBackend::Model(model) => {
            let z = model.logit(&clip.features)? as f64;
            Ok(to_mos(z, model.bias.universal))
        }
    }
}

/// Teacher targets for every unlabeled clip; failures are skipped.
pub fn pseudo_labels(teacher: &TeacherHandle, unlabeled: &[Dataset], max_skip_rate: f64) -> Result<Vec<Dataset>> {
    let total: usize = unlabeled.iter().map(Dataset::len).sum();
    let mut skipped = 0;
    let mut out = Vec::new();
    for d in unlabeled {
        let mut clips = Vec::with_capacity(d.len());
        for c in &d.clips {
            match teacher.score(c) {
                Ok(m) => {
                    let mut c = c.clone();
                    c.mos = Some(m);
                    clips.push(c);
                }
                Err(e) => {
                    warn!("teacher skipped {}: {e}", c.id);
                    skipped += 1;
                }
            }
        }
        out.push(Dataset {
            id: d.id.clone(),
            clips,
        });
    }
    if total > 0 && skipped as f64 > max_skip_rate * total as f64 {
        return Err(Error::Teacher(format!(
            "teacher failed on {skipped} of {total} clips (limit {:.1}%)",
            100.0 * max_skip_rate
        )));
    }
    Ok(out)
}

/// Labeled targets mapped into the teacher's universal MOS scale.
pub fn universal_targets(labeled: &[Dataset], bias: &BiasTransform) -> Result<Vec<Dataset>> {
    let mut clamped = 0;
    let mut out = Vec::new();
    for d in labeled {
        let mut clips = Vec::new();
        for c in &d.clips {
            let Some(m) = c.mos else { continue };
            let inv = inverse_to_logit(m, bias, Some(&d.id))?;
            clamped += inv.clamped as usize;
            let mut c = c.clone();
            c.mos = Some(inv.target_mos);
            clips.push(c);
        }
        out.push(Dataset {
            id: d.id.clone(),
            clips,
        });
    }
    if clamped > 0 {
        warn!("{clamped} boundary labels clamped before inversion");
    }
    Ok(out)
}

/// Train a student on teacher pseudo-labels with a share `p` of
/// ground-truth labels mixed in.
///
/// The student learns the teacher's universal scale directly, so its
/// per-dataset transforms are the teacher's rebased onto that scale.
pub fn distill(
    student: QualityModel,
    teacher: &TeacherHandle,
    unlabeled: &[Dataset],
    labeled: &[Dataset],
    val: &[Dataset],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.mode != TrainMode::Distill {
        return Err(Error::Config("distill needs mode = distill".into()));
    }
    let mut model = student;
    model.bias = teacher.bias.rebased_on_universal();
    if cfg.total_steps == 0 {
        return Ok(TrainOutcome {
            model,
            history: Vec::new(),
            step_losses: Vec::new(),
            best_step: None,
            best_val_mse: None,
        });
    }
    let pseudo = if cfg.mix_in_p < 1.0 {
        pseudo_labels(teacher, unlabeled, cfg.max_skip_rate)?
    } else {
        Vec::new()
    };
    let gold = if cfg.mix_in_p > 0.0 {
        universal_targets(labeled, &teacher.bias)?
    } else {
        Vec::new()
    };
    let (psz, gsz) = (sizes(&pseudo), sizes(&gold));
    if cfg.mix_in_p < 1.0 && psz.iter().sum::<usize>() == 0 {
        return Err(Error::Invalid("distillation needs unlabeled clips".into()));
    }
    if cfg.mix_in_p > 0.0 && gsz.iter().sum::<usize>() == 0 {
        return Err(Error::Invalid("mix-in needs labeled clips".into()));
    }

    let mut opt = AdamWState::new(cfg.adamw(), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = TrainOutcome {
        model: model.clone(),
        history: Vec::new(),
        step_losses: Vec::with_capacity(cfg.total_steps),
        best_step: None,
        best_val_mse: None,
    };
    let mut best: Option<Best> = None;
    let mut since = Vec::new();
    let mut labeled_items = 0usize;

    for step in 1..=cfg.total_steps {
        let sources = draw_sources(&mut rng, cfg.mix_in_p, cfg.batch_size);
        let n_gold = sources.iter().filter(|&&s| s).count();
        labeled_items += n_gold;
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for r in sample_batch(&gsz, cfg.sampling_cap, n_gold, &mut rng).unwrap_or_default() {
            batch.push(&gold[r.dataset].clips[r.clip]);
        }
        if n_gold < cfg.batch_size {
            for r in sample_batch(&psz, cfg.sampling_cap, cfg.batch_size - n_gold, &mut rng)? {
                batch.push(&pseudo[r.dataset].clips[r.clip]);
            }
        }
        let batch: Vec<Example<'_>> = batch
            .into_iter()
            .map(|clip| Example {
                clip,
                target: clip.mos.expect("targets assigned"),
                render: Render::Fixed(Affine::IDENTITY),
            })
            .collect();
        let (loss, grads) = loss_and_grads(&model, None, &batch).map_err(|e| at_step(step, &batch, e))?;
        opt.step(&mut model.params, &grads).map_err(|e| at_step(step, &batch, e))?;
        out.step_losses.push(loss);
        since.push(loss);

        if is_checkpoint_step(step, cfg) {
            let val_mse = if val.is_empty() {
                f64::NAN
            } else {
                validation_mse(&model, val, Weighting::Clips)?
            };
            let train_mse = since.iter().sum::<f64>() / since.len() as f64;
            since.clear();
            info!("distill step {step}: train_mse {train_mse:.5} val_mse {val_mse:.5}");
            out.history.push(HistoryRow {
                step,
                train_mse,
                val_mse_weighted: val_mse,
            });
            if val.is_empty() {
                best = Some(Best {
                    step,
                    val: val_mse,
                    model: model.clone(),
                });
            } else {
                track_best(&mut best, step, val_mse, &model);
            }
        }
    }
    info!(
        "distill: {:.3} of items carried ground-truth labels",
        labeled_items as f64 / (cfg.total_steps * cfg.batch_size) as f64
    );
    let best = best.expect("at least one validation");
    out.model = best.model;
    out.best_step = Some(best.step);
    out.best_val_mse = (!val.is_empty()).then_some(best.val);
    Ok(out)
}

/// Per-dataset counts of clips, keyed by id.
pub fn clip_counts(sets: &[Dataset]) -> BTreeMap<String, usize> {
    sets.iter().map(|d| (d.id.clone(), d.len())).collect()
}
