//! Iterative pruning: first-order Taylor importance with global ranking,
//! the per-matrix magnitude baseline, and the fine-tune/prune schedule.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Tape};
use crate::checkpoint;
use crate::config::{PruneMethod, PruneSection};
use crate::corpus::{write_lines, Dataset};
use crate::error::{Error, Result};
use crate::model::{QualityModel, HEAD_PREFIX};
use crate::optim::{AdamWConfig, AdamWState};
use crate::tensor::ParamSet;
use crate::train::{loss_and_grads, mse_loss, sample_batch, validation_mse, Example, Render, Weighting};

/// Per-weight scores keyed by matrix name.
pub type Importance = BTreeMap<String, Vec<f64>>;

#[derive(Clone, Debug, PartialEq)]
pub struct PruneState {
    /// Matrix names in lexicographic order.
    pub prunable: Vec<String>,
    /// Smoothed importance; empty until the first update.
    pub scores: Importance,
    pub smoothing: f64,
    pub step_rate: f64,
    pub steps_taken: usize,
    initial_units: BTreeMap<String, usize>,
}

/// Weights per magnitude-pruning unit: a whole kernel for conv weights.
fn unit_len(shape: &[usize]) -> usize {
    if shape.len() == 4 {
        shape[2] * shape[3]
    } else {
        1
    }
}

impl PruneState {
    pub fn new(params: &ParamSet, prunable: impl IntoIterator<Item = String>, step_rate: f64, smoothing: f64) -> Result<Self> {
        let mut names: Vec<String> = prunable.into_iter().collect();
        names.sort();
        names.dedup();
        let mut initial_units = BTreeMap::new();
        for n in &names {
            if n.starts_with(HEAD_PREFIX) {
                return Err(Error::Invalid(format!("`{n}` belongs to the MOS head and cannot be pruned")));
            }
            let p = params.by_name(n)?;
            initial_units.insert(n.clone(), p.tensor.numel() / unit_len(p.tensor.shape()));
        }
        Ok(PruneState {
            prunable: names,
            scores: Importance::new(),
            smoothing,
            step_rate,
            steps_taken: 0,
            initial_units,
        })
    }

    /// State over every backbone matrix of `model`.
    pub fn for_model(model: &QualityModel, step_rate: f64, smoothing: f64) -> Result<Self> {
        let names = model.prunable().into_iter().map(|id| model.params.get(id).name.clone());
        Self::new(&model.params, names, step_rate, smoothing)
    }

    pub fn total(&self, params: &ParamSet) -> usize {
        self.prunable
            .iter()
            .map(|n| params.by_name(n).map_or(0, |p| p.tensor.numel()))
            .sum()
    }

    pub fn unmasked(&self, params: &ParamSet) -> usize {
        self.prunable
            .iter()
            .map(|n| params.by_name(n).map_or(0, |p| p.nonzero_count()))
            .sum()
    }
}

fn ensure_masks(params: &mut ParamSet, state: &PruneState) -> Result<()> {
    for n in &state.prunable {
        let p = params.by_name_mut(n)?;
        if p.mask.is_none() {
            p.mask = Some(vec![true; p.tensor.numel()]);
        }
    }
    Ok(())
}

/// `(∂L/∂w · w)²` for every prunable weight; masked weights score 0.
pub fn taylor_from_grads(params: &ParamSet, grads: &Gradients, names: &[String]) -> Result<Importance> {
    let mut out = Importance::new();
    for n in names {
        let id = params.id(n)?;
        let p = params.get(id);
        let g = grads.param(params, id).ok_or_else(|| Error::MissingGrad { name: n.clone() })?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGrad { name: n.clone() });
        }
        let w = p.tensor.data();
        let scores = (0..w.len())
            .map(|i| {
                if p.mask.as_ref().is_some_and(|m| !m[i]) {
                    0.0
                } else {
                    (g[i] as f64 * w[i] as f64).powi(2)
                }
            })
            .collect();
        out.insert(n.clone(), scores);
    }
    Ok(out)
}

/// One backward pass of the batch MSE, scored per prunable weight.
pub fn taylor_importance(model: &QualityModel, state: &PruneState, batch: &[Example<'_>]) -> Result<Importance> {
    let (_, grads) = loss_and_grads(model, None, batch)?;
    taylor_from_grads(&model.params, &grads, &state.prunable)
}

/// `(L − L_{w=0})²` by brute force, for any loss over a parameter set.
pub fn exact_importance_by<F>(set: &mut ParamSet, name: &str, index: usize, mut loss: F) -> Result<f64>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let original = {
        let p = set.by_name(name)?;
        *p.tensor
            .data()
            .get(index)
            .ok_or_else(|| Error::Invalid(format!("`{name}` has no index {index}")))?
    };
    if original == 0.0 {
        return Ok(0.0);
    }
    let l = loss(set)?;
    set.by_name_mut(name)?.tensor.data_mut()[index] = 0.0;
    let l0 = loss(set);
    set.by_name_mut(name)?.tensor.data_mut()[index] = original;
    Ok((l - l0?).powi(2))
}

/// Batch MSE evaluated without recording gradients, accumulated in f64.
pub fn batch_loss(model: &QualityModel, batch: &[Example<'_>]) -> Result<f64> {
    let mut total = 0.0;
    for ex in batch {
        let z = model.logit(&ex.clip.features)? as f64;
        let t = match ex.render {
            Render::Fixed(t) => t,
            Render::Learned { .. } => return Err(Error::Invalid("exact importance needs fixed transforms".into())),
        };
        total += (crate::bias::to_mos(z, t) - ex.target).powi(2);
    }
    Ok(total / batch.len() as f64)
}

pub fn exact_importance(model: &mut QualityModel, batch: &[Example<'_>], name: &str, index: usize) -> Result<f64> {
    let original = {
        let p = model.params.by_name(name)?;
        *p.tensor
            .data()
            .get(index)
            .ok_or_else(|| Error::Invalid(format!("`{name}` has no index {index}")))?
    };
    if original == 0.0 {
        return Ok(0.0);
    }
    let l = batch_loss(model, batch)?;
    model.params.by_name_mut(name)?.tensor.data_mut()[index] = 0.0;
    let l0 = batch_loss(model, batch);
    model.params.by_name_mut(name)?.tensor.data_mut()[index] = original;
    Ok((l - l0?).powi(2))
}

/// `Î ← s·Î + (1−s)·I`; the first update copies `I`.
pub fn update_scores(state: &mut PruneState, raw: &Importance) -> Result<()> {
    for n in &state.prunable {
        if !raw.contains_key(n) {
            return Err(Error::shape("update_scores", format!("no raw scores for `{n}`")));
        }
    }
    for (n, r) in raw {
        if !state.prunable.contains(n) {
            return Err(Error::shape("update_scores", format!("`{n}` is not prunable")));
        }
        if r.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::NonFinite { op: format!("importance of `{n}`") });
        }
        match state.scores.get_mut(n) {
            None => {
                state.scores.insert(n.clone(), r.clone());
            }
            Some(s) if s.len() != r.len() => {
                return Err(Error::shape(
                    "update_scores",
                    format!("`{n}`: {} raw scores for {} weights", r.len(), s.len()),
                ));
            }
            Some(s) => {
                let a = state.smoothing;
                for (si, ri) in s.iter_mut().zip(r) {
                    *si = a * *si + (1.0 - a) * ri;
                }
            }
        }
    }
    Ok(())
}

/// Mask the `ceil(rate · unmasked)` lowest-scoring unmasked weights across
/// all prunable matrices. Ties go to the smaller (name, index).
pub fn prune_step(params: &mut ParamSet, state: &mut PruneState) -> Result<usize> {
    ensure_masks(params, state)?;
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    for (ni, n) in state.prunable.iter().enumerate() {
        let p = params.by_name(n)?;
        let scores = state.scores.get(n);
        if let Some(s) = scores {
            if s.len() != p.tensor.numel() {
                return Err(Error::shape("prune_step", format!("`{n}`: scores do not match weights")));
            }
        }
        let mask = p.mask.as_ref().expect("ensured");
        for (i, keep) in mask.iter().enumerate() {
            if *keep {
                cand.push((scores.map_or(0.0, |s| s[i]), ni, i));
            }
        }
    }
    if cand.is_empty() {
        return Err(Error::NothingToPrune);
    }
    let k = ((state.step_rate * cand.len() as f64).ceil() as usize).clamp(1, cand.len());
    let order = |a: &(f64, usize, usize), b: &(f64, usize, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2));
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, order);
    }
    for &(_, ni, i) in &cand[..k] {
        let p = params.by_name_mut(&state.prunable[ni])?;
        p.mask.as_mut().expect("ensured")[i] = false;
    }
    for n in &state.prunable {
        params.by_name_mut(n)?.apply_mask();
    }
    state.steps_taken += 1;
    Ok(k)
}

/// Per-matrix magnitude pruning. Each matrix keeps
/// `round(N₀ · (1 − rate)^s)` units after step `s`, where a unit is a
/// single weight, or a whole kernel (ranked by L1 norm) for conv layers.
pub fn magnitude_prune_step(params: &mut ParamSet, state: &mut PruneState) -> Result<usize> {
    ensure_masks(params, state)?;
    let step = state.steps_taken + 1;
    let keep_frac = (1.0 - state.step_rate).powi(step as i32);
    let mut masked = 0;
    let mut excess: Vec<(usize, usize)> = Vec::new();
    let mut live_total = 0;
    for (ni, n) in state.prunable.iter().enumerate() {
        let p = params.by_name_mut(n)?;
        let u = unit_len(p.tensor.shape());
        let w = p.tensor.data().to_vec();
        let mask = p.mask.as_mut().expect("ensured");
        let mut live: Vec<(f64, usize)> = (0..w.len() / u)
            .filter(|&k| mask[k * u..(k + 1) * u].iter().any(|&m| m))
            .map(|k| (w[k * u..(k + 1) * u].iter().map(|v| v.abs() as f64).sum(), k))
            .collect();
        live_total += live.len();
        let target = (state.initial_units[n] as f64 * keep_frac).round() as usize;
        let drop = live.len().saturating_sub(target);
        if drop == 0 {
            excess.push((live.len(), ni));
            continue;
        }
        live.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, k) in &live[..drop] {
            mask[k * u..(k + 1) * u].iter_mut().for_each(|m| *m = false);
            masked += u;
        }
        p.apply_mask();
    }
    if live_total == 0 {
        return Err(Error::NothingToPrune);
    }
    if masked == 0 {
        // Rounding held every matrix in place; take one unit from the
        // largest matrix so the step still makes progress.
        let &(_, ni) = excess.iter().max_by_key(|e| (e.0, std::cmp::Reverse(e.1))).expect("some live matrix");
        let p = params.by_name_mut(&state.prunable[ni])?;
        let u = unit_len(p.tensor.shape());
        let w = p.tensor.data().to_vec();
        let mask = p.mask.as_mut().expect("ensured");
        let k = (0..w.len() / u)
            .filter(|&k| mask[k * u..(k + 1) * u].iter().any(|&m| m))
            .min_by(|&a, &b| {
                let l1 = |k: usize| w[k * u..(k + 1) * u].iter().map(|v| v.abs() as f64).sum::<f64>();
                l1(a).total_cmp(&l1(b)).then(a.cmp(&b))
            })
            .expect("live unit");
        mask[k * u..(k + 1) * u].iter_mut().for_each(|m| *m = false);
        p.apply_mask();
        masked = u;
    }
    state.steps_taken = step;
    Ok(masked)
}

/// Labeled data for fine-tuning and validation during pruning.
#[derive(Clone, Copy, Debug)]
pub struct PruneData<'a> {
    pub train: &'a [Dataset],
    pub val: &'a [Dataset],
    /// Targets are on the universal scale (teacher pseudo-labels) rather
    /// than each dataset's own.
    pub universal_targets: bool,
}

#[derive(Clone, Debug)]
pub struct TrajectoryPoint {
    pub target: f64,
    pub model: QualityModel,
    pub effective_params: f64,
    pub remaining_fraction: f64,
    pub val_mse: f64,
    pub prune_steps: usize,
    pub path: Option<PathBuf>,
}

pub const TRAJECTORY_HEADER: &str = "checkpoint_path,effective_params,remaining_fraction,val_mse";

pub fn trajectory_csv(points: &[TrajectoryPoint]) -> Vec<String> {
    let mut out = vec![TRAJECTORY_HEADER.to_string()];
    for p in points {
        let path = p.path.as_ref().map(|p| p.to_string_lossy().into_owned()).unwrap_or_default();
        out.push(format!(
            "{path},{:.1},{:.6},{:.8}",
            p.effective_params, p.remaining_fraction, p.val_mse
        ));
    }
    out
}

pub fn write_trajectory(path: &Path, points: &[TrajectoryPoint]) -> Result<()> {
    write_lines(path, &trajectory_csv(points))
}

/// Alternate fine-tuning and pruning until the smallest scheduled
/// remaining fraction of effective size is reached. A checkpoint is kept
/// (after its fine-tuning window) the first time each fraction is crossed.
///
/// With `out_dir`, checkpoints are written as
/// `{method}_{percent:03}.sqac` and paths in the trajectory are relative
/// to that directory.
pub fn run_prune_schedule(
    model: QualityModel,
    data: PruneData<'_>,
    state: &mut PruneState,
    method: PruneMethod,
    cfg: &PruneSection,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<Vec<TrajectoryPoint>> {
    cfg.validate()?;
    let mut model = model;
    let mut targets = cfg.schedule.clone();
    targets.sort_by(|a, b| b.total_cmp(a));
    targets.dedup();
    let dense = model.count_parameters(false);
    let sizes: Vec<usize> = data.train.iter().map(Dataset::len).collect();
    let renders: Vec<_> = data
        .train
        .iter()
        .map(|d| {
            let t = if data.universal_targets {
                model.bias.universal
            } else {
                model.bias.get(Some(&d.id))
            };
            Render::Fixed(t)
        })
        .collect();
    let mut opt = AdamWState::new(
        AdamWConfig {
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        &model.params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    let mut next = 0;
    let mut ft_step = 0usize;

    loop {
        for _ in 0..cfg.fine_tune_steps {
            ft_step += 1;
            let refs = sample_batch(&sizes, cfg.sampling_cap, cfg.batch_size, &mut rng)?;
            let batch: Vec<Example<'_>> = refs
                .iter()
                .map(|r| {
                    let clip = &data.train[r.dataset].clips[r.clip];
                    Example {
                        clip,
                        target: clip.mos.unwrap_or(f64::NAN),
                        render: renders[r.dataset],
                    }
                })
                .collect();
            if batch.iter().any(|e| !e.target.is_finite()) {
                return Err(Error::Invalid("pruning data must carry targets".into()));
            }
            let mut tape = Tape::new();
            let loss = mse_loss(&mut tape, &model, None, &batch).map_err(|e| Error::Training {
                step: ft_step,
                message: format!("fine-tuning: {e}"),
            })?;
            let grads = tape.backward(loss)?;
            drop(tape);
            if method == PruneMethod::Taylor {
                let raw = taylor_from_grads(&model.params, &grads, &state.prunable)?;
                update_scores(state, &raw)?;
            }
            opt.step(&mut model.params, &grads)?;
        }
        let eff = model.count_parameters(true);
        let frac = eff / dense;
        while next < targets.len() && frac <= targets[next] {
            let val_mse = if data.val.is_empty() {
                f64::NAN
            } else {
                validation_mse(&model, data.val, Weighting::Clips)?
            };
            let path = match out_dir {
                Some(dir) => {
                    let name = format!("{}_{:03}.sqac", method.as_str(), (targets[next] * 100.0).round() as u32);
                    checkpoint::save(&model, &dir.join(&name))?;
                    Some(PathBuf::from(name))
                }
                None => None,
            };
            info!(
                "{} pruning: {:.3} of effective size after {} steps (target {}), val_mse {val_mse:.5}",
                method.as_str(),
                frac,
                state.steps_taken,
                targets[next]
            );
            points.push(TrajectoryPoint {
                target: targets[next],
                model: model.clone(),
                effective_params: eff,
                remaining_fraction: frac,
                val_mse,
                prune_steps: state.steps_taken,
                path,
            });
            next += 1;
        }
        if next == targets.len() {
            break;
        }
        let step = match method {
            PruneMethod::Taylor => prune_step(&mut model.params, state),
            PruneMethod::Magnitude => magnitude_prune_step(&mut model.params, state),
        };
        if let Err(Error::NothingToPrune) = step {
            warn!("nothing left to prune before reaching {}", targets[next]);
            break;
        }
        step?;
    }
    Ok(points)
}
