//! Logit-domain scale/shift transforms that turn a raw model logit into a MOS.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::degrade::sigmoid;
use crate::error::{Error, Result};

pub const MOS_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub scale: f32,
    pub shift: f32,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { scale: 1.0, shift: 0.0 };

    pub fn new(scale: f32, shift: f32) -> Self {
        Affine { scale, shift }
    }
}

impl Default for Affine {
    fn default() -> Self {
        Affine::IDENTITY
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BiasTransform {
    pub per_dataset: BTreeMap<String, Affine>,
    pub universal: Affine,
}

impl BiasTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    /// Per-dataset transform, falling back to the universal one.
    pub fn get(&self, dataset: Option<&str>) -> Affine {
        dataset
            .and_then(|d| self.per_dataset.get(d))
            .copied()
            .unwrap_or(self.universal)
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.per_dataset.values().chain(std::iter::once(&self.universal));
        for t in all {
            if !(t.scale > 0.0 && t.scale.is_finite() && t.shift.is_finite()) {
                return Err(Error::Invalid(format!(
                    "bias transform scale must be positive and finite, got {t:?}"
                )));
            }
        }
        Ok(())
    }

    /// Express transforms fitted against a universal-domain logit in terms of
    /// a model trained to output that universal logit directly.
    ///
    /// If `z_u = a_u·z + b_u` and labels follow `a_d·z + b_d`, then
    /// `a_d·z + b_d = (a_d/a_u)·z_u + (b_d − a_d·b_u/a_u)`.
    pub fn rebased_on_universal(&self) -> BiasTransform {
        let u = self.universal;
        let per_dataset = self
            .per_dataset
            .iter()
            .map(|(k, d)| {
                let scale = d.scale / u.scale;
                let shift = d.shift - d.scale * u.shift / u.scale;
                (k.clone(), Affine::new(scale, shift))
            })
            .collect();
        BiasTransform {
            per_dataset,
            universal: Affine::IDENTITY,
        }
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `1 + 4·σ(a·logit + b)`.
pub fn to_mos(logit: f64, t: Affine) -> f64 {
    1.0 + 4.0 * sigmoid(t.scale as f64 * logit + t.shift as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InverseLabel {
    /// Label in the teacher's universal logit domain.
    pub logit: f64,
    /// `1 + 4·σ(logit)`.
    pub target_mos: f64,
    pub clamped: bool,
}

/// Map a dataset-domain MOS into the universal logit domain.
///
/// Scores of exactly 1 or 5 have no finite logit and are moved to `1 + ε`
/// or `5 − ε`; the caller decides how loudly to report it via `clamped`.
pub fn inverse_to_logit(mos: f64, bias: &BiasTransform, dataset: Option<&str>) -> Result<InverseLabel> {
    if !mos.is_finite() || !(1.0..=5.0).contains(&mos) {
        return Err(Error::Invalid(format!("MOS {mos} outside [1, 5]")));
    }
    let clamped_mos = if mos == 1.0 {
        1.0 + MOS_EPS
    } else if mos == 5.0 {
        5.0 - MOS_EPS
    } else {
        mos
    };
    let clamped = clamped_mos != mos;
    let d = bias.get(dataset);
    let u = bias.universal;
    let z_d = logit((clamped_mos - 1.0) / 4.0);
    let z_u = u.scale as f64 * (z_d - d.shift as f64) / d.scale as f64 + u.shift as f64;
    Ok(InverseLabel {
        logit: z_u,
        target_mos: to_mos(z_u, Affine::IDENTITY),
        clamped,
    })
}

pub const GRID_A: usize = 33;
pub const GRID_B: usize = 49;

pub fn grid_scales() -> Vec<f64> {
    (0..GRID_A).map(|i| 2f64.powf(-2.0 + i as f64 / 8.0)).collect()
}

pub fn grid_shifts() -> Vec<f64> {
    (0..GRID_B).map(|j| -3.0 + j as f64 / 8.0).collect()
}

/// Grid search over `(a, b)` minimizing the MSE between rendered MOS and
/// labels, pooled over all clips. Ties go to the point closest to `(1, 0)`.
pub fn fit_universal_bias(samples: &[(f64, f64)]) -> Result<Affine> {
    if samples.is_empty() {
        return Err(Error::Invalid("universal bias fit needs validation clips".into()));
    }
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for a in grid_scales() {
        for b in grid_shifts() {
            let t = Affine::new(a as f32, b as f32);
            let mse = samples
                .iter()
                .map(|&(z, y)| (to_mos(z, t) - y).powi(2))
                .sum::<f64>()
                / samples.len() as f64;
            let dist = a.ln().abs() + b.abs();
            let better = match best {
                None => true,
                Some((_, _, m, d)) => mse < m || (mse == m && dist < d),
            };
            if better {
                best = Some((a, b, mse, dist));
            }
        }
    }
    let (a, b, mse, _) = best.expect("grid is non-empty");
    if !mse.is_finite() {
        warn!("universal bias fit produced non-finite error");
    }
    Ok(Affine::new(a as f32, b as f32))
}

/// Weighted MSE at the identity transform, for comparison with the fit.
pub fn mse_at(samples: &[(f64, f64)], t: Affine) -> f64 {
    samples
        .iter()
        .map(|&(z, y)| (to_mos(z, t) - y).powi(2))
        .sum::<f64>()
        / samples.len().max(1) as f64
}
