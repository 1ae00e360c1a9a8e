//! Analyses of task vectors: effective-rank, outlier and sparsity profiles,
//! and a Monte-Carlo check of the random-direction conflict bound.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{effective_rank, from_row_major, svd};
use crate::store::TensorSource;
use crate::task_vector::{layer_sparsity, outlier_weights, row_stats, threshold_mask, DeltaSet};

pub const DEFAULT_CONFLICT_EPSILON: f64 = 0.3;

/// `2.5 / sqrt(k)`.
pub fn conflict_bound(k: usize) -> f64 {
    2.5 / (k as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConflictEstimate {
    pub k: usize,
    pub epsilon_conflict: f64,
    pub trials: usize,
    /// Fraction of pairs with `uᵀv > epsilon_conflict`.
    pub p_hat: f64,
    pub p_se: f64,
    /// Mean of `|uᵀv|`.
    pub expected_abs_dot: f64,
    pub abs_se: f64,
    pub bound: f64,
    /// `expected_abs_dot ≤ bound + 3·abs_se`.
    pub abs_pass: bool,
    /// `p_hat ≤ bound + 3·p_se`.
    pub p_pass: bool,
}

impl ConflictEstimate {
    pub fn pass(&self) -> bool {
        self.abs_pass && self.p_pass
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return g.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Samples `trials` pairs of independent uniform unit vectors in `R^k`.
/// Trial `t` draws from its own ChaCha stream `t` under `seed`, and the
/// sums run in trial order, so the estimate is independent of scheduling.
pub fn conflict_mc(
    k: usize,
    epsilon_conflict: f64,
    trials: usize,
    seed: u64,
) -> Result<ConflictEstimate> {
    if k == 0 || trials == 0 {
        return Err(Error::InvalidArgument(format!(
            "k ({k}) and trials ({trials}) must be >= 1"
        )));
    }
    if !epsilon_conflict.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon_conflict} is not finite"
        )));
    }
    let dots: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t);
            let u = unit_vector(&mut rng, k);
            let v = unit_vector(&mut rng, k);
            u.iter().zip(&v).map(|(a, b)| a * b).sum()
        })
        .collect();

    let n = trials as f64;
    let hits = dots.iter().filter(|&&d| d > epsilon_conflict).count() as f64;
    let p_hat = hits / n;
    let p_se = (p_hat * (1.0 - p_hat) / n).sqrt();
    let expected_abs_dot = dots.iter().map(|d| d.abs()).sum::<f64>() / n;
    let var = if trials > 1 {
        dots.iter()
            .map(|d| (d.abs() - expected_abs_dot).powi(2))
            .sum::<f64>()
            / (n - 1.0)
    } else {
        0.0
    };
    let abs_se = (var / n).sqrt();
    let bound = conflict_bound(k);
    Ok(ConflictEstimate {
        k,
        epsilon_conflict,
        trials,
        p_hat,
        p_se,
        expected_abs_dot,
        abs_se,
        bound,
        abs_pass: expected_abs_dot <= bound + 3.0 * abs_se,
        p_pass: p_hat <= bound + 3.0 * p_se,
    })
}

/// Task vectors of every rank 0–2 tensor, vectors as single rows.
pub fn load_delta_sets(
    base: &dyn TensorSource,
    models: &[&dyn TensorSource],
) -> Result<BTreeMap<String, DeltaSet>> {
    let mut out = BTreeMap::new();
    for name in base.tensor_names() {
        let info = base
            .tensor_info(&name)
            .ok_or_else(|| Error::MissingTensor(name.clone()))?;
        let (rows, cols) = match info.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => continue,
        };
        let b = from_row_major(rows, cols, &base.load(&name)?.to_f64());
        let ms = models
            .iter()
            .map(|m| {
                let rec = m.load(&name)?;
                if rec.shape() != info.shape.as_slice() {
                    return Err(Error::ShapeMismatch(format!(
                        "`{name}`: {:?} vs {:?}",
                        info.shape,
                        rec.shape()
                    )));
                }
                Ok(from_row_major(rows, cols, &rec.to_f64()))
            })
            .collect::<Result<Vec<_>>>()?;
        out.insert(name.clone(), DeltaSet::extract(name, &b, &ms)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankProfile {
    /// Effective rank of the mean task matrix.
    pub mean: usize,
    pub per_model: Vec<usize>,
}

/// Effective rank, with an all-zero matrix counted as rank 0.
fn matrix_effective_rank(m: &DMatrix<f64>, energy: f64) -> Result<usize> {
    let s = svd(m)?.s;
    match effective_rank(&s, energy) {
        Err(Error::AllZeroSpectrum) => Ok(0),
        other => other,
    }
}

pub fn rank_profile(
    deltas_by_layer: &BTreeMap<String, DeltaSet>,
    energy: f64,
) -> Result<BTreeMap<String, RankProfile>> {
    if !(energy > 0.0 && energy <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "energy {energy} outside (0, 1]"
        )));
    }
    deltas_by_layer
        .iter()
        .map(|(name, set)| {
            let profile = (|| {
                let first = set
                    .deltas
                    .first()
                    .ok_or_else(|| Error::InvalidArgument("empty task-vector set".to_string()))?;
                let mut mean = DMatrix::zeros(first.nrows(), first.ncols());
                for d in &set.deltas {
                    mean += d;
                }
                mean /= set.deltas.len() as f64;
                let per_model = set
                    .deltas
                    .iter()
                    .map(|d| matrix_effective_rank(d, energy))
                    .collect::<Result<Vec<_>>>()?;
                Ok(RankProfile {
                    mean: matrix_effective_rank(&mean, energy)?,
                    per_model,
                })
            })();
            profile
                .map(|p| (name.clone(), p))
                .map_err(|e: Error| e.in_layer(name))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelOutliers {
    /// Fraction of entries at or above their row threshold (zeros excluded).
    pub fraction: f64,
    /// L1 mass of those entries.
    pub mass: f64,
    pub alpha: f64,
    /// Singular values above `mean + sigma_mult · std` of the spectrum.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub singular_outliers: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutlierReport {
    pub layer: String,
    pub models: Vec<ModelOutliers>,
}

fn spectrum_outliers(d: &DMatrix<f64>, sigma_mult: f64) -> Result<Vec<f64>> {
    let s = svd(d)?.s;
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let std = (s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let tau = mean + sigma_mult * std;
    Ok(s.into_iter().filter(|&x| x > tau).collect())
}

pub fn outlier_profile(
    deltas: &DeltaSet,
    sigma_mult: f64,
    mask_singular_outliers: bool,
) -> Result<OutlierReport> {
    let alpha = outlier_weights(&deltas.deltas, sigma_mult)?;
    let models = deltas
        .deltas
        .iter()
        .zip(alpha)
        .map(|(d, alpha)| {
            let masked = threshold_mask(d, &row_stats(d)?, sigma_mult);
            let survivors = masked.iter().filter(|x| **x != 0.0);
            let (count, mass) = survivors.fold((0usize, 0.0), |(c, m), x| (c + 1, m + x.abs()));
            Ok(ModelOutliers {
                fraction: count as f64 / d.len() as f64,
                mass,
                alpha,
                singular_outliers: if mask_singular_outliers {
                    Some(spectrum_outliers(d, sigma_mult)?)
                } else {
                    None
                },
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_layer(&deltas.layer))?;
    Ok(OutlierReport {
        layer: deltas.layer.clone(),
        models,
    })
}

pub fn sparsity_profile(
    deltas_by_layer: &BTreeMap<String, DeltaSet>,
    epsilon: f64,
) -> Result<BTreeMap<String, f64>> {
    deltas_by_layer
        .iter()
        .map(|(name, set)| {
            Ok((
                name.clone(),
                layer_sparsity(&set.deltas, epsilon).map_err(|e| e.in_layer(name))?,
            ))
        })
        .collect()
}
