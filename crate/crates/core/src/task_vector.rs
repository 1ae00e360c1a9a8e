//! Task vectors and the per-layer statistics that drive reweighted merging:
//! row-wise outlier thresholds, outlier-mass aggregation weights, layer
//! sparsity and the sparsity-adaptive rank.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-layer set of task vectors `Δ_i = θ_i − θ_0`, all of one shape.
/// Model indices are 1-based positions in `deltas`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSet {
    pub layer: String,
    pub deltas: Vec<DMatrix<f64>>,
}

impl DeltaSet {
    pub fn extract(
        layer: impl Into<String>,
        base: &DMatrix<f64>,
        models: &[DMatrix<f64>],
    ) -> Result<Self> {
        let deltas = models
            .iter()
            .map(|m| delta(m, base))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layer: layer.into(),
            deltas,
        })
    }
}

pub fn delta(model_layer: &DMatrix<f64>, base_layer: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if model_layer.shape() != base_layer.shape() {
        return Err(Error::ShapeMismatch(format!(
            "model {:?} vs base {:?}",
            model_layer.shape(),
            base_layer.shape()
        )));
    }
    Ok(model_layer - base_layer)
}

/// Per-row mean and population standard deviation of `|Δ|`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl RowStats {
    /// Row threshold `mu + sigma_mult * sigma`.
    pub fn threshold(&self, row: usize, sigma_mult: f64) -> f64 {
        self.mu[row] + sigma_mult * self.sigma[row]
    }
}

pub fn row_stats(d: &DMatrix<f64>) -> Result<RowStats> {
    let (rows, cols) = d.shape();
    if cols == 0 || rows == 0 {
        return Err(Error::EmptyMatrix);
    }
    let n = cols as f64;
    let mut mu = Vec::with_capacity(rows);
    let mut sigma = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = d.row(r);
        let mean = row.iter().map(|x| x.abs()).sum::<f64>() / n;
        let mean_sq = row.iter().map(|x| x * x).sum::<f64>() / n;
        mu.push(mean);
        sigma.push((mean_sq - mean * mean).max(0.0).sqrt());
    }
    Ok(RowStats { mu, sigma })
}

/// Zeroes entries whose magnitude is strictly below the row threshold;
/// entries exactly at the threshold survive.
pub fn threshold_mask(d: &DMatrix<f64>, stats: &RowStats, sigma_mult: f64) -> DMatrix<f64> {
    let mut out = d.clone();
    for r in 0..d.nrows() {
        let tau = stats.threshold(r, sigma_mult);
        for x in out.row_mut(r).iter_mut() {
            if x.abs() < tau {
                *x = 0.0;
            }
        }
    }
    out
}

/// `Σ_r ‖Threshold(Δ[r,·], τ_r)‖₁`, accumulated row by row.
pub fn outlier_mass(d: &DMatrix<f64>, sigma_mult: f64) -> Result<f64> {
    let stats = row_stats(d)?;
    let masked = threshold_mask(d, &stats, sigma_mult);
    Ok((0..masked.nrows())
        .map(|r| masked.row(r).iter().map(|x| x.abs()).sum::<f64>())
        .sum())
}

fn check_same_shape(deltas: &[DMatrix<f64>]) -> Result<()> {
    let first = deltas
        .first()
        .ok_or_else(|| Error::InvalidArgument("no task vectors".to_string()))?;
    if let Some(bad) = deltas.iter().find(|d| d.shape() != first.shape()) {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            first.shape(),
            bad.shape()
        )));
    }
    Ok(())
}

/// Aggregation weights proportional to each model's outlier mass,
/// L1-normalized across models. With no outlier mass anywhere the weights
/// are uniform.
pub fn outlier_weights(deltas: &[DMatrix<f64>], sigma_mult: f64) -> Result<Vec<f64>> {
    check_same_shape(deltas)?;
    let masses = deltas
        .iter()
        .map(|d| outlier_mass(d, sigma_mult))
        .collect::<Result<Vec<_>>>()?;
    Ok(normalize_masses(&masses))
}

pub(crate) fn normalize_masses(masses: &[f64]) -> Vec<f64> {
    let total: f64 = masses.iter().sum();
    let n = masses.len();
    if total > 0.0 {
        masses.iter().map(|m| m / total).collect()
    } else {
        vec![1.0 / n as f64; n]
    }
}

/// `(1 − α_i) / (n − 1)`: reverses the ordering while still summing to one.
pub fn invert_weights(alpha: &[f64]) -> Vec<f64> {
    let n = alpha.len();
    if n <= 1 {
        return alpha.to_vec();
    }
    alpha.iter().map(|a| (1.0 - a) / (n - 1) as f64).collect()
}

/// Fraction of all entries, over every model, with `|Δ| < epsilon`.
pub fn layer_sparsity(deltas: &[DMatrix<f64>], epsilon: f64) -> Result<f64> {
    check_same_shape(deltas)?;
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be > 0, got {epsilon}"
        )));
    }
    let total: usize = deltas.iter().map(|d| d.len()).sum();
    if total == 0 {
        return Err(Error::EmptyMatrix);
    }
    let small: usize = deltas
        .iter()
        .map(|d| d.iter().filter(|x| x.abs() < epsilon).count())
        .sum();
    Ok(small as f64 / total as f64)
}

/// `floor(d · (gamma0 + gamma · omega))`, clamped to `[1, d]`.
pub fn dynamic_rank(d: usize, omega: f64, gamma0: f64, gamma: f64) -> usize {
    let raw = (d as f64 * (gamma0 + gamma * omega)).floor();
    (raw.max(1.0) as usize).clamp(1, d.max(1))
}

fn default_gamma0() -> f64 {
    0.2
}
fn default_gamma() -> f64 {
    0.6
}
fn default_epsilon() -> f64 {
    0.1
}
fn default_sigma_mult() -> f64 {
    3.0
}
fn default_scale() -> f64 {
    1.0
}

/// Hyperparameters of reweighted merging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResmParams {
    #[serde(default = "default_gamma0")]
    pub gamma0: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Magnitude below which an entry counts as sparse.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_sigma_mult")]
    pub sigma_mult: f64,
    /// Layer scaling factor applied to the summed update.
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Replaces the sparsity-derived rank when set.
    #[serde(default)]
    pub rank_override: Option<usize>,
    /// Give smaller weights to models with more outlier mass.
    #[serde(default)]
    pub invert_alpha: bool,
}

impl Default for ResmParams {
    fn default() -> Self {
        Self {
            gamma0: default_gamma0(),
            gamma: default_gamma(),
            epsilon: default_epsilon(),
            sigma_mult: default_sigma_mult(),
            scale: default_scale(),
            rank_override: None,
            invert_alpha: false,
        }
    }
}

impl ResmParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gamma0", self.gamma0),
            ("gamma", self.gamma),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!(
                    "resm.{name} must be a finite value > 0, got {v}"
                )));
            }
        }
        if !(self.sigma_mult.is_finite() && self.sigma_mult >= 0.0) {
            return Err(Error::Config(format!(
                "resm.sigma_mult must be finite and >= 0, got {}",
                self.sigma_mult
            )));
        }
        if !self.scale.is_finite() {
            return Err(Error::Config(format!(
                "resm.scale must be finite, got {}",
                self.scale
            )));
        }
        if self.rank_override == Some(0) {
            return Err(Error::Config("resm.rank_override must be >= 1".to_string()));
        }
        if self.gamma0 + self.gamma > 1.0 {
            log::warn!(
                "gamma0 + gamma = {} exceeds 1; dynamic ranks will be clamped to the layer dimension",
                self.gamma0 + self.gamma
            );
        }
        Ok(())
    }

    /// Outlier weights, inverted if configured.
    pub fn alpha(&self, deltas: &[DMatrix<f64>]) -> Result<Vec<f64>> {
        let alpha = outlier_weights(deltas, self.sigma_mult)?;
        Ok(if self.invert_alpha {
            invert_weights(&alpha)
        } else {
            alpha
        })
    }
}

/// Per-layer quantities computed by reweighted merging.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerStats {
    pub alpha: Vec<f64>,
    pub omega: f64,
    pub rank_k: usize,
    pub retained_rank: usize,
}
