//! Element-wise baseline operators. All of them are instances of
//! `θ_0 + Σ_i w_i · m_i ⊙ Δ_i` for some weights and binary masks; tensors
//! are handled as flat row-major slices so 1-D and 2-D inputs behave alike.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A task vector after masking (and, for DARE, rescaling).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedDelta {
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    /// Fraction of entries the mask retains.
    pub mask_density: f64,
}

impl MaskedDelta {
    fn from_mask(delta: &[f64], mask: Vec<bool>, rescale: f64) -> Self {
        let values = delta
            .iter()
            .zip(&mask)
            .map(|(&x, &keep)| if keep { x * rescale } else { 0.0 })
            .collect();
        let kept = mask.iter().filter(|&&k| k).count();
        let mask_density = if mask.is_empty() {
            0.0
        } else {
            kept as f64 / mask.len() as f64
        };
        Self {
            values,
            mask,
            mask_density,
        }
    }
}

fn check_lengths<T: AsRef<[f64]>>(expected: usize, tensors: &[T]) -> Result<()> {
    if let Some(bad) = tensors
        .iter()
        .map(|t| t.as_ref().len())
        .find(|&l| l != expected)
    {
        return Err(Error::ShapeMismatch(format!(
            "{expected} vs {bad} elements"
        )));
    }
    Ok(())
}

/// `Σ_i w_i θ_i`. Weights that do not sum to one are normalized with a warning.
pub fn weight_average<T: AsRef<[f64]>>(layers: &[T], weights: &[f64]) -> Result<Vec<f64>> {
    if layers.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: layers.len(),
            actual: weights.len(),
        });
    }
    let first = layers.first().ok_or_else(|| {
        Error::InvalidArgument("weight_average needs at least one tensor".to_string())
    })?;
    check_lengths(first.as_ref().len(), layers)?;
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::InvalidArgument("weights must be finite".to_string()));
    }
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return Err(Error::InvalidArgument("weights sum to zero".to_string()));
    }
    let weights: Vec<f64> = if (total - 1.0).abs() > 1e-9 {
        log::warn!("weights sum to {total}; normalizing");
        weights.iter().map(|w| w / total).collect()
    } else {
        weights.to_vec()
    };
    let mut out = vec![0.0; first.as_ref().len()];
    for (layer, w) in layers.iter().zip(&weights) {
        for (o, x) in out.iter_mut().zip(layer.as_ref()) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// `θ_0 + λ Σ_i Δ_i`.
pub fn task_arithmetic<T: AsRef<[f64]>>(
    base: &[f64],
    deltas: &[T],
    lambda: f64,
) -> Result<Vec<f64>> {
    check_lengths(base.len(), deltas)?;
    let mut sum = vec![0.0; base.len()];
    for d in deltas {
        for (s, x) in sum.iter_mut().zip(d.as_ref()) {
            *s += x;
        }
    }
    Ok(base.iter().zip(&sum).map(|(b, s)| b + lambda * s).collect())
}

/// Indices ordered by decreasing magnitude; equal magnitudes keep index order.
fn magnitude_order(delta: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..delta.len()).collect();
    idx.sort_by(|&a, &b| delta[b].abs().total_cmp(&delta[a].abs()).then(a.cmp(&b)));
    idx
}

/// Keeps the `ceil(density · N)` largest-magnitude entries of the tensor.
pub fn topk_mask(delta: &[f64], density: f64) -> Result<MaskedDelta> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "density {density} outside (0, 1]"
        )));
    }
    let keep = ((density * delta.len() as f64).ceil() as usize).min(delta.len());
    let mut mask = vec![false; delta.len()];
    for &i in magnitude_order(delta).iter().take(keep) {
        mask[i] = true;
    }
    Ok(MaskedDelta::from_mask(delta, mask, 1.0))
}

/// Sign election and disjoint mean. Per coordinate the elected sign is the
/// sign of the summed values (a zero sum yields 0); the output is λ times the
/// mean of the values that carry the elected sign.
pub fn ties_combine(masked: &[MaskedDelta], lambda: f64) -> Result<Vec<f64>> {
    let first = masked.first().ok_or_else(|| {
        Error::InvalidArgument("ties_combine needs at least one tensor".to_string())
    })?;
    let len = first.values.len();
    if let Some(bad) = masked.iter().find(|m| m.values.len() != len) {
        return Err(Error::ShapeMismatch(format!(
            "{len} vs {} elements",
            bad.values.len()
        )));
    }
    let mut out = vec![0.0; len];
    for (c, o) in out.iter_mut().enumerate() {
        let total: f64 = masked.iter().map(|m| m.values[c]).sum();
        if total == 0.0 {
            continue;
        }
        let sign = total.signum();
        let (sum, count) = masked
            .iter()
            .map(|m| m.values[c])
            .filter(|&x| x != 0.0 && x.signum() == sign)
            .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
        if count > 0 {
            *o = lambda * sum / count as f64;
        }
    }
    Ok(out)
}

/// Seed for one (layer, model) pair so DARE masks are reproducible and
/// independent of processing order.
pub fn dare_seed(seed: u64, layer: &str, model_index: usize) -> u64 {
    // FNV-1a over the layer name, then splitmix64 finalization.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in layer.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h.rotate_left(17) ^ (model_index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Drops each entry with probability `drop_p` and rescales survivors by
/// `1 / (1 − drop_p)`.
pub fn dare_drop(delta: &[f64], drop_p: f64, rng_seed: u64) -> Result<MaskedDelta> {
    if !(0.0..1.0).contains(&drop_p) {
        return Err(Error::InvalidArgument(format!(
            "drop_p {drop_p} outside [0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mask = delta
        .iter()
        .map(|_| rng.random::<f64>() >= drop_p)
        .collect();
    Ok(MaskedDelta::from_mask(delta, mask, 1.0 / (1.0 - drop_p)))
}

/// Discards the largest `top_discard` and smallest `bottom_discard` fractions
/// by magnitude and keeps the middle band unscaled.
pub fn breadcrumbs_mask(
    delta: &[f64],
    top_discard: f64,
    bottom_discard: f64,
) -> Result<MaskedDelta> {
    check_fractions(top_discard, bottom_discard)?;
    let n = delta.len();
    let n_top = ((top_discard * n as f64).round() as usize).min(n.saturating_sub(1));
    let mut n_bottom = (bottom_discard * n as f64).round() as usize;
    if n_top + n_bottom >= n && n > 0 {
        n_bottom = n.saturating_sub(n_top + 1);
    }
    let order = magnitude_order(delta);
    let mut mask = vec![false; n];
    for &i in &order[n_top..n - n_bottom] {
        mask[i] = true;
    }
    Ok(MaskedDelta::from_mask(delta, mask, 1.0))
}

pub fn check_fractions(top_discard: f64, bottom_discard: f64) -> Result<()> {
    if !(top_discard >= 0.0 && bottom_discard >= 0.0 && top_discard + bottom_discard < 1.0) {
        return Err(Error::InvalidFractions(format!(
            "top_discard {top_discard} and bottom_discard {bottom_discard} must be >= 0 with sum < 1"
        )));
    }
    Ok(())
}
