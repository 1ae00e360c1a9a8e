//! Per-layer singular-vector merging: TSVM with a fixed rank and RESM with
//! outlier-aware weights and a sparsity-driven rank.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{orthogonalize, svd, SvdFactors};
use crate::plan::MergeMethod;
use crate::task_vector::{dynamic_rank, layer_sparsity, LayerStats, ResmParams};

#[derive(Debug, Clone)]
pub struct LayerMergeOutcome {
    pub merged: DMatrix<f64>,
    /// Reweighting statistics; `None` for TSVM.
    pub stats: Option<LayerStats>,
    pub method: MergeMethod,
    /// Per-model rank actually used after the feasibility clamp and any retry.
    pub retained_rank: usize,
    /// Whether the requested rank was reduced to fit `n · r ≤ min(rows, cols)`.
    pub clamped: bool,
    pub warnings: Vec<String>,
    /// The decorrelated factors the update was built from; `None` when the
    /// layer fell back to task arithmetic.
    pub joint: Option<JointFactors>,
}

/// Per-model blocks of the jointly orthogonalized singular vectors. The
/// column concatenation of `u_blocks` (and of `v_blocks`) is orthonormal.
#[derive(Debug, Clone, PartialEq)]
pub struct JointFactors {
    pub u_blocks: Vec<DMatrix<f64>>,
    pub s: Vec<Vec<f64>>,
    pub v_blocks: Vec<DMatrix<f64>>,
}

impl JointFactors {
    pub fn u_concat(&self) -> DMatrix<f64> {
        hstack(&self.u_blocks)
    }

    pub fn v_concat(&self) -> DMatrix<f64> {
        hstack(&self.v_blocks)
    }

    /// `Σ_i w_i · U⊥_i diag(s_i) V⊥_iᵀ`.
    pub fn update(&self, rows: usize, cols: usize, weights: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(rows, cols);
        for ((u, s), (v, &w)) in self
            .u_blocks
            .iter()
            .zip(&self.s)
            .zip(self.v_blocks.iter().zip(weights))
        {
            let mut us = u.clone();
            for (j, &sj) in s.iter().enumerate() {
                us.column_mut(j).scale_mut(w * sj);
            }
            out += us * v.transpose();
        }
        out
    }
}

fn hstack(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let total = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, total);
    let mut off = 0;
    for b in blocks {
        out.view_mut((0, off), (rows, b.ncols())).copy_from(b);
        off += b.ncols();
    }
    out
}

fn split(m: &DMatrix<f64>, widths: &[usize]) -> Vec<DMatrix<f64>> {
    let mut off = 0;
    widths
        .iter()
        .map(|&w| {
            let block = m.columns(off, w).into_owned();
            off += w;
            block
        })
        .collect()
}

/// Number of singular values that are not numerically zero.
fn numerical_rank(f: &SvdFactors, rows: usize, cols: usize) -> usize {
    let Some(&top) = f.s.first() else { return 0 };
    if top == 0.0 {
        return 0;
    }
    let cutoff = rows.max(cols) as f64 * f64::EPSILON * top;
    f.s.iter().take_while(|&&x| x > cutoff).count()
}

/// Keeps the leading `r` triplets of each model (fewer if the model has
/// fewer nonzero singular values), concatenates the `U` and `V` blocks,
/// replaces each concatenation by its nearest orthonormal matrix and splits
/// the result back per model.
pub fn joint_orthogonalize(factors: &[SvdFactors], r: usize) -> Result<JointFactors> {
    let Some(first) = factors.first() else {
        return Err(Error::InvalidArgument(
            "no factors to orthogonalize".to_string(),
        ));
    };
    let (rows, cols) = (first.u.nrows(), first.v.nrows());
    let widths: Vec<usize> = factors
        .iter()
        .map(|f| r.min(numerical_rank(f, rows, cols)))
        .collect();
    let s: Vec<Vec<f64>> = factors
        .iter()
        .zip(&widths)
        .map(|(f, &w)| f.s[..w].to_vec())
        .collect();
    let u: Vec<DMatrix<f64>> = factors
        .iter()
        .zip(&widths)
        .map(|(f, &w)| f.u.columns(0, w).into_owned())
        .collect();
    let v: Vec<DMatrix<f64>> = factors
        .iter()
        .zip(&widths)
        .map(|(f, &w)| f.v.columns(0, w).into_owned())
        .collect();

    if widths.iter().sum::<usize>() == 0 {
        return Ok(JointFactors {
            u_blocks: u,
            s,
            v_blocks: v,
        });
    }
    let u_perp = orthogonalize(&hstack(&u))?;
    let v_perp = orthogonalize(&hstack(&v))?;
    Ok(JointFactors {
        u_blocks: split(&u_perp, &widths),
        s,
        v_blocks: split(&v_perp, &widths),
    })
}

fn check_inputs(base: &DMatrix<f64>, deltas: &[DMatrix<f64>]) -> Result<()> {
    if deltas.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one task matrix is required".to_string(),
        ));
    }
    if base.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    for d in deltas {
        if d.shape() != base.shape() {
            return Err(Error::ShapeMismatch(format!(
                "base is {:?}, task matrix is {:?}",
                base.shape(),
                d.shape()
            )));
        }
    }
    if base
        .iter()
        .chain(deltas.iter().flat_map(|d| d.iter()))
        .any(|x| !x.is_finite())
    {
        return Err(Error::NonFiniteInput);
    }
    Ok(())
}

/// Runs the joint orthogonalization at rank `r`, retrying once at `r / 2`
/// if the concatenation is numerically rank deficient.
fn joint_with_retry(
    factors: &[SvdFactors],
    r: usize,
    warnings: &mut Vec<String>,
) -> Result<(JointFactors, usize)> {
    match joint_orthogonalize(factors, r) {
        Err(Error::RankDeficient { smallest, largest }) if r > 1 => {
            let halved = r / 2;
            let msg = format!(
                "concatenated singular vectors are rank deficient (smallest {smallest:e}, largest {largest:e}); retrying with rank {halved}"
            );
            log::warn!("{msg}");
            warnings.push(msg);
            Ok((joint_orthogonalize(factors, halved)?, halved))
        }
        other => other.map(|j| (j, r)),
    }
}

fn clamp_rank(requested: usize, d: usize, n: usize, warnings: &mut Vec<String>) -> (usize, bool) {
    let cap = d / n;
    if requested > cap {
        let msg = format!(
            "rank {requested} exceeds the feasible {cap} for {n} models at dimension {d}; clamped"
        );
        log::warn!("{msg}");
        warnings.push(msg);
        (cap, true)
    } else {
        (requested, false)
    }
}

fn weighted_sum(
    base: &DMatrix<f64>,
    deltas: &[DMatrix<f64>],
    weights: &[f64],
    scale: f64,
) -> DMatrix<f64> {
    let mut update = DMatrix::zeros(base.nrows(), base.ncols());
    for (d, &w) in deltas.iter().zip(weights) {
        update += d * w;
    }
    base + update * scale
}

fn degenerate_warning(d: usize, n: usize, warnings: &mut Vec<String>) {
    let msg =
        format!("dimension {d} is smaller than the {n} models; falling back to task arithmetic");
    log::warn!("{msg}");
    warnings.push(msg);
}

/// `base + Σ_i U⊥_i diag(S_i[:k]) V⊥_iᵀ` with `k = k_fixed`, reduced to
/// `floor(min(rows, cols) / n)` when infeasible.
pub fn tsvm_layer(
    base: &DMatrix<f64>,
    deltas: &[DMatrix<f64>],
    k_fixed: usize,
) -> Result<LayerMergeOutcome> {
    check_inputs(base, deltas)?;
    if k_fixed == 0 {
        return Err(Error::RankOutOfRange {
            k: 0,
            max: base.nrows().min(base.ncols()),
        });
    }
    let n = deltas.len();
    let (rows, cols) = base.shape();
    let d = rows.min(cols);
    let mut warnings = Vec::new();
    if d < n {
        degenerate_warning(d, n, &mut warnings);
        return Ok(LayerMergeOutcome {
            merged: weighted_sum(base, deltas, &vec![1.0; n], 1.0),
            stats: None,
            method: MergeMethod::Tsvm,
            retained_rank: d,
            clamped: false,
            warnings,
            joint: None,
        });
    }
    let (k, clamped) = clamp_rank(k_fixed, d, n, &mut warnings);
    let factors = deltas.iter().map(svd).collect::<Result<Vec<_>>>()?;
    let (joint, k) = joint_with_retry(&factors, k, &mut warnings)?;
    let merged = base + joint.update(rows, cols, &vec![1.0; n]);
    Ok(LayerMergeOutcome {
        merged,
        stats: None,
        method: MergeMethod::Tsvm,
        retained_rank: k,
        clamped,
        warnings,
        joint: Some(joint),
    })
}

/// `base + scale · Σ_i U⊥_i diag(α_i S_i[:r]) V⊥_iᵀ` with α from outlier mass
/// and `r` from layer sparsity (or `rank_override`), clamped to feasibility.
pub fn resm_layer(
    base: &DMatrix<f64>,
    deltas: &[DMatrix<f64>],
    params: &ResmParams,
) -> Result<LayerMergeOutcome> {
    check_inputs(base, deltas)?;
    let n = deltas.len();
    let (rows, cols) = base.shape();
    let d = rows.min(cols);
    let mut warnings = Vec::new();

    let alpha = params.alpha(deltas)?;
    let omega = layer_sparsity(deltas, params.epsilon)?;
    let rank_k = dynamic_rank(d, omega, params.gamma0, params.gamma);

    if d < n {
        degenerate_warning(d, n, &mut warnings);
        return Ok(LayerMergeOutcome {
            merged: weighted_sum(base, deltas, &alpha, params.scale),
            stats: Some(LayerStats {
                alpha,
                omega,
                rank_k,
                retained_rank: d,
            }),
            method: MergeMethod::Resm,
            retained_rank: d,
            clamped: false,
            warnings,
            joint: None,
        });
    }

    let requested = params.rank_override.unwrap_or(rank_k);
    let (r, clamped) = clamp_rank(requested, d, n, &mut warnings);
    let factors = deltas.iter().map(svd).collect::<Result<Vec<_>>>()?;
    let (mut joint, r) = joint_with_retry(&factors, r, &mut warnings)?;

    // α scales the whole spectrum before the rank slice; the joint factors
    // are already sliced, which commutes with a scalar weight.
    for (s, &a) in joint.s.iter_mut().zip(&alpha) {
        s.iter_mut().for_each(|x| *x *= a);
    }
    let merged = base + joint.update(rows, cols, &vec![1.0; n]) * params.scale;
    Ok(LayerMergeOutcome {
        merged,
        stats: Some(LayerStats {
            alpha,
            omega,
            rank_k,
            retained_rank: r,
        }),
        method: MergeMethod::Resm,
        retained_rank: r,
        clamped,
        warnings,
        joint: Some(joint),
    })
}
