//! Dense kernels in double precision: thin SVD with reproducible signs,
//! truncation, orthogonal Procrustes projection, reconstruction and
//! energy-based effective rank.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative cutoff below which a Procrustes input is treated as rank deficient.
pub const RANK_DEFICIENT_RTOL: f64 = 1e-10;

const SVD_MAX_ITER: usize = 10_000;

/// `u · diag(s) · vᵀ` with orthonormal columns in `u` (rows × r) and
/// `v` (cols × r), and `s` non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    pub u: DMatrix<f64>,
    pub s: Vec<f64>,
    pub v: DMatrix<f64>,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }
}

pub fn from_row_major(rows: usize, cols: usize, values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, values)
}

pub fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Thin SVD. Singular values come back sorted non-increasing and each column
/// of `u` is flipped so its largest-magnitude entry is non-negative (the
/// matching column of `v` flips with it), so results do not depend on the
/// sign conventions of the underlying solver.
pub fn svd(m: &DMatrix<f64>) -> Result<SvdFactors> {
    if m.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let dec = m
        .clone()
        .try_svd(true, true, f64::EPSILON, SVD_MAX_ITER)
        .ok_or(Error::ConvergenceFailure)?;
    let raw_u = dec.u.ok_or(Error::ConvergenceFailure)?;
    let raw_vt = dec.v_t.ok_or(Error::ConvergenceFailure)?;
    let raw_s = dec.singular_values;

    let r = raw_s.len();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| raw_s[b].total_cmp(&raw_s[a]).then(a.cmp(&b)));

    let mut u = DMatrix::zeros(m.nrows(), r);
    let mut v = DMatrix::zeros(m.ncols(), r);
    let mut s = Vec::with_capacity(r);
    for (dst, &src) in order.iter().enumerate() {
        let mut ucol = raw_u.column(src).into_owned();
        let mut vcol = raw_vt.row(src).transpose();
        let pivot = ucol.iter().enumerate().fold((0, 0.0f64), |best, (i, &x)| {
            if x.abs() > best.1.abs() {
                (i, x)
            } else {
                best
            }
        });
        if pivot.1 < 0.0 {
            ucol.neg_mut();
            vcol.neg_mut();
        }
        u.set_column(dst, &ucol);
        v.set_column(dst, &vcol);
        s.push(raw_s[src].max(0.0));
    }
    Ok(SvdFactors { u, s, v })
}

/// Keeps the leading `k` singular triplets.
pub fn truncate(f: &SvdFactors, k: usize) -> Result<SvdFactors> {
    let r = f.rank();
    if k == 0 || k > r {
        return Err(Error::RankOutOfRange { k, max: r });
    }
    Ok(SvdFactors {
        u: f.u.columns(0, k).into_owned(),
        s: f.s[..k].to_vec(),
        v: f.v.columns(0, k).into_owned(),
    })
}

pub fn reconstruct(f: &SvdFactors) -> Result<DMatrix<f64>> {
    let r = f.s.len();
    if f.u.ncols() != r || f.v.ncols() != r {
        return Err(Error::ShapeMismatch(format!(
            "u has {} columns, s has {r} values, v has {} columns",
            f.u.ncols(),
            f.v.ncols()
        )));
    }
    let mut us = f.u.clone();
    for (j, &sj) in f.s.iter().enumerate() {
        us.column_mut(j).scale_mut(sj);
    }
    Ok(us * f.v.transpose())
}

/// Frobenius-nearest matrix with orthonormal columns (orthogonal Procrustes,
/// equivalently the polar factor): for `m = A Σ Bᵀ` returns `A Bᵀ`.
pub fn orthogonalize(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.ncols() > m.nrows() {
        return Err(Error::TooManyColumns {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    let f = svd(m)?;
    let largest = f.s[0];
    let smallest = *f.s.last().expect("non-empty spectrum");
    if largest == 0.0 || smallest < RANK_DEFICIENT_RTOL * largest {
        return Err(Error::RankDeficient { smallest, largest });
    }
    Ok(&f.u * f.v.transpose())
}

/// Smallest `k` whose leading squared singular values reach `energy` of the
/// total (boundary inclusive).
pub fn effective_rank(s: &[f64], energy: f64) -> Result<usize> {
    if !(energy > 0.0 && energy <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "energy {energy} outside (0, 1]"
        )));
    }
    let total: f64 = s.iter().map(|x| x * x).sum();
    if total == 0.0 {
        return Err(Error::AllZeroSpectrum);
    }
    let target = energy * total;
    let mut acc = 0.0;
    for (i, x) in s.iter().enumerate() {
        acc += x * x;
        if acc >= target {
            return Ok(i + 1);
        }
    }
    Ok(s.len())
}

/// Largest absolute entry of `XᵀX − I`.
pub fn orthonormality_defect(x: &DMatrix<f64>) -> f64 {
    let gram = x.transpose() * x;
    let n = gram.nrows();
    (gram - DMatrix::<f64>::identity(n, n)).amax()
}
