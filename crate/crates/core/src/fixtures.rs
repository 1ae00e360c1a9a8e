//! Deterministic synthetic checkpoints with controlled task-vector structure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};

use crate::error::{Error, Result};
use crate::linalg::to_row_major;
use crate::store::{write_checkpoint, Checkpoint, Dtype, TensorRecord};

/// Layer names and shapes of every generated checkpoint.
pub const LAYERS: [(&str, &[usize]); 4] = [
    ("attn", &[64, 256]),
    ("bias", &[64]),
    ("dense", &[64, 64]),
    ("proj", &[256, 64]),
];

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub n_models: usize,
    pub seed: u64,
    /// Rank of each model's matrix deltas.
    pub rank: usize,
    /// Place the models' singular subspaces (and bias supports) on mutually
    /// orthogonal directions.
    pub orthogonal_deltas: bool,
    /// Largest singular value of a delta.
    pub delta_scale: f64,
    /// Fraction of delta entries zeroed after construction.
    pub sparsity: f64,
    /// Fraction of delta entries receiving an additive heavy-tailed outlier.
    pub outlier_fraction: f64,
    /// Outlier size relative to the delta's RMS entry.
    pub outlier_scale: f64,
    pub dtype: Dtype,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            n_models: 3,
            seed: 0,
            rank: 4,
            orthogonal_deltas: false,
            delta_scale: 3.0,
            sparsity: 0.0,
            outlier_fraction: 0.002,
            outlier_scale: 20.0,
            dtype: Dtype::F32,
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_models == 0 {
            return Err(Error::InvalidArgument("n_models must be >= 1".to_string()));
        }
        if self.rank == 0 {
            return Err(Error::InvalidArgument("rank must be >= 1".to_string()));
        }
        let d = LAYERS
            .iter()
            .filter(|(_, s)| s.len() == 2)
            .map(|(_, s)| s[0].min(s[1]))
            .min()
            .unwrap_or(0);
        let needed = if self.orthogonal_deltas {
            self.rank * self.n_models
        } else {
            self.rank
        };
        if needed > d {
            return Err(Error::InvalidArgument(format!(
                "rank {} with {} models needs {needed} directions, layers have {d}",
                self.rank, self.n_models
            )));
        }
        if self.orthogonal_deltas && self.n_models > 64 {
            return Err(Error::InvalidArgument(
                "at most 64 models have disjoint bias supports".to_string(),
            ));
        }
        for (name, v) in [
            ("sparsity", self.sparsity),
            ("outlier_fraction", self.outlier_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} {v} outside [0, 1]")));
            }
        }
        if !(self.delta_scale.is_finite() && self.outlier_scale.is_finite()) {
            return Err(Error::InvalidArgument("scales must be finite".to_string()));
        }
        Ok(())
    }
}

/// Generated checkpoints, in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Fixtures {
    pub base: Checkpoint,
    pub models: Vec<Checkpoint>,
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    gaussian(rows, cols, rng).qr().q()
}

/// Singular values of model `i`: decreasing, and distinct across models.
fn spectrum(spec: &FixtureSpec, i: usize) -> Vec<f64> {
    let r = spec.rank as f64;
    let model_factor = 1.0 + 0.25 * i as f64;
    (0..spec.rank)
        .map(|j| {
            spec.delta_scale * model_factor * (1.0 - j as f64 / (r + 1.0))
                / (1.0 + 0.25 * (spec.n_models - 1) as f64)
        })
        .collect()
}

fn low_rank(u: &DMatrix<f64>, s: &[f64], v: &DMatrix<f64>) -> DMatrix<f64> {
    let mut us = u.clone();
    for (j, &sj) in s.iter().enumerate() {
        us.column_mut(j).scale_mut(sj);
    }
    us * v.transpose()
}

fn matrix_deltas(
    spec: &FixtureSpec,
    rows: usize,
    cols: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<DMatrix<f64>> {
    let (n, r) = (spec.n_models, spec.rank);
    if spec.orthogonal_deltas {
        let u = orthonormal(rows, n * r, rng);
        let v = orthonormal(cols, n * r, rng);
        (0..n)
            .map(|i| {
                low_rank(
                    &u.columns(i * r, r).into_owned(),
                    &spectrum(spec, i),
                    &v.columns(i * r, r).into_owned(),
                )
            })
            .collect()
    } else {
        (0..n)
            .map(|i| {
                let u = orthonormal(rows, r, rng);
                let v = orthonormal(cols, r, rng);
                low_rank(&u, &spectrum(spec, i), &v)
            })
            .collect()
    }
}

fn bias_deltas(spec: &FixtureSpec, len: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = spec.n_models;
    if spec.orthogonal_deltas {
        let block = len / n;
        (0..n)
            .map(|i| {
                let value = 0.1 * (i + 1) as f64;
                (0..len)
                    .map(|j| if j / block == i { value } else { 0.0 })
                    .collect()
            })
            .collect()
    } else {
        (0..n)
            .map(|i| {
                (0..len)
                    .map(|_| 0.05 * spectrum(spec, i)[0] * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    }
}

/// Applies the sparsity and outlier knobs in place.
fn perturb(delta: &mut [f64], spec: &FixtureSpec, rng: &mut ChaCha8Rng) {
    if spec.sparsity > 0.0 {
        for x in delta.iter_mut() {
            if rng.random::<f64>() < spec.sparsity {
                *x = 0.0;
            }
        }
    }
    if spec.outlier_fraction > 0.0 {
        let rms = (delta.iter().map(|x| x * x).sum::<f64>() / delta.len() as f64).sqrt();
        let tail = StudentT::new(3.0).expect("valid degrees of freedom");
        for x in delta.iter_mut() {
            if rng.random::<f64>() < spec.outlier_fraction {
                let t: f64 = tail.sample(rng);
                *x += spec.outlier_scale * rms * (1.0 + t.abs()).copysign(t);
            }
        }
    }
}

/// Builds a base checkpoint and `n_models` fine-tuned variants. Each layer
/// draws from its own random stream, so layers do not depend on each other.
pub fn generate(spec: &FixtureSpec) -> Result<Fixtures> {
    spec.validate()?;
    let mut base = Checkpoint::new();
    let mut models = vec![Checkpoint::new(); spec.n_models];
    let metadata = BTreeMap::from([
        ("format".to_string(), "pt".to_string()),
        ("fixture_seed".to_string(), spec.seed.to_string()),
    ]);
    base.set_metadata(Some(metadata));

    for (stream, (name, shape)) in LAYERS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream as u64);
        let numel: usize = shape.iter().product();
        let base_vals: Vec<f64> = (0..numel)
            .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut deltas: Vec<Vec<f64>> = match *shape {
            [rows, cols] => matrix_deltas(spec, *rows, *cols, &mut rng)
                .iter()
                .map(to_row_major)
                .collect(),
            _ => bias_deltas(spec, numel, &mut rng),
        };
        for d in &mut deltas {
            perturb(d, spec, &mut rng);
        }
        let base_rec = TensorRecord::from_f64(*name, spec.dtype, shape.to_vec(), &base_vals)?;
        // Round the base first so the stored delta is relative to the
        // stored base.
        let stored_base = base_rec.to_f64();
        base.insert(base_rec)?;
        for (model, d) in models.iter_mut().zip(&deltas) {
            let vals: Vec<f64> = stored_base.iter().zip(d).map(|(b, x)| b + x).collect();
            model.insert(TensorRecord::from_f64(
                *name,
                spec.dtype,
                shape.to_vec(),
                &vals,
            )?)?;
        }
    }
    Ok(Fixtures { base, models })
}

pub fn base_path(dir: &Path) -> PathBuf {
    dir.join("base.safetensors")
}

/// `model_1.safetensors`, `model_2.safetensors`, ...
pub fn model_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("model_{}.safetensors", i + 1))
}

/// Writes the base and models into `dir` and returns the model paths.
pub fn write_fixtures(dir: &Path, spec: &FixtureSpec) -> Result<Vec<PathBuf>> {
    let fx = generate(spec)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_checkpoint(base_path(dir), &fx.base)?;
    fx.models
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let path = model_path(dir, i);
            write_checkpoint(&path, m)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{from_row_major, svd};
    use crate::store::serialize;

    fn delta(fx: &Fixtures, i: usize, name: &str) -> Vec<f64> {
        let b = fx.base.get(name).unwrap().to_f64();
        let m = fx.models[i].get(name).unwrap().to_f64();
        m.iter().zip(&b).map(|(x, y)| x - y).collect()
    }

    #[test]
    fn default_layout() {
        let fx = generate(&FixtureSpec::default()).unwrap();
        assert_eq!(fx.models.len(), 3);
        let names: Vec<_> = fx.base.names().collect();
        assert_eq!(names, ["attn", "bias", "dense", "proj"]);
        assert_eq!(fx.base.get("attn").unwrap().shape(), &[64, 256]);
        assert_eq!(fx.base.get("proj").unwrap().shape(), &[256, 64]);
        assert_eq!(fx.base.get("bias").unwrap().shape(), &[64]);
        for m in &fx.models {
            assert_eq!(m.names().collect::<Vec<_>>(), names);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = FixtureSpec::default();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(serialize(&a.base), serialize(&b.base));
        assert_eq!(serialize(&a.models[2]), serialize(&b.models[2]));
        let c = generate(&FixtureSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(serialize(&a.models[0]), serialize(&c.models[0]));
    }

    #[test]
    fn orthogonal_subspaces() {
        let spec = FixtureSpec {
            n_models: 2,
            rank: 1,
            orthogonal_deltas: true,
            outlier_fraction: 0.0,
            ..FixtureSpec::default()
        };
        let fx = generate(&spec).unwrap();
        for name in ["dense", "attn", "proj"] {
            let shape = fx.base.get(name).unwrap().shape().to_vec();
            let f: Vec<_> = (0..2)
                .map(|i| svd(&from_row_major(shape[0], shape[1], &delta(&fx, i, name))).unwrap())
                .collect();
            let left = f[0].u.column(0).dot(&f[1].u.column(0));
            let right = f[0].v.column(0).dot(&f[1].v.column(0));
            assert!(
                left.abs() < 1e-5 && right.abs() < 1e-5,
                "{name}: {left} {right}"
            );
            // Rank one up to storage rounding.
            assert!(f[0].s[1] < 1e-5 * f[0].s[0]);
        }
        let b0 = delta(&fx, 0, "bias");
        let b1 = delta(&fx, 1, "bias");
        assert_eq!(b0.iter().zip(&b1).map(|(x, y)| x * y).sum::<f64>(), 0.0);
    }

    #[test]
    fn knobs_take_effect() {
        let sparse = generate(&FixtureSpec {
            sparsity: 0.5,
            outlier_fraction: 0.0,
            ..FixtureSpec::default()
        })
        .unwrap();
        let d = delta(&sparse, 0, "dense");
        let zeros = d.iter().filter(|x| **x == 0.0).count() as f64 / d.len() as f64;
        assert!((zeros - 0.5).abs() < 0.05, "{zeros}");

        let clean = generate(&FixtureSpec {
            outlier_fraction: 0.0,
            ..FixtureSpec::default()
        })
        .unwrap();
        let noisy = generate(&FixtureSpec {
            outlier_fraction: 0.05,
            ..FixtureSpec::default()
        })
        .unwrap();
        let peak = |fx: &Fixtures| {
            delta(fx, 0, "attn")
                .iter()
                .fold(0.0f64, |m, x| m.max(x.abs()))
        };
        assert!(peak(&noisy) > 5.0 * peak(&clean));
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let too_many = FixtureSpec {
            rank: 40,
            n_models: 2,
            orthogonal_deltas: true,
            ..FixtureSpec::default()
        };
        assert!(generate(&too_many).is_err());
        assert!(generate(&FixtureSpec {
            n_models: 0,
            ..FixtureSpec::default()
        })
        .is_err());
    }

    #[test]
    fn fixtures_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FixtureSpec {
            n_models: 2,
            ..FixtureSpec::default()
        };
        let paths = write_fixtures(dir.path(), &spec).unwrap();
        assert_eq!(
            paths,
            vec![model_path(dir.path(), 0), model_path(dir.path(), 1)]
        );
        let fx = generate(&spec).unwrap();
        assert_eq!(
            crate::store::read_checkpoint(base_path(dir.path())).unwrap(),
            fx.base
        );
        assert_eq!(
            crate::store::read_checkpoint(&paths[1]).unwrap(),
            fx.models[1]
        );
    }
}
