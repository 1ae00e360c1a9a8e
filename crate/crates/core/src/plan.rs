//! Declarative merge configuration, parsed from a single strict JSON document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::methods::check_fractions;
use crate::task_vector::ResmParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    WeightAverage,
    TaskArithmetic,
    Ties,
    Dare,
    DareTies,
    Breadcrumbs,
    BreadcrumbsTies,
    Tsvm,
    Resm,
}

impl MergeMethod {
    pub fn is_svd_based(self) -> bool {
        matches!(self, MergeMethod::Tsvm | MergeMethod::Resm)
    }
}

/// How SVD-based methods treat rank-0 and rank-1 tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorPolicy {
    /// Copy the base tensor.
    BasePassthrough,
    /// `base + lambda · Σ Δ_i`.
    UniformTa,
    /// `base + scale · Σ α_i Δ_i`.
    AlphaTa,
}

fn one() -> f64 {
    1.0
}
fn default_density() -> f64 {
    0.2
}
fn default_drop_p() -> f64 {
    0.5
}
fn default_top_discard() -> f64 {
    0.01
}
fn default_bottom_discard() -> f64 {
    0.14
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergePlan {
    pub base_path: PathBuf,
    pub model_paths: Vec<PathBuf>,
    pub method: MergeMethod,
    /// Interpolation weights for `weight_average`; uniform when absent.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    /// Task-vector scaling.
    #[serde(default = "one")]
    pub lambda: f64,
    /// TIES trim density.
    #[serde(default = "default_density")]
    pub density: f64,
    #[serde(default = "default_drop_p")]
    pub drop_p: f64,
    #[serde(default = "default_top_discard")]
    pub top_discard: f64,
    #[serde(default = "default_bottom_discard")]
    pub bottom_discard: f64,
    /// TSVM per-model rank; defaults to the largest feasible one.
    #[serde(default)]
    pub k_fixed: Option<usize>,
    #[serde(default)]
    pub resm: ResmParams,
    #[serde(default)]
    pub vector_policy: Option<VectorPolicy>,
    /// Copy rank > 2 tensors from the base instead of failing.
    #[serde(default)]
    pub passthrough_high_rank: bool,
    #[serde(default)]
    pub seed: u64,
    pub output_path: PathBuf,
    #[serde(default)]
    pub threads: Option<usize>,
}

impl MergePlan {
    /// A plan with default hyperparameters and empty paths, for in-memory merging.
    pub fn new(method: MergeMethod) -> Self {
        Self {
            base_path: PathBuf::new(),
            model_paths: Vec::new(),
            method,
            weights: None,
            lambda: 1.0,
            density: default_density(),
            drop_p: default_drop_p(),
            top_discard: default_top_discard(),
            bottom_discard: default_bottom_discard(),
            k_fixed: None,
            resm: ResmParams::default(),
            vector_policy: None,
            passthrough_high_rank: false,
            seed: 0,
            output_path: PathBuf::new(),
            threads: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: MergePlan =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Full validation, including paths; nothing is opened.
    pub fn validate(&self) -> Result<()> {
        if self.model_paths.is_empty() {
            return Err(Error::Config(
                "model_paths must list at least one model".to_string(),
            ));
        }
        if self.base_path.as_os_str().is_empty() || self.output_path.as_os_str().is_empty() {
            return Err(Error::Config(
                "base_path and output_path must be set".to_string(),
            ));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be >= 1".to_string()));
        }
        self.validate_params(self.model_paths.len())
    }

    /// Method hyperparameters against a model count.
    pub fn validate_params(&self, n_models: usize) -> Result<()> {
        if n_models == 0 {
            return Err(Error::Config("at least one model is required".to_string()));
        }
        if let Some(w) = &self.weights {
            if w.len() != n_models {
                return Err(Error::Config(format!(
                    "{} weights for {n_models} models",
                    w.len()
                )));
            }
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config("weights must be finite".to_string()));
            }
            if w.iter().sum::<f64>() == 0.0 {
                return Err(Error::Config("weights sum to zero".to_string()));
            }
        }
        if !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be finite, got {}",
                self.lambda
            )));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config(format!(
                "density {} outside (0, 1]",
                self.density
            )));
        }
        if !(0.0..1.0).contains(&self.drop_p) {
            return Err(Error::Config(format!(
                "drop_p {} outside [0, 1)",
                self.drop_p
            )));
        }
        check_fractions(self.top_discard, self.bottom_discard)
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.k_fixed == Some(0) {
            return Err(Error::Config("k_fixed must be >= 1".to_string()));
        }
        self.resm.validate()
    }

    pub fn vector_policy(&self) -> VectorPolicy {
        self.vector_policy.unwrap_or(match self.method {
            MergeMethod::Resm => VectorPolicy::AlphaTa,
            _ => VectorPolicy::UniformTa,
        })
    }

    /// Interpolation weights for `n` models.
    pub fn weights_for(&self, n: usize) -> Vec<f64> {
        self.weights
            .clone()
            .unwrap_or_else(|| vec![1.0 / n as f64; n])
    }

    pub fn report_path(&self) -> PathBuf {
        report_path_for(&self.output_path)
    }
}

/// `<output>.report.json`
pub fn report_path_for(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".report.json");
    PathBuf::from(s)
}
