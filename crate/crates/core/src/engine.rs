//! Whole-checkpoint merging: per-layer dispatch, ordered parallel
//! processing, streaming output and the merge report.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{from_row_major, to_row_major};
use crate::methods::{
    breadcrumbs_mask, dare_drop, dare_seed, task_arithmetic, ties_combine, topk_mask,
    weight_average, MaskedDelta,
};
use crate::plan::{MergeMethod, MergePlan, VectorPolicy};
use crate::store::{
    validate_compat, Checkpoint, CheckpointWriter, LayerManifest, LazyCheckpoint, ManifestEntry,
    TensorRecord, TensorSource,
};
use crate::task_vector::{layer_sparsity, ResmParams};
use crate::tsv::{resm_layer, tsvm_layer};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub layer: String,
    pub method: MergeMethod,
    pub rows: usize,
    pub cols: usize,
    pub omega: Option<f64>,
    pub k_l: Option<usize>,
    pub retained_rank: Option<usize>,
    pub alpha: Option<Vec<f64>>,
    pub clamped: bool,
    pub warnings: Vec<String>,
}

impl LayerReport {
    fn new(layer: &str, method: MergeMethod, rows: usize, cols: usize) -> Self {
        Self {
            layer: layer.to_string(),
            method,
            rows,
            cols,
            omega: None,
            k_l: None,
            retained_rank: None,
            alpha: None,
            clamped: false,
            warnings: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeReport {
    pub method: MergeMethod,
    pub models: usize,
    pub layers: Vec<LayerReport>,
}

/// Matrix view of a rank 0, 1 or 2 shape; vectors are a single row.
fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => unreachable!("only rank <= 2 tensors are merged"),
    }
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    Ok(())
}

fn masked_values(masked: &[MaskedDelta]) -> Vec<&[f64]> {
    masked.iter().map(|m| m.values.as_slice()).collect()
}

/// Element-wise operators, on flattened tensors.
fn baseline(
    name: &str,
    base: &[f64],
    models: &[Vec<f64>],
    deltas: &[Vec<f64>],
    plan: &MergePlan,
) -> Result<Vec<f64>> {
    let dare = |i: usize, d: &Vec<f64>| dare_drop(d, plan.drop_p, dare_seed(plan.seed, name, i));
    let breadcrumbs = |d: &Vec<f64>| breadcrumbs_mask(d, plan.top_discard, plan.bottom_discard);
    let ties = |masked: &[MaskedDelta]| -> Result<Vec<f64>> {
        let update = ties_combine(masked, plan.lambda)?;
        Ok(base.iter().zip(update).map(|(b, u)| b + u).collect())
    };
    match plan.method {
        MergeMethod::WeightAverage => weight_average(models, &plan.weights_for(models.len())),
        MergeMethod::TaskArithmetic => task_arithmetic(base, deltas, plan.lambda),
        MergeMethod::Ties => ties(
            &deltas
                .iter()
                .map(|d| topk_mask(d, plan.density))
                .collect::<Result<Vec<_>>>()?,
        ),
        MergeMethod::Dare => {
            let masked = deltas
                .iter()
                .enumerate()
                .map(|(i, d)| dare(i, d))
                .collect::<Result<Vec<_>>>()?;
            task_arithmetic(base, &masked_values(&masked), plan.lambda)
        }
        MergeMethod::DareTies => ties(
            &deltas
                .iter()
                .enumerate()
                .map(|(i, d)| dare(i, d))
                .collect::<Result<Vec<_>>>()?,
        ),
        MergeMethod::Breadcrumbs => {
            let masked = deltas.iter().map(breadcrumbs).collect::<Result<Vec<_>>>()?;
            task_arithmetic(base, &masked_values(&masked), plan.lambda)
        }
        MergeMethod::BreadcrumbsTies => {
            ties(&deltas.iter().map(breadcrumbs).collect::<Result<Vec<_>>>()?)
        }
        MergeMethod::Tsvm | MergeMethod::Resm => {
            unreachable!("handled by the singular-vector path")
        }
    }
}

fn vector_layer(
    base: &[f64],
    deltas: &[Vec<f64>],
    plan: &MergePlan,
    report: &mut LayerReport,
) -> Result<Vec<f64>> {
    match plan.vector_policy() {
        VectorPolicy::BasePassthrough => Ok(base.to_vec()),
        VectorPolicy::UniformTa => task_arithmetic(base, deltas, plan.lambda),
        VectorPolicy::AlphaTa => {
            let rows: Vec<_> = deltas
                .iter()
                .map(|d| from_row_major(1, d.len(), d))
                .collect();
            let params: &ResmParams = &plan.resm;
            let alpha = params.alpha(&rows)?;
            report.omega = Some(layer_sparsity(&rows, params.epsilon)?);
            let weighted: Vec<Vec<f64>> = deltas
                .iter()
                .zip(&alpha)
                .map(|(d, a)| d.iter().map(|x| a * params.scale * x).collect())
                .collect();
            report.alpha = Some(alpha);
            task_arithmetic(base, &weighted, 1.0)
        }
    }
}

fn matrix_layer(
    base: &[f64],
    deltas: &[Vec<f64>],
    rows: usize,
    cols: usize,
    plan: &MergePlan,
    report: &mut LayerReport,
) -> Result<Vec<f64>> {
    let base_m = from_row_major(rows, cols, base);
    let delta_m: Vec<_> = deltas
        .iter()
        .map(|d| from_row_major(rows, cols, d))
        .collect();
    let outcome = match plan.method {
        MergeMethod::Tsvm => {
            let k = plan
                .k_fixed
                .unwrap_or_else(|| (rows.min(cols) / deltas.len()).max(1));
            tsvm_layer(&base_m, &delta_m, k)?
        }
        _ => resm_layer(&base_m, &delta_m, &plan.resm)?,
    };
    report.retained_rank = Some(outcome.retained_rank);
    report.clamped = outcome.clamped;
    report.warnings.extend(outcome.warnings);
    if let Some(stats) = outcome.stats {
        report.omega = Some(stats.omega);
        report.k_l = Some(stats.rank_k);
        report.alpha = Some(stats.alpha);
    }
    Ok(to_row_major(&outcome.merged))
}

fn merge_entry(
    entry: &ManifestEntry,
    base: &dyn TensorSource,
    models: &[&dyn TensorSource],
    plan: &MergePlan,
) -> Result<(TensorRecord, LayerReport)> {
    let name = entry.name.as_str();
    let base_rec = base.load(name)?;
    if !entry.mergeable {
        let mut report = LayerReport::new(name, plan.method, 0, 0);
        report.warnings.push(format!(
            "rank-{} tensor copied from the base",
            entry.shape.len()
        ));
        return Ok((base_rec.into_owned(), report));
    }
    let (rows, cols) = matrix_dims(&entry.shape);
    let mut report = LayerReport::new(name, plan.method, rows, cols);

    let base_vals = base_rec.to_f64();
    check_finite(&base_vals)?;
    let model_vals = models
        .iter()
        .map(|m| {
            let v = m.load(name)?.to_f64();
            check_finite(&v)?;
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    let deltas: Vec<Vec<f64>> = model_vals
        .iter()
        .map(|m| m.iter().zip(&base_vals).map(|(x, b)| x - b).collect())
        .collect();

    let merged = if !plan.method.is_svd_based() {
        baseline(name, &base_vals, &model_vals, &deltas, plan)?
    } else if entry.shape.len() == 2 {
        matrix_layer(&base_vals, &deltas, rows, cols, plan, &mut report)?
    } else {
        vector_layer(&base_vals, &deltas, plan, &mut report)?
    };
    let record = TensorRecord::from_f64(name, entry.dtype, entry.shape.clone(), &merged)?;
    Ok((record, report))
}

fn compatible(
    base: &dyn TensorSource,
    models: &[&dyn TensorSource],
    plan: &MergePlan,
) -> Result<LayerManifest> {
    plan.validate_params(models.len())?;
    let mut all = vec![base];
    all.extend_from_slice(models);
    let manifest = validate_compat(&all)?;
    if !plan.passthrough_high_rank {
        if let Some(e) = manifest.entries.iter().find(|e| !e.mergeable) {
            return Err(Error::UnsupportedRank {
                name: e.name.clone(),
                rank: e.shape.len(),
            });
        }
    }
    Ok(manifest)
}

/// Merges every tensor of `manifest`, handing finished tensors to `sink` in
/// manifest order. Layers run on a pool of `threads` workers a bounded
/// chunk at a time, so at most a few layers are resident at once.
pub fn merge_manifest(
    manifest: &LayerManifest,
    base: &dyn TensorSource,
    models: &[&dyn TensorSource],
    plan: &MergePlan,
    threads: usize,
    mut sink: impl FnMut(TensorRecord) -> Result<()>,
) -> Result<MergeReport> {
    let threads = threads.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    let mut layers = Vec::with_capacity(manifest.entries.len());
    for chunk in manifest.entries.chunks(2 * threads) {
        let results: Vec<Result<(TensorRecord, LayerReport)>> = pool.install(|| {
            chunk
                .par_iter()
                .map(|e| merge_entry(e, base, models, plan).map_err(|err| err.in_layer(&e.name)))
                .collect()
        });
        for result in results {
            let (record, report) = result?;
            log::debug!("merged {}", report.layer);
            sink(record)?;
            layers.push(report);
        }
    }
    Ok(MergeReport {
        method: plan.method,
        models: models.len(),
        layers,
    })
}

/// In-memory merge. Paths in `plan` are ignored.
pub fn merge_model(
    base: &Checkpoint,
    models: &[Checkpoint],
    plan: &MergePlan,
) -> Result<(Checkpoint, MergeReport)> {
    let refs: Vec<&dyn TensorSource> = models.iter().map(|m| m as &dyn TensorSource).collect();
    let manifest = compatible(base, &refs, plan)?;
    let mut out = Checkpoint::new();
    out.set_metadata(base.metadata().cloned());
    let threads = plan.threads.unwrap_or_else(default_threads);
    let report = merge_manifest(&manifest, base, &refs, plan, threads, |rec| out.insert(rec))?;
    Ok((out, report))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// File-backed merge: inputs are read one tensor at a time, the output is
/// streamed to a temporary file, and both the checkpoint and
/// `<output>.report.json` appear only if every layer succeeds.
pub fn run_merge(plan: &MergePlan) -> Result<MergeReport> {
    plan.validate()?;
    let base = LazyCheckpoint::open(&plan.base_path)?;
    let models = plan
        .model_paths
        .iter()
        .map(LazyCheckpoint::open)
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&dyn TensorSource> = models.iter().map(|m| m as &dyn TensorSource).collect();
    let manifest = compatible(&base, &refs, plan)?;

    let layout: Vec<_> = manifest
        .entries
        .iter()
        .map(|e| (e.name.clone(), e.dtype, e.shape.clone()))
        .collect();
    let mut writer = CheckpointWriter::create(&plan.output_path, &layout, base.metadata())?;
    let threads = plan.threads.unwrap_or_else(default_threads);
    let report = merge_manifest(&manifest, &base, &refs, plan, threads, |rec| {
        writer.write_tensor(&rec)
    })?;

    let report_path = plan.report_path();
    let dir = parent_dir(&report_path);
    let mut tmp = tempfile::Builder::new()
        .prefix(".resm-partial-")
        .tempfile_in(&dir)
        .map_err(|e| Error::io(&dir, e))?;
    let json =
        serde_json::to_vec_pretty(&report).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    tmp.write_all(&json)
        .map_err(|e| Error::io(&report_path, e))?;
    writer.finish()?;
    if let Err(e) = tmp.persist(&report_path) {
        let _ = std::fs::remove_file(&plan.output_path);
        return Err(Error::io(&report_path, e.error));
    }
    log::info!(
        "wrote {} and {}",
        plan.output_path.display(),
        report_path.display()
    );
    Ok(report)
}
