//! Merging fine-tuned checkpoints that share a base model.
//!
//! Baselines (weight averaging, task arithmetic, TIES, DARE, Breadcrumbs)
//! operate element-wise on task vectors. TSVM and RESM decompose each
//! layer's task matrices, decorrelate their singular vectors jointly across
//! models and rebuild the update at a chosen rank; RESM additionally weights
//! models by their outlier mass and picks the rank from layer sparsity.

pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod fixtures;
pub mod linalg;
pub mod methods;
pub mod plan;
pub mod store;
pub mod task_vector;
pub mod tsv;

pub use engine::{merge_model, run_merge, LayerReport, MergeReport};
pub use error::{Error, Result};
pub use plan::{MergeMethod, MergePlan, VectorPolicy};
pub use store::{Checkpoint, Dtype, LazyCheckpoint, TensorRecord, TensorSource};
pub use task_vector::{LayerStats, ResmParams};
