//! Exact cosine retrieval over scene/view embedding databases.
//!
//! The crate is organised around a retrieval pipeline:
//!
//! - [`store`]: the on-disk embedding format (`manifest.json` + `embeddings.bin`),
//!   split construction and a synthetic dataset generator.
//! - [`index`]: exact top-k cosine search over view-level or mean-aggregated
//!   scene-level vectors.
//! - [`metrics`]: MRR@k and Recall@k, averaged over a query set.
//! - [`trainer`]: an MLP head trained with the NT-Xent contrastive loss over
//!   frozen embeddings, with hand-written backpropagation.
//! - [`harness`]: config-driven experiments and ablation sweeps.

pub mod harness;
pub mod index;
mod io;
pub mod metrics;
pub mod seed;
pub mod store;
pub mod trainer;

pub use index::{cosine_similarity, Hit, Index, IndexError, Level, RankedResult};
pub use metrics::{Cutoff, MetricReport, MetricsError, RecallMode};
pub use store::{
    AccessMode, Dataset, DatasetManifest, EmbeddingRecord, SplitMode, SplitSpec, StoreError,
};
pub use trainer::{HeadParams, TrainConfig, TrainError};
