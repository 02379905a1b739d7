//! Dual-view collaborative filtering.
//!
//! A sparse item-item model (SLIM) and a dense matrix-factorization model are
//! trained on the same implicit-feedback matrix, each augmented with
//! pseudo-positives proposed by the other, and fused by a weighted sum of
//! their scores. The crate also carries the evaluation harness (all-items
//! Recall/NDCG, popularity buckets, margin SNR) and a set of closed-form and
//! Monte-Carlo checks of the signal-to-noise analysis behind the fusion.

pub mod align;
pub mod data;
pub mod dense;
pub mod error;
pub mod eval;
pub mod matrix;
pub mod pipeline;
pub mod scoring;
pub mod sparse;
pub mod theory;

pub use error::{Error, Result};
pub use matrix::{
    csr_from_triplets, row_topk, spmm_rows, EmbeddingTable, Entry, InteractionMatrix, Provenance,
    ScoreVector, SimilarityMatrix,
};
pub use align::AlignConfig;
pub use data::{load_dataset, Dataset, Format, LoadOptions};
pub use dense::{train_mf, MfConfig, Optimizer};
pub use eval::{evaluate, FusionConfig, MetricsReport, SnrReport};
pub use pipeline::{run_ablation, run_pipeline, PipelineConfig, Stage};
pub use scoring::{DenseScorer, FusedScorer, Scorer, SparseScorer};
pub use sparse::{fit_slim, SlimConfig};
pub use theory::{run_theory_lab, TheoryReport};
