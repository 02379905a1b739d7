//! Interaction, similarity and embedding matrices plus the two kernels the
//! pipeline needs: sparse row products and deterministic top-K selection.

mod embedding;
mod interactions;
mod kernels;
mod similarity;

pub use embedding::EmbeddingTable;
pub use interactions::{csr_from_triplets, Entry, InteractionMatrix, Provenance, Row};
pub use kernels::{row_topk, score_row_into, spmm_rows, topk_excluding_sorted, topk_filtered, ScoreVector};
pub use similarity::SimilarityMatrix;
