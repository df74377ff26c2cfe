//! Zero-shot cross-domain retrieval engine.
//!
//! Ranks a gallery of embeddings against query embeddings, refines each
//! query's ranking with an iterative gallery-gallery re-ranking, and scores
//! the result with mAP@k / Prec@k. Reference implementations of the
//! training-time losses and the cross-attention kernel (with a
//! finite-difference gradient checker) live alongside.
//!
//! Numeric modules are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common instantiations.

pub mod attention;
pub mod embedstore;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod ranking;
pub mod rerank;
pub mod scalar;
pub mod synth;

pub use embedstore::{
    l2_normalize, load_embedding_set, save_embedding_set, validate_zero_shot, Domain,
    EmbeddingSet, Label, LabelStorage, SplitManifest, ZeroShotReport,
};
pub use error::{Error, Result};
pub use metrics::{ApDenominator, Cutoff, RetrievalResult};
pub use ranking::{pairwise_distances, rank_rows, DistanceMatrix, RankMatrix};
pub use rerank::{AlphaVariant, GalleryGraph, MLimit, RerankConfig, RerankState, RerankTrace};
pub use scalar::Scalar;

pub type EmbeddingSet32 = EmbeddingSet<f32>;
pub type EmbeddingSet64 = EmbeddingSet<f64>;
pub type DistanceMatrix32 = DistanceMatrix<f32>;
pub type DistanceMatrix64 = DistanceMatrix<f64>;
pub type RerankConfig32 = RerankConfig<f32>;
pub type RerankConfig64 = RerankConfig<f64>;
pub type GalleryGraph32 = GalleryGraph<f32>;
pub type GalleryGraph64 = GalleryGraph<f64>;
pub type AttentionParams32 = attention::AttentionParams<f32>;
pub type AttentionParams64 = attention::AttentionParams<f64>;
pub type DomainBatch32 = losses::DomainBatch<f32>;
pub type DomainBatch64 = losses::DomainBatch<f64>;
