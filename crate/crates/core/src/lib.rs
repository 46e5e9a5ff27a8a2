//! Multi-component text-to-video retrieval with entropy-weighted fusion.
//!
//! Each query is scored against every video on several components (direct
//! query-video similarity, query against generated descriptions, and
//! prequel/current/sequel events against descriptions). Per-component scores
//! are softmaxed over videos and fused, weighting each component by the
//! inverse of its entropy.

pub mod cache;
pub mod embedding;
pub mod error;
pub mod fusion;
pub mod http;
pub mod io;
pub mod knowledge;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod scoring;
pub mod similarity;
pub mod synthetic;

pub use error::{Error, Result};
pub use fusion::{fuse, fuse_matrix, FusionConfig, FusionMethod};
pub use metrics::{evaluate_run, EvalConfig, MetricReport};
pub use model::{
    ComponentKind, Corpus, DescriptionSet, EventDecomposition, EventKind, FusedRanking,
    QueryRecord, RankedList, RelevanceJudgments, ScoreComponentMatrix, VideoRecord,
};
pub use scoring::{build_score_matrix, Aggregation, AggregationPolicy, ScoringConfig};
pub use similarity::{EmbeddingProvider, TokenEmbeddingSequence};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/similarity.md")]
    mod similarity {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    mod scoring {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/knowledge.md")]
    mod knowledge {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
