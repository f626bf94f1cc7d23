//! Attention-based sequential recommendation over heterogeneous fashion
//! entities (articles, outfits, influencers).
//!
//! The crate is organised bottom-up:
//!
//! - [`numkit`]: tensors, reverse-mode differentiation, Adam.
//! - [`datamodel`]: catalog and interaction schema, time split, sequence
//!   construction, synthetic data generation and the JSONL file formats.
//! - [`embedder`]: per-position inputs (item features, session, action,
//!   context tokens).
//! - [`encoder`]: causal transformer, next-item head and checkpoints.
//! - [`trainer`]: target masking, the five losses and the training loop.
//! - [`reranker`]: serving policies, top-k, and freshness re-ranking.
//! - [`metrics`]: relevance, freshness and diversity measures plus the
//!   evaluation driver.
//! - [`baselines`]: popularity, item-based CF, embedding kNN and the IDs-only
//!   sequence model configuration.
//! - [`experiments`]: end-to-end desk-scale comparisons.

pub mod numkit;
pub mod datamodel;
pub mod embedder;
pub mod encoder;
pub mod trainer;
pub mod reranker;
pub mod metrics;
pub mod baselines;
pub mod experiments;
pub mod par;
pub mod seed;
#[doc(hidden)]
pub mod testkit;

use thiserror::Error as ThisError;

/// Error type shared by the model, training and evaluation layers.
#[derive(Debug, ThisError)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] numkit::NumError),
    #[error(transparent)]
    Data(#[from] datamodel::DataError),
    #[error("{what} {index} out of range (bound {bound})")]
    Index { what: String, index: usize, bound: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
