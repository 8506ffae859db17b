//! Sequential block-wise pairwise ranking for implicit feedback.
//!
//! The crate is organised the way data flows through a run:
//!
//! * [`ingest`] parses interaction logs, binarizes ratings, builds time-ordered
//!   per-user sessions and temporal train/test splits.
//! * [`blocks`] segments a session into update blocks (negatives closed by a
//!   positive, or the symmetric case).
//! * [`model`] holds the user/item embeddings, the regularized logistic pair
//!   loss and its gradient, and checkpoint IO.
//! * [`optimizers`] contains the block-wise sequential trainer together with
//!   the sampled-pair, full-batch, least-squares and popularity baselines.
//! * [`metrics`] computes MAP@K, NDCG@K and the held-out ranking loss.
//! * [`diagnostics`] runs the Monte-Carlo and convergence checks on synthetic
//!   data and exports block-distribution summaries.

pub mod blocks;
pub mod diagnostics;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod optimizers;

pub use error::{Error, Result};
