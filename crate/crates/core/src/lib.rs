//! Uncertainty-aware approximate nearest neighbor retrieval.
//!
//! The crate covers the full candidate-generation pipeline:
//!
//! - [`types`] / [`io`]: interaction logs, embedding tables, file formats.
//! - [`uncertainty`]: score/variance estimation heads.
//! - [`swing`]: user-pair co-occurrence similarity for training positives.
//! - [`model`]: a jointly trained two-tower scorer with uncertainty heads.
//! - [`hnsw`]: a layered small-world graph index.
//! - [`unindex`]: variance-aware edge reweighting and pruning of that graph.
//! - [`retrieval`]: fusion-scored beam search over the index.
//! - [`eval`]: metrics, a synthetic data generator, and the ablation harness.
//!
//! Everything is deterministic under a seed: same inputs, same seed, same
//! bytes out.

pub mod error;
pub mod eval;
pub mod hnsw;
pub mod io;
pub mod model;
pub mod retrieval;
pub mod scorer;
pub mod stable_hash;
pub mod swing;
pub mod types;
pub mod uncertainty;
pub mod unindex;

pub use error::{Error, Result};
