//! Multi-behavior recommendation with auxiliary-behavior denoising and
//! prompt tuning.
//!
//! The pipeline runs in three stages over a set of per-behavior user-item
//! graphs, the last behavior being the target:
//!
//! 1. A pattern-enhanced graph encoder is trained jointly on a BPR ranking
//!    objective and an edge-reconstruction objective. Auxiliary edges the
//!    decoder cannot reconstruct are pruned, giving a denoised graph.
//! 2. Embeddings are frozen and only the readout is re-initialized and
//!    retrained on the denoised graph.
//! 3. Everything is frozen except the target-behavior embedding, which feeds
//!    a prompt vector injected into the target branch of the encoder.
//!
//! [`numcore`] holds the gradient engine the rest is built on.

pub mod checkpoint;
pub mod config;
pub mod denoise;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graphs;
pub mod ingest;
pub mod numcore;
pub mod pipeline;

pub use error::{Error, Result};
