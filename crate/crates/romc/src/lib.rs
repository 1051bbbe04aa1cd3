//! romc compresses transformer checkpoints without training: each planned
//! projection is re-parameterized into two low-rank factors spanning the
//! top principal components of its calibration-time output activations,
//! processed one layer at a time so earlier replacements inform later
//! decompositions.

pub mod error;
pub mod modelgraph;
pub mod pipeline;
pub mod planner;
pub mod romcore;
pub mod tensorstore;
pub mod toygen;

pub use error::{Error, Result};
