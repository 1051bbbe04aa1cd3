//! Matrices, weight archives and calibration batches.

mod archive;
pub mod dtype;
mod matrix;
mod tokens;

pub use archive::{write_archive, write_entries, RawTensor, TensorArchive, TensorEntry};
pub use dtype::Dtype;
pub use matrix::Matrix;
pub use tokens::TokenBatch;
