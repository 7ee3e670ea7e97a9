//! Differentiable architecture search for fake-audio detection.
//!
//! A cell-based supernet with a nine-operation candidate set (including a
//! max-feature-map block) is relaxed with per-edge softmax mixtures, searched
//! by alternating Adam steps on weights (training split) and architecture
//! logits (validation split), discretized into a genotype, retrained, and
//! scored with an interpolated equal-error-rate metric. Inputs are
//! precomputed T×F feature matrices read from a small binary format.

pub mod data;
pub mod error;
pub mod eval;
pub mod ops;
pub mod search;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, TensorId};
