//! Pixel-level self-supervised representation learning at desk scale.
//!
//! The crate implements the full pipeline: exact view-geometry
//! correspondence between augmented crops, a small convolutional encoder
//! pair (online + momentum) with a pixel propagation module, consistency
//! and contrastive training objectives, a LARS training loop with
//! deterministic checkpointing, and evaluation probes (linear probe,
//! pixel-correspondence retrieval, collapse diagnostics).

pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod objectives;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod viewgen;

pub use error::{PixproError, TensorError};
pub use tensor::Tensor;
