//! Multi-scale matching network for semantic correspondence.
//!
//! The pipeline matches keypoints between image pairs with coarse-to-fine
//! 4-D correlation: a small pyramid encoder produces multi-resolution
//! features, the decoder enhances them within and across scales (dilated
//! convolution branches plus local self-attention), and matching scores are
//! accumulated top-down by adding per-scale residual correlations to the
//! bicubically upscaled coarser scores. Training minimizes a bidirectional
//! binary cross-entropy objective over matching probability maps at every
//! decoder scale.
//!
//! Everything runs on a minimal reverse-mode tensor tape ([`tape`]) so the
//! whole network is trainable end to end on CPU, in `f64` for gradient
//! verification and `f32` for speed.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod elem;
pub mod encoder;
pub mod enhance;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod matching;
pub mod model;
pub mod supervision;
pub mod tape;
pub mod tensor;
pub mod verify;

pub use elem::Element;
pub use error::{Error, Result};
pub use tape::{GradientTape, Var};
pub use tensor::Tensor;
