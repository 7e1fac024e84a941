//! CPU-only semantic-labeling micro-framework.
//!
//! The crate implements a small deep-learning stack from scratch — dense
//! `f64` tensors, the layer kernels with hand-written backward passes, a
//! static layer graph with reverse-mode differentiation — and on top of it
//! a cascade-context segmentation network: a VGG-style encoder, dilated
//! multi-scale context aggregation fused coarse-to-fine, residual
//! correction blocks, and a bilinear upsampling classifier head. Around
//! the model sit the pieces a full experiment needs: SGD training with a
//! stepped learning-rate schedule, multi-scale tiled inference, synthetic
//! scene generation, and boundary-eroded segmentation metrics.
//!
//! Everything is deterministic: every random decision derives its seed
//! from the run seed and the coordinates of the decision (see [`rng`]),
//! so identical configurations reproduce identical bytes on disk.

pub mod blocks;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod infer;
pub mod layers;
pub mod model;
pub mod pnm;
pub mod rng;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{elementwise_sum, GradPair, LabelMap, Tensor};
