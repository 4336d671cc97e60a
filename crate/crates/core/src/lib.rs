//! Smoothed dilated 2-D convolutions.
//!
//! The crate provides dilated convolutions preceded by per-channel
//! interpolation filters (average, Gaussian, learned, or a trained convex
//! combination of those), reverse-mode gradients for all of them, an exact
//! gridding-artifact analyzer, a desk-scale synthetic segmentation
//! pipeline, and a per-step training-time benchmark.

pub mod aggregate;
pub mod autodiff;
pub mod bench;
pub mod conv;
pub mod error;
pub mod gridding;
pub mod segmentation;
pub mod tensor;

pub use aggregate::{AggregatedFilter, AlphaTrajectory};
pub use autodiff::{GradTape, Gradients, Var};
pub use conv::{ConvSpec, ConvWeights, FilterKind, Padding, SmoothingFilter};
pub use error::{Error, Result};
pub use tensor::{Rng, Shape, Tensor};
