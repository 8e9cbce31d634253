//! Unpaired image-to-image translation with explicit handling of content
//! that has no counterpart in the target domain.
//!
//! The crate provides the full pipeline: residual generators split into
//! encoder/decoder halves, a mask predictor that separates matchable from
//! unmatchable latent features, cycle-consistency training with adversarial
//! critics, controlled non-bijective dataset builders, and the evaluation
//! suite (hallucination rates, distribution distances, mask quality).
//!
//! Everything numeric is generic over [`scalar::Scalar`]; use `f32` for
//! training throughput and `f64` for verification work. Concrete aliases
//! for both live at the crate root.

pub mod autograd;
pub mod cycle;
pub mod data;
pub mod domain;
pub mod eval;
pub mod networks;
pub mod objectives;
pub mod scalar;
pub mod training;

pub use scalar::Scalar;

/// Normalized image in `f32`.
pub type Image32 = domain::ImageTensor<f32>;
/// Normalized image in `f64`.
pub type Image64 = domain::ImageTensor<f64>;

/// Computation tape in `f32`, the training precision.
pub type Tape32 = autograd::Tape<f32>;
/// Computation tape in `f64`, the verification precision.
pub type Tape64 = autograd::Tape<f64>;
