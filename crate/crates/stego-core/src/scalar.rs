//! Scalar abstraction for the numeric core.
//!
//! Every tensor kernel, network, loss, and metric in this crate is generic
//! over [`Scalar`], so the same code runs in `f32` for training throughput
//! and in `f64` for finite-difference gradient verification.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssign};
use serde::{de::DeserializeOwned, Serialize};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type usable throughout the numeric core.
pub trait Scalar:
    Float
    + NumAssign
    + ScalarOperand
    + LinalgScalar
    + Sum
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + Debug
    + Display
    + 'static
{
    /// Lossy conversion from `f64` (hyperparameters, tolerances, literals).
    fn from_f64(v: f64) -> Self;

    /// Widening conversion to `f64` (metric accumulation, reporting).
    fn to_f64(self) -> f64;

    /// Conversion from `usize` (element counts used in mean reductions).
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip<S: Scalar>(v: f64) -> f64 {
        S::from_f64(v).to_f64()
    }

    #[test]
    fn conversions_are_exact_for_small_integers() {
        for v in [-3.0, -1.0, 0.0, 0.5, 1.0, 2.0, 1024.0] {
            assert_eq!(roundtrip::<f32>(v), v);
            assert_eq!(roundtrip::<f64>(v), v);
        }
        assert_eq!(f32::from_usize(7), 7.0f32);
        assert_eq!(f64::from_usize(7), 7.0f64);
    }
}
