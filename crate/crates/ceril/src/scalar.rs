//! Floating-point scalar abstraction for the differentiable core.
//!
//! Network layers, the tape, and the optimizer are generic over [`Scalar`]
//! so gradient-check suites can run the same code in f32 and f64. The
//! simulation side (physics, rendering, event generation) is fixed f64:
//! event timestamps and determinism contracts do not vary with network
//! precision.

use std::fmt::{Debug, Display};

/// Scalar type for tensors, parameters and losses: f32 or f64.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from f64 (exact for f64, rounded for f32).
    fn from_f64_lossy(v: f64) -> Self;
    /// Widening conversion to f64 (exact for both).
    fn to_f64_lossy(self) -> f64;
    /// Short name used in logs and diagnostics.
    const NAME: &'static str;
}

impl Scalar for f32 {
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
    const NAME: &'static str = "f64";
}

/// Default training precision.
pub type DefaultScalar = f32;
