//! Tape-based reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records a computation as it is built; [`Tape::backward`] then
//! walks the recording in reverse and accumulates gradients for every node
//! that requires them. The op set is the minimum needed for convolutional
//! image-to-image networks and their losses: convolution (plain and
//! transposed), instance normalization, 2x2 max pooling, channel concat,
//! spatial slicing, pointwise nonlinearities, and scalar reductions.
//!
//! Everything is single-threaded and allocation order is deterministic, so
//! a fixed input always produces bit-identical values and gradients.

pub mod adam;
pub mod check;
pub mod kernels;
pub mod tape;

pub use adam::Adam;
pub use tape::{Gradients, Tape, Var};

/// Element type the tape can differentiate through (`f32` or `f64`).
pub trait Scalar: ndarray::NdFloat + num_traits::FromPrimitive + 'static {
    /// Convert an f64 literal into this scalar type.
    fn lit(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("finite literal")
    }
    /// Widen to f64 for reporting and tolerance checks.
    fn widen(self) -> f64;
}

impl Scalar for f32 {
    fn widen(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn widen(self) -> f64 {
        self
    }
}
