//! Scalar types usable for parameter storage and the affine forward pass.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};

/// Floating-point storage scalar: f32 or f64.
///
/// Weight files always carry little-endian f32; a block of a wider scalar
/// widens each value exactly on application.
pub trait Scalar: Float + FromPrimitive + Default + Debug + Send + Sync + 'static {
    /// Bytes of one stored value.
    const BYTES: usize;

    fn from_wire(v: f32) -> Self;
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    #[inline]
    fn from_wire(v: f32) -> Self {
        v
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    #[inline]
    fn from_wire(v: f32) -> Self {
        f64::from(v)
    }
}
