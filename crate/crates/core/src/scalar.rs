//! Scalar abstraction for the numeric core.
//!
//! Matrix math, the tiny reference backend, the vector index, and the
//! perplexity accumulator are generic over [`Scalar`] so the same code runs
//! at `f32` (the on-disk payload type) and at `f64` (for oracle
//! cross-checks in tests). Concrete aliases live at the crate root.

use num_traits::{Float, FromPrimitive, NumCast, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + core::ops::AddAssign
    + core::ops::SubAssign
    + core::ops::MulAssign
    + core::iter::Sum
    + Default
    + core::fmt::Debug
    + core::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn of_f64(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("finite f64 converts to scalar")
    }

    fn of_f32(x: f32) -> Self {
        <Self as NumCast>::from(x).expect("finite f32 converts to scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    fn as_f32(self) -> f32 {
        self.to_f32().expect("scalar converts to f32")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
