//! Scalar abstraction shared by the engine, the metrics and the statistics.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

use crate::bf16::Bf16Pattern;

/// Working-precision floating point type: `f32` or `f64`.
///
/// Besides the usual float arithmetic a scalar knows how to round itself to a
/// bfloat16 storage pattern and how to widen a pattern back, which is all the
/// KV store needs.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Round to the nearest bfloat16 pattern (ties to even).
    fn to_bf16(self) -> Bf16Pattern;

    /// Exact widening of a bfloat16 pattern.
    fn from_bf16(pattern: Bf16Pattern) -> Self;

    /// Lossless-for-small-integers conversion used by counting code.
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable as float")
    }
}

/// Convert a literal; panics only for values no float type can hold.
pub(crate) fn lit<T: FromPrimitive>(x: f64) -> T {
    T::from_f64(x).expect("literal representable")
}
