//! Scalar abstraction for the numeric core.
//!
//! Scores, sampling weights and the EMA dynamics are written once against
//! [`Scalar`] and instantiated for `f32` and `f64`. Pixel geometry and colour
//! math stay in `f64`/integers so rendered output is bit-exact.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub trait Scalar:
    'static
    + Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
{
    /// Converts an `f64` literal or measurement into this scalar.
    #[inline]
    fn lit(x: f64) -> Self {
        // f32/f64 conversions from f64 are total.
        Self::from_f64(x).unwrap()
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).unwrap()
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    fn half<T: Scalar>() -> T {
        T::lit(1.0) / T::from_count(2)
    }

    #[test]
    fn literals_round_trip_for_both_widths() {
        assert_eq!(half::<f32>(), 0.5f32);
        assert_eq!(half::<f64>(), 0.5f64);
        assert_eq!(f32::lit(0.25).as_f64(), 0.25);
    }
}
