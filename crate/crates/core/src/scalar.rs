//! Scalar abstraction shared by the dense kernels and the training engine.
//!
//! Training runs in `f32`; gradient and forward checks run the same code in
//! `f64`. Both can emulate half-precision storage by rounding stored values
//! through IEEE binary16.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; never fails for finite inputs.
    fn of(v: f64) -> Self;

    /// Nearest value representable in IEEE binary16, widened back to `Self`.
    fn round_to_half(self) -> Self;

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn round_to_half(self) -> Self {
        half::f16::from_f32(self).to_f32()
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn round_to_half(self) -> Self {
        half::f16::from_f64(self).to_f64()
    }
}

/// Storage precision for weights and cached activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Native precision of the scalar type.
    #[default]
    Native,
    /// Every stored weight and activation is rounded to binary16.
    Half,
}

impl Precision {
    #[inline]
    pub fn store<T: Scalar>(self, v: T) -> T {
        match self {
            Precision::Native => v,
            Precision::Half => v.round_to_half(),
        }
    }

    pub fn store_all<T: Scalar>(self, vs: &mut [T]) {
        if self == Precision::Half {
            for v in vs {
                *v = v.round_to_half();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_rounding_is_nearest() {
        // 1 + 2^-11 sits exactly between 1 and the next binary16 value; ties go to even.
        assert_eq!((1.0f32 + 2f32.powi(-11)).round_to_half(), 1.0);
        assert_eq!((1.0f32 + 3.0 * 2f32.powi(-11)).round_to_half(), 1.0 + 2f32.powi(-9));
        assert_eq!(0.1f64.round_to_half(), 0.0999755859375);
    }

    #[test]
    fn native_precision_is_identity() {
        let x = 0.123_456_79f32;
        assert_eq!(Precision::Native.store(x), x);
        assert_ne!(Precision::Half.store(x), x);
    }
}
