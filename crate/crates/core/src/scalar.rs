//! Scalar abstraction shared by the PIM engine and the latency models.
//!
//! Functional GEMV runs either in floating point (BF16 storage, 32-bit
//! accumulation) or in exact rational arithmetic so that results can be
//! compared bit-for-bit against an oracle. Latency arithmetic uses the same
//! trait, which lets the t-unit overhead table and the serial-composition
//! identities be checked without round-off.

use std::fmt::Debug;

use half::bf16;
use num_bigint::BigInt;
use num_rational::{BigRational, Ratio};
use num_traits::{Float, Num, Signed, ToPrimitive, Zero};

/// Number type the simulator can compute in.
pub trait Scalar: Clone + Debug + PartialOrd + Num + Signed + Send + Sync + 'static {
    /// Converts a real value. Rational implementations are exact for every
    /// finite binary value they can represent and panic otherwise.
    fn from_real(x: f64) -> Self;

    /// Nearest `f64`.
    fn to_real(&self) -> f64;

    /// Rounds an accumulated value to element storage precision (BF16).
    /// Exact implementations return the value unchanged.
    fn round_to_element(&self) -> Self;

    fn from_bf16(h: bf16) -> Self {
        Self::from_real(h.to_f64())
    }

    fn from_count(n: u64) -> Self {
        Self::from_real(n as f64)
    }

    /// Larger of two values (first one on ties).
    fn max_of(a: Self, b: Self) -> Self {
        if b > a {
            b
        } else {
            a
        }
    }
}

impl Scalar for f32 {
    fn from_real(x: f64) -> Self {
        x as f32
    }

    fn to_real(&self) -> f64 {
        *self as f64
    }

    fn round_to_element(&self) -> Self {
        bf16::from_f32(*self).to_f32()
    }
}

impl Scalar for f64 {
    fn from_real(x: f64) -> Self {
        x
    }

    fn to_real(&self) -> f64 {
        *self
    }

    fn round_to_element(&self) -> Self {
        bf16::from_f64(*self).to_f64()
    }
}

impl Scalar for Ratio<i64> {
    fn from_real(x: f64) -> Self {
        dyadic_i64(x).unwrap_or_else(|| panic!("{x} is not representable as Ratio<i64>"))
    }

    fn to_real(&self) -> f64 {
        self.numer().to_f64().unwrap_or(f64::NAN) / self.denom().to_f64().unwrap_or(f64::NAN)
    }

    fn round_to_element(&self) -> Self {
        *self
    }
}

impl Scalar for BigRational {
    fn from_real(x: f64) -> Self {
        BigRational::from_float(x).unwrap_or_else(|| panic!("{x} is not finite"))
    }

    fn to_real(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn round_to_element(&self) -> Self {
        self.clone()
    }

    fn from_count(n: u64) -> Self {
        BigRational::from_integer(BigInt::from(n))
    }
}

fn dyadic_i64(x: f64) -> Option<Ratio<i64>> {
    if !x.is_finite() {
        return None;
    }
    if x.is_zero() {
        return Some(Ratio::from_integer(0));
    }
    let (mut mantissa, mut exponent, sign) = Float::integer_decode(x);
    let shift = mantissa.trailing_zeros().min(63);
    mantissa >>= shift;
    exponent += shift as i16;
    let mantissa = i64::try_from(mantissa).ok()? * i64::from(sign);
    if exponent >= 0 {
        let scale = 1i64.checked_shl(exponent as u32).filter(|_| exponent < 63)?;
        mantissa.checked_mul(scale).map(Ratio::from_integer)
    } else {
        let e = (-exponent) as u32;
        if e > 62 {
            return None;
        }
        Some(Ratio::new(mantissa, 1i64 << e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_conversion_is_exact_for_bf16_values() {
        for bits in [0x3f80u16, 0xbf00, 0x3e20, 0x4120, 0x0000, 0x3c01] {
            let h = bf16::from_bits(bits);
            let r = <Ratio<i64>>::from_bf16(h);
            assert_eq!(r.to_real(), h.to_f64(), "bits {bits:#x}");
        }
        assert_eq!(<Ratio<i64>>::from_real(0.375), Ratio::new(3, 8));
        assert_eq!(<Ratio<i64>>::from_real(-12.0), Ratio::from_integer(-12));
    }

    #[test]
    fn big_rational_keeps_decimal_inputs_exactly() {
        let a = BigRational::from_real(2.87e9);
        assert_eq!(a, BigRational::from_integer(BigInt::from(2_870_000_000u64)));
    }

    #[test]
    #[should_panic]
    fn ratio_rejects_unrepresentable() {
        let _ = <Ratio<i64>>::from_real(1e-30);
    }

    #[test]
    fn float_rounding_goes_to_bf16() {
        let x = 1.0f32 + 1.0 / 512.0;
        assert_eq!(x.round_to_element(), 1.0);
        assert_eq!(Ratio::new(1i64, 3).round_to_element(), Ratio::new(1, 3));
    }
}
