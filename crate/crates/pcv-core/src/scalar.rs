//! Scalar abstraction for all numerical code.
//!
//! Everything in this crate is written against [`Scalar`], which bundles the
//! nalgebra [`RealField`] operations with `num-traits` conversions and the
//! standard normal distribution functions needed by the pricing formulas. The
//! two floating point types implement it; `f64` is the default used by the
//! CLI and by the crate-root aliases.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar usable in every matrix computation of this crate.
pub trait Scalar:
    RealField + FromPrimitive + ToPrimitive + Copy + std::iter::Sum<Self> + Default
{
    /// Lossless-enough conversion from `f64` (used for literal constants and
    /// tolerances; panics only if the target type cannot represent ordinary
    /// finite constants, which cannot happen for `f32`/`f64`).
    fn from_f64_c(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 constant must convert to Scalar")
    }

    /// Conversion to `f64` for reporting and I/O.
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("Scalar must convert to f64")
    }

    /// Standard normal cumulative distribution function.
    ///
    /// Routed through `f64`: `f32 -> f64` is exact and the final rounding back
    /// is the correctly rounded `f32` answer, so both instantiations inherit
    /// the ~1e-16 relative accuracy of the underlying `erfc`.
    fn norm_cdf(self) -> Self {
        Self::from_f64_c(norm_cdf_f64(self.to_f64_c()))
    }

    /// Standard normal probability density function.
    fn norm_pdf(self) -> Self {
        let x = self.to_f64_c();
        Self::from_f64_c((-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt())
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Standard normal CDF in double precision, `Phi(x) = erfc(-x / sqrt(2)) / 2`.
///
/// `libm::erfc` is accurate to about one ulp, which the complementary form
/// preserves in the far tails (no cancellation for large |x|).
pub fn norm_cdf_f64(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Shorthand for converting an `f64` constant into a generic scalar.
pub fn cst<S: Scalar>(x: f64) -> S {
    S::from_f64_c(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_cdf_reference_values() {
        // Abramowitz & Stegun style reference points.
        assert!((norm_cdf_f64(0.0) - 0.5).abs() < 1e-15);
        assert!((norm_cdf_f64(1.0) - 0.841344746068543).abs() < 1e-12);
        assert!((norm_cdf_f64(-1.0) - 0.158655253931457).abs() < 1e-12);
        assert!((norm_cdf_f64(3.0) - 0.998650101968370).abs() < 1e-12);
    }

    #[test]
    fn normal_cdf_symmetry() {
        for i in 0..200 {
            let x = -5.0 + 0.05 * i as f64;
            let s = norm_cdf_f64(x) + norm_cdf_f64(-x);
            assert!((s - 1.0).abs() < 1e-14, "x={x}: {s}");
        }
    }

    #[test]
    fn f32_route_matches_f64() {
        let x: f32 = 0.7;
        let got = x.norm_cdf();
        let want = norm_cdf_f64(0.7f32 as f64) as f32;
        assert_eq!(got, want);
    }
}
