//! Scalar math shim.
//!
//! All inexact transcendentals are routed through `libm` on every build so
//! that results are bitwise identical with and without the `std` feature
//! (std's `f64::exp` etc. call the platform libm, which may differ in the
//! last ulp from the `libm` crate). Operations that IEEE 754 requires to be
//! correctly rounded (sqrt, floor, round, abs) use the std intrinsics when
//! available — hardware instructions and the software fallback agree bit for
//! bit there.

/// Natural exponential.
#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

/// Natural logarithm.
#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

/// `x^y` for real exponents.
#[inline]
pub fn powf(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

/// Error function, used by the exact-Gaussian GELU.
#[inline]
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Sine.
#[inline]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

/// Cosine.
#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

/// Square root (correctly rounded in both implementations).
#[inline]
pub fn sqrt(x: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        x.sqrt()
    }
    #[cfg(not(feature = "std"))]
    {
        libm::sqrt(x)
    }
}

/// Absolute value (exact).
#[inline]
pub fn abs(x: f64) -> f64 {
    f64::from_bits(x.to_bits() & 0x7fff_ffff_ffff_ffff)
}

/// Floor (exact).
#[inline]
pub fn floor(x: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        x.floor()
    }
    #[cfg(not(feature = "std"))]
    {
        libm::floor(x)
    }
}

/// Round half away from zero (exact).
#[inline]
pub fn round(x: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        x.round()
    }
    #[cfg(not(feature = "std"))]
    {
        libm::round(x)
    }
}

/// 1/√(2π), the standard normal density at 0.
pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// 1/√2, used to evaluate the Gaussian CDF via erf.
pub const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;

/// Standard normal CDF Φ(x) = ½(1 + erf(x/√2)).
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * FRAC_1_SQRT_2))
}

/// Standard normal density φ(x).
#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * exp(-0.5 * x * x)
}

/// Exact-Gaussian GELU: x·Φ(x).
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * norm_cdf(x)
}

/// Derivative of the exact-Gaussian GELU: Φ(x) + x·φ(x).
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    norm_cdf(x) + x * norm_pdf(x)
}
