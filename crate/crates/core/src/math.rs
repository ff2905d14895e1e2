//! Float helpers that resolve to `std` when available and to `libm` otherwise.

use num_traits::Float;

#[inline]
pub fn exp(x: f64) -> f64 {
    Float::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    Float::ln(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    Float::sqrt(x)
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    Float::tanh(x)
}

#[inline]
pub fn sin_cos(x: f64) -> (f64, f64) {
    Float::sin_cos(x)
}

#[inline]
pub fn floor(x: f64) -> f64 {
    Float::floor(x)
}

#[inline]
pub fn ceil(x: f64) -> f64 {
    Float::ceil(x)
}

#[inline]
pub fn round(x: f64) -> f64 {
    Float::round(x)
}

#[inline]
pub fn log10(x: f64) -> f64 {
    Float::log10(x)
}

#[inline]
pub fn powi(x: f64, n: i32) -> f64 {
    Float::powi(x, n)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`, stable for large |x|.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        exp(x)
    } else {
        ln(1.0 + exp(x))
    }
}

/// Inverse of [`softplus`] for `y > 0`.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        ln(exp(y) - 1.0)
    }
}
