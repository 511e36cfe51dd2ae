//! Engine-wide element type.
//!
//! The default is `f64`; every tolerance in the test suites is stated for
//! double precision. Building with the `f32` feature switches the whole
//! engine (tensors, kernels, checkpoints) to single precision.

#[cfg(not(feature = "f32"))]
pub type Scalar = f64;
#[cfg(feature = "f32")]
pub type Scalar = f32;

/// Bytes per serialized element.
pub const SCALAR_BYTES: usize = core::mem::size_of::<Scalar>();

#[cfg(not(feature = "f32"))]
mod imp {
    pub use libm::{cos, erf, exp, log, log10, pow as powf, sin, sqrt, tanh};
}
#[cfg(feature = "f32")]
mod imp {
    pub use libm::{
        cosf as cos, erff as erf, expf as exp, log10f as log10, logf as log, powf, sinf as sin,
        sqrtf as sqrt, tanhf as tanh,
    };
}

pub use imp::*;

pub const PI: Scalar = core::f64::consts::PI as Scalar;

#[inline]
pub fn sigmoid(x: Scalar) -> Scalar {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// `log(exp(a) + exp(b))` without overflow; `-inf` is the identity.
#[inline]
pub fn log_add(a: Scalar, b: Scalar) -> Scalar {
    if a == Scalar::NEG_INFINITY {
        return b;
    }
    if b == Scalar::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + libm_log1p(exp(lo - hi))
}

#[cfg(not(feature = "f32"))]
#[inline]
fn libm_log1p(x: Scalar) -> Scalar {
    libm::log1p(x)
}
#[cfg(feature = "f32")]
#[inline]
fn libm_log1p(x: Scalar) -> Scalar {
    libm::log1pf(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_add_matches_direct_sum() {
        let v = log_add(log(0.25), log(0.5));
        assert!((v - log(0.75)).abs() < 1e-12);
        assert_eq!(log_add(Scalar::NEG_INFINITY, 1.5), 1.5);
        assert!(log_add(1000.0, 1000.0).is_finite());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1e4), 0.0);
        assert_eq!(sigmoid(1e4), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
