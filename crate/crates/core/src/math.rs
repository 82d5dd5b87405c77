//! Scalar functions for `no_std` builds.

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn ln_1p(x: f64) -> f64 {
    libm::log1p(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

/// Logistic sigmoid, evaluated without overflow for large `|x|`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// Splits `sigmoid(logit)` into a convex pair `(alpha, beta)` whose
/// floating-point sum is exactly `1.0`.
///
/// The larger weight is in `[0.5, 1]`, so subtracting it from one is exact;
/// the smaller weight is defined as that difference.
pub fn convex_pair(logit: f64) -> (f64, f64) {
    let s = sigmoid(logit);
    if s >= 0.5 {
        (s, 1.0 - s)
    } else {
        let beta = 1.0 - s;
        (1.0 - beta, beta)
    }
}
