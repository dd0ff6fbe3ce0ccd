//! Transcendental functions routed through `libm` so results do not depend on
//! the host C library.

pub(crate) use libm::{cos, erf, exp, floor, log, log1p, sin, sqrt};

pub(crate) const SQRT_2: f64 = core::f64::consts::SQRT_2;
pub(crate) const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Numerically stable `ln(sigmoid(x))`.
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -log1p(exp(-x))
    } else {
        x - log1p(exp(x))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}
