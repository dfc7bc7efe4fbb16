//! Numeric tolerances shared by the library and its tests.

/// Probability clamp applied before every `log` in the training losses.
pub const SIGMOID_CLAMP: f64 = 1e-7;

/// Layer-normalization variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-8;

/// Max relative error accepted by central finite-difference gradient checks (f64).
pub const GRAD_CHECK_REL: f64 = 1e-4;

/// Step used by central finite differences.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Normalization slack for probability vectors (f64).
pub const PROB_SUM: f64 = 1e-9;

/// Exact-value comparisons of hand-computed oracles (f64).
pub const HAND_ORACLE: f64 = 1e-10;

/// Relative error between two gradient values, with an absolute floor so
/// entries that are both ~0 do not blow up the ratio.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / scale
}
