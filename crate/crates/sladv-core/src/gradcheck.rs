//! Central-difference gradient oracle for tests.
//!
//! This module deliberately knows nothing about layers or networks: it only
//! perturbs tensor coordinates and evaluates a scalar closure, so it cannot
//! share a bug with the analytic backward passes it is used to check.

use crate::error::Result;
use crate::tensor::Tensor;

/// Central-difference estimate of `df/dx` per coordinate.
pub fn numeric_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    assert!(h > 0.0, "step size must be positive");
    let mut point = x.clone();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = point.data()[i];
        point.data_mut()[i] = orig + h;
        let plus = f(&point)?;
        point.data_mut()[i] = orig - h;
        let minus = f(&point)?;
        point.data_mut()[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Denominator floor: coordinates smaller than this compare on absolute
/// terms, so a pair like (0, 1e-9) is treated as agreeing rather than as a
/// huge relative error. At a 1e-4 pass threshold this makes the implicit
/// absolute tolerance for near-zero coordinates 1e-8.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

/// Worst relative error between two gradients.
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let denom = a.abs().max(n.abs()).max(REL_ERROR_FLOOR);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}
