//! Central finite-difference gradient estimation.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function at `p`:
/// (f(p + step*e_i) - f(p - step*e_i)) / (2*step), element by element.
///
/// `f` is re-evaluated 2*numel times; non-finite outputs are propagated as
/// errors.
pub fn finite_diff_grad<T: Scalar>(
    f: &mut dyn FnMut(&Tensor<T>) -> Result<T>,
    p: &Tensor<T>,
    step: f64,
) -> Result<Tensor<T>> {
    if step <= 0.0 {
        return Err(Error::contract("finite_diff_grad: step must be > 0"));
    }
    let eps = T::from_f64(step);
    let two_eps = T::from_f64(2.0 * step);
    let mut grad = vec![T::ZERO; p.numel()];
    let mut work: Vec<T> = p.data().to_vec();
    for i in 0..p.numel() {
        let orig = work[i];
        work[i] = orig + eps;
        let plus = f(&Tensor::new(p.shape().to_vec(), work.clone())?)?;
        work[i] = orig - eps;
        let minus = f(&Tensor::new(p.shape().to_vec(), work.clone())?)?;
        work[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_grad",
            });
        }
        grad[i] = (plus - minus) / two_eps;
    }
    Tensor::new(p.shape().to_vec(), grad)
}

/// Relative L2 error between an analytic gradient and its finite-difference
/// estimate: ||a - fd|| / max(||fd||, floor).
pub fn grad_rel_err<T: Scalar>(analytic: &Tensor<T>, fd: &Tensor<T>) -> f64 {
    let mut diff = 0.0f64;
    let mut norm = 0.0f64;
    for (a, b) in analytic.data().iter().zip(fd.data()) {
        let d = a.to_f64() - b.to_f64();
        diff += d * d;
        norm += b.to_f64() * b.to_f64();
    }
    diff.sqrt() / norm.sqrt().max(1e-10)
}
