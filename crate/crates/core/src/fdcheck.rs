//! Central finite-difference gradient oracle.
//!
//! Evaluates a forward-only scalar function at perturbed inputs; it never
//! touches the reverse pass it is used to check.

use crate::tensor::{Scalar, Tensor};

/// Step pinned for 64-bit checks.
pub const FD_STEP: f64 = 1e-5;

/// Numeric gradient of `f` with respect to `inputs[which]` by central
/// differences with step `h`.
pub fn central_diff<T, F>(inputs: &[Tensor<T>], which: usize, h: f64, f: F) -> Tensor<T>
where
    T: Scalar,
    F: Fn(&[Tensor<T>]) -> T,
{
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut grad = Tensor::zeros(inputs[which].shape());
    let hh = T::from_f64(h);
    let two_h = T::from_f64(2.0 * h);
    for i in 0..grad.numel() {
        let orig = work[which].data()[i];
        work[which].data_mut()[i] = orig + hh;
        let up = f(&work);
        work[which].data_mut()[i] = orig - hh;
        let down = f(&work);
        work[which].data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / two_h;
    }
    grad
}

/// Relative error with a unit floor: `|a - n| / max(1, |a|, |n|)`. The floor
/// makes near-zero gradient entries compare by absolute error.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Largest elementwise [`rel_err`] between an analytic and a numeric
/// gradient; panics on shape mismatch.
pub fn max_rel_err<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| rel_err(a.as_f64(), n.as_f64()))
        .fold(0.0, f64::max)
}
