//! Central finite-difference oracle for gradient checks.
//!
//! Deliberately independent of the tape: it only ever calls a user-supplied
//! scalar evaluation on perturbed inputs.

use crate::tensor::NdArray;

/// d(eval)/d(leaves[which]) by central differences with step `h`.
pub fn finite_diff(
    eval: &dyn Fn(&[NdArray]) -> f64,
    leaves: &[NdArray],
    which: usize,
    h: f64,
) -> NdArray {
    let mut grad = NdArray::zeros(leaves[which].shape().to_vec());
    for i in 0..leaves[which].len() {
        let probe = |delta: f64| {
            let mut ls = leaves.to_vec();
            ls[which].data_mut()[i] += delta;
            eval(&ls)
        };
        grad.data_mut()[i] = (probe(h) - probe(-h)) / (2.0 * h);
    }
    grad
}

/// Relative error between two gradients, normalized by the larger norm.
pub fn rel_err(analytic: &NdArray, numeric: &NdArray) -> f64 {
    let denom = analytic.norm_sq().sqrt().max(numeric.norm_sq().sqrt()).max(1e-8);
    let mut diff = analytic.clone();
    for (d, n) in diff.data_mut().iter_mut().zip(numeric.data()) {
        *d -= n;
    }
    diff.norm_sq().sqrt() / denom
}
