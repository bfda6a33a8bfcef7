//! Finite-difference verification of reverse-mode gradients.

use super::{Tape, Tensor};
use crate::error::Result;
use std::sync::Arc;

/// Compare the reverse-mode gradient of a scalar function against central
/// finite differences and return the worst relative discrepancy
///
/// ```text
///   |analytic - numeric| / (|analytic| + |numeric| + 1e-12)
/// ```
///
/// `f` receives a tracked tensor of shape `shape` built from `x0` and must
/// return a scalar. Perturbed evaluations use untracked tensors so no tape
/// is built for them.
pub fn grad_check<F>(f: &F, x0: &[f64], shape: &[usize], eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let tape = Tape::new();
    let x = tape.leaf(Arc::new(x0.to_vec()), shape.to_vec());
    let loss = f(&x)?;
    let grads = loss.backward()?;
    let analytic: Vec<f64> = match grads.grad(&x) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x0.len()],
    };

    let eval = |v: Vec<f64>| -> Result<f64> {
        let t = Tensor::from_vec(v, shape);
        Ok(f(&t)?.item())
    };

    let mut worst = 0.0f64;
    for i in 0..x0.len() {
        let mut plus = x0.to_vec();
        plus[i] += eps;
        let mut minus = x0.to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
