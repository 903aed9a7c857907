//! Finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Compares the analytic gradient of a scalar function against central
/// differences at every coordinate of `x`.
///
/// `f` returns the function value and its analytic gradient with respect to
/// its argument. The result is the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, eps, &coords)
}

/// [`grad_check`] restricted to the listed flat coordinates. Used where a full
/// sweep would need hundreds of thousands of forward passes.
pub fn grad_check_at<F>(mut f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    if !(eps > 0.0) {
        return Err(Error::contract("grad_check", "eps must be positive"));
    }
    let (value, analytic) = f(x)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    if analytic.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "grad_check",
            left: x.shape(),
            right: analytic.shape(),
        });
    }
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (plus, _) = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let (minus, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Gradient check over every trainable parameter of a module.
///
/// `objective` must clear gradients, run forward and backward (accumulating
/// into the parameters' gradient slots) and return the scalar loss. At most
/// `per_param` coordinates of each tensor are probed, chosen with `rng`.
/// Returns `(name, max relative error)` per parameter.
pub fn grad_check_module<M, F>(
    module: &M,
    mut objective: F,
    eps: f64,
    per_param: usize,
    rng: &mut Rng,
) -> Result<Vec<(String, f64)>>
where
    M: Module + Clone,
    F: FnMut(&mut M) -> Result<f64>,
{
    let mut reference = module.clone();
    objective(&mut reference)?;
    let analytic: Vec<(String, Tensor, bool)> = reference
        .named_parameters()
        .into_iter()
        .map(|(n, t, tr)| (n, t.grad_tensor(), tr))
        .collect();

    let mut report = Vec::new();
    for (idx, (name, grad, trainable)) in analytic.iter().enumerate() {
        if !trainable {
            continue;
        }
        let coords = sample_coords(grad.len(), per_param, rng);
        let mut worst = 0.0f64;
        for i in coords {
            let mut probe = |delta: f64| -> Result<f64> {
                let mut m = module.clone();
                {
                    let mut params = m.named_parameters_mut();
                    params[idx].1.data_mut()[i] += delta;
                }
                objective(&mut m)
            };
            let numeric = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!("grad_check_module {name}")));
            }
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs()));
        }
        report.push((name.clone(), worst));
    }
    Ok(report)
}

/// Up to `k` distinct coordinates out of `0..len`, in ascending order.
pub fn sample_coords(len: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    if k >= len {
        return (0..len).collect();
    }
    let mut all: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut all);
    all.truncate(k);
    all.sort_unstable();
    all
}
