//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::nn::Module;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments for every trainable tensor of one module, in
/// visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<M: Module + ?Sized>(module: &M) -> Self {
        let sizes: Vec<usize> = module
            .named_parameters()
            .into_iter()
            .filter(|p| p.2)
            .map(|p| p.1.len())
            .collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
        }
    }

    /// Applies one update from the gradients stored on the module's trainable
    /// tensors. Missing gradients count as zero. Nothing is modified if any
    /// gradient is non-finite.
    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M, lr: f64) -> Result<()> {
        let mut params: Vec<_> = module.named_parameters_mut().into_iter().filter(|p| p.2).collect();
        if params.len() != self.m.len() {
            return Err(Error::contract(
                "adam_step",
                format!("state has {} tensors, module has {}", self.m.len(), params.len()),
            ));
        }
        for (i, (name, t, _)) in params.iter().enumerate() {
            if t.len() != self.m[i].len() {
                return Err(Error::contract("adam_step", format!("`{name}` changed size")));
            }
            if t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, (_, tensor, _)) in params.iter_mut().enumerate() {
            let grad = tensor.grad().map_or_else(|| vec![0.0; tensor.len()], <[f64]>::to_vec);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = tensor.data_mut();
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
