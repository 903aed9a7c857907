use serde::{Deserialize, Serialize};

use super::{join, Mode, Module};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    /// Statistics per channel over `(n, h, w)`; running statistics for eval.
    Batch,
    /// Statistics per sample and channel over `(h, w)`; no running statistics.
    Instance,
}

/// Normalization layer state.
///
/// Both kinds carry running-statistic buffers so parameter names do not
/// depend on the kind; instance normalization never reads or writes them.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub kind: NormKind,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct NormCache {
    x_hat: Tensor,
    /// One entry per statistic group: channel (BN) or sample-channel (IN).
    inv_std: Vec<f64>,
    batch_stats: Option<(Vec<f64>, Vec<f64>)>,
    mode: Mode,
}

impl NormCache {
    pub fn normalized(&self) -> &Tensor {
        &self.x_hat
    }

    /// Train-mode batch-norm `(mean, biased variance)` per channel.
    pub fn batch_stats(&self) -> Option<(&[f64], &[f64])> {
        self.batch_stats.as_ref().map(|(m, v)| (&m[..], &v[..]))
    }
}

impl Norm {
    pub fn new(kind: NormKind, channels: usize) -> Self {
        Self {
            kind,
            gamma: Tensor::ones(Shape::vector(channels)),
            beta: Tensor::zeros(Shape::vector(channels)),
            running_mean: Tensor::zeros(Shape::vector(channels)),
            running_var: Tensor::ones(Shape::vector(channels)),
            momentum: BN_MOMENTUM,
            eps: NORM_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Whether `forward` in `mode` normalizes with statistics of the input.
    fn uses_input_stats(&self, mode: Mode) -> bool {
        self.kind == NormKind::Instance || mode == Mode::Train
    }

    fn group_count(&self, s: Shape, mode: Mode) -> usize {
        match (self.kind, mode) {
            (NormKind::Instance, _) => s.n * s.c,
            _ => s.c,
        }
    }

    fn check(&self, s: Shape, mode: Mode) -> Result<()> {
        if s.c != self.channels() {
            return Err(Error::contract(
                "norm",
                format!("input has {} channels, layer has {}", s.c, self.channels()),
            ));
        }
        match self.kind {
            NormKind::Batch if mode == Mode::Train && s.n < 2 => {
                Err(Error::contract("batch_norm", "train mode needs a batch of at least 2"))
            }
            NormKind::Instance if s.plane() < 2 => {
                Err(Error::contract("instance_norm", "needs at least 2 spatial positions"))
            }
            _ => Ok(()),
        }
    }

    /// Normalizes without touching running statistics.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, NormCache)> {
        let s = x.shape();
        self.check(s, mode)?;
        let plane = s.plane();
        let groups = self.group_count(s, mode);
        let mut mean = vec![0.0; groups];
        let mut var = vec![0.0; groups];
        let group_of = |n: usize, c: usize| match self.kind {
            NormKind::Instance => n * s.c + c,
            NormKind::Batch => c,
        };

        if self.uses_input_stats(mode) {
            let count = (s.len() / groups) as f64;
            for n in 0..s.n {
                for c in 0..s.c {
                    let base = s.index(n, c, 0, 0);
                    mean[group_of(n, c)] += x.data()[base..base + plane].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for n in 0..s.n {
                for c in 0..s.c {
                    let base = s.index(n, c, 0, 0);
                    let m = mean[group_of(n, c)];
                    var[group_of(n, c)] += x.data()[base..base + plane]
                        .iter()
                        .map(|v| (v - m) * (v - m))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
        } else {
            mean.copy_from_slice(self.running_mean.data());
            var.copy_from_slice(self.running_var.data());
        }

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut x_hat = Tensor::zeros(s);
        let mut out = Tensor::zeros(s);
        let (gamma, beta) = (self.gamma.data(), self.beta.data());
        for n in 0..s.n {
            for c in 0..s.c {
                let g = group_of(n, c);
                let base = s.index(n, c, 0, 0);
                for i in base..base + plane {
                    let h = (x.data()[i] - mean[g]) * inv_std[g];
                    x_hat.data_mut()[i] = h;
                    out.data_mut()[i] = gamma[c] * h + beta[c];
                }
            }
        }
        let batch_stats = (self.kind == NormKind::Batch && mode == Mode::Train).then_some((mean, var));
        Ok((
            out,
            NormCache {
                x_hat,
                inv_std,
                batch_stats,
                mode,
            },
        ))
    }

    /// Folds a train-mode batch's statistics into the running estimates.
    pub fn commit(&mut self, cache: &NormCache) {
        if let Some((mean, var)) = &cache.batch_stats {
            let m = self.momentum;
            for (r, b) in self.running_mean.data_mut().iter_mut().zip(mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in self.running_var.data_mut().iter_mut().zip(var) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }

    pub fn grad_input(&self, cache: &NormCache, grad_out: &Tensor) -> Result<Tensor> {
        let s = cache.x_hat.shape();
        if grad_out.shape() != s {
            return Err(Error::ShapeMismatch {
                op: "norm backward",
                left: s,
                right: grad_out.shape(),
            });
        }
        let plane = s.plane();
        let gamma = self.gamma.data();
        let xh = cache.x_hat.data();
        let g = grad_out.data();
        let mut dx = Tensor::zeros(s);

        if !self.uses_input_stats(cache.mode) {
            // eval batch norm is a fixed per-channel affine map
            for n in 0..s.n {
                for c in 0..s.c {
                    let base = s.index(n, c, 0, 0);
                    let k = gamma[c] * cache.inv_std[c];
                    for i in base..base + plane {
                        dx.data_mut()[i] = g[i] * k;
                    }
                }
            }
            return Ok(dx);
        }

        let groups = cache.inv_std.len();
        let group_of = |n: usize, c: usize| match self.kind {
            NormKind::Instance => n * s.c + c,
            NormKind::Batch => c,
        };
        // sums of dx_hat and dx_hat·x_hat per group
        let mut sum_d = vec![0.0; groups];
        let mut sum_dx = vec![0.0; groups];
        for n in 0..s.n {
            for c in 0..s.c {
                let k = group_of(n, c);
                let base = s.index(n, c, 0, 0);
                for i in base..base + plane {
                    let d = g[i] * gamma[c];
                    sum_d[k] += d;
                    sum_dx[k] += d * xh[i];
                }
            }
        }
        let m = (s.len() / groups) as f64;
        for n in 0..s.n {
            for c in 0..s.c {
                let k = group_of(n, c);
                let base = s.index(n, c, 0, 0);
                let scale = cache.inv_std[k] / m;
                for i in base..base + plane {
                    let d = g[i] * gamma[c];
                    dx.data_mut()[i] = scale * (m * d - sum_d[k] - xh[i] * sum_dx[k]);
                }
            }
        }
        Ok(dx)
    }

    pub fn accumulate_param_grads(&mut self, cache: &NormCache, grad_out: &Tensor) {
        let s = cache.x_hat.shape();
        let plane = s.plane();
        let mut dgamma = vec![0.0; s.c];
        let mut dbeta = vec![0.0; s.c];
        for n in 0..s.n {
            for c in 0..s.c {
                let base = s.index(n, c, 0, 0);
                for i in base..base + plane {
                    dgamma[c] += grad_out.data()[i] * cache.x_hat.data()[i];
                    dbeta[c] += grad_out.data()[i];
                }
            }
        }
        self.gamma.accumulate_grad(&dgamma);
        self.beta.accumulate_grad(&dbeta);
    }

    pub fn backward(&mut self, cache: &NormCache, grad_out: &Tensor) -> Result<Tensor> {
        let dx = self.grad_input(cache, grad_out)?;
        self.accumulate_param_grads(cache, grad_out);
        Ok(dx)
    }
}

impl Module for Norm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, bool)) {
        f(join(prefix, "gamma"), &self.gamma, true);
        f(join(prefix, "beta"), &self.beta, true);
        f(join(prefix, "running_mean"), &self.running_mean, false);
        f(join(prefix, "running_var"), &self.running_var, false);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor, bool)) {
        f(join(prefix, "gamma"), &mut self.gamma, true);
        f(join(prefix, "beta"), &mut self.beta, true);
        f(join(prefix, "running_mean"), &mut self.running_mean, false);
        f(join(prefix, "running_var"), &mut self.running_var, false);
    }
}

/// Batch normalization; in train mode the running statistics are updated.
pub fn batch_norm(x: &Tensor, st: &mut Norm, mode: Mode) -> Result<Tensor> {
    debug_assert_eq!(st.kind, NormKind::Batch);
    let (y, cache) = st.forward(x, mode)?;
    st.commit(&cache);
    Ok(y)
}

pub fn instance_norm(x: &Tensor, st: &Norm) -> Result<Tensor> {
    debug_assert_eq!(st.kind, NormKind::Instance);
    Ok(st.forward(x, Mode::Train)?.0)
}
