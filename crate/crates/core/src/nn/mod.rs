//! Layers with explicit forward and backward passes.
//!
//! Forward passes take `&self` and return whatever the backward pass needs.
//! Backward passes either accumulate into the parameters' gradient slots
//! (`backward`, `&mut self`) or only propagate to the input (`grad_input`,
//! `&self`), which is what a frozen model uses.

mod concat;
mod conv;
mod linear;
mod norm;
mod pool;
mod resize;

pub use concat::{concat_channels, split_channels};
pub use conv::{conv2d, Conv2d};
pub use linear::{fully_connected, Linear};
pub use norm::{batch_norm, instance_norm, Norm, NormCache, NormKind};
pub use pool::{max_pool2, max_pool2_backward, patch_avg_pool_4x4, patch_avg_pool_4x4_backward, MaxPoolIndices};
pub use resize::{bilinear_resize, bilinear_resize_backward};

use crate::tensor::Tensor;

/// Slope of every leaky ReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Stable-name enumeration of parameter tensors and normalization buffers.
pub trait Module {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, bool));

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor, bool));

    /// `(name, tensor, trainable)` in a fixed order.
    fn named_parameters(&self) -> Vec<(String, &Tensor, bool)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t, tr| out.push((n, t, tr)));
        out
    }

    fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor, bool)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |n, t, tr| out.push((n, t, tr)));
        out
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, t, trainable| {
            if trainable {
                t.zero_grad()
            }
        });
    }

    /// Number of trainable scalars.
    fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t, tr| {
            if tr {
                n += t.len()
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `c = a·b + beta·c` for row-major operands, optionally transposed.
///
/// `a` is `m×k` (or `k×m` when `ta`), `b` is `k×n` (or `n×k` when `tb`),
/// `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are asserted above to cover every index the
    // strides address; `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
