//! Dense rank-4 `f64` tensors in `(n, c, h, w)` row-major order.
//!
//! Every image, feature map and parameter in the crate is a [`Tensor`].
//! Parameters additionally carry a gradient slot that layer backward passes
//! accumulate into and the optimizer consumes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    /// A length-`len` vector stored as `(1, 1, 1, len)`.
    pub const fn vector(len: usize) -> Self {
        Self::new(1, 1, 1, len)
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements per batch sample.
    pub const fn sample(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    pub const fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
            grad: None,
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::contract(
                "tensor",
                format!("{} values for shape {shape}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    /// Fills with `N(0, std²)` draws.
    pub fn randn(shape: Shape, std: f64, rng: &mut Rng) -> Self {
        let data = (0..shape.len()).map(|_| std * rng.normal()).collect();
        Self {
            shape,
            data,
            grad: None,
        }
    }

    /// Fills with uniform draws in `[lo, hi)`.
    pub fn rand_uniform(shape: Shape, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let data = (0..shape.len()).map(|_| lo + (hi - lo) * rng.uniform()).collect();
        Self {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Same data viewed under a new shape with equal element count.
    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.len() != self.shape.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), shape.len());
        }
        Ok(self)
    }

    /// Samples `[start, start + count)` along the batch axis.
    pub fn batch_slice(&self, start: usize, count: usize) -> Tensor {
        let s = self.shape.sample();
        let data = self.data[start * s..(start + count) * s].to_vec();
        Tensor {
            shape: Shape::new(count, self.shape.c, self.shape.h, self.shape.w),
            data,
            grad: None,
        }
    }

    /// Stacks equally shaped tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::contract("stack", "no tensors"))?
            .shape;
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    left: first,
                    right: s,
                });
            }
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(Shape::new(n, first.c, first.h, first.w), data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| k * v)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    // -- gradient slot --------------------------------------------------

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Gradient as a tensor (zeros when the slot is empty).
    pub fn grad_tensor(&self) -> Tensor {
        match &self.grad {
            Some(g) => Tensor {
                shape: self.shape,
                data: g.clone(),
                grad: None,
            },
            None => Tensor::zeros(self.shape),
        }
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        let len = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; len])
    }

    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        for (g, d) in self.grad_mut().iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Parameter data and gradient slot together, for in-place optimizer updates.
    pub fn data_and_grad_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        let len = self.data.len();
        let g = self.grad.get_or_insert_with(|| vec![0.0; len]);
        (&mut self.data, g)
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape,
            right: b.shape,
        });
    }
    Ok(())
}

pub fn ew_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same("ew_add", a, b)?;
    Ok(Tensor {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
        grad: None,
    })
}

pub fn ew_sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same("ew_sub", a, b)?;
    Ok(Tensor {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
        grad: None,
    })
}

pub fn ew_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same("ew_mul", a, b)?;
    Ok(Tensor {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
        grad: None,
    })
}

/// Gradients of `a ⊗ b` with respect to `a` and `b`.
pub fn ew_mul_backward(a: &Tensor, b: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    check_same("ew_mul_backward", a, grad)?;
    Ok((ew_mul(grad, b)?, ew_mul(grad, a)?))
}

/// Leaky ReLU. The gate treats `x == 0` as the positive branch.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v >= 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(x: &Tensor, slope: f64, grad: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape,
        data: x
            .data
            .iter()
            .zip(&grad.data)
            .map(|(&v, &g)| if v >= 0.0 { g } else { slope * g })
            .collect(),
        grad: None,
    }
}
