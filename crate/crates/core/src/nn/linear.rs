use super::{gemm, join, Module};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

/// Fully connected layer `y = W·x + b` applied to each sample's flattened
/// features. Output shape is `(n, out, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `(1, 1, out, in)`.
    pub weight: Tensor,
    /// `(1, 1, 1, out)`.
    pub bias: Tensor,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / inputs as f64).sqrt();
        Self {
            weight: Tensor::randn(Shape::new(1, 1, outputs, inputs), std, rng),
            bias: Tensor::zeros(Shape::vector(outputs)),
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        let ws = weight.shape();
        if bias.len() != ws.h {
            return Err(Error::contract(
                "fully_connected",
                format!("weight {ws} with bias of length {}", bias.len()),
            ));
        }
        Ok(Self {
            weight: weight.reshape(Shape::new(1, 1, ws.n * ws.c * ws.h, ws.w))?,
            bias: bias.reshape(Shape::vector(ws.h))?,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape().w
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape().h
    }

    pub fn macs(&self) -> u64 {
        (self.inputs() * self.outputs()) as u64
    }

    fn check(&self, x: Shape) -> Result<()> {
        if x.sample() != self.inputs() {
            return Err(Error::contract(
                "fully_connected",
                format!("{} features per sample, layer expects {}", x.sample(), self.inputs()),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let xs = x.shape();
        self.check(xs)?;
        let mut out = Tensor::zeros(Shape::new(xs.n, self.outputs(), 1, 1));
        for row in out.data_mut().chunks_mut(self.outputs()) {
            row.copy_from_slice(self.bias.data());
        }
        gemm(
            xs.n,
            self.inputs(),
            self.outputs(),
            x.data(),
            false,
            self.weight.data(),
            true,
            1.0,
            out.data_mut(),
        );
        Ok(out)
    }

    pub fn grad_input(&self, x_shape: Shape, grad_out: &Tensor) -> Result<Tensor> {
        self.check(x_shape)?;
        let mut dx = Tensor::zeros(x_shape);
        gemm(
            x_shape.n,
            self.outputs(),
            self.inputs(),
            grad_out.data(),
            false,
            self.weight.data(),
            false,
            0.0,
            dx.data_mut(),
        );
        Ok(dx)
    }

    pub fn accumulate_param_grads(&mut self, x: &Tensor, grad_out: &Tensor) -> Result<()> {
        let xs = x.shape();
        self.check(xs)?;
        let mut dw = vec![0.0; self.weight.len()];
        gemm(
            self.outputs(),
            xs.n,
            self.inputs(),
            grad_out.data(),
            true,
            x.data(),
            false,
            0.0,
            &mut dw,
        );
        let mut db = vec![0.0; self.outputs()];
        for row in grad_out.data().chunks(self.outputs()) {
            for (d, g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        self.weight.accumulate_grad(&dw);
        self.bias.accumulate_grad(&db);
        Ok(())
    }

    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        self.accumulate_param_grads(x, grad_out)?;
        self.grad_input(x.shape(), grad_out)
    }
}

impl Module for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, bool)) {
        f(join(prefix, "weight"), &self.weight, true);
        f(join(prefix, "bias"), &self.bias, true);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor, bool)) {
        f(join(prefix, "weight"), &mut self.weight, true);
        f(join(prefix, "bias"), &mut self.bias, true);
    }
}

pub fn fully_connected(x: &Tensor, p: &Linear) -> Result<Tensor> {
    p.forward(x)
}
