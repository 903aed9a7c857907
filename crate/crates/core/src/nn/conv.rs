use super::{gemm, join, Module};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

/// Square-kernel 2-D cross-correlation with zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `(c_out, c_in, k, k)`.
    pub weight: Tensor,
    /// `(1, 1, 1, c_out)`.
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Fan-in scaled normal weights (`std = sqrt(2 / (c_in·k²))`), zero bias.
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        Self {
            weight: Tensor::randn(Shape::new(c_out, c_in, k, k), std, rng),
            bias: Tensor::zeros(Shape::vector(c_out)),
            stride,
            padding,
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let ws = weight.shape();
        if ws.h != ws.w || bias.len() != ws.n || stride == 0 {
            return Err(Error::contract(
                "conv2d",
                format!("kernel {ws}, bias len {}, stride {stride}", bias.len()),
            ));
        }
        Ok(Self {
            weight,
            bias: bias.reshape(Shape::vector(ws.n))?,
            stride,
            padding,
        })
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.c_in() {
            return Err(Error::contract(
                "conv2d",
                format!("input has {} channels, kernel expects {}", input.c, self.c_in()),
            ));
        }
        let k = self.kernel();
        let (hp, wp) = (input.h + 2 * self.padding, input.w + 2 * self.padding);
        if hp < k || wp < k {
            return Err(Error::contract(
                "conv2d",
                format!("input {input} smaller than kernel {k}"),
            ));
        }
        Ok(Shape::new(
            input.n,
            self.c_out(),
            (hp - k) / self.stride + 1,
            (wp - k) / self.stride + 1,
        ))
    }

    /// Multiply-accumulates for one forward pass over an `h×w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let k = self.kernel();
        let oh = (h + 2 * self.padding - k) / self.stride + 1;
        let ow = (w + 2 * self.padding - k) / self.stride + 1;
        (k * k * self.c_in() * self.c_out() * oh * ow) as u64
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let os = self.output_shape(x.shape())?;
        let xs = x.shape();
        let rows = self.c_in() * self.kernel() * self.kernel();
        let cols_n = os.h * os.w;
        let mut cols = vec![0.0; rows * cols_n];
        let mut out = Tensor::zeros(os);
        let bias = self.bias.data();
        let ostride = os.sample();
        for n in 0..xs.n {
            self.im2col(&x.data()[n * xs.sample()..(n + 1) * xs.sample()], xs, os, &mut cols);
            let dst = &mut out.data_mut()[n * ostride..(n + 1) * ostride];
            for (co, chunk) in dst.chunks_mut(cols_n).enumerate() {
                chunk.fill(bias[co]);
            }
            gemm(
                self.c_out(),
                rows,
                cols_n,
                self.weight.data(),
                false,
                &cols,
                false,
                1.0,
                dst,
            );
        }
        Ok(out)
    }

    /// Gradient with respect to the input only.
    pub fn grad_input(&self, x_shape: Shape, grad_out: &Tensor) -> Result<Tensor> {
        let os = self.output_shape(x_shape)?;
        if grad_out.shape() != os {
            return Err(Error::ShapeMismatch {
                op: "conv2d backward",
                left: os,
                right: grad_out.shape(),
            });
        }
        let rows = self.c_in() * self.kernel() * self.kernel();
        let cols_n = os.h * os.w;
        let mut dcols = vec![0.0; rows * cols_n];
        let mut dx = Tensor::zeros(x_shape);
        for n in 0..x_shape.n {
            let g = &grad_out.data()[n * os.sample()..(n + 1) * os.sample()];
            gemm(
                rows,
                self.c_out(),
                cols_n,
                self.weight.data(),
                true,
                g,
                false,
                0.0,
                &mut dcols,
            );
            let dst = &mut dx.data_mut()[n * x_shape.sample()..(n + 1) * x_shape.sample()];
            self.col2im(&dcols, x_shape, os, dst);
        }
        Ok(dx)
    }

    /// Accumulates kernel and bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        self.accumulate_param_grads(x, grad_out)?;
        self.grad_input(x.shape(), grad_out)
    }

    pub fn accumulate_param_grads(&mut self, x: &Tensor, grad_out: &Tensor) -> Result<()> {
        let xs = x.shape();
        let os = self.output_shape(xs)?;
        if grad_out.shape() != os {
            return Err(Error::ShapeMismatch {
                op: "conv2d backward",
                left: os,
                right: grad_out.shape(),
            });
        }
        let rows = self.c_in() * self.kernel() * self.kernel();
        let cols_n = os.h * os.w;
        let mut cols = vec![0.0; rows * cols_n];
        let mut dw = vec![0.0; self.weight.len()];
        let mut db = vec![0.0; self.c_out()];
        for n in 0..xs.n {
            self.im2col(&x.data()[n * xs.sample()..(n + 1) * xs.sample()], xs, os, &mut cols);
            let g = &grad_out.data()[n * os.sample()..(n + 1) * os.sample()];
            gemm(self.c_out(), cols_n, rows, g, false, &cols, true, 1.0, &mut dw);
            for (co, chunk) in g.chunks(cols_n).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
        self.weight.accumulate_grad(&dw);
        self.bias.accumulate_grad(&db);
        Ok(())
    }

    fn im2col(&self, src: &[f64], xs: Shape, os: Shape, cols: &mut [f64]) {
        let k = self.kernel();
        let (s, p) = (self.stride as isize, self.padding as isize);
        let ncols = os.h * os.w;
        for ci in 0..xs.c {
            let plane = &src[ci * xs.plane()..(ci + 1) * xs.plane()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..os.h {
                        let iy = oy as isize * s + ky as isize - p;
                        let line = &mut dst[oy * os.w..(oy + 1) * os.w];
                        if iy < 0 || iy >= xs.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let srow = &plane[iy as usize * xs.w..(iy as usize + 1) * xs.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            *v = if ix >= 0 && ix < xs.w as isize {
                                srow[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], xs: Shape, os: Shape, dst: &mut [f64]) {
        let k = self.kernel();
        let (s, p) = (self.stride as isize, self.padding as isize);
        let ncols = os.h * os.w;
        for ci in 0..xs.c {
            let plane = &mut dst[ci * xs.plane()..(ci + 1) * xs.plane()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..os.h {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= xs.h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * xs.w..(iy as usize + 1) * xs.w];
                        for ox in 0..os.w {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < xs.w as isize {
                                drow[ix as usize] += src[oy * os.w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Module for Conv2d {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, bool)) {
        f(join(prefix, "weight"), &self.weight, true);
        f(join(prefix, "bias"), &self.bias, true);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor, bool)) {
        f(join(prefix, "weight"), &mut self.weight, true);
        f(join(prefix, "bias"), &mut self.bias, true);
    }
}

pub fn conv2d(x: &Tensor, p: &Conv2d) -> Result<Tensor> {
    p.forward(x)
}
