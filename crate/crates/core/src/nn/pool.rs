use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Flat input index of each pooled maximum, in output order.
pub type MaxPoolIndices = Vec<usize>;

/// 2×2 max pooling with stride 2. Ties resolve to the first element in
/// row-major order within the block.
pub fn max_pool2(x: &Tensor) -> Result<(Tensor, MaxPoolIndices)> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::contract("max_pool2", format!("odd spatial size {s}")));
    }
    let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(os);
    let mut arg = Vec::with_capacity(os.len());
    let d = x.data();
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut best = s.index(n, c, 2 * oy, 2 * ox);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = s.index(n, c, 2 * oy + dy, 2 * ox + dx);
                        if d[i] > d[best] {
                            best = i;
                        }
                    }
                    out.set(n, c, oy, ox, d[best]);
                    arg.push(best);
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool2_backward(input: Shape, arg: &MaxPoolIndices, grad_out: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input);
    for (&i, &g) in arg.iter().zip(grad_out.data()) {
        dx.data_mut()[i] += g;
    }
    dx
}

/// Average over each cell of a 4×4 grid. Output is `(n, c, 4, 4)`.
pub fn patch_avg_pool_4x4(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.h % 4 != 0 || s.w % 4 != 0 || s.h == 0 || s.w == 0 {
        return Err(Error::contract(
            "patch_avg_pool_4x4",
            format!("spatial size of {s} not divisible by 4"),
        ));
    }
    let (bh, bw) = (s.h / 4, s.w / 4);
    let inv = 1.0 / (bh * bw) as f64;
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, 4, 4));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                let row = &x.data()[s.index(n, c, y, 0)..s.index(n, c, y, 0) + s.w];
                for (j, block) in row.chunks(bw).enumerate() {
                    let i = out.shape().index(n, c, y / bh, j);
                    out.data_mut()[i] += block.iter().sum::<f64>();
                }
            }
        }
    }
    out.data_mut().iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

pub fn patch_avg_pool_4x4_backward(input: Shape, grad_out: &Tensor) -> Tensor {
    let (bh, bw) = (input.h / 4, input.w / 4);
    let inv = 1.0 / (bh * bw) as f64;
    let mut dx = Tensor::zeros(input);
    for n in 0..input.n {
        for c in 0..input.c {
            for y in 0..input.h {
                for x in 0..input.w {
                    let g = grad_out.at(n, c, y / bh, x / bw);
                    dx.set(n, c, y, x, g * inv);
                }
            }
        }
    }
    dx
}
