use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Per-output-coordinate source taps along one axis.
struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

/// Half-pixel centres (`align_corners = false`): output coordinate `o` samples
/// source position `(o + 0.5)·in/out − 0.5`, clamped to `[0, in − 1]`.
fn taps(input: usize, output: usize) -> Taps {
    let scale = input as f64 / output as f64;
    let mut t = Taps {
        lo: Vec::with_capacity(output),
        hi: Vec::with_capacity(output),
        frac: Vec::with_capacity(output),
    };
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(input - 1);
        let hi = (lo + 1).min(input - 1);
        t.lo.push(lo);
        t.hi.push(hi);
        t.frac.push(if hi == lo { 0.0 } else { src - lo as f64 });
    }
    t
}

pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = x.shape();
    if out_h == 0 || out_w == 0 || s.h == 0 || s.w == 0 {
        return Err(Error::contract("bilinear_resize", format!("{s} to {out_h}x{out_w}")));
    }
    if (s.h, s.w) == (out_h, out_w) {
        return Ok(x.map(|v| v));
    }
    let (ty, tx) = (taps(s.h, out_h), taps(s.w, out_w));
    let os = Shape::new(s.n, s.c, out_h, out_w);
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = &x.data()[s.index(n, c, 0, 0)..s.index(n, c, 0, 0) + s.plane()];
            let base = os.index(n, c, 0, 0);
            for oy in 0..out_h {
                let (r0, r1, fy) = (ty.lo[oy] * s.w, ty.hi[oy] * s.w, ty.frac[oy]);
                for ox in 0..out_w {
                    let (c0, c1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                    let top = src[r0 + c0] * (1.0 - fx) + src[r0 + c1] * fx;
                    let bot = src[r1 + c0] * (1.0 - fx) + src[r1 + c1] * fx;
                    out.data_mut()[base + oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    Ok(out)
}

/// Transpose of [`bilinear_resize`] from `(in_h, in_w)` to the gradient's size.
pub fn bilinear_resize_backward(grad_out: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let os = grad_out.shape();
    if (os.h, os.w) == (in_h, in_w) {
        return grad_out.map(|v| v);
    }
    let (ty, tx) = (taps(in_h, os.h), taps(in_w, os.w));
    let s = Shape::new(os.n, os.c, in_h, in_w);
    let mut dx = Tensor::zeros(s);
    for n in 0..os.n {
        for c in 0..os.c {
            let base_in = s.index(n, c, 0, 0);
            let base_out = os.index(n, c, 0, 0);
            for oy in 0..os.h {
                let (r0, r1, fy) = (ty.lo[oy] * in_w, ty.hi[oy] * in_w, ty.frac[oy]);
                for ox in 0..os.w {
                    let (c0, c1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                    let g = grad_out.data()[base_out + oy * os.w + ox];
                    let d = dx.data_mut();
                    d[base_in + r0 + c0] += g * (1.0 - fy) * (1.0 - fx);
                    d[base_in + r0 + c1] += g * (1.0 - fy) * fx;
                    d[base_in + r1 + c0] += g * fy * (1.0 - fx);
                    d[base_in + r1 + c1] += g * fy * fx;
                }
            }
        }
    }
    dx
}
