use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Concatenates along channels, `a` first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            left: sa,
            right: sb,
        });
    }
    let os = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let mut data = Vec::with_capacity(os.len());
    for n in 0..sa.n {
        data.extend_from_slice(&a.data()[n * sa.sample()..(n + 1) * sa.sample()]);
        data.extend_from_slice(&b.data()[n * sb.sample()..(n + 1) * sb.sample()]);
    }
    Tensor::from_vec(os, data)
}

/// Splits a gradient (or tensor) into its first `c_a` channels and the rest.
pub fn split_channels(x: &Tensor, c_a: usize) -> Result<(Tensor, Tensor)> {
    let s = x.shape();
    if c_a > s.c {
        return Err(Error::contract("split_channels", format!("{c_a} channels from {s}")));
    }
    let (sa, sb) = (Shape::new(s.n, c_a, s.h, s.w), Shape::new(s.n, s.c - c_a, s.h, s.w));
    let mut a = Vec::with_capacity(sa.len());
    let mut b = Vec::with_capacity(sb.len());
    for n in 0..s.n {
        let sample = &x.data()[n * s.sample()..(n + 1) * s.sample()];
        let (head, tail) = sample.split_at(sa.sample());
        a.extend_from_slice(head);
        b.extend_from_slice(tail);
    }
    Ok((Tensor::from_vec(sa, a)?, Tensor::from_vec(sb, b)?))
}
