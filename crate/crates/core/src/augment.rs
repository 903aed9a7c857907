//! Resize, random crop and random horizontal flip.

use crate::error::{Error, Result};
use crate::nn::bilinear_resize;
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

/// Images are enlarged by 5/4 (32 → 40) before cropping back.
pub const RESIZE_NUM: usize = 5;
pub const RESIZE_DEN: usize = 4;
pub const FLIP_PROB: f64 = 0.5;

pub fn hflip(img: &Tensor) -> Tensor {
    let s = img.shape();
    let mut out = img.clone();
    for (dst, src) in out.data_mut().chunks_mut(s.w).zip(img.data().chunks(s.w)) {
        dst.iter_mut().zip(src.iter().rev()).for_each(|(d, v)| *d = *v);
    }
    out
}

pub fn crop(img: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor> {
    let s = img.shape();
    if top + h > s.h || left + w > s.w {
        return Err(Error::contract(
            "crop",
            format!("{h}×{w} at ({top}, {left}) does not fit in {s}"),
        ));
    }
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..h {
                let src = s.index(n, c, top + y, left);
                let dst = out.shape().index(n, c, y, 0);
                out.data_mut()[dst..dst + w].copy_from_slice(&img.data()[src..src + w]);
            }
        }
    }
    Ok(out)
}

/// Crop position and flip decision for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

/// Resized size for an `h × w` input.
pub fn resized_size(h: usize, w: usize) -> (usize, usize) {
    (h * RESIZE_NUM / RESIZE_DEN, w * RESIZE_NUM / RESIZE_DEN)
}

pub fn draw(h: usize, w: usize, rng: &mut Rng) -> AugmentDraw {
    let (rh, rw) = resized_size(h, w);
    AugmentDraw {
        top: rng.below(rh - h + 1),
        left: rng.below(rw - w + 1),
        flip: rng.bernoulli(FLIP_PROB),
    }
}

pub fn apply(img: &Tensor, d: AugmentDraw) -> Result<Tensor> {
    let s = img.shape();
    let (rh, rw) = resized_size(s.h, s.w);
    let big = bilinear_resize(img, rh, rw)?;
    let out = crop(&big, d.top, d.left, s.h, s.w)?;
    Ok(if d.flip { hflip(&out) } else { out })
}

/// Enlarges, crops back to the original size at a uniform offset and flips
/// with probability 1/2. The whole batch shares one draw.
pub fn augment(img: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    let s = img.shape();
    apply(img, draw(s.h, s.w, rng))
}
