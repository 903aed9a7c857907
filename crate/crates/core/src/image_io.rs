//! 8-bit PNG files and size adaptation for the enhancer.
//!
//! Pixels map to `[0, 1]` by `/255` on read and back by `round(·255)` on
//! write.

use std::io::{BufReader, Cursor};
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{Urie, SIZE_MULTIPLE};
use crate::tensor::{Shape, Tensor};

/// Decodes PNG bytes into a `(1, 3, h, w)` tensor. Grey images are
/// replicated into three channels and alpha is dropped.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let mut decoder = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| Error::Image(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Image(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Image("unexpanded palette image".into())),
    };
    let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            let px = &row[x * channels..(x + 1) * channels];
            for c in 0..3 {
                let v = if channels < 3 { px[0] } else { px[c] };
                t.set(0, c, y, x, f64::from(v) / 255.0);
            }
        }
    }
    Ok(t)
}

/// Encodes the first image of a 3-channel tensor as an 8-bit RGB PNG.
/// Values are clamped to `[0, 1]` before quantization.
pub fn encode_png(img: &Tensor) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.c != 3 || s.n < 1 {
        return Err(Error::Image(format!("expected (1, 3, h, w), got {s}")));
    }
    let mut raw = Vec::with_capacity(s.h * s.w * 3);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                raw.push(quantize(img.at(0, c, y, x)));
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, s.w as u32, s.h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
        writer.write_image_data(&raw).map_err(|e| Error::Image(e.to_string()))?;
        writer.finish().map_err(|e| Error::Image(e.to_string()))?;
    }
    Ok(out)
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes)
}

pub fn write_png(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Mirror index without repeating the edge pixel, bouncing as often as
/// needed.
fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Reflect-pads height and width up to the next multiple of `m`, splitting
/// the padding as evenly as possible with the extra pixel at the bottom and
/// right. Returns the padded image and the `(top, left)` offset of the
/// original.
pub fn reflect_pad_to_multiple(img: &Tensor, m: usize) -> (Tensor, usize, usize) {
    let s = img.shape();
    let (ph, pw) = (s.h.div_ceil(m) * m, s.w.div_ceil(m) * m);
    let (top, left) = ((ph - s.h) / 2, (pw - s.w) / 2);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, ph, pw));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..ph {
                let sy = mirror(y as isize - top as isize, s.h);
                for x in 0..pw {
                    let sx = mirror(x as isize - left as isize, s.w);
                    out.set(n, c, y, x, img.at(n, c, sy, sx));
                }
            }
        }
    }
    (out, top, left)
}

/// Enhances an image of any size: reflect-pad to a multiple of 16, run the
/// network in eval mode and crop back to the original window.
pub fn enhance_any_size(urie: &Urie, img: &Tensor) -> Result<Tensor> {
    let s = img.shape();
    if s.h == 0 || s.w == 0 {
        return Err(Error::Image("empty image".into()));
    }
    let (padded, top, left) = reflect_pad_to_multiple(img, SIZE_MULTIPLE);
    let out = urie.enhance(&padded)?;
    crate::augment::crop(&out, top, left, s.h, s.w)
}
