//! Scalar objectives with their gradients.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Mean over the batch of `-log softmax(logits)[label]`.
///
/// `logits` is `(n, k, 1, 1)`. Returns the loss and its gradient with respect
/// to the logits, `(softmax - one_hot) / n`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let s = logits.shape();
    let k = s.sample();
    if k < 2 {
        return Err(Error::contract("cross_entropy", "need at least two classes"));
    }
    if labels.len() != s.n {
        return Err(Error::contract(
            "cross_entropy",
            format!("{} labels for a batch of {}", labels.len(), s.n),
        ));
    }
    let mut grad = Tensor::zeros(s);
    let mut loss = 0.0;
    let inv_n = 1.0 / s.n as f64;
    for (i, (&y, row)) in labels.iter().zip(logits.data().chunks(k)).enumerate() {
        if y >= k {
            return Err(Error::contract(
                "cross_entropy",
                format!("label {y} out of range for {k} classes"),
            ));
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let log_z = m + z.ln();
        loss += log_z - row[y];
        let g = &mut grad.data_mut()[i * k..(i + 1) * k];
        for (gj, v) in g.iter_mut().zip(row) {
            *gj = (v - log_z).exp() * inv_n;
        }
        g[y] -= inv_n;
    }
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross_entropy".into()));
    }
    Ok((loss, grad))
}

/// Index of the largest logit per sample (first on ties).
pub fn argmax(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape().sample();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}

/// Mean squared error and its gradient with respect to `a`.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<(f64, Tensor)> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let n = a.len() as f64;
    let mut grad = Tensor::zeros(a.shape());
    let mut total = 0.0;
    for ((g, x), y) in grad.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        let d = x - y;
        total += d * d;
        *g = 2.0 * d / n;
    }
    Ok((total / n, grad))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b / (total * total));
        }
    }
    w
}

/// Valid-window weighted sums of one `h × w` plane.
fn filter(plane: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut out = vec![0.0; oh * ow];
    for py in 0..oh {
        for px in 0..ow {
            let mut acc = 0.0;
            for qy in 0..SSIM_WINDOW {
                let row = &plane[(py + qy) * w + px..(py + qy) * w + px + SSIM_WINDOW];
                let wr = &win[qy * SSIM_WINDOW..(qy + 1) * SSIM_WINDOW];
                acc += row.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
            out[py * ow + px] = acc;
        }
    }
    out
}

/// Transpose of [`filter`], accumulated into `dst`.
fn filter_t(g: &[f64], h: usize, w: usize, win: &[f64], dst: &mut [f64]) {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    for py in 0..oh {
        for px in 0..ow {
            let gv = g[py * ow + px];
            for qy in 0..SSIM_WINDOW {
                let row = &mut dst[(py + qy) * w + px..(py + qy) * w + px + SSIM_WINDOW];
                let wr = &win[qy * SSIM_WINDOW..(qy + 1) * SSIM_WINDOW];
                row.iter_mut().zip(wr).for_each(|(d, k)| *d += gv * k);
            }
        }
    }
}

fn check_ssim(a: &Tensor, b: &Tensor) -> Result<Shape> {
    let s = a.shape();
    if s != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            left: s,
            right: b.shape(),
        });
    }
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::contract(
            "ssim",
            format!("{s} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"),
        ));
    }
    Ok(s)
}

/// Single-scale SSIM for dynamic range 1, averaged over every sample,
/// channel and valid window position.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Tensor, b: &Tensor) -> Result<(f64, Tensor)> {
    let (v, g) = ssim_impl(a, b, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn ssim_impl(a: &Tensor, b: &Tensor, want_grad: bool) -> Result<(f64, Option<Tensor>)> {
    let s = check_ssim(a, b)?;
    let win = gaussian_window();
    let (h, w) = (s.h, s.w);
    let positions = (h + 1 - SSIM_WINDOW) * (w + 1 - SSIM_WINDOW);
    let count = (positions * s.n * s.c) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Tensor::zeros(s));
    let plane = s.plane();
    for (pi, (pa, pb)) in a.data().chunks(plane).zip(b.data().chunks(plane)).enumerate() {
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter(pa, h, w, &win);
        let mu_b = filter(pb, h, w, &win);
        let e_aa = filter(&sq(pa, pa), h, w, &win);
        let e_bb = filter(&sq(pb, pb), h, w, &win);
        let e_ab = filter(&sq(pa, pb), h, w, &win);
        let mut coef_1 = vec![0.0; positions];
        let mut coef_a = vec![0.0; positions];
        let mut coef_b = vec![0.0; positions];
        for p in 0..positions {
            let (ma, mb) = (mu_a[p], mu_b[p]);
            let vaa = e_aa[p] - ma * ma;
            let vbb = e_bb[p] - mb * mb;
            let vab = e_ab[p] - ma * mb;
            let l_num = 2.0 * ma * mb + SSIM_C1;
            let l_den = ma * ma + mb * mb + SSIM_C1;
            let c_num = 2.0 * vab + SSIM_C2;
            let c_den = vaa + vbb + SSIM_C2;
            let v = l_num * c_num / (l_den * c_den);
            total += v;
            if want_grad {
                // partials of the map value with respect to mu_a, var_a, cov_ab
                let den = l_den * c_den;
                let d_mu = 2.0 * mb * c_num / den - v * 2.0 * ma / l_den;
                let d_var = -v / c_den;
                let d_cov = 2.0 * l_num / den;
                // var_a = E[a²] − mu_a², cov = E[ab] − mu_a·mu_b
                coef_1[p] = (d_mu - 2.0 * d_var * ma - d_cov * mb) / count;
                coef_a[p] = 2.0 * d_var / count;
                coef_b[p] = d_cov / count;
            }
        }
        if let Some(g) = grad.as_mut() {
            let mut t1 = vec![0.0; plane];
            let mut ta = vec![0.0; plane];
            let mut tb = vec![0.0; plane];
            filter_t(&coef_1, h, w, &win, &mut t1);
            filter_t(&coef_a, h, w, &win, &mut ta);
            filter_t(&coef_b, h, w, &win, &mut tb);
            let dst = &mut g.data_mut()[pi * plane..(pi + 1) * plane];
            for i in 0..plane {
                dst[i] = t1[i] + pa[i] * ta[i] + pb[i] * tb[i];
            }
        }
    }
    Ok((total / count, grad))
}
