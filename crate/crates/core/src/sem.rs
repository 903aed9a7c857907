//! Selective enhancement module.
//!
//! Two enhancement steps (normalize → leaky ReLU → 3×3 conv) run in
//! parallel, one with instance normalization and one with batch
//! normalization. Their sum is pooled over a 4×4 grid and mapped by a
//! shared bottleneck FC plus two FC heads to per-cell, per-channel scores.
//! A pairwise softmax over the two scores gives attention weights that are
//! bilinearly enlarged to the feature resolution and used to blend the two
//! steps:
//!
//! ```text
//! Y = up(A_in) ⊗ F_in ⊕ up(A_bn) ⊗ F_bn
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    bilinear_resize, bilinear_resize_backward, join, patch_avg_pool_4x4, patch_avg_pool_4x4_backward, Conv2d, Linear,
    Mode, Module, Norm, NormCache, NormKind, LEAKY_SLOPE,
};
use crate::rng::Rng;
use crate::tensor::{ew_add, ew_mul, ew_sub, leaky_relu, leaky_relu_backward, Shape, Tensor};

pub const GRID: usize = 4;
pub const DEFAULT_REDUCTION: usize = 16;

/// Which normalizations the two enhancement steps use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Instance norm in one step, batch norm in the other.
    Both,
    /// Batch norm in both steps.
    BnOnly,
    /// Instance norm in both steps.
    InOnly,
}

impl NormMode {
    /// Kinds for the `(in, bn)` steps.
    pub fn kinds(self) -> (NormKind, NormKind) {
        match self {
            NormMode::Both => (NormKind::Instance, NormKind::Batch),
            NormMode::BnOnly => (NormKind::Batch, NormKind::Batch),
            NormMode::InOnly => (NormKind::Instance, NormKind::Instance),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NormMode::Both => "both",
            NormMode::BnOnly => "bn_only",
            NormMode::InOnly => "in_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sem {
    pub conv_in: Conv2d,
    pub conv_bn: Conv2d,
    pub norm_in: Norm,
    pub norm_bn: Norm,
    /// Shared bottleneck, `16·C → 16·C / r`.
    pub fc1: Linear,
    pub fc2_in: Linear,
    pub fc2_bn: Linear,
    pub reduction: usize,
}

#[derive(Debug, Clone)]
struct BranchCache {
    norm: NormCache,
    pre_act: Tensor,
    act: Tensor,
}

/// Outputs of the two enhancement steps.
#[derive(Debug, Clone)]
pub struct Branches {
    pub f_in: Tensor,
    pub f_bn: Tensor,
    cache_in: BranchCache,
    cache_bn: BranchCache,
}

/// Scores and attention weights, all shaped `(n, C, 4, 4)`.
#[derive(Debug, Clone)]
pub struct Attention {
    pub s_in: Tensor,
    pub s_bn: Tensor,
    pub a_in: Tensor,
    pub a_bn: Tensor,
    flat: Tensor,
    hidden_pre: Tensor,
    hidden: Tensor,
}

#[derive(Debug, Clone)]
pub struct SemCache {
    x_shape: Shape,
    branches: Branches,
    attention: Attention,
    up_in: Tensor,
    up_bn: Tensor,
}

impl SemCache {
    pub fn attention(&self) -> &Attention {
        &self.attention
    }
}

/// Elementwise two-way softmax, stabilized by subtracting the larger score.
pub fn pairwise_softmax(s_in: &Tensor, s_bn: &Tensor) -> Result<(Tensor, Tensor)> {
    if s_in.shape() != s_bn.shape() {
        return Err(Error::ShapeMismatch {
            op: "pairwise_softmax",
            left: s_in.shape(),
            right: s_bn.shape(),
        });
    }
    let mut a = Tensor::zeros(s_in.shape());
    let mut b = Tensor::zeros(s_in.shape());
    for (i, (&p, &q)) in s_in.data().iter().zip(s_bn.data()).enumerate() {
        let m = p.max(q);
        let (ep, eq) = ((p - m).exp(), (q - m).exp());
        a.data_mut()[i] = ep / (ep + eq);
        b.data_mut()[i] = eq / (ep + eq);
    }
    Ok((a, b))
}

/// Score gradients of [`pairwise_softmax`] given the weights it produced:
/// `a_in·a_bn·(dA_in − dA_bn)` for `s_in` and the negation for `s_bn`.
pub fn pairwise_softmax_backward(
    a_in: &Tensor,
    a_bn: &Tensor,
    d_a_in: &Tensor,
    d_a_bn: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let diff = ew_sub(d_a_in, d_a_bn)?;
    let d_s_in = ew_mul(&ew_mul(a_in, a_bn)?, &diff)?;
    let d_s_bn = d_s_in.scale(-1.0);
    Ok((d_s_in, d_s_bn))
}

impl Sem {
    pub fn new(c_in: usize, c_out: usize, reduction: usize, norm_mode: NormMode, rng: &mut Rng) -> Result<Self> {
        let features = GRID * GRID * c_out;
        if reduction == 0 || features % reduction != 0 {
            return Err(Error::contract(
                "sem",
                format!("16·{c_out} = {features} not divisible by reduction ratio {reduction}"),
            ));
        }
        let hidden = features / reduction;
        let (kin, kbn) = norm_mode.kinds();
        Ok(Self {
            conv_in: Conv2d::new(c_in, c_out, 3, 1, 1, rng),
            conv_bn: Conv2d::new(c_in, c_out, 3, 1, 1, rng),
            norm_in: Norm::new(kin, c_in),
            norm_bn: Norm::new(kbn, c_in),
            fc1: Linear::new(features, hidden, rng),
            fc2_in: Linear::new(hidden, features, rng),
            fc2_bn: Linear::new(hidden, features, rng),
            reduction,
        })
    }

    pub fn c_in(&self) -> usize {
        self.conv_in.c_in()
    }

    pub fn c_out(&self) -> usize {
        self.conv_in.c_out()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.conv_in.macs(h, w) + self.conv_bn.macs(h, w) + self.fc1.macs() + self.fc2_in.macs() + self.fc2_bn.macs()
    }

    fn branch(norm: &Norm, conv: &Conv2d, x: &Tensor, mode: Mode) -> Result<(Tensor, BranchCache)> {
        let (pre_act, norm_cache) = norm.forward(x, mode)?;
        let act = leaky_relu(&pre_act, LEAKY_SLOPE);
        let f = conv.forward(&act)?;
        Ok((
            f,
            BranchCache {
                norm: norm_cache,
                pre_act,
                act,
            },
        ))
    }

    fn branch_backward(norm: &mut Norm, conv: &mut Conv2d, cache: &BranchCache, grad: &Tensor) -> Result<Tensor> {
        let d_act = conv.backward(&cache.act, grad)?;
        let d_pre = leaky_relu_backward(&cache.pre_act, LEAKY_SLOPE, &d_act);
        norm.backward(&cache.norm, &d_pre)
    }

    /// Runs both enhancement steps.
    pub fn branches(&self, x: &Tensor, mode: Mode) -> Result<Branches> {
        let (f_in, cache_in) = Self::branch(&self.norm_in, &self.conv_in, x, mode)?;
        let (f_bn, cache_bn) = Self::branch(&self.norm_bn, &self.conv_bn, x, mode)?;
        Ok(Branches {
            f_in,
            f_bn,
            cache_in,
            cache_bn,
        })
    }

    /// Scores and attention weights from the two step outputs.
    pub fn attention(&self, f_in: &Tensor, f_bn: &Tensor) -> Result<Attention> {
        let fused = ew_add(f_in, f_bn)?;
        let z = patch_avg_pool_4x4(&fused)?;
        let zs = z.shape();
        // sample-major, then channel, row, column
        let flat = z.reshape(Shape::new(zs.n, zs.sample(), 1, 1))?;
        let hidden_pre = self.fc1.forward(&flat)?;
        let hidden = leaky_relu(&hidden_pre, LEAKY_SLOPE);
        let s_in = self.fc2_in.forward(&hidden)?.reshape(zs)?;
        let s_bn = self.fc2_bn.forward(&hidden)?.reshape(zs)?;
        let (a_in, a_bn) = pairwise_softmax(&s_in, &s_bn)?;
        Ok(Attention {
            s_in,
            s_bn,
            a_in,
            a_bn,
            flat,
            hidden_pre,
            hidden,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, SemCache)> {
        if x.shape().c != self.c_in() {
            return Err(Error::contract(
                "sem",
                format!("input has {} channels, module expects {}", x.shape().c, self.c_in()),
            ));
        }
        let branches = self.branches(x, mode)?;
        let attention = self.attention(&branches.f_in, &branches.f_bn)?;
        let fs = branches.f_in.shape();
        let up_in = bilinear_resize(&attention.a_in, fs.h, fs.w)?;
        let up_bn = bilinear_resize(&attention.a_bn, fs.h, fs.w)?;
        let y = ew_add(&ew_mul(&up_in, &branches.f_in)?, &ew_mul(&up_bn, &branches.f_bn)?)?;
        Ok((
            y,
            SemCache {
                x_shape: x.shape(),
                branches,
                attention,
                up_in,
                up_bn,
            },
        ))
    }

    /// Applies train-mode batch statistics to the running estimates.
    pub fn commit(&mut self, cache: &SemCache) {
        self.norm_in.commit(&cache.branches.cache_in.norm);
        self.norm_bn.commit(&cache.branches.cache_bn.norm);
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &SemCache, grad_y: &Tensor) -> Result<Tensor> {
        let br = &cache.branches;
        let att = &cache.attention;
        let mut d_fin = ew_mul(grad_y, &cache.up_in)?;
        let mut d_fbn = ew_mul(grad_y, &cache.up_bn)?;

        let d_a_in = bilinear_resize_backward(&ew_mul(grad_y, &br.f_in)?, GRID, GRID);
        let d_a_bn = bilinear_resize_backward(&ew_mul(grad_y, &br.f_bn)?, GRID, GRID);
        let zs = att.a_in.shape();
        let (d_s_in, d_s_bn) = pairwise_softmax_backward(&att.a_in, &att.a_bn, &d_a_in, &d_a_bn)?;
        let flat_shape = Shape::new(zs.n, zs.sample(), 1, 1);
        let d_s_in = d_s_in.reshape(flat_shape)?;
        let d_s_bn = d_s_bn.reshape(flat_shape)?;

        let d_hidden = ew_add(
            &self.fc2_in.backward(&att.hidden, &d_s_in)?,
            &self.fc2_bn.backward(&att.hidden, &d_s_bn)?,
        )?;
        let d_hidden_pre = leaky_relu_backward(&att.hidden_pre, LEAKY_SLOPE, &d_hidden);
        let d_flat = self.fc1.backward(&att.flat, &d_hidden_pre)?;
        let d_fused = patch_avg_pool_4x4_backward(br.f_in.shape(), &d_flat.reshape(zs)?);
        d_fin = ew_add(&d_fin, &d_fused)?;
        d_fbn = ew_add(&d_fbn, &d_fused)?;

        let dx_in = Self::branch_backward(&mut self.norm_in, &mut self.conv_in, &br.cache_in, &d_fin)?;
        let dx_bn = Self::branch_backward(&mut self.norm_bn, &mut self.conv_bn, &br.cache_bn, &d_fbn)?;
        debug_assert_eq!(dx_in.shape(), cache.x_shape);
        ew_add(&dx_in, &dx_bn)
    }
}

impl Module for Sem {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, bool)) {
        self.conv_in.visit(&join(prefix, "conv_in"), f);
        self.conv_bn.visit(&join(prefix, "conv_bn"), f);
        self.norm_in.visit(&join(prefix, "norm_in"), f);
        self.norm_bn.visit(&join(prefix, "norm_bn"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2_in.visit(&join(prefix, "fc2_in"), f);
        self.fc2_bn.visit(&join(prefix, "fc2_bn"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor, bool)) {
        self.conv_in.visit_mut(&join(prefix, "conv_in"), f);
        self.conv_bn.visit_mut(&join(prefix, "conv_bn"), f);
        self.norm_in.visit_mut(&join(prefix, "norm_in"), f);
        self.norm_bn.visit_mut(&join(prefix, "norm_bn"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2_in.visit_mut(&join(prefix, "fc2_in"), f);
        self.fc2_bn.visit_mut(&join(prefix, "fc2_bn"), f);
    }
}

pub fn sem_branches(x: &Tensor, p: &Sem, mode: Mode) -> Result<(Tensor, Tensor)> {
    let b = p.branches(x, mode)?;
    Ok((b.f_in, b.f_bn))
}

pub fn sem_attention(f_in: &Tensor, f_bn: &Tensor, p: &Sem) -> Result<(Tensor, Tensor)> {
    let a = p.attention(f_in, f_bn)?;
    Ok((a.a_in, a.a_bn))
}

/// Forward pass; in train mode the running statistics are updated.
pub fn sem_forward(x: &Tensor, p: &mut Sem, mode: Mode) -> Result<Tensor> {
    let (y, cache) = p.forward(x, mode)?;
    p.commit(&cache);
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{conv2d, NormKind};

    fn small(rng: &mut Rng) -> Sem {
        Sem::new(3, 4, 4, NormMode::Both, rng).unwrap()
    }

    fn zero_fc(p: &mut Sem) {
        for l in [&mut p.fc1, &mut p.fc2_in, &mut p.fc2_bn] {
            l.weight = Tensor::zeros(l.weight.shape());
            l.bias = Tensor::zeros(l.bias.shape());
        }
    }

    fn delta_conv(c: usize) -> Conv2d {
        let mut w = Tensor::zeros(Shape::new(c, c, 3, 3));
        for i in 0..c {
            w.set(i, i, 1, 1, 1.0);
        }
        Conv2d::from_parts(w, Tensor::zeros(Shape::vector(c)), 1, 1).unwrap()
    }

    #[test]
    fn delta_convs_expose_normalized_activations() {
        let mut rng = Rng::new(61);
        let mut p = Sem::new(3, 3, 4, NormMode::Both, &mut rng).unwrap();
        p.conv_in = delta_conv(3);
        p.conv_bn = delta_conv(3);
        let x = Tensor::randn(Shape::new(2, 3, 8, 8), 1.0, &mut rng);
        let (f_in, f_bn) = sem_branches(&x, &p, Mode::Train).unwrap();
        let want_in = leaky_relu(&p.norm_in.forward(&x, Mode::Train).unwrap().0, 0.01);
        let want_bn = leaky_relu(&p.norm_bn.forward(&x, Mode::Train).unwrap().0, 0.01);
        assert!(f_in.max_abs_diff(&want_in) < 1e-12);
        assert!(f_bn.max_abs_diff(&want_bn) < 1e-12);
    }

    #[test]
    fn constant_input_collapses_instance_branch_to_bias() {
        let mut rng = Rng::new(62);
        let mut p = small(&mut rng);
        p.conv_in.bias = Tensor::randn(Shape::vector(4), 1.0, &mut rng);
        let (f_in, _) = sem_branches(&Tensor::full(Shape::new(2, 3, 8, 8), 0.4), &p, Mode::Train).unwrap();
        for n in 0..2 {
            for c in 0..4 {
                for y in 0..8 {
                    for x in 0..8 {
                        assert!((f_in.at(n, c, y, x) - p.conv_in.bias.data()[c]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn branches_match_composition_oracle() {
        let mut rng = Rng::new(63);
        let p = small(&mut rng);
        let x = Tensor::randn(Shape::new(2, 3, 8, 8), 1.0, &mut rng);
        let (f_in, f_bn) = sem_branches(&x, &p, Mode::Train).unwrap();
        // straight-line composition of the three layer ops
        let mut bn = Norm::new(NormKind::Batch, 3);
        let oracle_bn = conv2d(
            &leaky_relu(&crate::nn::batch_norm(&x, &mut bn, Mode::Train).unwrap(), 0.01),
            &p.conv_bn,
        )
        .unwrap();
        let inn = Norm::new(NormKind::Instance, 3);
        let oracle_in = conv2d(
            &leaky_relu(&crate::nn::instance_norm(&x, &inn).unwrap(), 0.01),
            &p.conv_in,
        )
        .unwrap();
        assert!(f_in.max_abs_diff(&oracle_in) < 1e-12);
        assert!(f_bn.max_abs_diff(&oracle_bn) < 1e-12);
    }

    #[test]
    fn zero_fc_gives_even_split() {
        let mut rng = Rng::new(64);
        let mut p = small(&mut rng);
        zero_fc(&mut p);
        let x = Tensor::randn(Shape::new(2, 3, 8, 8), 1.0, &mut rng);
        let b = p.branches(&x, Mode::Train).unwrap();
        let (a_in, a_bn) = sem_attention(&b.f_in, &b.f_bn, &p).unwrap();
        assert_eq!(a_in.shape(), Shape::new(2, 4, 4, 4));
        assert!(a_in.data().iter().chain(a_bn.data()).all(|&v| v == 0.5));

        let y = sem_forward(&x, &mut p, Mode::Train).unwrap();
        let half = ew_add(&b.f_in, &b.f_bn).unwrap().scale(0.5);
        assert!(y.max_abs_diff(&half) < 1e-12);
    }

    #[test]
    fn softmax_analytic() {
        let s_in = Tensor::full(Shape::new(1, 1, 1, 1), 3f64.ln() + 0.2);
        let s_bn = Tensor::full(Shape::new(1, 1, 1, 1), 0.2);
        let (a, b) = pairwise_softmax(&s_in, &s_bn).unwrap();
        assert!((a.data()[0] - 0.75).abs() < 1e-15);
        assert!((b.data()[0] - 0.25).abs() < 1e-15);
        // extreme scores stay finite
        let (a, b) = pairwise_softmax(&Tensor::full(s_in.shape(), 1e4), &Tensor::full(s_in.shape(), -1e4)).unwrap();
        assert_eq!((a.data()[0], b.data()[0]), (1.0, 0.0));
    }

    #[test]
    fn saturated_bias_selects_instance_step() {
        let mut rng = Rng::new(65);
        let mut p = small(&mut rng);
        zero_fc(&mut p);
        p.fc2_in.bias = Tensor::full(p.fc2_in.bias.shape(), 50.0);
        p.fc2_bn.bias = Tensor::full(p.fc2_bn.bias.shape(), -50.0);
        let x = Tensor::randn(Shape::new(2, 3, 8, 8), 1.0, &mut rng);
        let b = p.branches(&x, Mode::Train).unwrap();
        let y = sem_forward(&x, &mut p, Mode::Train).unwrap();
        assert!(y.max_abs_diff(&b.f_in) < 1e-12);
    }

    #[test]
    fn output_shape_and_attention_sum() {
        let mut rng = Rng::new(66);
        let mut p = small(&mut rng);
        let x = Tensor::randn(Shape::new(2, 3, 12, 8), 1.0, &mut rng);
        let (y, cache) = p.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 4, 12, 8));
        let att = cache.attention();
        for (a, b) in att.a_in.data().iter().zip(att.a_bn.data()) {
            assert!((a + b - 1.0).abs() < 1e-12);
            assert!(*a > 0.0 && *a < 1.0);
        }
        p.commit(&cache);
        assert_ne!(p.norm_bn.running_mean.data(), &[0.0; 3]);
    }

    #[test]
    fn bad_reduction_ratio() {
        let mut rng = Rng::new(67);
        assert!(Sem::new(3, 4, 7, NormMode::Both, &mut rng).is_err());
    }

    #[test]
    fn norm_modes_pick_kinds() {
        let mut rng = Rng::new(68);
        let p = Sem::new(3, 4, 4, NormMode::BnOnly, &mut rng).unwrap();
        assert_eq!((p.norm_in.kind, p.norm_bn.kind), (NormKind::Batch, NormKind::Batch));
        let p = Sem::new(3, 4, 4, NormMode::InOnly, &mut rng).unwrap();
        assert_eq!(
            (p.norm_in.kind, p.norm_bn.kind),
            (NormKind::Instance, NormKind::Instance)
        );
    }

    fn projected(y: &Tensor, w: &Tensor) -> f64 {
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn gradients_train_and_eval() {
        use crate::grad::{grad_check, grad_check_module};
        let mut rng = Rng::new(69);
        let mut p = small(&mut rng);
        // non-trivial running statistics for the eval path
        p.norm_bn.running_mean = Tensor::randn(Shape::vector(3), 0.5, &mut rng);
        p.norm_bn.running_var = Tensor::full(Shape::vector(3), 1.3);
        let x = Tensor::randn(Shape::new(2, 3, 8, 8), 1.0, &mut rng);
        let w = Tensor::randn(Shape::new(2, 4, 8, 8), 1.0, &mut rng);
        for mode in [Mode::Train, Mode::Eval] {
            let e = grad_check(
                |x| {
                    let mut q = p.clone();
                    let (y, cache) = q.forward(x, mode)?;
                    Ok((projected(&y, &w), q.backward(&cache, &w)?))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-4, "{mode:?} input {e}");
            let report = grad_check_module(
                &p,
                |q: &mut Sem| {
                    q.zero_grad();
                    let (y, cache) = q.forward(&x, mode)?;
                    q.backward(&cache, &w)?;
                    Ok(projected(&y, &w))
                },
                1e-5,
                6,
                &mut rng,
            )
            .unwrap();
            assert_eq!(report.len(), 14);
            for (name, e) in report {
                assert!(e < 1e-4, "{mode:?} {name} {e}");
            }
        }
    }
}
