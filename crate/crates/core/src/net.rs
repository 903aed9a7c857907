//! The full enhancement network.
//!
//! ```text
//! stem 9×9→32 ─ pool ─ sem1→64 ─ pool ─ sem2→64 ─ up×2 ┐
//!   │                    └───────────── concat ──────────┘─ sem3→32 ─ up×2 ┐
//!   └──────────────────────────────────── concat ───────────────────────────┘─ sem4→16 ─ head 3×3→3
//! output = clamp(x + head, 0, 1)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{
    bilinear_resize, bilinear_resize_backward, concat_channels, max_pool2, max_pool2_backward, split_channels, Conv2d,
    MaxPoolIndices, Mode, Module,
};
use crate::rng::Rng;
use crate::sem::{NormMode, Sem, SemCache, DEFAULT_REDUCTION, GRID};
use crate::tensor::{ew_add, Shape, Tensor};

pub const STEM_WIDTH: usize = 32;
pub const SEM_WIDTHS: [usize; 4] = [64, 64, 32, 16];
/// Input height and width must be multiples of this.
pub const SIZE_MULTIPLE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UrieConfig {
    pub norm_mode: NormMode,
    pub reduction_ratio: usize,
    pub residual_skip: bool,
}

impl Default for UrieConfig {
    fn default() -> Self {
        Self {
            norm_mode: NormMode::Both,
            reduction_ratio: DEFAULT_REDUCTION,
            residual_skip: true,
        }
    }
}

impl UrieConfig {
    pub fn fingerprint(&self) -> String {
        format!(
            "urie/v1 norm={} r={} residual={}",
            self.norm_mode.as_str(),
            self.reduction_ratio,
            self.residual_skip
        )
    }

    pub fn from_fingerprint(fp: &str) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("not a URIE fingerprint: `{fp}`"));
        let mut parts = fp.split(' ');
        if parts.next() != Some("urie/v1") {
            return Err(bad());
        }
        let mut field = |key: &str| {
            parts
                .next()
                .and_then(|p| p.strip_prefix(key))
                .and_then(|p| p.strip_prefix('='))
                .ok_or_else(bad)
        };
        let norm_mode = match field("norm")? {
            "both" => NormMode::Both,
            "bn_only" => NormMode::BnOnly,
            "in_only" => NormMode::InOnly,
            _ => return Err(bad()),
        };
        let reduction_ratio = field("r")?.parse().map_err(|_| bad())?;
        let residual_skip = field("residual")?.parse().map_err(|_| bad())?;
        Ok(Self {
            norm_mode,
            reduction_ratio,
            residual_skip,
        })
    }
}

/// Multiply-accumulate count of one named layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerMacs {
    pub name: String,
    pub macs: u64,
}

fn conv_macs(k: usize, c_in: usize, c_out: usize, h: usize, w: usize) -> u64 {
    (k * k * c_in * c_out * h * w) as u64
}

fn sem_macs(prefix: &str, c_in: usize, c_out: usize, r: usize, h: usize, w: usize) -> Vec<LayerMacs> {
    let feats = GRID * GRID * c_out;
    let hidden = feats / r;
    let conv = conv_macs(3, c_in, c_out, h, w);
    vec![
        LayerMacs {
            name: format!("{prefix}.conv_in"),
            macs: conv,
        },
        LayerMacs {
            name: format!("{prefix}.conv_bn"),
            macs: conv,
        },
        LayerMacs {
            name: format!("{prefix}.fc1"),
            macs: (feats * hidden) as u64,
        },
        LayerMacs {
            name: format!("{prefix}.fc2_in"),
            macs: (hidden * feats) as u64,
        },
        LayerMacs {
            name: format!("{prefix}.fc2_bn"),
            macs: (hidden * feats) as u64,
        },
    ]
}

fn check_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
        return Err(Error::contract(
            "urie",
            format!("input {h}x{w}: height and width must be positive multiples of {SIZE_MULTIPLE}"),
        ));
    }
    Ok(())
}

/// Per-layer MAC counts (convolutions and FC layers only).
pub fn mac_table(cfg: &UrieConfig, h: usize, w: usize) -> Result<Vec<LayerMacs>> {
    check_size(h, w)?;
    let r = cfg.reduction_ratio;
    let [w1, w2, w3, w4] = SEM_WIDTHS;
    let mut t = vec![LayerMacs {
        name: "stem".into(),
        macs: conv_macs(9, 3, STEM_WIDTH, h, w),
    }];
    t.extend(sem_macs("sem1", STEM_WIDTH, w1, r, h / 2, w / 2));
    t.extend(sem_macs("sem2", w1, w2, r, h / 4, w / 4));
    t.extend(sem_macs("sem3", w2 + w1, w3, r, h / 2, w / 2));
    t.extend(sem_macs("sem4", w3 + STEM_WIDTH, w4, r, h, w));
    t.push(LayerMacs {
        name: "head".into(),
        macs: conv_macs(3, w4, 3, h, w),
    });
    Ok(t)
}

pub fn mac_count(cfg: &UrieConfig, h: usize, w: usize) -> Result<u64> {
    Ok(mac_table(cfg, h, w)?.iter().map(|l| l.macs).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Urie {
    pub config: UrieConfig,
    pub stem: Conv2d,
    pub sem1: Sem,
    pub sem2: Sem,
    pub sem3: Sem,
    pub sem4: Sem,
    pub head: Conv2d,
}

#[derive(Debug, Clone)]
pub struct UrieCache {
    x: Tensor,
    stem_out: Tensor,
    pool1: MaxPoolIndices,
    pool2: MaxPoolIndices,
    sem: [SemCache; 4],
    sem4_out: Tensor,
    pre_clamp: Tensor,
}

impl Urie {
    pub fn new(config: UrieConfig, rng: &mut Rng) -> Result<Self> {
        let r = config.reduction_ratio;
        let m = config.norm_mode;
        let [w1, w2, w3, w4] = SEM_WIDTHS;
        Ok(Self {
            config,
            stem: Conv2d::new(3, STEM_WIDTH, 9, 1, 4, rng),
            sem1: Sem::new(STEM_WIDTH, w1, r, m, rng)?,
            sem2: Sem::new(w1, w2, r, m, rng)?,
            sem3: Sem::new(w2 + w1, w3, r, m, rng)?,
            sem4: Sem::new(w3 + STEM_WIDTH, w4, r, m, rng)?,
            head: Conv2d::new(w4, 3, 3, 1, 1, rng),
        })
    }

    pub fn from_seed(config: UrieConfig, seed: u64) -> Result<Self> {
        Self::new(config, &mut Rng::new(seed))
    }

    /// Zeroes the output convolution, turning the network into the identity
    /// whenever the residual skip is on.
    pub fn zero_head(&mut self) {
        self.head.weight = Tensor::zeros(self.head.weight.shape());
        self.head.bias = Tensor::zeros(self.head.bias.shape());
    }

    pub fn mac_count(&self, h: usize, w: usize) -> Result<u64> {
        mac_count(&self.config, h, w)
    }

    fn check_input(x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.c != 3 {
            return Err(Error::contract("urie", format!("expected 3 channels, got {s}")));
        }
        check_size(s.h, s.w)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, UrieCache)> {
        Self::check_input(x)?;
        let s = x.shape();
        let stem_out = self.stem.forward(x)?;
        let (p1, pool1) = max_pool2(&stem_out)?;
        let (e1, c1) = self.sem1.forward(&p1, mode)?;
        let (p2, pool2) = max_pool2(&e1)?;
        let (e2, c2) = self.sem2.forward(&p2, mode)?;
        let u1 = bilinear_resize(&e2, s.h / 2, s.w / 2)?;
        let (d1, c3) = self.sem3.forward(&concat_channels(&e1, &u1)?, mode)?;
        let u2 = bilinear_resize(&d1, s.h, s.w)?;
        let (sem4_out, c4) = self.sem4.forward(&concat_channels(&stem_out, &u2)?, mode)?;
        let residual = self.head.forward(&sem4_out)?;
        let pre_clamp = if self.config.residual_skip {
            ew_add(x, &residual)?
        } else {
            residual
        };
        let y = pre_clamp.map(|v| v.clamp(0.0, 1.0));
        Ok((
            y,
            UrieCache {
                x: x.clone(),
                stem_out,
                pool1,
                pool2,
                sem: [c1, c2, c3, c4],
                sem4_out,
                pre_clamp,
            },
        ))
    }

    /// Eval-mode enhancement.
    pub fn enhance(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x, Mode::Eval)?.0)
    }

    pub fn commit(&mut self, cache: &UrieCache) {
        self.sem1.commit(&cache.sem[0]);
        self.sem2.commit(&cache.sem[1]);
        self.sem3.commit(&cache.sem[2]);
        self.sem4.commit(&cache.sem[3]);
    }

    /// Accumulates parameter gradients and returns the gradient with respect
    /// to the input image.
    pub fn backward(&mut self, cache: &UrieCache, grad_out: &Tensor) -> Result<Tensor> {
        let s = cache.x.shape();
        let (h2, w2) = (s.h / 2, s.w / 2);
        // clamp passes gradient where the pre-clamp value lies in [0, 1]
        let mut d_pre = grad_out.clone();
        for (g, v) in d_pre.data_mut().iter_mut().zip(cache.pre_clamp.data()) {
            if !(0.0..=1.0).contains(v) {
                *g = 0.0;
            }
        }
        let d_sem4 = self.head.backward(&cache.sem4_out, &d_pre)?;
        let d_cat2 = self.sem4.backward(&cache.sem[3], &d_sem4)?;
        let (d_stem_skip, d_u2) = split_channels(&d_cat2, STEM_WIDTH)?;
        let d_d1 = bilinear_resize_backward(&d_u2, h2, w2);
        let d_cat1 = self.sem3.backward(&cache.sem[2], &d_d1)?;
        let (d_e1_skip, d_u1) = split_channels(&d_cat1, SEM_WIDTHS[0])?;
        let d_e2 = bilinear_resize_backward(&d_u1, s.h / 4, s.w / 4);
        let d_p2 = self.sem2.backward(&cache.sem[1], &d_e2)?;
        let e1_shape = Shape::new(s.n, SEM_WIDTHS[0], h2, w2);
        let d_e1 = ew_add(&d_e1_skip, &max_pool2_backward(e1_shape, &cache.pool2, &d_p2))?;
        let d_p1 = self.sem1.backward(&cache.sem[0], &d_e1)?;
        let d_stem = ew_add(
            &d_stem_skip,
            &max_pool2_backward(cache.stem_out.shape(), &cache.pool1, &d_p1),
        )?;
        let dx = self.stem.backward(&cache.x, &d_stem)?;
        if self.config.residual_skip {
            ew_add(&dx, &d_pre)
        } else {
            Ok(dx)
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_module(self, self.config.fingerprint())
    }

    /// Rebuilds a network from a checkpoint, taking the configuration from
    /// its fingerprint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = UrieConfig::from_fingerprint(&ck.fingerprint)?;
        let mut net = Self::from_seed(config, 0)?;
        ck.apply_to(&mut net, &config.fingerprint())?;
        Ok(net)
    }

    /// Like [`Urie::from_checkpoint`] but fails unless the checkpoint was
    /// written under `config`.
    pub fn from_checkpoint_with(ck: &Checkpoint, config: &UrieConfig) -> Result<Self> {
        let mut net = Self::from_seed(*config, 0)?;
        ck.apply_to(&mut net, &config.fingerprint())?;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Module for Urie {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, bool)) {
        use crate::nn::join;
        self.stem.visit(&join(prefix, "stem"), f);
        self.sem1.visit(&join(prefix, "sem1"), f);
        self.sem2.visit(&join(prefix, "sem2"), f);
        self.sem3.visit(&join(prefix, "sem3"), f);
        self.sem4.visit(&join(prefix, "sem4"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor, bool)) {
        use crate::nn::join;
        self.stem.visit_mut(&join(prefix, "stem"), f);
        self.sem1.visit_mut(&join(prefix, "sem1"), f);
        self.sem2.visit_mut(&join(prefix, "sem2"), f);
        self.sem3.visit_mut(&join(prefix, "sem3"), f);
        self.sem4.visit_mut(&join(prefix, "sem4"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Forward pass; in train mode the running statistics are updated.
pub fn urie_forward(x: &Tensor, p: &mut Urie, mode: Mode) -> Result<Tensor> {
    let (y, cache) = p.forward(x, mode)?;
    p.commit(&cache);
    Ok(y)
}
