//! Small convolutional recognizer that the enhancer is trained against.
//!
//! conv 3→16 · BN · LReLU · maxpool · conv 16→32 · BN · LReLU · maxpool ·
//! global average pool · FC → logits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::ToyDataset;
use crate::error::{Error, Result};
use crate::loss::{argmax, cross_entropy};
use crate::nn::{
    join, max_pool2, max_pool2_backward, Conv2d, Linear, MaxPoolIndices, Mode, Module, Norm, NormCache, NormKind,
    LEAKY_SLOPE,
};
use crate::optim::AdamState;
use crate::rng::Rng;
use crate::tensor::{leaky_relu, leaky_relu_backward, Shape, Tensor};

pub const WIDTHS: [usize; 2] = [16, 32];

#[derive(Debug, Clone, PartialEq)]
pub struct TinyClassifier {
    pub conv1: Conv2d,
    pub bn1: Norm,
    pub conv2: Conv2d,
    pub bn2: Norm,
    pub fc: Linear,
    /// A frozen classifier refuses [`TinyClassifier::backward`]; use
    /// [`TinyClassifier::grad_input`] to propagate through it.
    pub frozen: bool,
}

#[derive(Debug, Clone)]
pub struct ClassifierCache {
    x: Tensor,
    b1: Tensor,
    n1: NormCache,
    a1_shape: Shape,
    pool1: MaxPoolIndices,
    p1: Tensor,
    b2: Tensor,
    n2: NormCache,
    a2_shape: Shape,
    pool2: MaxPoolIndices,
    gap: Tensor,
}

impl TinyClassifier {
    pub fn new(classes: usize, rng: &mut Rng) -> Result<Self> {
        if classes < 2 {
            return Err(Error::contract("classifier", "need at least two classes"));
        }
        let [w1, w2] = WIDTHS;
        Ok(Self {
            conv1: Conv2d::new(3, w1, 3, 1, 1, rng),
            bn1: Norm::new(NormKind::Batch, w1),
            conv2: Conv2d::new(w1, w2, 3, 1, 1, rng),
            bn2: Norm::new(NormKind::Batch, w2),
            fc: Linear::new(w2, classes, rng),
            frozen: false,
        })
    }

    pub fn classes(&self) -> usize {
        self.fc.outputs()
    }

    pub fn fingerprint(&self) -> String {
        format!("tinyclf/v1 classes={}", self.classes())
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, ClassifierCache)> {
        let s = x.shape();
        if s.c != 3 || s.h % 4 != 0 || s.w % 4 != 0 || s.h == 0 || s.w == 0 {
            return Err(Error::contract("classifier", format!("unsupported input {s}")));
        }
        let z1 = self.conv1.forward(x)?;
        let (b1, n1) = self.bn1.forward(&z1, mode)?;
        let a1 = leaky_relu(&b1, LEAKY_SLOPE);
        let (p1, pool1) = max_pool2(&a1)?;
        let z2 = self.conv2.forward(&p1)?;
        let (b2, n2) = self.bn2.forward(&z2, mode)?;
        let a2 = leaky_relu(&b2, LEAKY_SLOPE);
        let (p2, pool2) = max_pool2(&a2)?;
        let ps = p2.shape();
        let mut gap = Tensor::zeros(Shape::new(ps.n, ps.c, 1, 1));
        for (g, plane) in gap.data_mut().iter_mut().zip(p2.data().chunks(ps.plane())) {
            *g = plane.iter().sum::<f64>() / ps.plane() as f64;
        }
        let logits = self.fc.forward(&gap)?;
        Ok((
            logits,
            ClassifierCache {
                x: x.clone(),
                n1,
                a1_shape: a1.shape(),
                b1,
                pool1,
                p1,
                n2,
                a2_shape: a2.shape(),
                b2,
                pool2,
                gap,
            },
        ))
    }

    /// Eval-mode logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x, Mode::Eval)?.0)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax(&self.logits(x)?))
    }

    pub fn commit(&mut self, cache: &ClassifierCache) {
        self.bn1.commit(&cache.n1);
        self.bn2.commit(&cache.n2);
    }

    /// Activation gradients for every layer, with the input gradient last.
    fn propagate(&self, cache: &ClassifierCache, g: &Tensor) -> Result<Grads> {
        let gs = cache.gap.shape();
        let d_gap = self.fc.grad_input(gs, g)?;
        let p2_shape = Shape::new(gs.n, gs.c, cache.a2_shape.h / 2, cache.a2_shape.w / 2);
        let mut d_p2 = Tensor::zeros(p2_shape);
        let area = p2_shape.plane() as f64;
        for (plane, dg) in d_p2.data_mut().chunks_mut(p2_shape.plane()).zip(d_gap.data()) {
            plane.iter_mut().for_each(|v| *v = dg / area);
        }
        let d_a2 = max_pool2_backward(cache.a2_shape, &cache.pool2, &d_p2);
        let d_b2 = leaky_relu_backward(&cache.b2, LEAKY_SLOPE, &d_a2);
        let d_z2 = self.bn2.grad_input(&cache.n2, &d_b2)?;
        let d_p1 = self.conv2.grad_input(cache.p1.shape(), &d_z2)?;
        let d_a1 = max_pool2_backward(cache.a1_shape, &cache.pool1, &d_p1);
        let d_b1 = leaky_relu_backward(&cache.b1, LEAKY_SLOPE, &d_a1);
        let d_z1 = self.bn1.grad_input(&cache.n1, &d_b1)?;
        let dx = self.conv1.grad_input(cache.x.shape(), &d_z1)?;
        Ok(Grads {
            d_b2,
            d_z2,
            d_b1,
            d_z1,
            dx,
        })
    }

    /// Gradient with respect to the input only. Parameters are untouched.
    pub fn grad_input(&self, cache: &ClassifierCache, grad_logits: &Tensor) -> Result<Tensor> {
        Ok(self.propagate(cache, grad_logits)?.dx)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &ClassifierCache, grad_logits: &Tensor) -> Result<Tensor> {
        if self.frozen {
            return Err(Error::contract("classifier", "backward on a frozen classifier"));
        }
        let g = self.propagate(cache, grad_logits)?;
        self.fc.accumulate_param_grads(&cache.gap, grad_logits)?;
        self.bn2.accumulate_param_grads(&cache.n2, &g.d_b2);
        self.conv2.accumulate_param_grads(&cache.p1, &g.d_z2)?;
        self.bn1.accumulate_param_grads(&cache.n1, &g.d_b1);
        self.conv1.accumulate_param_grads(&cache.x, &g.d_z1)?;
        Ok(g.dx)
    }

    pub fn accuracy(&self, images: &Tensor, labels: &[usize]) -> Result<f64> {
        let mut correct = 0usize;
        let n = images.shape().n;
        for start in (0..n).step_by(64) {
            let count = 64.min(n - start);
            let pred = self.predict(&images.batch_slice(start, count))?;
            correct += pred
                .iter()
                .zip(&labels[start..start + count])
                .filter(|(a, b)| a == b)
                .count();
        }
        Ok(correct as f64 / n.max(1) as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_module(self, self.fingerprint())
    }

    /// Loaded classifiers are frozen.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let classes = ck
            .fingerprint
            .strip_prefix("tinyclf/v1 classes=")
            .and_then(|k| k.parse::<usize>().ok())
            .ok_or_else(|| Error::Checkpoint(format!("not a classifier checkpoint: `{}`", ck.fingerprint)))?;
        let mut clf = Self::new(classes, &mut Rng::new(0))?;
        let fp = clf.fingerprint();
        ck.apply_to(&mut clf, &fp)?;
        clf.frozen = true;
        Ok(clf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

struct Grads {
    d_b2: Tensor,
    d_z2: Tensor,
    d_b1: Tensor,
    d_z1: Tensor,
    dx: Tensor,
}

impl Module for TinyClassifier {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, bool)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        self.fc.visit(&join(prefix, "fc"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor, bool)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            lr: 0.01,
            seed: 0,
        }
    }
}

/// Per-epoch record of classifier pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

/// Trains a classifier on clean images and returns it frozen.
pub fn pretrain_classifier(ds: &ToyDataset, cfg: &PretrainConfig) -> Result<(TinyClassifier, Vec<PretrainEpoch>)> {
    if ds.is_empty() {
        return Err(Error::contract("pretrain_classifier", "empty training set"));
    }
    if cfg.batch_size < 2 {
        return Err(Error::contract(
            "pretrain_classifier",
            "batch norm needs batches of at least 2",
        ));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut clf = TinyClassifier::new(ds.classes, &mut rng)?;
    let mut adam = AdamState::new(&clf);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (x, y) = ds.gather(chunk)?;
            clf.zero_grad();
            let (logits, cache) = clf.forward(&x, Mode::Train)?;
            let (loss, g) = cross_entropy(&logits, &y)?;
            clf.commit(&cache);
            clf.backward(&cache, &g)?;
            adam.step(&mut clf, cfg.lr)?;
            total += loss;
            batches += 1;
        }
        let mean_loss = total / batches.max(1) as f64;
        if !mean_loss.is_finite() {
            return Err(Error::NonFinite(format!("classifier loss at epoch {epoch}")));
        }
        log.push(PretrainEpoch {
            epoch,
            mean_loss,
            train_accuracy: clf.accuracy(&ds.images, &ds.labels)?,
        });
    }
    clf.visit_mut("", &mut |_, t, _| t.clear_grad());
    clf.frozen = true;
    Ok((clf, log))
}
