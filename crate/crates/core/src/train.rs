//! Enhancer training against a frozen recognizer or a pixel objective.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::augment;
use crate::classifier::TinyClassifier;
use crate::corrupt::{corrupt, sample_spec, Pool};
use crate::dataset::ToyDataset;
use crate::error::{Error, Result};
use crate::loss::{cross_entropy, mse, ssim_with_grad};
use crate::net::Urie;
use crate::nn::{Mode, Module};
use crate::optim::AdamState;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cross-entropy of the frozen classifier on the enhanced image.
    Recognition,
    /// Mean squared error to the clean image.
    Mse,
    /// `1 − SSIM` to the clean image.
    Ssim,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Recognition => "recognition",
            LossKind::Mse => "mse",
            LossKind::Ssim => "ssim",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recognition" => Ok(LossKind::Recognition),
            "mse" => Ok(LossKind::Mse),
            "ssim" => Ok(LossKind::Ssim),
            _ => Err(Error::contract("loss_kind", format!("unknown loss `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss_kind: LossKind,
    pub data_fraction: f64,
    pub corruption_pool: Pool,
    pub include_clean: bool,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            lr_decay_every: 8,
            lr_decay_factor: 10.0,
            epochs: 30,
            batch_size: 16,
            loss_kind: LossKind::Recognition,
            data_fraction: 1.0,
            corruption_pool: Pool::Seen,
            include_clean: true,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract("train_config", m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return bad(format!("data_fraction must be in (0, 1], got {}", self.data_fraction));
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be at least 1".into());
        }
        if !(self.lr_decay_factor >= 1.0) {
            return bad(format!(
                "lr_decay_factor must be at least 1, got {}",
                self.lr_decay_factor
            ));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 (batch statistics)".into());
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr / self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub steps: usize,
    pub images: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_s: Option<f64>,
}

/// Degraded input and training target for one batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub clean: Tensor,
    pub degraded: Tensor,
    pub labels: Vec<usize>,
}

/// Augments and corrupts the images at `idx`, one corruption draw per image.
pub fn prepare_batch(ds: &ToyDataset, idx: &[usize], cfg: &TrainConfig, rng: &mut Rng) -> Result<Batch> {
    let mut clean = Vec::with_capacity(idx.len());
    let mut degraded = Vec::with_capacity(idx.len());
    for &i in idx {
        let img = ds.image(i);
        let img = if cfg.augment { augment(&img, rng)? } else { img };
        let spec = sample_spec(rng, cfg.corruption_pool, cfg.include_clean);
        degraded.push(corrupt(&img, &spec)?);
        clean.push(img);
    }
    Ok(Batch {
        clean: Tensor::stack(&clean)?,
        degraded: Tensor::stack(&degraded)?,
        labels: idx.iter().map(|&i| ds.labels[i]).collect(),
    })
}

/// Loss of one batch and its gradient with respect to the enhanced image.
pub fn batch_loss(kind: LossKind, enhanced: &Tensor, batch: &Batch, clf: &TinyClassifier) -> Result<(f64, Tensor)> {
    match kind {
        LossKind::Recognition => {
            let (logits, cache) = clf.forward(enhanced, Mode::Eval)?;
            let (loss, g) = cross_entropy(&logits, &batch.labels)?;
            Ok((loss, clf.grad_input(&cache, &g)?))
        }
        LossKind::Mse => mse(enhanced, &batch.clean),
        LossKind::Ssim => {
            let (s, g) = ssim_with_grad(enhanced, &batch.clean)?;
            Ok((1.0 - s, g.scale(-1.0)))
        }
    }
}

/// One optimization step. Returns the batch loss.
pub fn train_step(
    urie: &mut Urie,
    adam: &mut AdamState,
    clf: &TinyClassifier,
    batch: &Batch,
    kind: LossKind,
    lr: f64,
) -> Result<f64> {
    urie.zero_grad();
    let (enhanced, cache) = urie.forward(&batch.degraded, Mode::Train)?;
    let (loss, g) = batch_loss(kind, &enhanced, batch, clf)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("{} loss", kind.as_str())));
    }
    urie.backward(&cache, &g)?;
    adam.step(urie, lr)?;
    urie.commit(&cache);
    Ok(loss)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Record wall-clock seconds per epoch. Off by default so that logs of
    /// identical runs are byte-identical.
    pub wall_time: bool,
}

/// Trains `urie` in place and returns one record per epoch.
///
/// On a non-finite loss or gradient the network is left at its state before
/// the failing step and the error is returned.
pub fn train_urie(
    urie: &mut Urie,
    clf: &TinyClassifier,
    ds: &ToyDataset,
    cfg: &TrainConfig,
    opts: TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if !clf.frozen {
        return Err(Error::contract("train_urie", "classifier must be frozen"));
    }
    if ds.is_empty() {
        return Err(Error::contract("train_urie", "empty training set"));
    }
    let mut rng = Rng::new(cfg.seed);
    let data = ds.subset(cfg.data_fraction, rng.next_u64())?;
    if data.len() < 2 {
        return Err(Error::contract("train_urie", "need at least two training images"));
    }
    let mut order_rng = rng.fork();
    let mut batch_rng = rng.fork();
    let mut adam = AdamState::new(urie);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.lr_at(epoch);
        order_rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut steps = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            if idx.len() < 2 {
                continue;
            }
            let batch = prepare_batch(&data, idx, cfg, &mut batch_rng)?;
            // train_step checks the loss and gradients before touching any
            // parameter or running statistic, so a failed step leaves the
            // last good state in place
            match train_step(urie, &mut adam, clf, &batch, cfg.loss_kind, lr) {
                Ok(loss) => total += loss,
                Err(e) => {
                    urie.visit_mut("", &mut |_, t, _| t.clear_grad());
                    return Err(e);
                }
            }
            steps += 1;
        }
        let record = EpochRecord {
            epoch,
            lr,
            mean_loss: total / steps.max(1) as f64,
            steps,
            images: data.len(),
            wall_time_s: opts.wall_time.then(|| start.elapsed().as_secs_f64()),
        };
        on_epoch(&record);
        records.push(record);
    }
    urie.visit_mut("", &mut |_, t, _| t.clear_grad());
    Ok(records)
}

/// Line-delimited JSON, one record per line.
pub fn write_log(records: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
