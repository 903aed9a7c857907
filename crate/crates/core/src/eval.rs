//! Clean / seen / unseen evaluation of an enhancer in front of a frozen
//! classifier.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Entry};
use crate::classifier::TinyClassifier;
use crate::corrupt::{corrupt, sample_spec, CorruptionKind, CorruptionSpec, Pool};
use crate::dataset::ToyDataset;
use crate::error::{Error, Result};
use crate::loss::{argmax, mse, ssim};
use crate::net::Urie;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const SPLIT_NAMES: [&str; 3] = ["clean", "seen", "unseen"];
const SPLITS_FINGERPRINT: &str = "evalsplits/v1";
const BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSeeds {
    pub seen: u64,
    pub unseen: u64,
    /// Corrupted copies drawn per test image.
    pub copies: usize,
}

impl Default for SplitSeeds {
    fn default() -> Self {
        Self {
            seen: 1001,
            unseen: 2002,
            copies: 2,
        }
    }
}

/// One frozen evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Corruption applied to each image (identity for the clean set).
    pub specs: Vec<CorruptionSpec>,
    /// Index of each image's clean reference in the clean set.
    pub source: Vec<usize>,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSplits {
    pub clean: EvalSet,
    pub seen: EvalSet,
    pub unseen: EvalSet,
}

fn corrupted_set(test: &ToyDataset, pool: Pool, seed: u64, copies: usize) -> Result<EvalSet> {
    let mut rng = Rng::new(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut specs = Vec::new();
    let mut source = Vec::new();
    for _ in 0..copies {
        for i in 0..test.len() {
            let spec = sample_spec(&mut rng, pool, false);
            images.push(corrupt(&test.image(i), &spec)?);
            labels.push(test.labels[i]);
            specs.push(spec);
            source.push(i);
        }
    }
    Ok(EvalSet {
        images: Tensor::stack(&images)?,
        labels,
        specs,
        source,
    })
}

/// Draws the corrupted sets once. The clean set is the test split verbatim.
pub fn build_eval_splits(test: &ToyDataset, seeds: &SplitSeeds) -> Result<EvalSplits> {
    if test.is_empty() {
        return Err(Error::contract("build_eval_splits", "empty test split"));
    }
    if seeds.copies == 0 {
        return Err(Error::contract("build_eval_splits", "copies must be at least 1"));
    }
    let n = test.len();
    Ok(EvalSplits {
        clean: EvalSet {
            images: test.images.clone(),
            labels: test.labels.clone(),
            specs: vec![CorruptionSpec::identity(); n],
            source: (0..n).collect(),
        },
        seen: corrupted_set(test, Pool::Seen, seeds.seen, seeds.copies)?,
        unseen: corrupted_set(test, Pool::Unseen, seeds.unseen, seeds.copies)?,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SetMeta {
    labels: Vec<usize>,
    specs: Vec<CorruptionSpec>,
    source: Vec<usize>,
}

impl EvalSplits {
    pub fn sets(&self) -> [(&'static str, &EvalSet); 3] {
        [("clean", &self.clean), ("seen", &self.seen), ("unseen", &self.unseen)]
    }

    /// Images go into a binary container (`<path>`), labels and specs into
    /// `<path>.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut entries = Vec::new();
        let mut meta = BTreeMap::new();
        for (name, set) in self.sets() {
            entries.push(Entry {
                name: format!("{name}.images"),
                trainable: false,
                shape: set.images.shape(),
                data: set.images.data().to_vec(),
            });
            meta.insert(
                name,
                SetMeta {
                    labels: set.labels.clone(),
                    specs: set.specs.clone(),
                    source: set.source.clone(),
                },
            );
        }
        Checkpoint {
            version: crate::checkpoint::FORMAT_VERSION,
            fingerprint: SPLITS_FINGERPRINT.into(),
            entries,
        }
        .save(path)?;
        let json_path = meta_path(path);
        let json = serde_json::to_string(&meta)?;
        std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ck = Checkpoint::load(path)?;
        if ck.fingerprint != SPLITS_FINGERPRINT {
            return Err(Error::Fingerprint {
                expected: SPLITS_FINGERPRINT.into(),
                found: ck.fingerprint,
            });
        }
        let json_path = meta_path(path);
        let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let mut meta: BTreeMap<String, SetMeta> = serde_json::from_str(&text)?;
        let mut take = |name: &str| -> Result<EvalSet> {
            let entry = ck
                .entries
                .iter()
                .find(|e| e.name == format!("{name}.images"))
                .ok_or_else(|| Error::Checkpoint(format!("missing `{name}.images`")))?;
            let m = meta
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing metadata for `{name}`")))?;
            let images = Tensor::from_vec(entry.shape, entry.data.clone())?;
            if m.labels.len() != images.shape().n || m.specs.len() != m.labels.len() || m.source.len() != m.labels.len()
            {
                return Err(Error::Checkpoint(format!(
                    "`{name}` metadata does not match its images"
                )));
            }
            Ok(EvalSet {
                images,
                labels: m.labels,
                specs: m.specs,
                source: m.source,
            })
        };
        Ok(Self {
            clean: take("clean")?,
            seen: take("seen")?,
            unseen: take("unseen")?,
        })
    }
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitAccuracy {
    pub count: usize,
    pub without: f64,
    pub with: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KindAccuracy {
    pub split: String,
    pub kind: CorruptionKind,
    pub count: usize,
    pub without: f64,
    pub with: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Restoration {
    pub mse_without: f64,
    pub mse_with: f64,
    pub ssim_without: f64,
    pub ssim_with: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub enhancer: String,
    pub clean: SplitAccuracy,
    pub seen: SplitAccuracy,
    pub unseen: SplitAccuracy,
    pub per_kind: Vec<KindAccuracy>,
    pub restoration: Restoration,
    /// Enhancer multiply-accumulates per image at the evaluation size.
    pub mac_count: u64,
}

pub const REPORT_SCHEMA: &str = include_str!("../data/eval_report.schema.json");

/// Identity or a trained network.
#[derive(Debug, Clone, Copy)]
pub enum Enhancer<'a> {
    Identity,
    Urie(&'a Urie),
}

impl Enhancer<'_> {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Enhancer::Identity => Ok(x.clone()),
            Enhancer::Urie(u) => u.enhance(x),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Enhancer::Identity => "identity".into(),
            Enhancer::Urie(u) => u.config.fingerprint(),
        }
    }
}

fn enhance_all(enh: Enhancer<'_>, images: &Tensor) -> Result<Tensor> {
    let n = images.shape().n;
    let mut out = Vec::with_capacity(n.div_ceil(BATCH));
    for start in (0..n).step_by(BATCH) {
        out.push(enh.apply(&images.batch_slice(start, BATCH.min(n - start)))?);
    }
    concat_batch(&out)
}

fn concat_batch(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::contract("concat_batch", "nothing to join"))?;
    let s = first.shape();
    let n: usize = parts.iter().map(|p| p.shape().n).sum();
    let mut data = Vec::with_capacity(n * s.sample());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(crate::tensor::Shape::new(n, s.c, s.h, s.w), data)
}

fn predictions(clf: &TinyClassifier, images: &Tensor) -> Result<Vec<usize>> {
    let n = images.shape().n;
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(BATCH) {
        out.extend(argmax(&clf.logits(&images.batch_slice(start, BATCH.min(n - start)))?));
    }
    Ok(out)
}

fn fraction(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Top-1 accuracy per split with and without the enhancer, per-kind
/// accuracy, and restoration metrics over the corrupted splits.
pub fn evaluate(enhancer: Enhancer<'_>, clf: &TinyClassifier, splits: &EvalSplits) -> Result<EvalReport> {
    let mut accs = Vec::new();
    let mut per_kind = Vec::new();
    let mut sq_without = 0.0;
    let mut sq_with = 0.0;
    let mut ss_without = 0.0;
    let mut ss_with = 0.0;
    let mut restored = 0usize;
    let (ih, iw) = {
        let s = splits.clean.images.shape();
        (s.h, s.w)
    };
    for (name, set) in splits.sets() {
        let enhanced = enhance_all(enhancer, &set.images)?;
        let base = predictions(clf, &set.images)?;
        let with = predictions(clf, &enhanced)?;
        let hit_b = base.iter().zip(&set.labels).filter(|(p, y)| p == y).count();
        let hit_w = with.iter().zip(&set.labels).filter(|(p, y)| p == y).count();
        let (without, with_acc) = (fraction(hit_b, set.len()), fraction(hit_w, set.len()));
        accs.push(SplitAccuracy {
            count: set.len(),
            without,
            with: with_acc,
            delta: with_acc - without,
        });
        let mut kinds: BTreeMap<CorruptionKind, (usize, usize, usize)> = BTreeMap::new();
        for i in 0..set.len() {
            let e = kinds.entry(set.specs[i].kind).or_default();
            e.0 += 1;
            e.1 += usize::from(base[i] == set.labels[i]);
            e.2 += usize::from(with[i] == set.labels[i]);
        }
        for (kind, (count, b, w)) in kinds {
            per_kind.push(KindAccuracy {
                split: name.into(),
                kind,
                count,
                without: fraction(b, count),
                with: fraction(w, count),
            });
        }
        if name != "clean" {
            for i in 0..set.len() {
                let reference = splits.clean.images.batch_slice(set.source[i], 1);
                let x = set.images.batch_slice(i, 1);
                let y = enhanced.batch_slice(i, 1);
                sq_without += mse(&x, &reference)?.0;
                sq_with += mse(&y, &reference)?.0;
                ss_without += ssim(&x, &reference)?;
                ss_with += ssim(&y, &reference)?;
                restored += 1;
            }
        }
    }
    let r = restored.max(1) as f64;
    let mac_count = match enhancer {
        Enhancer::Identity => 0,
        Enhancer::Urie(u) => u.mac_count(ih, iw)?,
    };
    Ok(EvalReport {
        enhancer: enhancer.name(),
        clean: accs[0],
        seen: accs[1],
        unseen: accs[2],
        per_kind,
        restoration: Restoration {
            mse_without: sq_without / r,
            mse_with: sq_with / r,
            ssim_without: ss_without / r,
            ssim_with: ss_with / r,
        },
        mac_count,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Per-kind accuracy table for plotting.
    pub fn per_kind_csv(&self) -> String {
        let mut out = String::from("split,kind,count,accuracy_without,accuracy_with\n");
        for k in &self.per_kind {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                k.split, k.kind, k.count, k.without, k.with
            ));
        }
        out
    }

    pub fn split(&self, name: &str) -> Option<&SplitAccuracy> {
        match name {
            "clean" => Some(&self.clean),
            "seen" => Some(&self.seen),
            "unseen" => Some(&self.unseen),
            _ => None,
        }
    }
}
