//! Procedurally rendered toy recognition dataset.
//!
//! Each class has its own silhouette and fill texture. Colours, position,
//! size and background are jittered per image from the seed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

pub const IMAGE_SIZE: usize = 32;
pub const MAX_CLASSES: usize = 8;
pub const DEFAULT_CLASSES: usize = 4;

const CLASS_NAMES: [&str; MAX_CLASSES] = [
    "disc", "square", "triangle", "cross", "ring", "diamond", "bar", "corner",
];

/// Mixed into the seed of test splits so they never repeat training images.
const TEST_SALT: u64 = 0x7E57_5EED_0000_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl ToyDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        let s = images.shape();
        if s.n != labels.len() {
            return Err(Error::contract(
                "dataset",
                format!("{} images, {} labels", s.n, labels.len()),
            ));
        }
        if s.c != 3 || s.h % 16 != 0 || s.w % 16 != 0 {
            return Err(Error::contract("dataset", format!("bad image shape {s}")));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::contract(
                "dataset",
                format!("label {y} out of range for {classes} classes"),
            ));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> Tensor {
        self.images.batch_slice(i, 1)
    }

    /// Images and labels at the given indices, in that order.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let imgs: Vec<Tensor> = idx.iter().map(|&i| self.image(i)).collect();
        Ok((Tensor::stack(&imgs)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    /// `⌈fraction · len⌉` images chosen by a seeded shuffle, kept in their
    /// original order.
    pub fn subset(&self, fraction: f64, seed: u64) -> Result<ToyDataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::contract("subset", format!("fraction {fraction} outside (0, 1]")));
        }
        let keep = subset_size(self.len(), fraction);
        let mut idx: Vec<usize> = (0..self.len()).collect();
        Rng::new(seed).shuffle(&mut idx);
        idx.truncate(keep);
        idx.sort_unstable();
        let (images, labels) = self.gather(&idx)?;
        ToyDataset::new(images, labels, self.classes, self.split)
    }
}

/// `⌈fraction · n⌉`, computed so that exact fractions such as 1/4 of 32 are
/// not pushed up by rounding error.
pub fn subset_size(n: usize, fraction: f64) -> usize {
    let exact = fraction * n as f64;
    let rounded = exact.round();
    if (exact - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        exact.ceil() as usize
    }
}

pub fn class_name(class: usize) -> &'static str {
    CLASS_NAMES[class]
}

fn check_classes(classes: usize) -> Result<()> {
    if !(2..=MAX_CLASSES).contains(&classes) {
        return Err(Error::contract(
            "build_toy_dataset",
            format!("classes must be in 2..={MAX_CLASSES}, got {classes}"),
        ));
    }
    Ok(())
}

/// Training split: `n_per_class` images per class, classes interleaved.
pub fn build_toy_dataset(seed: u64, n_per_class: usize, classes: usize) -> Result<ToyDataset> {
    build_split(seed, n_per_class, classes, Split::Train)
}

/// Held-out split drawn from the same distribution with a disjoint stream.
pub fn build_test_split(seed: u64, n_per_class: usize, classes: usize) -> Result<ToyDataset> {
    build_split(seed ^ TEST_SALT, n_per_class, classes, Split::Test)
}

fn build_split(seed: u64, n_per_class: usize, classes: usize, split: Split) -> Result<ToyDataset> {
    check_classes(classes)?;
    let mut rng = Rng::new(seed);
    let n = n_per_class * classes;
    let mut images = Tensor::zeros(Shape::new(n, 3, IMAGE_SIZE, IMAGE_SIZE));
    let mut labels = Vec::with_capacity(n);
    let sample = 3 * IMAGE_SIZE * IMAGE_SIZE;
    for i in 0..n {
        let class = i % classes;
        let img = render(class, &mut rng);
        images.data_mut()[i * sample..(i + 1) * sample].copy_from_slice(&img);
        labels.push(class);
    }
    ToyDataset::new(images, labels, classes, split)
}

/// Whether `(dy, dx)`, in units of the shape radius, lies inside the class
/// silhouette.
fn inside(class: usize, dy: f64, dx: f64) -> bool {
    let r2 = dy * dy + dx * dx;
    match class {
        0 => r2 <= 1.0,
        1 => dy.abs() <= 0.85 && dx.abs() <= 0.85,
        2 => dy <= 0.8 && dy >= -0.9 && dx.abs() <= (dy + 0.9) * 0.6,
        3 => (dy.abs() <= 0.3 && dx.abs() <= 1.0) || (dx.abs() <= 0.3 && dy.abs() <= 1.0),
        4 => (0.45..=1.0).contains(&r2),
        5 => dy.abs() + dx.abs() <= 1.0,
        6 => dy.abs() <= 0.35 && dx.abs() <= 1.0,
        _ => (dy.abs() <= 0.3 && (-1.0..=0.6).contains(&dx)) || (dx.abs() <= 0.3 && (-1.0..=0.6).contains(&dy)),
    }
}

/// Fill texture in `[0, 1]` at absolute pixel coordinates.
fn texture(class: usize, y: usize, x: usize) -> f64 {
    let (y, x) = (y as f64, x as f64);
    let tau = std::f64::consts::TAU;
    0.5 + 0.5
        * match class {
            0 => (tau * y / 4.0).sin(),
            1 => (tau * x / 4.0).sin(),
            2 => (tau * (x + y) / 5.0).sin(),
            3 => (tau * y / 4.0).sin() * (tau * x / 4.0).sin(),
            4 => (tau * (x - y) / 5.0).sin(),
            5 => (tau * y / 6.0).cos(),
            6 => (tau * x / 3.0).cos(),
            _ => (tau * (x + 2.0 * y) / 7.0).sin(),
        }
}

fn random_color(rng: &mut Rng, lo: f64, hi: f64) -> [f64; 3] {
    [
        lo + (hi - lo) * rng.uniform(),
        lo + (hi - lo) * rng.uniform(),
        lo + (hi - lo) * rng.uniform(),
    ]
}

fn render(class: usize, rng: &mut Rng) -> Vec<f64> {
    let n = IMAGE_SIZE;
    let bg = random_color(rng, 0.05, 0.4);
    let fg = random_color(rng, 0.55, 0.95);
    let radius = 8.0 + 3.0 * rng.uniform();
    let cy = 13.0 + 6.0 * rng.uniform();
    let cx = 13.0 + 6.0 * rng.uniform();
    let mut img = vec![0.0; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let dy = (y as f64 + 0.5 - cy) / radius;
            let dx = (x as f64 + 0.5 - cx) / radius;
            let hit = inside(class, dy, dx);
            let t = texture(class, y, x);
            for c in 0..3 {
                let grain = 0.04 * (rng.uniform() - 0.5);
                let v = if hit { fg[c] * (0.55 + 0.45 * t) } else { bg[c] };
                img[c * n * n + y * n + x] = (v + grain).clamp(0.0, 1.0);
            }
        }
    }
    img
}
