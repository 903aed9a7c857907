//! Seeded synthetic corruptions at five severities.
//!
//! Every stochastic corruption draws only from `Rng::new(spec.seed)`, so
//! [`corrupt`] is a pure function of the image and the [`CorruptionSpec`]. Severity
//! parameters live in `data/severity.json`:
//!
//! | kind            | parameter                         |
//! |-----------------|-----------------------------------|
//! | gaussian_noise  | noise std σ                       |
//! | shot_noise      | photon count scale λ              |
//! | impulse_noise   | salt-and-pepper rate              |
//! | speckle_noise   | multiplicative noise std          |
//! | gaussian_blur   | kernel std in pixels              |
//! | defocus_blur    | disk radius in pixels             |
//! | brightness      | additive offset                   |
//! | contrast        | contrast factor                   |
//! | saturate        | chroma gain about luma            |
//! | pixelate        | block size in pixels              |
//! | fog             | peak fog density                  |

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Identity,
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    Brightness,
    Contrast,
    Pixelate,
    Fog,
    SpeckleNoise,
    GaussianBlur,
    Saturate,
    // Reserved: need texture assets, iterative pixel shuffles or a codec.
    GlassBlur,
    MotionBlur,
    ZoomBlur,
    Snow,
    Frost,
    ElasticTransform,
    JpegCompression,
    Spatter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Seen,
    Unseen,
    All,
}

pub const SEEN: [CorruptionKind; 8] = [
    CorruptionKind::GaussianNoise,
    CorruptionKind::ShotNoise,
    CorruptionKind::ImpulseNoise,
    CorruptionKind::DefocusBlur,
    CorruptionKind::Brightness,
    CorruptionKind::Contrast,
    CorruptionKind::Pixelate,
    CorruptionKind::Fog,
];

pub const UNSEEN: [CorruptionKind; 3] = [
    CorruptionKind::SpeckleNoise,
    CorruptionKind::GaussianBlur,
    CorruptionKind::Saturate,
];

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 20] = [
        CorruptionKind::Identity,
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
        CorruptionKind::Fog,
        CorruptionKind::SpeckleNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Saturate,
        CorruptionKind::GlassBlur,
        CorruptionKind::MotionBlur,
        CorruptionKind::ZoomBlur,
        CorruptionKind::Snow,
        CorruptionKind::Frost,
        CorruptionKind::ElasticTransform,
        CorruptionKind::JpegCompression,
        CorruptionKind::Spatter,
    ];

    pub fn name(self) -> &'static str {
        use CorruptionKind::*;
        match self {
            Identity => "identity",
            GaussianNoise => "gaussian_noise",
            ShotNoise => "shot_noise",
            ImpulseNoise => "impulse_noise",
            DefocusBlur => "defocus_blur",
            Brightness => "brightness",
            Contrast => "contrast",
            Pixelate => "pixelate",
            Fog => "fog",
            SpeckleNoise => "speckle_noise",
            GaussianBlur => "gaussian_blur",
            Saturate => "saturate",
            GlassBlur => "glass_blur",
            MotionBlur => "motion_blur",
            ZoomBlur => "zoom_blur",
            Snow => "snow",
            Frost => "frost",
            ElasticTransform => "elastic_transform",
            JpegCompression => "jpeg_compression",
            Spatter => "spatter",
        }
    }

    pub fn is_implemented(self) -> bool {
        self == CorruptionKind::Identity || SEEN.contains(&self) || UNSEEN.contains(&self)
    }

    /// Training split the kind belongs to, implemented or not. `None` for
    /// identity.
    pub fn split(self) -> Option<Pool> {
        use CorruptionKind::*;
        match self {
            Identity => None,
            SpeckleNoise | GaussianBlur | Saturate | Spatter => Some(Pool::Unseen),
            _ => Some(Pool::Seen),
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownCorruption(s.to_string()))
    }
}

impl Pool {
    /// Implemented kinds in the pool.
    pub fn kinds(self) -> Vec<CorruptionKind> {
        match self {
            Pool::Seen => SEEN.to_vec(),
            Pool::Unseen => UNSEEN.to_vec(),
            Pool::All => SEEN.iter().chain(&UNSEEN).copied().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Self {
        Self { kind, severity, seed }
    }

    pub fn identity() -> Self {
        Self::new(CorruptionKind::Identity, 1, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::Severity(self.severity));
        }
        if !self.kind.is_implemented() {
            return Err(Error::ReservedCorruption(self.kind.name()));
        }
        Ok(())
    }
}

/// Five parameters per implemented kind, indexed by severity − 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeverityTable {
    pub gaussian_noise: [f64; 5],
    pub shot_noise: [f64; 5],
    pub impulse_noise: [f64; 5],
    pub speckle_noise: [f64; 5],
    pub gaussian_blur: [f64; 5],
    pub defocus_blur: [f64; 5],
    pub brightness: [f64; 5],
    pub contrast: [f64; 5],
    pub saturate: [f64; 5],
    pub pixelate: [f64; 5],
    pub fog: [f64; 5],
}

pub const SEVERITY_JSON: &str = include_str!("../data/severity.json");

impl SeverityTable {
    pub fn builtin() -> &'static SeverityTable {
        static TABLE: OnceLock<SeverityTable> = OnceLock::new();
        TABLE.get_or_init(|| serde_json::from_str(SEVERITY_JSON).expect("bundled severity table parses"))
    }

    pub fn param(&self, kind: CorruptionKind, severity: u8) -> Option<f64> {
        use CorruptionKind::*;
        let row = match kind {
            GaussianNoise => &self.gaussian_noise,
            ShotNoise => &self.shot_noise,
            ImpulseNoise => &self.impulse_noise,
            SpeckleNoise => &self.speckle_noise,
            GaussianBlur => &self.gaussian_blur,
            DefocusBlur => &self.defocus_blur,
            Brightness => &self.brightness,
            Contrast => &self.contrast,
            Saturate => &self.saturate,
            Pixelate => &self.pixelate,
            Fog => &self.fog,
            _ => return None,
        };
        row.get(usize::from(severity).checked_sub(1)?).copied()
    }
}

/// Fog colour the image is blended towards.
const FOG_LEVEL: f64 = 1.0;
/// Amplitude decay per diamond-square octave.
const FOG_DECAY: f64 = 2.0;

/// Applies a corruption to images in `[0, 1]` with three channels.
/// Output is clamped to `[0, 1]`.
pub fn corrupt(img: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    corrupt_with(img, spec, SeverityTable::builtin())
}

pub fn corrupt_with(img: &Tensor, spec: &CorruptionSpec, table: &SeverityTable) -> Result<Tensor> {
    spec.validate()?;
    let s = img.shape();
    if s.c != 3 {
        return Err(Error::contract("corrupt", format!("expected 3 channels, got {s}")));
    }
    if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::contract("corrupt", "image values outside [0, 1]"));
    }
    use CorruptionKind::*;
    if spec.kind == Identity {
        return Ok(img.clone());
    }
    let p = table
        .param(spec.kind, spec.severity)
        .expect("implemented kinds have parameters");
    let mut rng = Rng::new(spec.seed);
    let mut out = match spec.kind {
        GaussianNoise => pointwise(img, |v| v + p * rng.normal()),
        ShotNoise => {
            let mut o = img.clone();
            for v in o.data_mut() {
                *v = rng.poisson(*v * p) / p;
            }
            o
        }
        ImpulseNoise => {
            let mut o = img.clone();
            for v in o.data_mut() {
                if rng.bernoulli(p) {
                    *v = if rng.bernoulli(0.5) { 1.0 } else { 0.0 };
                }
            }
            o
        }
        SpeckleNoise => pointwise(img, |v| v + v * p * rng.normal()),
        GaussianBlur => blur(img, &gaussian_kernel(p)),
        DefocusBlur => blur(img, &disk_kernel(p)),
        Brightness => img.map(|v| v + p),
        Contrast => per_sample(img, |x| {
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            x.iter_mut().for_each(|v| *v = (*v - mean) * p + mean);
        }),
        Saturate => saturate(img, p),
        Pixelate => pixelate(img, p.round() as usize),
        Fog => fog(img, p, &mut rng),
        Identity | GlassBlur | MotionBlur | ZoomBlur | Snow | Frost | ElasticTransform | JpegCompression | Spatter => {
            unreachable!("validated above")
        }
    };
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

// Like Tensor::map, but allows a stateful closure.
fn pointwise(img: &Tensor, mut f: impl FnMut(f64) -> f64) -> Tensor {
    let mut o = img.clone();
    o.data_mut().iter_mut().for_each(|v| *v = f(*v));
    o
}

fn per_sample(img: &Tensor, mut f: impl FnMut(&mut [f64])) -> Tensor {
    let mut o = img.clone();
    let n = img.shape().sample();
    for chunk in o.data_mut().chunks_mut(n) {
        f(chunk);
    }
    o
}

/// Separable-free 2-D kernel as `(dy, dx, weight)` taps, weights summing to 1.
type Kernel = Vec<(isize, isize, f64)>;

fn gaussian_kernel(sigma: f64) -> Kernel {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = (dy * dy + dx * dx) as f64;
            k.push((dy, dx, (-d2 / (2.0 * sigma * sigma)).exp()));
        }
    }
    normalize(k)
}

/// Disk of the given radius with a one-pixel linear edge ramp, so that
/// fractional radii give distinct kernels.
fn disk_kernel(radius: f64) -> Kernel {
    let r = (radius + 0.5).ceil() as isize;
    let mut k = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let d = ((dy * dy + dx * dx) as f64).sqrt();
            let w = (radius + 0.5 - d).clamp(0.0, 1.0);
            if w > 0.0 {
                k.push((dy, dx, w));
            }
        }
    }
    normalize(k)
}

fn normalize(mut k: Kernel) -> Kernel {
    let total: f64 = k.iter().map(|t| t.2).sum();
    k.iter_mut().for_each(|t| t.2 /= total);
    k
}

/// Convolution with edge-clamped sampling.
fn blur(img: &Tensor, k: &Kernel) -> Tensor {
    let s = img.shape();
    let mut out = Tensor::zeros(s);
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let mut acc = 0.0;
                    for &(dy, dx, w) in k {
                        acc += w * img.at(n, c, clamp(y as isize + dy, s.h), clamp(x as isize + dx, s.w));
                    }
                    out.set(n, c, y, x, acc);
                }
            }
        }
    }
    out
}

fn saturate(img: &Tensor, gain: f64) -> Tensor {
    let s = img.shape();
    let mut out = img.clone();
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let (r, g, b) = (img.at(n, 0, y, x), img.at(n, 1, y, x), img.at(n, 2, y, x));
                let luma = 0.299 * r + 0.587 * g + 0.114 * b;
                for (c, v) in [r, g, b].into_iter().enumerate() {
                    out.set(n, c, y, x, luma + (v - luma) * gain);
                }
            }
        }
    }
    out
}

/// Box-average each `block × block` cell (clipped at the border) and fill the
/// cell with its mean.
fn pixelate(img: &Tensor, block: usize) -> Tensor {
    let s = img.shape();
    let block = block.max(1);
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            for by in (0..s.h).step_by(block) {
                for bx in (0..s.w).step_by(block) {
                    let (ey, ex) = ((by + block).min(s.h), (bx + block).min(s.w));
                    let mut acc = 0.0;
                    for y in by..ey {
                        for x in bx..ex {
                            acc += img.at(n, c, y, x);
                        }
                    }
                    let mean = acc / ((ey - by) * (ex - bx)) as f64;
                    for y in by..ey {
                        for x in bx..ex {
                            out.set(n, c, y, x, mean);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Periodic diamond-square fractal on a `size × size` grid (`size` a power of
/// two), normalized to `[0, 1]`.
pub fn plasma(size: usize, decay: f64, rng: &mut Rng) -> Vec<f64> {
    assert!(size.is_power_of_two());
    let mut map = vec![0.0; size * size];
    let at = |y: usize, x: usize| (y % size) * size + (x % size);
    let mut step = size;
    let mut wibble = 1.0;
    while step >= 2 {
        let half = step / 2;
        for y in (0..size).step_by(step) {
            for x in (0..size).step_by(step) {
                let mean =
                    (map[at(y, x)] + map[at(y + step, x)] + map[at(y, x + step)] + map[at(y + step, x + step)]) / 4.0;
                map[at(y + half, x + half)] = mean + wibble * (2.0 * rng.uniform() - 1.0);
            }
        }
        for y in (0..size).step_by(step) {
            for x in (0..size).step_by(step) {
                // top-edge midpoint (y, x + half)
                let up = (y + size - half) % size;
                let mean =
                    (map[at(y, x)] + map[at(y, x + step)] + map[at(up, x + half)] + map[at(y + half, x + half)]) / 4.0;
                map[at(y, x + half)] = mean + wibble * (2.0 * rng.uniform() - 1.0);
                // left-edge midpoint (y + half, x)
                let left = (x + size - half) % size;
                let mean =
                    (map[at(y, x)] + map[at(y + step, x)] + map[at(y + half, left)] + map[at(y + half, x + half)])
                        / 4.0;
                map[at(y + half, x)] = mean + wibble * (2.0 * rng.uniform() - 1.0);
            }
        }
        wibble /= decay;
        step = half;
    }
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    map.iter_mut().for_each(|v| *v = (*v - lo) / span);
    map
}

fn fog(img: &Tensor, density: f64, rng: &mut Rng) -> Tensor {
    let s = img.shape();
    let size = s.h.max(s.w).next_power_of_two();
    let mut out = img.clone();
    for n in 0..s.n {
        let field = plasma(size, FOG_DECAY, rng);
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let t = density * field[y * size + x];
                    let v = img.at(n, c, y, x);
                    out.set(n, c, y, x, v * (1.0 - t) + t * FOG_LEVEL);
                }
            }
        }
    }
    out
}

/// Draws a spec uniformly over `(kind, severity)` pairs of the pool. With
/// `include_clean`, identity is one more equally likely outcome.
pub fn sample_spec(rng: &mut Rng, pool: Pool, include_clean: bool) -> CorruptionSpec {
    let kinds = pool.kinds();
    let slots = kinds.len() + usize::from(include_clean);
    let pick = rng.below(slots);
    let severity = 1 + rng.below(5) as u8;
    let seed = rng.next_u64();
    match kinds.get(pick) {
        Some(&kind) => CorruptionSpec::new(kind, severity, seed),
        None => CorruptionSpec::new(CorruptionKind::Identity, 1, seed),
    }
}

/// A `(1, 3, h, w)` image tensor shape.
pub fn image_shape(h: usize, w: usize) -> Shape {
    Shape::new(1, 3, h, w)
}
