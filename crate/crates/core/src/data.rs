//! Procedural 8-class image set for the toy trainer.
//!
//! Classes: stripes in four orientations, checkerboard, dot lattice, a single
//! disk and a flat field. Period, phase, position, size and colors are random
//! per sample, with additive Gaussian noise.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{bail, Error, Result};
use crate::numerics::Tensor;

pub const CLASSES: usize = 8;
pub const TRAIN_SAMPLES: usize = 512;
pub const TEST_SAMPLES: usize = 128;

pub const CLASS_NAMES: [&str; CLASSES] = [
    "h-stripes",
    "v-stripes",
    "diag-stripes",
    "anti-diag-stripes",
    "checker",
    "dots",
    "disk",
    "flat",
];

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[3, R, R]` images with values roughly in `[0, 1]`.
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ToySplit {
    pub train: Dataset,
    pub test: Dataset,
}

/// Label-balanced train/test split at `resolution`.
pub fn toy_dataset(resolution: usize, seed: u64) -> ToySplit {
    ToySplit {
        train: generate(TRAIN_SAMPLES, resolution, seed),
        test: generate(TEST_SAMPLES, resolution, seed ^ 0x7e57_0000_0000_0001),
    }
}

/// `n` samples, `n / 8` per class (the first `n % 8` classes get one more),
/// in shuffled order.
pub fn generate(n: usize, resolution: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % CLASSES).collect();
    labels.shuffle(&mut rng);
    let images = labels.iter().map(|&c| render(c, resolution, &mut rng)).collect();
    Dataset { images, labels }
}

/// Foreground coverage in `{0, 1}` of pixel center `(x, y)`.
fn mask(class: usize, x: f64, y: f64, p: &Params) -> f64 {
    let on = |b: bool| f64::from(u8::from(b));
    let wave = |t: f64| on((2.0 * PI * t / p.period + p.phase).sin() > 0.0);
    let cell = |t: f64| (t / p.period + p.phase).floor() as i64;
    match class {
        0 => wave(y),
        1 => wave(x),
        2 => wave((x + y) / std::f64::consts::SQRT_2),
        3 => wave((x - y) / std::f64::consts::SQRT_2),
        4 => on((cell(x) + cell(y)).rem_euclid(2) == 1),
        5 => {
            let fx = (x / p.period + p.phase).fract() - 0.5;
            let fy = (y / p.period + p.phase).fract() - 0.5;
            on(fx.hypot(fy) < 0.3)
        }
        6 => on((x - p.cx).hypot(y - p.cy) <= p.size),
        7 => 0.0,
        _ => unreachable!("class {class} out of range"),
    }
}

struct Params {
    period: f64,
    phase: f64,
    cx: f64,
    cy: f64,
    size: f64,
}

fn render(class: usize, res: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let r = res as f64;
    let size = rng.gen_range(0.2..0.35) * r;
    let p = Params {
        period: rng.gen_range(0.15..0.3) * r,
        phase: rng.gen_range(0.0..2.0 * PI),
        cx: size + rng.gen::<f64>() * (r - 2.0 * size),
        cy: size + rng.gen::<f64>() * (r - 2.0 * size),
        size,
    };
    let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.45));
    let fg: [f64; 3] = std::array::from_fn(|c| bg[c] + rng.gen_range(0.35..0.55));
    let noise = Normal::new(0.0, 0.05).expect("valid std");
    let m: Vec<f64> = (0..res * res)
        .map(|i| mask(class, (i % res) as f64 + 0.5, (i / res) as f64 + 0.5, &p))
        .collect();
    Tensor::from_fn([3, res, res], |i| {
        let (c, px) = (i / (res * res), i % (res * res));
        (bg[c] + (fg[c] - bg[c]) * m[px] + noise.sample(rng)) as f32
    })
}

/// Reads a raw planar image: three little-endian `u32` dims `C, H, W`
/// followed by `C·H·W` little-endian `f32` values in channel-major order.
pub fn read_raw_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.len() < 12 {
        bail!(Input, "{}: raw image header needs 12 bytes, file has {}", path.display(), bytes.len());
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize;
    let shape = vec![dim(0), dim(1), dim(2)];
    let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    if numel.and_then(|n| n.checked_mul(4)).and_then(|n| n.checked_add(12)) != Some(bytes.len()) {
        bail!(Input, "{}: dims {shape:?} do not match a payload of {} bytes", path.display(), bytes.len() - 12);
    }
    let data = bytes[12..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    Tensor::new(shape, data)
}

pub fn write_raw_image(image: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    if image.rank() != 3 {
        bail!(Input, "raw images are rank 3, got shape {:?}", image.shape());
    }
    let mut out = Vec::with_capacity(12 + 4 * image.len());
    for &d in image.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Input(format!("dimension {d} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}
