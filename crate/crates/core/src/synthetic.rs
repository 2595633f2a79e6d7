//! Procedural desk-scale image dataset.
//!
//! Each class is a colored glyph made of a few bars on a coarse grid; samples
//! are jittered, recolored and noised copies. Glyphs are rejected when they
//! resemble a rotation of themselves or of another class, so both class and
//! rotation identity stay recoverable.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::rotate_quarter;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::stream::{Dataset, Image, CHANNELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub side: usize,
    /// Maximum translation in pixels.
    pub shift: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig { classes: 4, train_per_class: 250, test_per_class: 100, side: 16, shift: 2, noise: 0.08, seed: 0 }
    }
}

/// Train and test splits drawn from the same class prototypes.
#[derive(Clone, Debug)]
pub struct SyntheticSplits {
    pub train: Dataset,
    pub test: Dataset,
    pub prototypes: Vec<Image>,
}

const GRID: usize = 4;
const MIN_ROTATION_DISTANCE: f64 = 0.15;

fn gaussian(r: &mut Rng) -> f64 {
    let u1: f64 = r.gen_range(f64::EPSILON..1.0);
    let u2: f64 = r.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn rms_distance(a: &Image, b: &Image) -> f64 {
    let n = a.data().len() as f64;
    (a.data().iter().zip(b.data()).map(|(x, y)| f64::from(x - y).powi(2)).sum::<f64>() / n).sqrt()
}

/// A glyph: 3 or 4 grid-aligned bars, each with its own color.
fn draw_prototype(side: usize, r: &mut Rng) -> Image {
    let cell = side / GRID;
    let mut img = Image::zeros(side);
    let background: [f32; CHANNELS] = std::array::from_fn(|_| r.gen_range(0.05..0.25));
    for y in 0..side {
        for x in 0..side {
            for (c, &v) in background.iter().enumerate() {
                img.set(y, x, c, v);
            }
        }
    }
    for _ in 0..r.gen_range(3..=4) {
        let color: [f32; CHANNELS] = std::array::from_fn(|_| r.gen_range(0.3..1.0));
        let horizontal = r.gen_bool(0.5);
        let len = r.gen_range(2..=GRID);
        let (gy, gx) = if horizontal {
            (r.gen_range(0..GRID), r.gen_range(0..=GRID - len))
        } else {
            (r.gen_range(0..=GRID - len), r.gen_range(0..GRID))
        };
        let (h, w) = if horizontal { (1, len) } else { (len, 1) };
        for y in gy * cell..(gy + h) * cell {
            for x in gx * cell..(gx + w) * cell {
                for (c, &v) in color.iter().enumerate() {
                    img.set(y, x, c, v);
                }
            }
        }
    }
    img
}

fn prototypes(cfg: &SyntheticConfig) -> Result<Vec<Image>> {
    let mut r = rng::substream(cfg.seed, "synthetic-prototypes");
    let mut out: Vec<Image> = Vec::with_capacity(cfg.classes);
    let mut attempts = 0;
    while out.len() < cfg.classes {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Config("could not draw distinct synthetic glyphs".into()));
        }
        let candidate = draw_prototype(cfg.side, &mut r);
        let self_distinct =
            (1..4).all(|q| rms_distance(&candidate, &rotate_quarter(&candidate, q)) > MIN_ROTATION_DISTANCE);
        let others_distinct = out
            .iter()
            .all(|p| (0..4).all(|q| rms_distance(p, &rotate_quarter(&candidate, q)) > MIN_ROTATION_DISTANCE));
        if self_distinct && others_distinct {
            out.push(candidate);
        }
    }
    Ok(out)
}

fn render_sample(proto: &Image, cfg: &SyntheticConfig, r: &mut Rng) -> Image {
    let side = cfg.side;
    let shift = cfg.shift as i64;
    let (dy, dx) = (r.gen_range(-shift..=shift), r.gen_range(-shift..=shift));
    let gain: [f64; CHANNELS] = std::array::from_fn(|_| r.gen_range(0.75..1.25));
    let offset = r.gen_range(-0.1..0.1);
    let mut img = Image::zeros(side);
    for y in 0..side {
        for x in 0..side {
            let sy = (y as i64 - dy).clamp(0, side as i64 - 1) as usize;
            let sx = (x as i64 - dx).clamp(0, side as i64 - 1) as usize;
            for (c, g) in gain.iter().enumerate() {
                let v = f64::from(proto.get(sy, sx, c)) * g + offset + cfg.noise * gaussian(r);
                img.set(y, x, c, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    img
}

/// Generates the train/test splits; labels are `0..classes`.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticSplits> {
    if cfg.classes == 0 || cfg.side < GRID || !cfg.side.is_multiple_of(GRID) {
        return Err(Error::Config(format!(
            "synthetic data needs >= 1 class and a side divisible by {GRID}, got {} classes, side {}",
            cfg.classes, cfg.side
        )));
    }
    let protos = prototypes(cfg)?;
    let split = |name: &str, per_class: usize| -> Result<Dataset> {
        let mut r = rng::substream(cfg.seed, name);
        let mut images = Vec::with_capacity(per_class * cfg.classes);
        let mut labels = Vec::with_capacity(per_class * cfg.classes);
        // interleave classes so that truncation keeps the split balanced
        for _ in 0..per_class {
            for (c, proto) in protos.iter().enumerate() {
                images.push(render_sample(proto, cfg, &mut r));
                labels.push(c as i64);
            }
        }
        Dataset::new(images, labels)
    };
    Ok(SyntheticSplits {
        train: split("synthetic-train", cfg.train_per_class)?,
        test: split("synthetic-test", cfg.test_per_class)?,
        prototypes: protos,
    })
}
