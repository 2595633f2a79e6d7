//! Semantically distinct augmentation, random view pipelines and view batches.
//!
//! Deterministic transforms `S_k` (quarter-turn rotations by default) turn each
//! image into `K` semantically different instances labelled in the extended
//! label space `K(y - 1) + k`. Random pipelines `H` then produce the two views
//! of every positive pair: one from the long series, one from the short.

use std::fmt::Debug;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::stream::{Image, LabeledExample, CHANNELS};

/// Maps `(y, k)` to the extended label `K(y - 1) + k`.
pub fn extend_label(y: usize, k: usize, aug_count: usize) -> Result<usize> {
    if y == 0 {
        return Err(Error::InvalidArgument("class ids start at 1".into()));
    }
    if k == 0 || k > aug_count {
        return Err(Error::InvalidArgument(format!(
            "augmentation index {k} outside 1..={aug_count}"
        )));
    }
    Ok(aug_count * (y - 1) + k)
}

/// Inverse of [`extend_label`].
pub fn split_label(extended: usize, aug_count: usize) -> Result<(usize, usize)> {
    if extended == 0 || aug_count == 0 {
        return Err(Error::InvalidArgument("extended labels start at 1".into()));
    }
    Ok(((extended - 1) / aug_count + 1, (extended - 1) % aug_count + 1))
}

/// A deterministic image map usable as one member of `S`.
pub trait SemanticTransform: Debug + Send + Sync {
    fn apply(&self, image: &Image) -> Image;
    fn name(&self) -> String;
}

/// Counter-clockwise rotation by `quarter_turns * 90` degrees, done as an
/// exact index permutation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rotation {
    pub quarter_turns: u8,
}

pub fn rotate_quarter(image: &Image, quarter_turns: u8) -> Image {
    let n = image.side();
    let turns = quarter_turns % 4;
    if turns == 0 {
        return image.clone();
    }
    let mut out = Image::zeros(n);
    for y in 0..n {
        for x in 0..n {
            let (sy, sx) = match turns {
                1 => (x, n - 1 - y),
                2 => (n - 1 - y, n - 1 - x),
                _ => (n - 1 - x, y),
            };
            for c in 0..CHANNELS {
                out.set(y, x, c, image.get(sy, sx, c));
            }
        }
    }
    out
}

impl SemanticTransform for Rotation {
    fn apply(&self, image: &Image) -> Image {
        rotate_quarter(image, self.quarter_turns)
    }

    fn name(&self) -> String {
        format!("rot{}", u32::from(self.quarter_turns % 4) * 90)
    }
}

/// The ordered set `S_1..S_K`; `S_1` is always the identity.
#[derive(Clone, Debug)]
pub struct SdaConfig {
    transforms: Vec<Arc<dyn SemanticTransform>>,
}

impl SdaConfig {
    /// `K` evenly spaced quarter-turn rotations starting at 0 degrees.
    /// `K` must be 1, 2 or 4.
    pub fn rotations(aug_count: usize) -> Result<Self> {
        let step = match aug_count {
            1 => 0,
            2 => 2,
            4 => 1,
            _ => {
                return Err(Error::Config(format!(
                    "rotation augmentation supports K in {{1, 2, 4}}, got {aug_count}"
                )))
            }
        };
        Ok(SdaConfig {
            transforms: (0..aug_count)
                .map(|k| Arc::new(Rotation { quarter_turns: (k * step) as u8 }) as Arc<dyn SemanticTransform>)
                .collect(),
        })
    }

    pub fn identity() -> Self {
        SdaConfig { transforms: vec![Arc::new(Rotation { quarter_turns: 0 })] }
    }

    /// Custom transform family. The first entry must behave as the identity.
    pub fn custom(transforms: Vec<Arc<dyn SemanticTransform>>) -> Result<Self> {
        if transforms.is_empty() {
            return Err(Error::Config("SDA needs at least one transform".into()));
        }
        Ok(SdaConfig { transforms })
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    /// `S_k(x)` with 1-based `k`.
    pub fn apply(&self, k: usize, image: &Image) -> Image {
        self.transforms[k - 1].apply(image)
    }

    pub fn names(&self) -> Vec<String> {
        self.transforms.iter().map(|t| t.name()).collect()
    }
}

/// Parameters of one random transformation series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesConfig {
    /// Kept area fraction range of the random resized crop.
    pub crop_scale: (f64, f64),
    /// Aspect ratio range of the random resized crop.
    pub crop_ratio: (f64, f64),
    pub hflip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_prob: f64,
}

impl SeriesConfig {
    pub fn long() -> Self {
        SeriesConfig {
            crop_scale: (0.5, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            hflip_prob: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_prob: 0.2,
        }
    }

    pub fn short() -> Self {
        SeriesConfig {
            crop_scale: (0.75, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            hflip_prob: 0.0,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
            grayscale_prob: 0.0,
        }
    }

    /// Full-image crop and nothing else: an exact no-op.
    pub fn disabled() -> Self {
        SeriesConfig {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            hflip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            grayscale_prob: 0.0,
        }
    }
}

/// The long/short pair making up `H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomPipelineConfig {
    pub long: SeriesConfig,
    pub short: SeriesConfig,
}

impl Default for RandomPipelineConfig {
    fn default() -> Self {
        RandomPipelineConfig { long: SeriesConfig::long(), short: SeriesConfig::short() }
    }
}

impl RandomPipelineConfig {
    pub fn disabled() -> Self {
        RandomPipelineConfig { long: SeriesConfig::disabled(), short: SeriesConfig::disabled() }
    }
}

/// Independent generators for each random transform, plus a count of how many
/// times a pipeline `H` has been sampled.
#[derive(Clone, Debug)]
pub struct AugmentRng {
    crop: Rng,
    flip: Rng,
    jitter: Rng,
    gray: Rng,
    draws: usize,
}

impl AugmentRng {
    pub fn new(seed: u64) -> Self {
        AugmentRng {
            crop: rng::substream(seed, "crop"),
            flip: rng::substream(seed, "flip"),
            jitter: rng::substream(seed, "jitter"),
            gray: rng::substream(seed, "gray"),
            draws: 0,
        }
    }

    /// Number of pipeline samples drawn so far.
    pub fn draws(&self) -> usize {
        self.draws
    }
}

fn bilinear_resize_crop(image: &Image, top: usize, left: usize, h: usize, w: usize) -> Image {
    let side = image.side();
    let mut out = Image::zeros(side);
    let sy = h as f64 / side as f64;
    let sx = w as f64 / side as f64;
    for y in 0..side {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = (fy - y0 as f64) as f32;
        for x in 0..side {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = (fx - x0 as f64) as f32;
            for c in 0..CHANNELS {
                let p00 = image.get(top + y0, left + x0, c);
                let p01 = image.get(top + y0, left + x1, c);
                let p10 = image.get(top + y1, left + x0, c);
                let p11 = image.get(top + y1, left + x1, c);
                let top_row = p00 + (p01 - p00) * wx;
                let bottom_row = p10 + (p11 - p10) * wx;
                out.set(y, x, c, top_row + (bottom_row - top_row) * wy);
            }
        }
    }
    out
}

/// Random resized crop with the usual ten-attempt rejection loop and a
/// full-image fallback; the crop is resized back to the input size.
fn random_resized_crop(image: &Image, cfg: &SeriesConfig, rng: &mut Rng) -> Image {
    let side = image.side();
    let area = (side * side) as f64;
    let (log_lo, log_hi) = (cfg.crop_ratio.0.ln(), cfg.crop_ratio.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, cfg.crop_scale.0, cfg.crop_scale.1);
        let aspect = uniform(rng, log_lo, log_hi).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= side && h <= side {
            let top = rng.gen_range(0..=side - h);
            let left = rng.gen_range(0..=side - w);
            return bilinear_resize_crop(image, top, left, h, w);
        }
    }
    bilinear_resize_crop(image, 0, 0, side, side)
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn luminance(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn hflip(image: &Image) -> Image {
    let n = image.side();
    let mut out = Image::zeros(n);
    for y in 0..n {
        for x in 0..n {
            for c in 0..CHANNELS {
                out.set(y, x, c, image.get(y, n - 1 - x, c));
            }
        }
    }
    out
}

fn blend_with(image: &mut Image, factor: f32, other: impl Fn(usize) -> f32) {
    for (i, v) in image.data_mut().iter_mut().enumerate() {
        *v = (factor * *v + (1.0 - factor) * other(i)).clamp(0.0, 1.0);
    }
}

fn gray_values(image: &Image) -> Vec<f32> {
    image
        .data()
        .chunks(CHANNELS)
        .map(|p| luminance(p[0], p[1], p[2]))
        .collect()
}

fn to_grayscale(image: &mut Image) {
    let gray = gray_values(image);
    for (p, g) in image.data_mut().chunks_mut(CHANNELS).zip(gray) {
        p.fill(g);
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u8 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn shift_hue(image: &mut Image, shift: f32) {
    for p in image.data_mut().chunks_mut(CHANNELS) {
        let (h, s, v) = rgb_to_hsv(p[0], p[1], p[2]);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        p[0] = r.clamp(0.0, 1.0);
        p[1] = g.clamp(0.0, 1.0);
        p[2] = b.clamp(0.0, 1.0);
    }
}

/// Brightness, contrast, saturation and hue jitter in a random order, each
/// factor drawn uniformly around the identity.
fn color_jitter(image: &mut Image, cfg: &SeriesConfig, rng: &mut Rng) {
    let mut order = [0u8, 1, 2, 3];
    order.shuffle(rng);
    let factor = |rng: &mut Rng, amount: f64| uniform(rng, (1.0 - amount).max(0.0), 1.0 + amount) as f32;
    let b = factor(rng, cfg.brightness);
    let c = factor(rng, cfg.contrast);
    let s = factor(rng, cfg.saturation);
    let h = uniform(rng, -cfg.hue, cfg.hue) as f32;
    for op in order {
        match op {
            0 if cfg.brightness > 0.0 => blend_with(image, b, |_| 0.0),
            1 if cfg.contrast > 0.0 => {
                let gray = gray_values(image);
                let mean = gray.iter().sum::<f32>() / gray.len() as f32;
                blend_with(image, c, |_| mean);
            }
            2 if cfg.saturation > 0.0 => {
                let gray = gray_values(image);
                blend_with(image, s, |i| gray[i / CHANNELS]);
            }
            3 if cfg.hue > 0.0 => shift_hue(image, h),
            _ => {}
        }
    }
}

/// Samples one random transformation from a series and applies it.
pub fn apply_series(image: &Image, cfg: &SeriesConfig, rng: &mut AugmentRng) -> Image {
    rng.draws += 1;
    let mut out = random_resized_crop(image, cfg, &mut rng.crop);
    if rng.flip.gen::<f64>() < cfg.hflip_prob {
        out = hflip(&out);
    }
    color_jitter(&mut out, cfg, &mut rng.jitter);
    if rng.gray.gen::<f64>() < cfg.grayscale_prob {
        to_grayscale(&mut out);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViewOrigin {
    Sda,
    Scr,
    Scl,
    SimClr,
}

/// One augmented view.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub image: Image,
    /// Extended label for SDA views, original class id otherwise
    /// (image index + 1 for SimCLR views).
    pub label: usize,
    /// Index `i` of the source image within the batch.
    pub source: usize,
    /// 1-based augmentation index `k`.
    pub aug: usize,
    /// 1-based view index `j`.
    pub view: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub views: Vec<View>,
    pub origin: ViewOrigin,
}

impl ViewBatch {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.views.iter().map(|v| v.label).collect()
    }

    pub fn images(&self) -> Vec<&Image> {
        self.views.iter().map(|v| &v.image).collect()
    }

    /// For every view, the index of its partner: the other view `j' != j` of
    /// the same `(i, k)`. Errors when a group does not hold exactly two views.
    pub fn partner_indices(&self) -> Result<Vec<usize>> {
        let mut groups: std::collections::HashMap<(usize, usize), Vec<usize>> = Default::default();
        for (idx, v) in self.views.iter().enumerate() {
            groups.entry((v.source, v.aug)).or_default().push(idx);
        }
        let mut partners = vec![usize::MAX; self.views.len()];
        for ((i, k), members) in groups {
            match members.as_slice() {
                &[a, b] if self.views[a].view != self.views[b].view => {
                    partners[a] = b;
                    partners[b] = a;
                }
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "views of image {i}, augmentation {k} are not a single pair"
                    )))
                }
            }
        }
        Ok(partners)
    }

    /// Maps extended labels back to original class ids (the "Align" variant).
    pub fn align_labels(mut self, aug_count: usize) -> Result<Self> {
        for v in &mut self.views {
            v.label = split_label(v.label, aug_count)?.0;
        }
        Ok(self)
    }
}

/// SDA views: for each image `x_i` and each `S_k`, one long-series view
/// (`j = 1`) and one short-series view (`j = 2`) of `S_k(x_i)`, labelled
/// `K(y_i - 1) + k`.
pub fn make_views_sda(
    batch: &[LabeledExample],
    sda: &SdaConfig,
    pipeline: &RandomPipelineConfig,
    rng: &mut AugmentRng,
) -> Result<ViewBatch> {
    let aug_count = sda.len();
    let mut views = Vec::with_capacity(2 * aug_count * batch.len());
    for (i, ex) in batch.iter().enumerate() {
        for k in 1..=aug_count {
            let base = sda.apply(k, &ex.image);
            let label = extend_label(ex.label, k, aug_count)?;
            for (j, series) in [(1, &pipeline.long), (2, &pipeline.short)] {
                views.push(View { image: apply_series(&base, series, rng), label, source: i, aug: k, view: j });
            }
        }
    }
    Ok(ViewBatch { views, origin: ViewOrigin::Sda })
}

/// SCL views: two independently sampled random views per image.
pub fn make_views_scl(batch: &[LabeledExample], pipeline: &RandomPipelineConfig, rng: &mut AugmentRng) -> ViewBatch {
    let mut views = Vec::with_capacity(2 * batch.len());
    for (i, ex) in batch.iter().enumerate() {
        for (j, series) in [(1, &pipeline.long), (2, &pipeline.short)] {
            views.push(View { image: apply_series(&ex.image, series, rng), label: ex.label, source: i, aug: 1, view: j });
        }
    }
    ViewBatch { views, origin: ViewOrigin::Scl }
}

/// SCR views: the raw image plus one random view of it.
pub fn make_views_scr(batch: &[LabeledExample], pipeline: &RandomPipelineConfig, rng: &mut AugmentRng) -> ViewBatch {
    let mut views = Vec::with_capacity(2 * batch.len());
    for (i, ex) in batch.iter().enumerate() {
        views.push(View { image: ex.image.clone(), label: ex.label, source: i, aug: 1, view: 1 });
        views.push(View {
            image: apply_series(&ex.image, &pipeline.long, rng),
            label: ex.label,
            source: i,
            aug: 1,
            view: 2,
        });
    }
    ViewBatch { views, origin: ViewOrigin::Scr }
}

/// SimCLR views: like SCL, but labelled by image index.
pub fn make_views_simclr(batch: &[LabeledExample], pipeline: &RandomPipelineConfig, rng: &mut AugmentRng) -> ViewBatch {
    let mut out = make_views_scl(batch, pipeline, rng);
    for v in &mut out.views {
        v.label = v.source + 1;
    }
    out.origin = ViewOrigin::SimClr;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_image(side: usize, seed: u64) -> Image {
        let mut r = rng::substream(seed, "img");
        Image::new(side, (0..side * side * 3).map(|_| r.gen::<f32>()).collect()).unwrap()
    }

    fn batch(n: usize, side: usize) -> Vec<LabeledExample> {
        (0..n)
            .map(|i| LabeledExample {
                id: i,
                image: random_image(side, i as u64),
                label: 1 + i % 3,
                original_label: (i % 3) as i64,
            })
            .collect()
    }

    #[test]
    fn extend_label_values() {
        assert_eq!(extend_label(1, 1, 4).unwrap(), 1);
        assert_eq!(extend_label(3, 2, 4).unwrap(), 10);
        assert!(extend_label(1, 5, 4).is_err());
        assert!(extend_label(1, 0, 4).is_err());
        assert!(extend_label(0, 1, 4).is_err());
    }

    #[test]
    fn extend_label_exhaustive_roundtrip() {
        let (classes, k) = (25, 4);
        let mut seen = vec![false; classes * k + 1];
        for y in 1..=classes {
            for a in 1..=k {
                let e = extend_label(y, a, k).unwrap();
                assert!(!seen[e]);
                seen[e] = true;
                assert_eq!(split_label(e, k).unwrap(), (y, a));
            }
        }
        assert!(seen[1..].iter().all(|&s| s));
    }

    #[test]
    fn rotations_compose_as_a_cyclic_group() {
        let sda = SdaConfig::rotations(4).unwrap();
        let x = random_image(5, 1);
        let x90 = rotate_quarter(&x, 1);
        for k in 1..=4 {
            assert_eq!(sda.apply(k, &x90), sda.apply(k % 4 + 1, &x));
        }
        assert_eq!(rotate_quarter(&rotate_quarter(&x, 3), 1), x);
        assert_eq!(sda.apply(1, &x), x);
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        // top-right pixel moves to top-left under a CCW quarter turn
        let mut img = Image::zeros(3);
        img.set(0, 2, 0, 1.0);
        let r = rotate_quarter(&img, 1);
        assert_eq!(r.get(0, 0, 0), 1.0);
    }

    #[test]
    fn sda_rejects_unsupported_k() {
        assert!(SdaConfig::rotations(3).is_err());
        assert_eq!(SdaConfig::rotations(2).unwrap().names(), vec!["rot0", "rot180"]);
    }

    #[test]
    fn sda_view_counts_and_labels() {
        let b = batch(20, 8);
        let sda = SdaConfig::rotations(4).unwrap();
        let mut r = AugmentRng::new(0);
        let views = make_views_sda(&b, &sda, &RandomPipelineConfig::default(), &mut r).unwrap();
        assert_eq!(views.len(), 160);
        for v in &views.views {
            assert_eq!(v.label, extend_label(b[v.source].label, v.aug, 4).unwrap());
        }
        let partners = views.partner_indices().unwrap();
        for (a, &p) in partners.iter().enumerate() {
            assert_eq!(partners[p], a);
            assert_ne!(views.views[a].view, views.views[p].view);
        }
    }

    #[test]
    fn disabled_pipeline_is_exact_noop() {
        let b = batch(3, 6);
        let sda = SdaConfig::rotations(4).unwrap();
        let mut r = AugmentRng::new(1);
        let views = make_views_sda(&b, &sda, &RandomPipelineConfig::disabled(), &mut r).unwrap();
        for v in views.views.iter().filter(|v| v.aug == 1) {
            assert_eq!(v.image, b[v.source].image);
        }
        let scl = make_views_scl(&b, &RandomPipelineConfig::disabled(), &mut r);
        for v in &scl.views {
            assert_eq!(v.image, b[v.source].image);
        }
    }

    #[test]
    fn scl_and_scr_views() {
        let b = batch(20, 6);
        let mut r = AugmentRng::new(2);
        let scl = make_views_scl(&b, &RandomPipelineConfig::default(), &mut r);
        assert_eq!(scl.len(), 40);
        assert!(scl.views.iter().all(|v| v.label == b[v.source].label));
        let scl_draws = r.draws();

        let mut r = AugmentRng::new(2);
        let scr = make_views_scr(&b, &RandomPipelineConfig::default(), &mut r);
        assert_eq!(scr.len(), 40);
        let identical = scr.views.iter().filter(|v| v.image == b[v.source].image).count();
        assert!(identical >= 20);
        assert!(scr.views.iter().filter(|v| v.view == 1).all(|v| v.image == b[v.source].image));
        assert_eq!(2 * r.draws(), scl_draws);
        scr.partner_indices().unwrap();
    }

    #[test]
    fn simclr_labels_are_image_indices() {
        let b = batch(4, 4);
        let v = make_views_simclr(&b, &RandomPipelineConfig::default(), &mut AugmentRng::new(0));
        assert_eq!(v.labels(), vec![1, 1, 2, 2, 3, 3, 4, 4]);
        assert_eq!(v.origin, ViewOrigin::SimClr);
    }

    #[test]
    fn align_maps_back_to_original_classes() {
        let b = batch(5, 4);
        let sda = SdaConfig::rotations(4).unwrap();
        let v = make_views_sda(&b, &sda, &RandomPipelineConfig::default(), &mut AugmentRng::new(0)).unwrap();
        let aligned = v.align_labels(4).unwrap();
        assert!(aligned.views.iter().all(|v| v.label == b[v.source].label));
    }

    #[test]
    fn unpaired_views_are_detected() {
        let b = batch(2, 4);
        let mut v = make_views_scl(&b, &RandomPipelineConfig::default(), &mut AugmentRng::new(0));
        v.views.pop();
        assert!(v.partner_indices().is_err());
    }

    #[test]
    fn grayscale_and_jitter_stay_in_range() {
        let img = random_image(8, 3);
        let cfg = SeriesConfig { grayscale_prob: 1.0, ..SeriesConfig::long() };
        let out = apply_series(&img, &cfg, &mut AugmentRng::new(5));
        for p in out.data().chunks(3) {
            assert_eq!(p[0], p[1]);
            assert_eq!(p[1], p[2]);
        }
    }

    #[test]
    fn hsv_roundtrip() {
        for &(r, g, b) in &[(0.2f32, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.9, 0.8, 0.1)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-5 && (g - g2).abs() < 1e-5 && (b - b2).abs() < 1e-5);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn views_stay_in_unit_range(seed in 0u64..1000, side in 2usize..10) {
            let img = random_image(side, seed);
            let mut r = AugmentRng::new(seed);
            for cfg in [SeriesConfig::long(), SeriesConfig::short()] {
                let out = apply_series(&img, &cfg, &mut r);
                prop_assert_eq!(out.side(), side);
                prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }

        #[test]
        fn view_counts_follow_closed_forms(n in 0usize..12, k_idx in 0usize..3) {
            let k = [1, 2, 4][k_idx];
            let b = batch(n, 4);
            let mut r = AugmentRng::new(0);
            let sda = SdaConfig::rotations(k).unwrap();
            let pipeline = RandomPipelineConfig::default();
            prop_assert_eq!(make_views_sda(&b, &sda, &pipeline, &mut r).unwrap().len(), 2 * k * n);
            prop_assert_eq!(make_views_scl(&b, &pipeline, &mut r).len(), 2 * n);
            prop_assert_eq!(make_views_scr(&b, &pipeline, &mut r).len(), 2 * n);
        }

        #[test]
        fn sda_is_deterministic(seed in 0u64..100, k in 1usize..=4) {
            let img = random_image(6, seed);
            let sda = SdaConfig::rotations(4).unwrap();
            prop_assert_eq!(sda.apply(k, &img), sda.apply(k, &img));
        }
    }
}
