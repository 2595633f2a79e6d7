//! Class-incremental stage schedules and the one-epoch batch stream.
//!
//! Images are stored as square, 3-channel, row-major HWC `f32` tensors with
//! values in `[0, 1]`. Normalization to that range happens at ingestion.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const CHANNELS: usize = 3;

/// Square 3-channel image, HWC layout, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    side: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(side: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != side * side * CHANNELS {
            return Err(Error::Shape(format!(
                "expected {} values for a {side}x{side}x{CHANNELS} image, got {}",
                side * side * CHANNELS,
                data.len()
            )));
        }
        Ok(Image { side, data })
    }

    /// Builds an image from a possibly non-square `height x width` buffer.
    /// Non-square inputs are rejected because quarter-turn rotations are
    /// undefined on them.
    pub fn from_hwc(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height != width {
            return Err(Error::Shape(format!("image must be square, got {height}x{width}")));
        }
        Image::new(height, data)
    }

    pub fn from_u8(side: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(side, bytes.iter().map(|&b| f32::from(b) / 255.0).collect())
    }

    pub fn zeros(side: usize) -> Self {
        Image { side, data: vec![0.0; side * side * CHANNELS] }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.side + x) * CHANNELS + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    /// 2x2 box downsampling; odd trailing rows/columns are dropped.
    pub fn downsample2(&self) -> Image {
        let side = self.side / 2;
        let mut out = Image::zeros(side);
        for y in 0..side {
            for x in 0..side {
                for c in 0..CHANNELS {
                    let s = self.get(2 * y, 2 * x, c)
                        + self.get(2 * y + 1, 2 * x, c)
                        + self.get(2 * y, 2 * x + 1, c)
                        + self.get(2 * y + 1, 2 * x + 1, c);
                    out.set(y, x, c, s / 4.0);
                }
            }
        }
        out
    }
}

/// One stream example.
///
/// `label` is the contiguous class id (1-based, assigned in order of stage
/// arrival); `original_label` keeps the dataset's own id for reporting.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub id: usize,
    pub image: Image,
    pub label: usize,
    pub original_label: i64,
}

/// A raw dataset: images with their original labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<i64>,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Vec<i64>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|im| im.side() != first.side()) {
                return Err(Error::Shape("images have differing sizes".into()));
            }
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_side(&self) -> Option<usize> {
        self.images.first().map(Image::side)
    }

    pub fn class_labels(&self) -> BTreeSet<i64> {
        self.labels.iter().copied().collect()
    }

    pub fn downsample2(&self) -> Dataset {
        Dataset {
            images: self.images.iter().map(Image::downsample2).collect(),
            labels: self.labels.clone(),
        }
    }

    /// Examples relabelled into the schedule's contiguous ids. Examples whose
    /// class is not part of the schedule are skipped.
    pub fn labeled_examples(&self, schedule: &StageSchedule) -> Vec<LabeledExample> {
        self.images
            .iter()
            .zip(&self.labels)
            .enumerate()
            .filter_map(|(id, (image, &orig))| {
                schedule.contiguous_id(orig).map(|label| LabeledExample {
                    id,
                    image: image.clone(),
                    label,
                    original_label: orig,
                })
            })
            .collect()
    }
}

/// Disjoint class sets per stage, plus the contiguous relabelling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    /// Original dataset labels arriving at each stage.
    pub stages: Vec<Vec<i64>>,
    pub classes_per_stage: usize,
    pub total_stages: usize,
}

impl StageSchedule {
    /// Contiguous id (1-based) of an original label: stage-1 classes get
    /// `1..=C_1`, stage-2 classes the next block, and so on.
    pub fn contiguous_id(&self, original: i64) -> Option<usize> {
        self.stages
            .iter()
            .flatten()
            .position(|&l| l == original)
            .map(|p| p + 1)
    }

    pub fn original_label(&self, contiguous: usize) -> Option<i64> {
        self.stages.iter().flatten().nth(contiguous.checked_sub(1)?).copied()
    }

    /// Stage (0-based) that introduces a contiguous class id.
    pub fn stage_of(&self, contiguous: usize) -> Option<usize> {
        if contiguous == 0 || contiguous > self.total_classes() {
            return None;
        }
        Some((contiguous - 1) / self.classes_per_stage)
    }

    pub fn total_classes(&self) -> usize {
        self.classes_per_stage * self.total_stages
    }

    /// Number of classes seen before `stage` (0-based).
    pub fn classes_before(&self, stage: usize) -> usize {
        self.classes_per_stage * stage
    }

    /// Number of classes seen once `stage` (0-based) has been trained.
    pub fn classes_through(&self, stage: usize) -> usize {
        self.classes_per_stage * (stage + 1)
    }

    /// Contiguous ids introduced at `stage`.
    pub fn stage_classes(&self, stage: usize) -> std::ops::RangeInclusive<usize> {
        self.classes_before(stage) + 1..=self.classes_through(stage)
    }
}

/// Splits `class_labels` into `stages` disjoint sets after a seeded
/// permutation of the class order.
pub fn build_schedule(class_labels: &BTreeSet<i64>, stages: usize, seed: u64) -> Result<StageSchedule> {
    if stages == 0 {
        return Err(Error::Config("number of stages must be positive".into()));
    }
    if class_labels.is_empty() || !class_labels.len().is_multiple_of(stages) {
        return Err(Error::Config(format!(
            "{} classes cannot be split evenly into {stages} stages",
            class_labels.len()
        )));
    }
    let mut order: Vec<i64> = class_labels.iter().copied().collect();
    order.shuffle(&mut rng::substream(seed, "class-order"));
    let per = order.len() / stages;
    Ok(StageSchedule {
        stages: order.chunks(per).map(<[i64]>::to_vec).collect(),
        classes_per_stage: per,
        total_stages: stages,
    })
}

/// One batch `B_t^u` of the stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamBatch {
    pub examples: Vec<LabeledExample>,
    /// 0-based stage index `t`.
    pub stage_index: usize,
    /// 0-based batch index `u` within the stage.
    pub batch_index: usize,
}

#[derive(Clone, Debug)]
pub struct StreamOptions {
    pub batch_size: usize,
    pub seed: u64,
    /// Shuffle each stage's examples once before batching.
    pub shuffle: bool,
}

impl Default for StreamOptions {
    fn default() -> Self {
        StreamOptions { batch_size: 10, seed: 0, shuffle: true }
    }
}

/// Stage-by-stage stream over a dataset. Each example is yielded exactly
/// once; the trailing partial batch of a stage is kept.
#[derive(Debug)]
pub struct BatchStream {
    per_stage: Vec<Vec<LabeledExample>>,
    batch_size: usize,
    stage: usize,
    offset: usize,
    batch_index: usize,
}

impl BatchStream {
    pub fn total_stages(&self) -> usize {
        self.per_stage.len()
    }

    pub fn stage_len(&self, stage: usize) -> usize {
        self.per_stage[stage].len()
    }

    pub fn batches_in_stage(&self, stage: usize) -> usize {
        self.per_stage[stage].len().div_ceil(self.batch_size)
    }

    /// Batches of a single stage, consuming that stage from the stream.
    pub fn stage_batches(&mut self, stage: usize) -> Vec<StreamBatch> {
        let examples = std::mem::take(&mut self.per_stage[stage]);
        examples
            .chunks(self.batch_size)
            .enumerate()
            .map(|(u, chunk)| StreamBatch {
                examples: chunk.to_vec(),
                stage_index: stage,
                batch_index: u,
            })
            .collect()
    }
}

impl Iterator for BatchStream {
    type Item = StreamBatch;

    fn next(&mut self) -> Option<StreamBatch> {
        while self.stage < self.per_stage.len() {
            let stage = &self.per_stage[self.stage];
            if self.offset < stage.len() {
                let end = (self.offset + self.batch_size).min(stage.len());
                let batch = StreamBatch {
                    examples: stage[self.offset..end].to_vec(),
                    stage_index: self.stage,
                    batch_index: self.batch_index,
                };
                self.offset = end;
                self.batch_index += 1;
                return Some(batch);
            }
            self.stage += 1;
            self.offset = 0;
            self.batch_index = 0;
        }
        None
    }
}

/// Builds the one-epoch stream: per stage, the stage's examples are shuffled
/// once (unless disabled) and cut into disjoint batches.
pub fn stream_batches(
    dataset: &[LabeledExample],
    schedule: &StageSchedule,
    options: &StreamOptions,
) -> Result<BatchStream> {
    if options.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut per_stage: Vec<Vec<LabeledExample>> = vec![Vec::new(); schedule.total_stages];
    for ex in dataset {
        let stage = schedule
            .stage_of(ex.label)
            .ok_or_else(|| Error::Config(format!("label {} not in the schedule", ex.label)))?;
        per_stage[stage].push(ex.clone());
    }
    for (t, examples) in per_stage.iter_mut().enumerate() {
        if examples.is_empty() {
            return Err(Error::Config(format!("stage {} has no examples", t + 1)));
        }
        if options.shuffle {
            examples.shuffle(&mut rng::indexed_substream(options.seed, "stream-order", t as u64));
        }
    }
    Ok(BatchStream {
        per_stage,
        batch_size: options.batch_size,
        stage: 0,
        offset: 0,
        batch_index: 0,
    })
}

/// JSON sidecar describing a row-major `uint8` image blob of shape `(n, h, w, c)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobHeader {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub labels: Vec<i64>,
}

/// Reads a `uint8` blob and its JSON sidecar.
pub fn load_blob(blob: &Path, sidecar: &Path) -> Result<Dataset> {
    let header: BlobHeader = serde_json::from_slice(&fs::read(sidecar).map_err(|e| Error::io(sidecar, e))?)?;
    let bytes = fs::read(blob).map_err(|e| Error::io(blob, e))?;
    decode_blob(&header, &bytes)
}

pub fn decode_blob(header: &BlobHeader, bytes: &[u8]) -> Result<Dataset> {
    if header.c != CHANNELS {
        return Err(Error::Shape(format!("expected {CHANNELS} channels, got {}", header.c)));
    }
    if header.labels.len() != header.n {
        return Err(Error::Shape(format!("{} labels for {} images", header.labels.len(), header.n)));
    }
    let per = header.h * header.w * header.c;
    if bytes.len() != header.n * per {
        return Err(Error::Shape(format!(
            "blob holds {} bytes, sidecar implies {}",
            bytes.len(),
            header.n * per
        )));
    }
    let images = bytes
        .chunks(per.max(1))
        .take(header.n)
        .map(|chunk| {
            Image::from_hwc(header.h, header.w, chunk.iter().map(|&b| f32::from(b) / 255.0).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(images, header.labels.clone())
}

/// Writes a dataset as a `uint8` blob plus JSON sidecar.
pub fn save_blob(dataset: &Dataset, blob: &Path, sidecar: &Path) -> Result<()> {
    let side = dataset.image_side().unwrap_or(0);
    let header = BlobHeader {
        n: dataset.len(),
        h: side,
        w: side,
        c: CHANNELS,
        labels: dataset.labels.clone(),
    };
    let bytes: Vec<u8> = dataset.images.iter().flat_map(Image::to_u8).collect();
    fs::write(blob, bytes).map_err(|e| Error::io(blob, e))?;
    fs::write(sidecar, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(sidecar, e))?;
    Ok(())
}

/// Reads `root/<label>/<file>.png` trees; directory names must be integers.
pub fn load_image_dir(root: &Path) -> Result<Dataset> {
    let mut by_label: BTreeMap<i64, Vec<std::path::PathBuf>> = BTreeMap::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        let label: i64 = name
            .parse()
            .map_err(|_| Error::Config(format!("class directory `{name}` is not an integer label")))?;
        let mut files: Vec<_> = fs::read_dir(&path)
            .map_err(|e| Error::io(&path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        by_label.insert(label, files);
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (label, files) in by_label {
        for file in files {
            let rgb = image::open(&file)?.to_rgb8();
            let (w, h) = rgb.dimensions();
            images.push(Image::from_hwc(
                h as usize,
                w as usize,
                rgb.as_raw().iter().map(|&b| f32::from(b) / 255.0).collect(),
            )?);
            labels.push(label);
        }
    }
    Dataset::new(images, labels)
}
