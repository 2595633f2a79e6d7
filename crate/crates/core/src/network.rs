//! The model bundle: encoder `F`, projector `G`, predictor `P` and a softmax
//! classifier head over the (extended) label space that grows stage by stage.

use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::autograd::{ConvGeom, Graph, MapGeom, NormKind, Var, NORM_EPS};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::stream::{Image, CHANNELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Reduced ResNet-18 (widths 20/40/80/160) with batch normalization.
    PaperScale,
    /// Three conv blocks with group normalization; batch-size independent.
    DeskScale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub preset: Preset,
    /// Encoder output dimension `d`.
    pub feature_dim: usize,
    pub image_side: usize,
    /// Channel widths of the first two desk-scale blocks.
    pub desk_widths: [usize; 2],
    pub projection_hidden: usize,
    pub projection_dim: usize,
    pub predictor_hidden: usize,
    /// Per-channel input standardization applied inside the encoder.
    pub input_mean: [f64; 3],
    pub input_std: [f64; 3],
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::paper_scale()
    }
}

impl ModelConfig {
    pub fn paper_scale() -> Self {
        ModelConfig {
            preset: Preset::PaperScale,
            feature_dim: 160,
            image_side: 32,
            desk_widths: [16, 32],
            projection_hidden: 160,
            projection_dim: 128,
            predictor_hidden: 128,
            input_mean: [0.4914, 0.4822, 0.4465],
            input_std: [0.2470, 0.2435, 0.2616],
            seed: 0,
        }
    }

    pub fn desk_scale(image_side: usize, feature_dim: usize) -> Self {
        ModelConfig {
            preset: Preset::DeskScale,
            feature_dim,
            image_side,
            desk_widths: [16, 32],
            projection_hidden: feature_dim,
            projection_dim: 128,
            predictor_hidden: 128,
            input_mean: [0.5; 3],
            input_std: [0.25; 3],
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Index of a tensor in the parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default)]
struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }
}

fn uniform_init(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            w: store.add(format!("{name}.weight"), uniform_init(fan_in, fan_out, bound, rng)),
            b: store.add(format!("{name}.bias"), uniform_init(1, fan_out, bound, rng)),
        }
    }

    fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        let h = s.graph.matmul(x, w)?;
        s.graph.add_bias(h, b)
    }
}

/// Linear, ReLU, Linear.
#[derive(Clone, Debug)]
struct Mlp2 {
    first: Linear,
    second: Linear,
}

impl Mlp2 {
    fn new(store: &mut ParamStore, name: &str, dims: [usize; 3], rng: &mut Rng) -> Self {
        Mlp2 {
            first: Linear::new(store, &format!("{name}.0"), dims[0], dims[1], rng),
            second: Linear::new(store, &format!("{name}.1"), dims[1], dims[2], rng),
        }
    }

    fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let h = self.first.forward(s, x)?;
        let h = s.graph.relu(h);
        self.second.forward(s, h)
    }
}

#[derive(Clone, Copy, Debug)]
enum NormLayerKind {
    Group(usize),
    Batch(usize),
}

/// Normalization plus per-channel affine.
#[derive(Clone, Debug)]
struct NormLayer {
    kind: NormLayerKind,
    channels: usize,
    gamma: ParamId,
    beta: ParamId,
}

impl NormLayer {
    fn group(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let groups = [4, 2, 1].into_iter().find(|g| channels.is_multiple_of(*g)).unwrap_or(1);
        NormLayer::new(store, name, channels, NormLayerKind::Group(groups))
    }

    fn batch(store: &mut ParamStore, name: &str, channels: usize, buffers: &mut Vec<BnBuffer>) -> Self {
        buffers.push(BnBuffer::new(channels));
        NormLayer::new(store, name, channels, NormLayerKind::Batch(buffers.len() - 1))
    }

    fn new(store: &mut ParamStore, name: &str, channels: usize, kind: NormLayerKind) -> Self {
        NormLayer {
            kind,
            channels,
            gamma: store.add(format!("{name}.gamma"), Array2::ones((1, channels))),
            beta: store.add(format!("{name}.beta"), Array2::zeros((1, channels))),
        }
    }

    fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let normalized = match self.kind {
            NormLayerKind::Group(groups) => {
                s.graph.normalize(x, NormKind::Group { channels: self.channels, groups })?
            }
            NormLayerKind::Batch(buffer) => match s.mode {
                Mode::Train => {
                    let y = s.graph.normalize(x, NormKind::Batch { channels: self.channels })?;
                    s.bn_updates.push((buffer, y));
                    y
                }
                Mode::Eval => {
                    let stats = &s.model.bn_buffers[buffer];
                    let scale = Array2::from_shape_fn((1, self.channels), |(_, c)| {
                        1.0 / (stats.running_var[c] + NORM_EPS).sqrt()
                    });
                    let shift = Array2::from_shape_fn((1, self.channels), |(_, c)| {
                        -stats.running_mean[c] / (stats.running_var[c] + NORM_EPS).sqrt()
                    });
                    let (scale, shift) = (s.graph.input(scale), s.graph.input(shift));
                    s.graph.channel_affine(x, scale, shift, self.channels)?
                }
            },
        };
        let (gamma, beta) = (s.p(self.gamma), s.p(self.beta));
        s.graph.channel_affine(normalized, gamma, beta, self.channels)
    }
}

/// Running statistics of one batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBuffer {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnBuffer {
    fn new(channels: usize) -> Self {
        BnBuffer { running_mean: vec![0.0; channels], running_var: vec![1.0; channels] }
    }
}

const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    geom: ConvGeom,
}

impl Conv {
    fn new(store: &mut ParamStore, name: &str, geom: ConvGeom, rng: &mut Rng) -> Self {
        let fan_in = geom.patch_len();
        let bound = (6.0 / fan_in as f64).sqrt();
        Conv {
            weight: store.add(format!("{name}.weight"), uniform_init(fan_in, geom.out_channels, bound, rng)),
            geom,
        }
    }

    fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.p(self.weight);
        s.graph.conv2d(x, w, self.geom)
    }
}

fn conv_geom(input: MapGeom, out_channels: usize, kernel: usize, stride: usize) -> ConvGeom {
    ConvGeom { input, out_channels, kernel, stride, pad: kernel / 2 }
}

#[derive(Clone, Debug)]
struct DeskBlock {
    conv: Conv,
    norm: NormLayer,
    pool: bool,
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv,
    bn1: NormLayer,
    conv2: Conv,
    bn2: NormLayer,
    shortcut: Option<(Conv, NormLayer)>,
}

impl BasicBlock {
    fn new(
        store: &mut ParamStore,
        buffers: &mut Vec<BnBuffer>,
        name: &str,
        input: MapGeom,
        planes: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> (Self, MapGeom) {
        let g1 = conv_geom(input, planes, 3, stride);
        let mid = g1.output();
        let g2 = conv_geom(mid, planes, 3, 1);
        let shortcut = (stride != 1 || input.channels != planes).then(|| {
            (
                Conv::new(store, &format!("{name}.shortcut.conv"), conv_geom(input, planes, 1, stride), rng),
                NormLayer::batch(store, &format!("{name}.shortcut.bn"), planes, buffers),
            )
        });
        let block = BasicBlock {
            conv1: Conv::new(store, &format!("{name}.conv1"), g1, rng),
            bn1: NormLayer::batch(store, &format!("{name}.bn1"), planes, buffers),
            conv2: Conv::new(store, &format!("{name}.conv2"), g2, rng),
            bn2: NormLayer::batch(store, &format!("{name}.bn2"), planes, buffers),
            shortcut,
        };
        (block, g2.output())
    }

    fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(s, x)?;
        let h = self.bn1.forward(s, h)?;
        let h = s.graph.relu(h);
        let h = self.conv2.forward(s, h)?;
        let h = self.bn2.forward(s, h)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let t = conv.forward(s, x)?;
                bn.forward(s, t)?
            }
            None => x,
        };
        let sum = s.graph.add(h, skip)?;
        Ok(s.graph.relu(sum))
    }
}

#[derive(Clone, Debug)]
enum Encoder {
    Desk { blocks: Vec<DeskBlock>, out: MapGeom },
    Paper { stem: Conv, stem_bn: NormLayer, blocks: Vec<BasicBlock>, out: MapGeom },
}

impl Encoder {
    fn desk(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        if !cfg.image_side.is_multiple_of(4) || cfg.image_side == 0 {
            return Err(Error::Config(format!(
                "desk_scale encoder needs an image side divisible by 4, got {}",
                cfg.image_side
            )));
        }
        let mut geom = MapGeom::square(cfg.image_side, CHANNELS);
        let mut blocks = Vec::new();
        let widths = [cfg.desk_widths[0], cfg.desk_widths[1], cfg.feature_dim];
        for (i, &width) in widths.iter().enumerate() {
            let g = conv_geom(geom, width, 3, 1);
            let pool = i < 2;
            blocks.push(DeskBlock {
                conv: Conv::new(store, &format!("encoder.block{i}.conv"), g, rng),
                norm: NormLayer::group(store, &format!("encoder.block{i}.gn"), width),
                pool,
            });
            geom = g.output();
            if pool {
                geom = MapGeom { height: geom.height / 2, width: geom.width / 2, channels: width };
            }
        }
        Ok(Encoder::Desk { blocks, out: geom })
    }

    fn paper(store: &mut ParamStore, buffers: &mut Vec<BnBuffer>, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        if !cfg.feature_dim.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "paper_scale feature dimension must be a multiple of 8, got {}",
                cfg.feature_dim
            )));
        }
        let nf = cfg.feature_dim / 8;
        let input = MapGeom::square(cfg.image_side, CHANNELS);
        let stem_geom = conv_geom(input, nf, 3, 1);
        let stem = Conv::new(store, "encoder.stem.conv", stem_geom, rng);
        let stem_bn = NormLayer::batch(store, "encoder.stem.bn", nf, buffers);
        let mut geom = stem_geom.output();
        let mut blocks = Vec::new();
        for (layer, (mult, stride)) in [(1, 1), (2, 2), (4, 2), (8, 2)].into_iter().enumerate() {
            for b in 0..2 {
                let (block, next) = BasicBlock::new(
                    store,
                    buffers,
                    &format!("encoder.layer{}.{b}", layer + 1),
                    geom,
                    nf * mult,
                    if b == 0 { stride } else { 1 },
                    rng,
                );
                blocks.push(block);
                geom = next;
            }
        }
        Ok(Encoder::Paper { stem, stem_bn, blocks, out: geom })
    }

    fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        match self {
            Encoder::Desk { blocks, out } => {
                let mut h = x;
                for block in blocks {
                    h = block.conv.forward(s, h)?;
                    h = block.norm.forward(s, h)?;
                    h = s.graph.relu(h);
                    if block.pool {
                        h = s.graph.avg_pool2(h, block.conv.geom.output())?;
                    }
                }
                s.graph.global_avg_pool(h, *out)
            }
            Encoder::Paper { stem, stem_bn, blocks, out } => {
                let h = stem.forward(s, x)?;
                let h = stem_bn.forward(s, h)?;
                let mut h = s.graph.relu(h);
                for block in blocks {
                    h = block.forward(s, h)?;
                }
                s.graph.global_avg_pool(h, *out)
            }
        }
    }
}

/// A forward pass in progress: the tape plus the parameter bindings.
pub struct Session<'m> {
    pub graph: Graph,
    model: &'m ModelBundle,
    bound: Vec<Option<Var>>,
    mode: Mode,
    trainable: bool,
    bn_updates: Vec<(usize, Var)>,
}

impl<'m> Session<'m> {
    fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = &self.model.store.values[id.0];
        let v = if self.trainable {
            self.graph.param(id.0, value)
        } else {
            self.graph.input(value.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Encoder features `F(x)` for a batch of images.
    pub fn features(&mut self, images: Var) -> Result<Var> {
        let model = self.model;
        let x = self.standardize(images)?;
        model.encoder.forward(self, x)
    }

    fn standardize(&mut self, images: Var) -> Result<Var> {
        let cfg = &self.model.config;
        let scale = Array2::from_shape_fn((1, CHANNELS), |(_, c)| 1.0 / cfg.input_std[c]);
        let shift = Array2::from_shape_fn((1, CHANNELS), |(_, c)| -cfg.input_mean[c] / cfg.input_std[c]);
        let (scale, shift) = (self.graph.input(scale), self.graph.input(shift));
        self.graph.channel_affine(images, scale, shift, CHANNELS)
    }

    /// `z = G(r)`.
    pub fn projection(&mut self, features: Var) -> Result<Var> {
        let model = self.model;
        model.projector.forward(self, features)
    }

    /// `p = P(z)`.
    pub fn prediction(&mut self, projection: Var) -> Result<Var> {
        let model = self.model;
        model.predictor.forward(self, projection)
    }

    /// `W^T r + b` over every classifier column.
    pub fn logits(&mut self, features: Var) -> Result<Var> {
        let (w, b) = (self.p(self.model.head_w), self.p(self.model.head_b));
        let h = self.graph.matmul(features, w)?;
        self.graph.add_bias(h, b)
    }

    /// Finishes the pass: returns the tape and the batch-norm statistics to fold
    /// into the running buffers.
    pub fn finish(self) -> (Graph, BnUpdates) {
        let updates = self
            .bn_updates
            .iter()
            .filter_map(|&(buffer, var)| {
                self.graph.norm_stats(var).map(|(m, v)| (buffer, m.to_vec(), v.to_vec()))
            })
            .collect();
        let count = self
            .bn_updates
            .first()
            .map(|&(_, v)| self.graph.value(v).nrows())
            .unwrap_or(0);
        (self.graph, BnUpdates { stats: updates, rows: count })
    }
}

/// Batch statistics gathered in a training pass.
#[derive(Debug, Default)]
pub struct BnUpdates {
    stats: Vec<(usize, Vec<f64>, Vec<f64>)>,
    rows: usize,
}

/// Converts images into `(N, side*side*3)` HWC rows.
pub fn images_to_matrix(images: &[&Image]) -> Result<Array2<f64>> {
    let Some(first) = images.first() else {
        return Ok(Array2::zeros((0, 0)));
    };
    let cols = first.data().len();
    let mut out = Array2::zeros((images.len(), cols));
    for (mut row, img) in out.rows_mut().into_iter().zip(images) {
        if img.data().len() != cols {
            return Err(Error::Shape("images in a batch must share one shape".into()));
        }
        for (o, &v) in row.iter_mut().zip(img.data()) {
            *o = f64::from(v);
        }
    }
    Ok(out)
}

/// Encoder, projector, predictor and classifier head.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub config: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    projector: Mlp2,
    predictor: Mlp2,
    head_w: ParamId,
    head_b: ParamId,
    bn_buffers: Vec<BnBuffer>,
    classes_seen: usize,
    head_aug: usize,
    stage_open: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    preset: Preset,
    d: usize,
    #[serde(rename = "K")]
    aug_count: usize,
    classes_seen: usize,
}

impl ModelBundle {
    /// Fresh model with an empty classifier; `head_aug` is the number of
    /// classifier columns per class (`K` for extended labels, 1 otherwise).
    pub fn new(config: ModelConfig, head_aug: usize) -> Result<Self> {
        if head_aug == 0 {
            return Err(Error::Config("classifier needs at least one column per class".into()));
        }
        let mut rng = rng::substream(config.seed, "init");
        let mut store = ParamStore::default();
        let mut bn_buffers = Vec::new();
        let encoder = match config.preset {
            Preset::DeskScale => Encoder::desk(&mut store, &config, &mut rng)?,
            Preset::PaperScale => Encoder::paper(&mut store, &mut bn_buffers, &config, &mut rng)?,
        };
        let d = config.feature_dim;
        let projector = Mlp2::new(
            &mut store,
            "projector",
            [d, config.projection_hidden, config.projection_dim],
            &mut rng,
        );
        let predictor = Mlp2::new(
            &mut store,
            "predictor",
            [config.projection_dim, config.predictor_hidden, config.projection_dim],
            &mut rng,
        );
        let head_w = store.add("head.weight", Array2::zeros((d, 0)));
        let head_b = store.add("head.bias", Array2::zeros((1, 0)));
        Ok(ModelBundle {
            config,
            store,
            encoder,
            projector,
            predictor,
            head_w,
            head_b,
            bn_buffers,
            classes_seen: 0,
            head_aug,
            stage_open: false,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn classes_seen(&self) -> usize {
        self.classes_seen
    }

    pub fn head_aug(&self) -> usize {
        self.head_aug
    }

    /// Classifier weight matrix `W`, shape `(d, head_aug * classes_seen)`.
    pub fn head_weight(&self) -> &Array2<f64> {
        &self.store.values[self.head_w.0]
    }

    pub fn head_bias(&self) -> &Array2<f64> {
        &self.store.values[self.head_b.0]
    }

    pub fn param_count(&self) -> usize {
        self.store.values.len()
    }

    pub fn param_names(&self) -> &[String] {
        &self.store.names
    }

    pub fn parameters(&self) -> &[Array2<f64>] {
        &self.store.values
    }

    pub fn parameters_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.store.values
    }

    pub fn bn_buffers(&self) -> &[BnBuffer] {
        &self.bn_buffers
    }

    /// Starts a forward pass. Training sessions bind parameters as
    /// differentiable leaves; evaluation sessions bind constants.
    pub fn session(&self, mode: Mode, trainable: bool) -> Session<'_> {
        Session {
            graph: Graph::new(),
            model: self,
            bound: vec![None; self.store.values.len()],
            mode,
            trainable,
            bn_updates: Vec::new(),
        }
    }

    /// Appends `K * new_class_count` zero columns (and zero biases) to the head.
    pub fn expand_classifier(&mut self, new_class_count: usize, aug_count: usize) -> Result<()> {
        if self.stage_open {
            return Err(Error::InvalidArgument("classifier can only grow at a stage boundary".into()));
        }
        if aug_count != self.head_aug {
            return Err(Error::InvalidArgument(format!(
                "head was built with {} columns per class, got K = {aug_count}",
                self.head_aug
            )));
        }
        let extra = aug_count * new_class_count;
        let w = &self.store.values[self.head_w.0];
        let mut grown = Array2::zeros((w.nrows(), w.ncols() + extra));
        grown.slice_mut(s![.., ..w.ncols()]).assign(w);
        self.store.values[self.head_w.0] = grown;
        let b = &self.store.values[self.head_b.0];
        let mut grown_b = Array2::zeros((1, b.ncols() + extra));
        grown_b.slice_mut(s![.., ..b.ncols()]).assign(b);
        self.store.values[self.head_b.0] = grown_b;
        self.classes_seen += new_class_count;
        Ok(())
    }

    pub fn begin_stage(&mut self) {
        self.stage_open = true;
    }

    pub fn end_stage(&mut self) {
        self.stage_open = false;
    }

    /// Plain SGD: `theta <- theta - lr * grad`.
    pub fn sgd_step(&mut self, grads: &[Option<Array2<f64>>], lr: f64) -> Result<()> {
        if grads.len() != self.store.values.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.store.values.len()
            )));
        }
        for (p, g) in self.store.values.iter_mut().zip(grads) {
            if let Some(g) = g {
                if g.dim() != p.dim() {
                    return Err(Error::Shape(format!("gradient {:?} for parameter {:?}", g.dim(), p.dim())));
                }
                p.scaled_add(-lr, g);
            }
        }
        Ok(())
    }

    /// Folds training-pass batch statistics into the running buffers.
    pub fn apply_bn_updates(&mut self, updates: &BnUpdates) {
        for (buffer, mean, var) in &updates.stats {
            let n = updates.rows.max(2) as f64;
            let buf = &mut self.bn_buffers[*buffer];
            for c in 0..mean.len() {
                buf.running_mean[c] = (1.0 - BN_MOMENTUM) * buf.running_mean[c] + BN_MOMENTUM * mean[c];
                let unbiased = var[c] * n / (n - 1.0);
                buf.running_var[c] = (1.0 - BN_MOMENTUM) * buf.running_var[c] + BN_MOMENTUM * unbiased;
            }
        }
    }

    /// Evaluation-mode encoder features, computed in chunks.
    pub fn forward_features(&self, images: &[&Image]) -> Result<Array2<f64>> {
        const CHUNK: usize = 256;
        let d = self.config.feature_dim;
        let mut out = Array2::zeros((images.len(), d));
        for (i, chunk) in images.chunks(CHUNK).enumerate() {
            let side = self.config.image_side;
            if chunk.iter().any(|im| im.side() != side) {
                return Err(Error::Shape(format!("model expects {side}x{side} images")));
            }
            let mut s = self.session(Mode::Eval, false);
            let x = s.graph.input(images_to_matrix(chunk)?);
            let r = s.features(x)?;
            out.slice_mut(s![i * CHUNK..i * CHUNK + chunk.len(), ..]).assign(s.graph.value(r));
        }
        Ok(out)
    }

    /// `(z, p) = (G(r), P(G(r)))` for precomputed features.
    pub fn forward_projection_prediction(&self, features: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if features.ncols() != self.config.feature_dim {
            return Err(Error::Shape(format!(
                "features have {} columns, model expects {}",
                features.ncols(),
                self.config.feature_dim
            )));
        }
        let mut s = self.session(Mode::Eval, false);
        let r = s.graph.input(features.clone());
        let z = s.projection(r)?;
        let p = s.prediction(z)?;
        Ok((s.graph.value(z).clone(), s.graph.value(p).clone()))
    }

    /// Logits over all `head_aug * classes_seen` columns.
    pub fn forward_logits(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        let mut s = self.session(Mode::Eval, false);
        let r = s.graph.input(features.clone());
        let l = s.logits(r)?;
        Ok(s.graph.value(l).clone())
    }

    /// Sets `G` and `P` to identity-like maps: square leading blocks of the
    /// weights are the identity, everything else zero.
    pub fn set_identity_heads(&mut self) {
        for mlp in [self.projector.clone(), self.predictor.clone()] {
            for lin in [&mlp.first, &mlp.second] {
                let w = &mut self.store.values[lin.w.0];
                w.fill(0.0);
                for i in 0..w.nrows().min(w.ncols()) {
                    w[[i, i]] = 1.0;
                }
                self.store.values[lin.b.0].fill(0.0);
            }
        }
    }

    /// Saves parameters and batch-norm buffers as a named-array archive with
    /// a manifest `{preset, d, K, classes_seen}`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut arrays: Vec<(String, Array2<f64>)> = self
            .store
            .names
            .iter()
            .cloned()
            .zip(self.store.values.iter().cloned())
            .collect();
        for (i, b) in self.bn_buffers.iter().enumerate() {
            arrays.push((format!("bn{i}.running_mean"), Array2::from_shape_vec((1, b.running_mean.len()), b.running_mean.clone()).expect("row")));
            arrays.push((format!("bn{i}.running_var"), Array2::from_shape_vec((1, b.running_var.len()), b.running_var.clone()).expect("row")));
        }
        let refs: Vec<(String, &Array2<f64>)> = arrays.iter().map(|(n, a)| (n.clone(), a)).collect();
        let manifest = CheckpointManifest {
            preset: self.config.preset,
            d: self.config.feature_dim,
            aug_count: self.head_aug,
            classes_seen: self.classes_seen,
        };
        archive::save(dir, "model", &refs, serde_json::to_value(manifest)?)
    }

    /// Loads a checkpoint into a model of the same architecture.
    pub fn load(&mut self, dir: &Path) -> Result<()> {
        let (index, arrays) = archive::load(dir, "model")?;
        let manifest: CheckpointManifest = serde_json::from_value(index.meta)?;
        if manifest.preset != self.config.preset
            || manifest.d != self.config.feature_dim
            || manifest.aug_count != self.head_aug
        {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint is {:?}/d={}/K={}, model is {:?}/d={}/K={}",
                manifest.preset,
                manifest.d,
                manifest.aug_count,
                self.config.preset,
                self.config.feature_dim,
                self.head_aug
            )));
        }
        let mut by_name: std::collections::HashMap<String, Array2<f64>> = arrays.into_iter().collect();
        for (i, name) in self.store.names.iter().enumerate() {
            let a = by_name
                .remove(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing array `{name}`")))?;
            let expected = self.store.values[i].dim();
            let head = i == self.head_w.0 || i == self.head_b.0;
            if !head && a.dim() != expected {
                return Err(Error::CheckpointMismatch(format!("array `{name}` has shape {:?}", a.dim())));
            }
            self.store.values[i] = a;
        }
        for (i, b) in self.bn_buffers.iter_mut().enumerate() {
            let take = |by_name: &mut std::collections::HashMap<String, Array2<f64>>, key: String| {
                by_name
                    .remove(&key)
                    .map(|a| a.into_iter().collect::<Vec<_>>())
                    .ok_or(Error::CheckpointMismatch(format!("missing array `{key}`")))
            };
            b.running_mean = take(&mut by_name, format!("bn{i}.running_mean"))?;
            b.running_var = take(&mut by_name, format!("bn{i}.running_var"))?;
        }
        if self.head_weight().ncols() != manifest.classes_seen * self.head_aug {
            return Err(Error::CheckpointMismatch("classifier width disagrees with classes_seen".into()));
        }
        self.classes_seen = manifest.classes_seen;
        Ok(())
    }

    /// Mean Euclidean norm of the classifier columns in `range`
    /// (bias excluded). `None` for an empty range.
    pub fn mean_column_norm(&self, range: std::ops::Range<usize>) -> Option<f64> {
        if range.is_empty() {
            return None;
        }
        let w = self.head_weight();
        let len = range.len() as f64;
        Some(
            range
                .map(|c| w.column(c).dot(&w.column(c)).sqrt())
                .sum::<f64>()
                / len,
        )
    }
}

/// Softmax of each row.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}
