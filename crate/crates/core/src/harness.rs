//! Experiment orchestration: the replay training loop under the
//! equal-compute protocol, per-stage evaluation and result persistence.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentRng, RandomPipelineConfig, SdaConfig, View, ViewBatch, ViewOrigin};
use crate::error::{Error, Result};
use crate::memory::ReplayMemory;
use crate::metrics::{self, AccuracyMatrix, MetricsReport, RepresentationDump};
use crate::ncm::{Metric, NcmClassifier, NcmConfig};
use crate::network::{softmax_rows, Mode, ModelBundle, ModelConfig, Preset};
use crate::objectives::{self, LossConfig};
use crate::rng::{self, Rng};
use crate::stream::{self, Dataset, Image, LabeledExample, StageSchedule, StreamOptions};
use crate::synthetic::{self, SyntheticConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Sdaf,
    Scr,
    Scl,
    Er,
    Finetune,
    SdafAlign,
    SdafIdentity,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Sdaf,
        Method::Scr,
        Method::Scl,
        Method::Er,
        Method::Finetune,
        Method::SdafAlign,
        Method::SdafIdentity,
    ];

    /// SGD updates per incoming batch under equal compute.
    pub fn equal_compute_iterations(self) -> usize {
        match self {
            Method::Sdaf | Method::SdafAlign => 1,
            Method::Scr | Method::Scl | Method::SdafIdentity => 4,
            Method::Er | Method::Finetune => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Sdaf => "SDAF",
            Method::Scr => "SCR",
            Method::Scl => "SCL",
            Method::Er => "ER",
            Method::Finetune => "FINETUNE",
            Method::SdafAlign => "SDAF_ALIGN",
            Method::SdafIdentity => "SDAF_IDENTITY",
        }
    }

    fn is_sdaf(self) -> bool {
        matches!(self, Method::Sdaf | Method::SdafAlign | Method::SdafIdentity)
    }

    fn uses_ncm(self) -> bool {
        !matches!(self, Method::Er | Method::Finetune)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Independent seeds of every random stream in a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub class_order: u64,
    pub init: u64,
    pub augmentation: u64,
    pub wabs: u64,
    /// Stream shuffling, reservoir updates and memory retrieval.
    pub replay: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { class_order: 0, init: 1, augmentation: 2, wabs: 3, replay: 4 }
    }
}

impl Seeds {
    /// Seeds of the `r`-th repetition.
    pub fn offset(self, r: u64) -> Seeds {
        Seeds {
            class_order: self.class_order + r,
            init: self.init + r,
            augmentation: self.augmentation + r,
            wabs: self.wabs + r,
            replay: self.replay + r,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticConfig),
    /// `uint8` NHWC blobs with JSON sidecars.
    Blob { train: PathBuf, train_sidecar: PathBuf, test: PathBuf, test_sidecar: PathBuf },
    /// `root/<label>/*.png` trees.
    ImageDir { train: PathBuf, test: PathBuf },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticConfig::default())
    }
}

impl DatasetSource {
    pub fn load(&self, base: &Path) -> Result<(Dataset, Dataset)> {
        let abs = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        match self {
            DatasetSource::Synthetic(cfg) => {
                let s = synthetic::generate(cfg)?;
                Ok((s.train, s.test))
            }
            DatasetSource::Blob { train, train_sidecar, test, test_sidecar } => Ok((
                stream::load_blob(&abs(train), &abs(train_sidecar))?,
                stream::load_blob(&abs(test), &abs(test_sidecar))?,
            )),
            DatasetSource::ImageDir { train, test } => {
                Ok((stream::load_image_dir(&abs(train))?, stream::load_image_dir(&abs(test))?))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Replay memory size `M`; FINETUNE always runs without memory.
    pub memory_size: usize,
    pub batch_size: usize,
    /// Memory retrieval size `m`.
    pub retrieval_size: usize,
    /// SGD updates per batch `I`; `None` applies the equal-compute rule.
    pub iterations: Option<usize>,
    /// Allow `iterations` to differ from the equal-compute value.
    pub override_equal_compute: bool,
    pub learning_rate: f64,
    pub optimizer: String,
    /// Number of semantic transforms `K`.
    pub aug_count: usize,
    pub lambda: f64,
    pub tau_w: f64,
    pub temperature: f64,
    pub seeds: Seeds,
    /// Repetitions with seeds offset by `0..seed_count`.
    pub seed_count: usize,
    pub preset: Preset,
    /// Encoder output dimension; defaults to 160 (paper) or 64 (desk).
    pub feature_dim: Option<usize>,
    pub ncm_metric: Metric,
    /// Evaluate every method with NCM, including ER/FINETUNE.
    pub force_ncm: bool,
    pub stages: usize,
    pub shuffle_within_stage: bool,
    /// Divide the step size by the number of views for summed losses.
    pub normalize_step_by_views: bool,
    pub augmentation: RandomPipelineConfig,
    pub dataset: DatasetSource,
    /// Halve image resolution this many times after loading.
    pub downsample: u32,
    pub dump_representations: bool,
    /// Cap on test images per dataset stage in representation dumps.
    pub cka_subsample: Option<usize>,
    pub save_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::Sdaf,
            memory_size: 200,
            batch_size: 10,
            retrieval_size: 10,
            iterations: None,
            override_equal_compute: false,
            learning_rate: 0.1,
            optimizer: "sgd".into(),
            aug_count: 4,
            lambda: 1.5,
            tau_w: 0.5,
            temperature: 0.07,
            seeds: Seeds::default(),
            seed_count: 1,
            preset: Preset::DeskScale,
            feature_dim: None,
            ncm_metric: Metric::Mahalanobis,
            force_ncm: false,
            stages: 2,
            shuffle_within_stage: true,
            normalize_step_by_views: true,
            augmentation: RandomPipelineConfig::default(),
            dataset: DatasetSource::default(),
            downsample: 0,
            dump_representations: true,
            cka_subsample: None,
            save_checkpoints: true,
        }
    }
}

impl ExperimentConfig {
    /// Reads a TOML or JSON config, chosen by file extension.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)?,
            Some("toml") => toml::from_str(&text)?,
            other => return Err(Error::Config(format!("unsupported config extension {other:?}"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("aug_count", self.aug_count),
            ("stages", self.stages),
            ("seed_count", self.seed_count),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.optimizer != "sgd" {
            return Err(Error::Config(format!("only `sgd` is supported, got `{}`", self.optimizer)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        self.loss_config().validate()?;
        if let Some(i) = self.iterations {
            let mandated = self.method.equal_compute_iterations();
            if i == 0 {
                return Err(Error::Config("iterations must be at least 1".into()));
            }
            if i != mandated && !self.override_equal_compute {
                return Err(Error::Config(format!(
                    "{} runs {mandated} iteration(s) per batch under equal compute; set override_equal_compute to use {i}",
                    self.method
                )));
            }
        }
        if self.method == Method::Finetune && self.force_ncm {
            return Err(Error::Config("FINETUNE keeps no memory, so NCM inference is impossible".into()));
        }
        Ok(())
    }

    pub fn iterations_per_batch(&self) -> usize {
        self.iterations.unwrap_or_else(|| self.method.equal_compute_iterations())
    }

    pub fn effective_memory_size(&self) -> usize {
        if self.method == Method::Finetune {
            0
        } else {
            self.memory_size
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { lambda: self.lambda, tau_w: self.tau_w, temperature: self.temperature }
    }

    /// The semantic transforms used for training views and NCM centers.
    pub fn sda(&self) -> Result<SdaConfig> {
        match self.method {
            Method::Sdaf | Method::SdafAlign => SdaConfig::rotations(self.aug_count),
            _ => Ok(SdaConfig::identity()),
        }
    }

    /// Classifier columns per class.
    pub fn head_aug(&self) -> usize {
        match self.method {
            Method::Sdaf => self.aug_count,
            _ => 1,
        }
    }

    pub fn ncm_config(&self) -> NcmConfig {
        match self.method {
            // contrastive baselines follow their own convention
            Method::Scr | Method::Scl => NcmConfig { metric: Metric::Euclidean, normalize_features: true },
            _ => NcmConfig { metric: self.ncm_metric, normalize_features: false },
        }
    }

    pub fn model_config(&self, image_side: usize) -> ModelConfig {
        let mut m = match self.preset {
            Preset::PaperScale => {
                let mut m = ModelConfig::paper_scale();
                m.image_side = image_side;
                if let Some(d) = self.feature_dim {
                    m.feature_dim = d;
                    m.projection_hidden = d;
                }
                m
            }
            Preset::DeskScale => ModelConfig::desk_scale(image_side, self.feature_dim.unwrap_or(64)),
        };
        m.seed = self.seeds.init;
        m
    }
}

/// One line of `losses.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: usize,
    pub u: usize,
    pub iter: usize,
    pub loss: f64,
    pub l_wabs: Option<f64>,
    pub l_ss: Option<f64>,
    pub gamma: Option<f64>,
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub schedule: StageSchedule,
    pub accuracy: AccuracyMatrix,
    pub losses: Vec<LossRecord>,
    pub dumps: Vec<RepresentationDump>,
    /// Final-stage confusion matrix over all classes.
    pub confusion: Array2<u64>,
    /// Normalized covariance spectrum of final test features.
    pub scree: Vec<f64>,
    pub stage_seconds: Vec<f64>,
    pub gradient_steps: usize,
    pub report: MetricsReport,
}

/// Mutable training state of one run.
pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub model: ModelBundle,
    pub memory: ReplayMemory,
    pub schedule: StageSchedule,
    sda: SdaConfig,
    aug_rng: AugmentRng,
    retrieval_rng: Rng,
    wabs_rng: Rng,
    pub gradient_steps: usize,
    pub losses: Vec<LossRecord>,
}

impl Trainer {
    pub fn new(cfg: ExperimentConfig, schedule: StageSchedule, image_side: usize) -> Result<Self> {
        cfg.validate()?;
        let model = ModelBundle::new(cfg.model_config(image_side), cfg.head_aug())?;
        let sda = cfg.sda()?;
        Ok(Trainer {
            memory: ReplayMemory::new(cfg.effective_memory_size(), cfg.seeds.replay),
            aug_rng: AugmentRng::new(cfg.seeds.augmentation),
            retrieval_rng: rng::substream(cfg.seeds.replay, "retrieval"),
            wabs_rng: rng::substream(cfg.seeds.wabs, "wabs"),
            model,
            schedule,
            sda,
            cfg,
            gradient_steps: 0,
            losses: Vec::new(),
        })
    }

    pub fn sda(&self) -> &SdaConfig {
        &self.sda
    }

    /// Grows the classifier for stage `stage` (0-based) and opens it.
    pub fn begin_stage(&mut self, stage: usize) -> Result<()> {
        let new = self.schedule.stage_classes(stage).count();
        self.model.expand_classifier(new, self.cfg.head_aug())?;
        self.model.begin_stage();
        Ok(())
    }

    pub fn end_stage(&mut self) {
        self.model.end_stage();
    }

    fn make_views(&mut self, union: &[LabeledExample]) -> Result<ViewBatch> {
        let pipeline = &self.cfg.augmentation;
        let rng = &mut self.aug_rng;
        Ok(match self.cfg.method {
            Method::Sdaf | Method::SdafIdentity => augment::make_views_sda(union, &self.sda, pipeline, rng)?,
            Method::SdafAlign => {
                augment::make_views_sda(union, &self.sda, pipeline, rng)?.align_labels(self.sda.len())?
            }
            Method::Scr => augment::make_views_scr(union, pipeline, rng),
            Method::Scl => augment::make_views_scl(union, pipeline, rng),
            Method::Er | Method::Finetune => ViewBatch {
                views: union
                    .iter()
                    .enumerate()
                    .map(|(i, ex)| View { image: ex.image.clone(), label: ex.label, source: i, aug: 1, view: 1 })
                    .collect(),
                origin: ViewOrigin::Scl,
            },
        })
    }

    /// One SGD step of the method's loss on `B ∪ B_M`. `stage` is 0-based;
    /// `u` and `iter` are 1-based and only used for logging.
    pub fn train_iteration(&mut self, union: &[LabeledExample], stage: usize, u: usize, iter: usize) -> Result<LossRecord> {
        if union.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let views = self.make_views(union)?;
        let n_views = views.len() as f64;
        let method = self.cfg.method;
        let head_aug = self.cfg.head_aug();
        let c_old = self.schedule.classes_before(stage);
        let c_t = self.schedule.stage_classes(stage).count();
        let lr = self.cfg.learning_rate;

        let (record, grads, bn, step) = {
            let mut session = self.model.session(Mode::Train, true);
            let (total, record, step) = if method.is_sdaf() {
                let gamma = objectives::gamma(self.model.head_weight(), head_aug, c_old, c_t, self.cfg.tau_w)?;
                let mask = objectives::wabs_mask(&views.labels(), gamma, head_aug * c_old, &mut self.wabs_rng);
                let terms = objectives::sdaf_objective(&mut session, &views, &mask, &self.cfg.loss_config())?;
                let g = &session.graph;
                let record = LossRecord {
                    stage: stage + 1,
                    u,
                    iter,
                    loss: g.scalar(terms.total),
                    l_wabs: Some(g.scalar(terms.l_wabs)),
                    l_ss: Some(g.scalar(terms.l_ss)),
                    gamma: Some(gamma),
                };
                (terms.total, record, self.summed_step(lr, n_views))
            } else {
                let (total, step) = match method {
                    Method::Scr | Method::Scl => {
                        (objectives::supcon_objective(&mut session, &views, self.cfg.temperature)?, lr)
                    }
                    _ => (objectives::cross_entropy_objective(&mut session, &views)?, self.summed_step(lr, n_views)),
                };
                let value = session.graph.scalar(total);
                (total, LossRecord { stage: stage + 1, u, iter, loss: value, l_wabs: None, l_ss: None, gamma: None }, step)
            };
            if !record.loss.is_finite() {
                return Err(Error::Degenerate(format!("non-finite loss at stage {}, batch {u}", stage + 1)));
            }
            let (graph, bn) = session.finish();
            let grads = graph.backward(total).param_grads(&graph, self.model.param_count());
            (record, grads, bn, step)
        };
        self.model.sgd_step(&grads, step)?;
        self.model.apply_bn_updates(&bn);
        self.gradient_steps += 1;
        self.losses.push(record.clone());
        Ok(record)
    }

    fn summed_step(&self, lr: f64, n_views: f64) -> f64 {
        if self.cfg.normalize_step_by_views {
            lr / n_views
        } else {
            lr
        }
    }

    /// Runs every batch of a stage: `I` iterations each with a fresh memory
    /// draw, then the reservoir update.
    pub fn run_stage(&mut self, stage: usize, batches: &[Vec<LabeledExample>]) -> Result<()> {
        let iterations = self.cfg.iterations_per_batch();
        for (u, batch) in batches.iter().enumerate() {
            for iter in 0..iterations {
                let mut union = batch.clone();
                union.extend(self.memory.retrieve(self.cfg.retrieval_size, &mut self.retrieval_rng));
                self.train_iteration(&union, stage, u + 1, iter + 1)?;
            }
            self.memory.update(batch);
        }
        Ok(())
    }

    fn uses_ncm(&self) -> bool {
        self.cfg.method.uses_ncm() || self.cfg.force_ncm
    }

    /// Predicted class ids for `images`.
    pub fn predict(&self, images: &[&Image]) -> Result<Vec<usize>> {
        if self.uses_ncm() {
            let ncm = NcmClassifier::fit(&self.memory, &self.model, &self.sda, &self.cfg.ncm_config())?;
            return Ok(ncm.predict_batch(images, &self.model, &self.sda)?.labels);
        }
        let feats = self.model.forward_features(images)?;
        let probs = softmax_rows(&self.model.forward_logits(&feats)?);
        let head_aug = self.cfg.head_aug();
        Ok(probs
            .rows()
            .into_iter()
            .map(|row| {
                // sum over the columns of each class, first maximum wins
                let classes = row.len() / head_aug;
                let mut best = (f64::NEG_INFINITY, 1);
                for c in 0..classes {
                    let p: f64 = row.iter().skip(c * head_aug).take(head_aug).sum();
                    if p > best.0 {
                        best = (p, c + 1);
                    }
                }
                best.1
            })
            .collect())
    }
}

fn class_order(schedule: &StageSchedule) -> Vec<Vec<i64>> {
    schedule.stages.clone()
}

fn test_by_stage(test: &[LabeledExample], schedule: &StageSchedule) -> Vec<Vec<LabeledExample>> {
    let mut out = vec![Vec::new(); schedule.total_stages];
    for ex in test {
        if let Some(s) = schedule.stage_of(ex.label) {
            out[s].push(ex.clone());
        }
    }
    out
}

/// Writer of the results directory; a no-op without a path.
struct Persist {
    dir: Option<PathBuf>,
}

impl Persist {
    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        if let Some(dir) = &self.dir {
            let path = dir.join(name);
            fs::write(&path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    fn append_losses(&self, records: &[LossRecord]) -> Result<()> {
        if let Some(dir) = &self.dir {
            let path = dir.join("losses.jsonl");
            let mut f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
            for r in records {
                let line = serde_json::to_string(r)?;
                writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(())
    }
}

/// Contents of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub status: String,
    pub method: Method,
    pub memory_size: usize,
    pub seeds: Seeds,
    #[serde(default)]
    pub metrics: Option<MetricsReport>,
    #[serde(default)]
    pub class_order: Vec<Vec<i64>>,
    #[serde(default)]
    pub stage_seconds: Vec<f64>,
    #[serde(default)]
    pub gradient_steps: usize,
    #[serde(default)]
    pub error: Option<String>,
}

fn partial_report(
    cfg: &ExperimentConfig,
    schedule: &StageSchedule,
    stage_seconds: Vec<f64>,
    gradient_steps: usize,
    error: &Error,
) -> RunReport {
    RunReport {
        status: "partial".into(),
        method: cfg.method,
        memory_size: cfg.effective_memory_size(),
        seeds: cfg.seeds,
        metrics: None,
        class_order: class_order(schedule),
        stage_seconds,
        gradient_steps,
        error: Some(error.to_string()),
    }
}

/// Runs the replay training loop end to end on preloaded splits. Results go to `out`
/// when given; a failing stage leaves a partial report behind.
pub fn run_experiment(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset, out: Option<&Path>) -> Result<RunResult> {
    cfg.validate()?;
    let persist = Persist { dir: out.map(Path::to_path_buf) };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let losses = dir.join("losses.jsonl");
        if losses.exists() {
            fs::remove_file(&losses).map_err(|e| Error::io(&losses, e))?;
        }
    }
    persist.write_json("config.json", cfg)?;

    let schedule = stream::build_schedule(&train.class_labels(), cfg.stages, cfg.seeds.class_order)?;
    let side = train.image_side().ok_or_else(|| Error::Config("empty training set".into()))?;
    if test.image_side() != Some(side) {
        return Err(Error::Config("train and test images differ in size".into()));
    }
    let train_examples = train.labeled_examples(&schedule);
    let test_examples = test.labeled_examples(&schedule);
    let test_stages = test_by_stage(&test_examples, &schedule);
    if let Some(s) = (0..schedule.total_stages).find(|&s| {
        schedule.stage_classes(s).any(|c| !test_stages[s].iter().any(|e| e.label == c))
    }) {
        return Err(Error::Config(format!("test split lacks examples of a class in stage {}", s + 1)));
    }
    let options = StreamOptions { batch_size: cfg.batch_size, seed: cfg.seeds.replay, shuffle: cfg.shuffle_within_stage };
    let mut stream = stream::stream_batches(&train_examples, &schedule, &options)?;
    let mut trainer = Trainer::new(cfg.clone(), schedule.clone(), side)?;

    let mut rows = Vec::new();
    let mut dumps = Vec::new();
    let mut stage_seconds = Vec::new();
    let mut confusion = Array2::zeros((0, 0));
    let mut logged = 0;
    for stage in 0..schedule.total_stages {
        let started = Instant::now();
        let outcome = (|| -> Result<()> {
            let batches: Vec<Vec<LabeledExample>> =
                stream.stage_batches(stage).into_iter().map(|b| b.examples).collect();
            trainer.begin_stage(stage)?;
            trainer.run_stage(stage, &batches)?;
            trainer.end_stage();

            let seen: Vec<&LabeledExample> = test_stages[..=stage].iter().flatten().collect();
            let images: Vec<&Image> = seen.iter().map(|e| &e.image).collect();
            let truth: Vec<usize> = seen.iter().map(|e| e.label).collect();
            let pred = trainer.predict(&images)?;
            let classes = schedule.classes_through(stage);
            rows.push(metrics::per_class_accuracy(&truth, &pred, classes)?);
            if stage + 1 == schedule.total_stages {
                confusion = metrics::confusion_matrix(&truth, &pred, classes)?;
            }
            if cfg.dump_representations {
                for (ds, examples) in test_stages.iter().enumerate() {
                    let take = cfg.cka_subsample.unwrap_or(usize::MAX).min(examples.len());
                    let imgs: Vec<&Image> = examples[..take].iter().map(|e| &e.image).collect();
                    let features = trainer.model.forward_features(&imgs)?;
                    let dump = RepresentationDump {
                        meta: metrics::DumpMeta { n: take, d: features.ncols(), stage: stage + 1, dataset_stage: ds + 1 },
                        features,
                    };
                    if let Some(dir) = out {
                        dump.save(&dir.join("dumps"))?;
                    }
                    dumps.push(dump);
                }
            }
            Ok(())
        })();
        stage_seconds.push(started.elapsed().as_secs_f64());
        persist.append_losses(&trainer.losses[logged..])?;
        logged = trainer.losses.len();
        if let Err(e) = outcome {
            let partial = partial_report(cfg, &schedule, stage_seconds, trainer.gradient_steps, &e);
            persist.write_json("accuracy_matrix.json", &AccuracyMatrix { rows: rows.clone() })?;
            persist.write_json("report.json", &partial)?;
            return Err(Error::Stage { stage: stage + 1, source: Box::new(e) });
        }
        persist.write_json("accuracy_matrix.json", &AccuracyMatrix { rows: rows.clone() })?;
        log::info!(
            "{} stage {}/{}: {:.1}s, mean accuracy {:.3}",
            cfg.method,
            stage + 1,
            schedule.total_stages,
            stage_seconds[stage],
            rows[stage].iter().sum::<f64>() / rows[stage].len() as f64
        );
    }

    let finished = (|| -> Result<(AccuracyMatrix, MetricsReport, Vec<f64>)> {
        let accuracy = AccuracyMatrix::new(rows)?;
        let mut report = MetricsReport::from_matrix(&accuracy)?;
        report.cka = metrics::cka_table(&dumps)?;
        let all_test: Vec<&Image> = test_examples.iter().map(|e| &e.image).collect();
        let scree = metrics::scree(&trainer.model.forward_features(&all_test)?, true)?;
        if let Some(dir) = out {
            persist.write_json("confusion.json", &confusion.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>())?;
            persist.write_json("scree.json", &scree)?;
            if cfg.save_checkpoints {
                trainer.model.save(&dir.join("model"))?;
                trainer.memory.save(&dir.join("memory"))?;
                if trainer.uses_ncm() {
                    NcmClassifier::fit(&trainer.memory, &trainer.model, &trainer.sda, &cfg.ncm_config())?
                        .export(&dir.join("ncm"))?;
                }
            }
        }
        Ok((accuracy, report, scree))
    })();
    let (accuracy, report, scree) = match finished {
        Ok(v) => v,
        Err(e) => {
            let partial = partial_report(cfg, &schedule, stage_seconds, trainer.gradient_steps, &e);
            persist.write_json("report.json", &partial)?;
            return Err(Error::Stage { stage: schedule.total_stages, source: Box::new(e) });
        }
    };
    let run_report = RunReport {
        status: "complete".into(),
        method: cfg.method,
        memory_size: cfg.effective_memory_size(),
        seeds: cfg.seeds,
        metrics: Some(report.clone()),
        class_order: class_order(&schedule),
        stage_seconds: stage_seconds.clone(),
        gradient_steps: trainer.gradient_steps,
        error: None,
    };
    persist.write_json("report.json", &run_report)?;

    Ok(RunResult {
        config: cfg.clone(),
        schedule,
        accuracy,
        losses: trainer.losses,
        dumps,
        confusion,
        scree,
        stage_seconds,
        gradient_steps: trainer.gradient_steps,
        report,
    })
}

/// Loads the configured dataset (relative paths resolve against `base`) and
/// runs every seed repetition. With more than one repetition, run `r` is
/// written to `out/seed_<r>`.
pub fn run_configured(cfg: &ExperimentConfig, base: &Path, out: Option<&Path>) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let (mut train, mut test) = cfg.dataset.load(base)?;
    for _ in 0..cfg.downsample {
        train = train.downsample2();
        test = test.downsample2();
    }
    let mut results = Vec::with_capacity(cfg.seed_count);
    for r in 0..cfg.seed_count {
        let mut run_cfg = cfg.clone();
        run_cfg.seeds = cfg.seeds.offset(r as u64);
        run_cfg.seed_count = 1;
        let dir = out.map(|o| if cfg.seed_count > 1 { o.join(format!("seed_{r}")) } else { o.to_path_buf() });
        results.push(run_experiment(&run_cfg, &train, &test, dir.as_deref())?);
    }
    Ok(results)
}

/// A persisted run as read back by the report step.
#[derive(Clone, Debug)]
pub struct StoredRun {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub accuracy: AccuracyMatrix,
    pub report: RunReport,
}

impl StoredRun {
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<Vec<u8>> {
            let p = dir.join(name);
            fs::read(&p).map_err(|e| Error::io(&p, e))
        };
        Ok(StoredRun {
            dir: dir.to_path_buf(),
            config: serde_json::from_slice(&read("config.json")?)?,
            accuracy: serde_json::from_slice(&read("accuracy_matrix.json")?)?,
            report: serde_json::from_slice(&read("report.json")?)?,
        })
    }

    /// Every run directory at or directly below `root`.
    pub fn discover(root: &Path) -> Result<Vec<Self>> {
        if root.join("report.json").exists() {
            return Ok(vec![Self::load(root)?]);
        }
        let mut dirs: Vec<PathBuf> = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("report.json").exists())
            .collect();
        dirs.sort();
        dirs.iter().map(|d| Self::load(d)).collect()
    }

    pub fn losses(&self) -> Result<Vec<LossRecord>> {
        let p = self.dir.join("losses.jsonl");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        text.lines().map(|l| Ok(serde_json::from_str(l)?)).collect()
    }

    pub fn confusion(&self) -> Result<Vec<Vec<u64>>> {
        let p = self.dir.join("confusion.json");
        Ok(serde_json::from_slice(&fs::read(&p).map_err(|e| Error::io(&p, e))?)?)
    }

    pub fn scree(&self) -> Result<Vec<f64>> {
        let p = self.dir.join("scree.json");
        Ok(serde_json::from_slice(&fs::read(&p).map_err(|e| Error::io(&p, e))?)?)
    }
}

/// Count of test examples per class, for sanity checks on confusion matrices.
pub fn class_counts(test: &[LabeledExample]) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for e in test {
        *m.entry(e.label).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(method: Method) -> ExperimentConfig {
        ExperimentConfig {
            method,
            memory_size: 20,
            feature_dim: Some(16),
            dataset: DatasetSource::Synthetic(SyntheticConfig {
                classes: 4,
                train_per_class: 10,
                test_per_class: 4,
                side: 8,
                ..Default::default()
            }),
            save_checkpoints: false,
            ..Default::default()
        }
    }

    fn splits(cfg: &ExperimentConfig) -> (Dataset, Dataset) {
        cfg.dataset.load(Path::new(".")).unwrap()
    }

    #[test]
    fn equal_compute_defaults_and_override() {
        assert_eq!(Method::Sdaf.equal_compute_iterations(), 1);
        assert_eq!(Method::SdafAlign.equal_compute_iterations(), 1);
        assert_eq!(Method::Scr.equal_compute_iterations(), 4);
        assert_eq!(Method::SdafIdentity.equal_compute_iterations(), 4);
        assert_eq!(Method::Er.equal_compute_iterations(), 8);
        let mut cfg = tiny_config(Method::Sdaf);
        cfg.iterations = Some(3);
        assert!(cfg.validate().is_err());
        cfg.override_equal_compute = true;
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.iterations_per_batch(), 3);
        assert_eq!("sdaf_align".parse::<Method>().unwrap(), Method::SdafAlign);
    }

    #[test]
    fn config_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(Method::Scr);
        let json = dir.path().join("c.json");
        fs::write(&json, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(ExperimentConfig::from_file(&json).unwrap(), cfg);
        let toml_path = dir.path().join("c.toml");
        fs::write(&toml_path, "method = \"ER\"\nmemory_size = 50\n[seeds]\nclass_order = 7\n").unwrap();
        let t = ExperimentConfig::from_file(&toml_path).unwrap();
        assert_eq!((t.method, t.memory_size, t.seeds.class_order, t.seeds.init), (Method::Er, 50, 7, 1));
        fs::write(&toml_path, "memroy_size = 50\n").unwrap();
        assert!(ExperimentConfig::from_file(&toml_path).is_err());
    }

    #[test]
    fn sdaf_step_consumes_eight_views_per_image() {
        let cfg = tiny_config(Method::Sdaf);
        let (train, _) = splits(&cfg);
        let schedule = stream::build_schedule(&train.class_labels(), 2, 0).unwrap();
        let examples = train.labeled_examples(&schedule);
        let mut t = Trainer::new(cfg, schedule, 8).unwrap();
        t.begin_stage(0).unwrap();
        let batch: Vec<_> = examples.iter().filter(|e| e.label <= 2).take(20).cloned().collect();
        assert_eq!(t.make_views(&batch).unwrap().len(), 160);
        let r = t.train_iteration(&batch, 0, 1, 1).unwrap();
        assert_eq!(r.gamma, Some(1.0));
        assert!(r.l_wabs.is_some() && r.l_ss.is_some());
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut cfg = tiny_config(Method::Sdaf);
        cfg.learning_rate = 0.0;
        let (train, _) = splits(&cfg);
        let schedule = stream::build_schedule(&train.class_labels(), 2, 0).unwrap();
        let examples = train.labeled_examples(&schedule);
        let mut t = Trainer::new(cfg, schedule, 8).unwrap();
        t.begin_stage(0).unwrap();
        let before = t.model.parameters().to_vec();
        let batch: Vec<_> = examples.iter().filter(|e| e.label <= 2).take(6).cloned().collect();
        t.train_iteration(&batch, 0, 1, 1).unwrap();
        assert_eq!(t.model.parameters(), before.as_slice());
    }

    #[test]
    fn stage_step_and_memory_accounting() {
        for (method, per_batch) in [(Method::Sdaf, 1), (Method::Scr, 4), (Method::Er, 8)] {
            let cfg = tiny_config(method);
            let (train, _) = splits(&cfg);
            let schedule = stream::build_schedule(&train.class_labels(), 2, 0).unwrap();
            let examples = train.labeled_examples(&schedule);
            let options = StreamOptions { batch_size: 2, ..Default::default() };
            let mut s = stream::stream_batches(&examples, &schedule, &options).unwrap();
            let batches: Vec<Vec<LabeledExample>> = s.stage_batches(0).into_iter().map(|b| b.examples).collect();
            assert_eq!(batches.len(), 10);
            let mut t = Trainer::new(cfg, schedule, 8).unwrap();
            t.begin_stage(0).unwrap();
            t.run_stage(0, &batches).unwrap();
            assert_eq!(t.gradient_steps, 10 * per_batch);
            assert_eq!(t.memory.seen_count(), 20);
        }
    }

    #[test]
    fn loss_falls_on_a_frozen_batch() {
        let mut cfg = tiny_config(Method::Sdaf);
        cfg.augmentation = RandomPipelineConfig::disabled();
        let (train, _) = splits(&cfg);
        let schedule = stream::build_schedule(&train.class_labels(), 2, 0).unwrap();
        let examples = train.labeled_examples(&schedule);
        let batch: Vec<_> = examples.iter().filter(|e| e.label <= 2).take(10).cloned().collect();
        let mut t = Trainer::new(cfg, schedule, 8).unwrap();
        t.begin_stage(0).unwrap();
        let losses: Vec<f64> = (0..50).map(|i| t.train_iteration(&batch, 0, 1, i + 1).unwrap().loss).collect();
        let head: f64 = losses[..5].iter().sum();
        let tail: f64 = losses[45..].iter().sum();
        assert!(tail < 0.8 * head, "first {head}, last {tail}");
    }

    #[test]
    fn classifier_cannot_grow_mid_stage() {
        let cfg = tiny_config(Method::Sdaf);
        let (train, _) = splits(&cfg);
        let schedule = stream::build_schedule(&train.class_labels(), 2, 0).unwrap();
        let mut t = Trainer::new(cfg, schedule, 8).unwrap();
        t.begin_stage(0).unwrap();
        assert!(t.begin_stage(1).is_err());
        t.end_stage();
        t.begin_stage(1).unwrap();
        assert_eq!(t.model.head_weight().ncols(), 16);
    }

    #[test]
    fn full_run_persists_results() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(Method::Sdaf);
        cfg.save_checkpoints = true;
        let (train, test) = splits(&cfg);
        let r = run_experiment(&cfg, &train, &test, Some(dir.path())).unwrap();
        assert_eq!(r.accuracy.stages(), 2);
        assert_eq!(r.accuracy.rows[1].len(), 4);
        assert_eq!(r.gradient_steps, 4);
        assert_eq!(r.dumps.len(), 4);
        assert_eq!(r.confusion.sum(), 16);
        for name in ["config.json", "accuracy_matrix.json", "losses.jsonl", "report.json", "scree.json", "confusion.json"] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        assert!(dir.path().join("dumps/stage_2_1.f32").exists());
        assert!(dir.path().join("model/model.bin").exists());
        let stored = StoredRun::load(dir.path()).unwrap();
        assert_eq!(stored.accuracy, r.accuracy);
        assert_eq!(stored.losses().unwrap(), r.losses);
        assert_eq!(stored.report.status, "complete");
    }

    #[test]
    fn failing_run_leaves_partial_marker() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(Method::Er);
        let (train, test) = splits(&cfg);
        // an exploding step drives the loss to a non-finite value
        let cfg = ExperimentConfig { learning_rate: 1e200, ..cfg };
        let err = run_experiment(&cfg, &train, &test, Some(dir.path())).unwrap_err();
        assert!(matches!(err, Error::Stage { .. }), "{err}");
        let stored = StoredRun::load(dir.path()).unwrap();
        assert_eq!(stored.report.status, "partial");
        assert!(stored.report.error.is_some());
    }
}
