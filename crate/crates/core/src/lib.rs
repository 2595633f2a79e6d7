//! Class-incremental online continual learning.
//!
//! The crate trains a network on a one-pass stream of disjoint class stages
//! with a reservoir replay memory. The main method combines rotation-based
//! augmentation with an extended label space, a stop-gradient view-alignment
//! loss, a cross-entropy head whose new-class views are down-sampled according
//! to classifier weight magnitudes, and nearest-class-mean inference under a
//! Mahalanobis metric. ER, fine-tuning, SCR and SCL baselines share the same
//! stream, memory and evaluation machinery.
//!
//! Module map:
//!
//! - [`stream`] — stage schedules, one-epoch batch streams, dataset ingestion
//! - [`memory`] — reservoir replay memory
//! - [`augment`] — deterministic rotations, random view pipelines, view batches
//! - [`autograd`] and [`network`] — tape-based differentiation and the model bundle
//! - [`objectives`] — view loss, WABS-masked cross-entropy, supervised contrastive loss
//! - [`ncm`] — nearest-class-mean inference
//! - [`metrics`] — accuracy/forgetting/CKA/balancedness/AUC/scree/confusion
//! - [`harness`] — the training loop, experiments and persistence
//! - [`report`] — aggregation, CSV/JSON/LaTeX tables and SVG plots
//! - [`synthetic`] — a procedural dataset for desk-scale runs

pub mod archive;
pub mod augment;
pub mod autograd;
pub mod error;
pub mod harness;
pub mod memory;
pub mod metrics;
pub mod ncm;
pub mod network;
pub mod objectives;
pub mod report;
pub mod rng;
pub mod stream;
pub mod synthetic;

pub use error::{Error, Result};
