//! Semi-supervised promptable segmentation.
//!
//! This crate implements a two-decoder promptable segmentation model trained
//! with cross-prompt pseudo-supervision on unlabeled images, prompt
//! consistency regularization, and low-rank (LoRA) adaptation of the image
//! encoder. It ships a small pure-Rust promptable model so the whole pipeline
//! runs end to end on synthetic data without external weights.
//!
//! Module map:
//! - [`autodiff`]: reverse-mode tape over `f64` ndarrays.
//! - [`prompt_geometry`]: mask → point-prompt extraction (components,
//!   distance-transform centers, random interior points).
//! - [`losses`]: dice / cross-entropy primitives and the cross-prompting,
//!   consistency, and supervised objectives.
//! - [`model`]: the toy promptable segmenter (shared encoder, prompt encoder,
//!   two decoders) and LoRA injection.
//! - [`metrics`]: DSC / Jaccard / HD95 / ASD and dataset evaluation.
//! - [`data_io`]: dataset manifests, PNG loading, synthetic data generation,
//!   splits.
//! - [`trainer`]: optimizer, schedules, batch composition, the training loop,
//!   and checkpointing.
//! - [`config`]: run configuration loading and merging.

pub mod autodiff;
pub mod config;
pub mod data_io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod prompt_geometry;
pub mod trainer;
