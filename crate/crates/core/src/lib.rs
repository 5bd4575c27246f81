//! Unsupervised visible-infrared tracklet re-identification.
//!
//! The pipeline learns a temporal encoder over tracklet frame features without
//! identity labels. Every epoch it builds one prototype per tracklet inside its
//! own camera, mines cross-camera and cross-modality positives between
//! prototypes with an instance-adaptive threshold, and trains the encoder with
//! a staged set of prototype-contrastive losses while the prototypes follow the
//! encoder through an exponential moving average.
//!
//! Module map:
//!
//! * [`datamodel`] - tracklets, prototypes, configs, dataset and checkpoint formats
//! * [`synthgen`] - ground-truthed synthetic cross-modal datasets
//! * [`encoder`] - temporal encoder forward pass and exact backward pass
//! * [`prototyping`] - sub-tracklet partitioning and per-camera prototype stores
//! * [`mining`] - positive mining with dynamic thresholds and soft weights
//! * [`sampler`] - cameras x tracklets x sub-tracklets batch construction
//! * [`objective`] - contrastive losses, loss scheduling, EMA prototype update
//! * [`trainer`] - the epoch loop
//! * [`evaluator`] - CMC / mAP retrieval, distance distributions, mining quality
//! * [`cli`] - the `hitpro` command line

pub mod cli;
pub mod datamodel;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod mining;
pub mod objective;
pub mod prototyping;
pub mod sampler;
pub mod synthgen;
pub mod trainer;

mod rng;

pub use error::{Error, Result};
