//! Group-fairness evaluation and bias mitigation for binary classifiers.
//!
//! Modules follow the pipeline: [`dataset`] types and splits, [`features`]
//! for signal-derived inputs, [`model`] for training, the three mitigation
//! families, [`metrics`] for evaluation and [`harness`] for experiments.

pub mod dataset;
pub mod error;
pub mod features;
pub mod harness;
pub mod inprocess;
pub mod metrics;
pub mod model;
pub mod postprocess;
pub mod preprocess;
pub mod synth;

pub use dataset::{Dataset, Example, Fold, Group, SeedStream, SplitSpec};
pub use error::{Error, Result};
pub use metrics::{ExtendedRatio, FairnessReport, GroupedConfusion, PerformanceReport};
pub use model::{Architecture, LossSpec, ModelParams, TrainConfig};
