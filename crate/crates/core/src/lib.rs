//! Local-overfitting diagnostics and Knowledge Fusion for classifier
//! training histories.
//!
//! * [`log`]: per-epoch prediction logs and the KFPL file format
//! * [`metrics`]: forget/learn fractions, forget times, large-loss counts
//! * [`fusion`]: fitting and applying fusion plans, ensemble baselines
//! * [`models`]: small dense classifiers with analytic gradients
//! * [`trainer`]: synthetic experiments, distillation, weight averaging
//! * [`lab`]: deep linear network dynamics against their closed form
//! * [`manifest`], [`report`]: run layout on disk and SVG charts

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fusion;
pub mod lab;
pub mod log;
pub mod manifest;
pub mod metrics;
pub mod models;
pub mod report;
pub mod trainer;

pub use error::{FusionError, LabError, LogError, ManifestError, MetricsError, ModelError, TrainError};
pub use fusion::{fit_plan, fuse, FitOptions, FusedProbs, FusionPair, FusionPlan};
pub use log::{correctness, read_log, write_log, CorrectnessMatrix, PredictionLog, SplitTag};
pub use metrics::{forget_report, forget_times, noise_loss_counts, ForgetReport, ForgetTime};
pub use models::{Activation, Architecture, ModelWeights};
