//! Mixture-ratio scaling laws for continual pre-training: loss-curve
//! ingestion, law fitting, cross-validation, the usage solvers and
//! domain learnability features.

// `!(x > 0.0)` is used throughout so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dlc;
pub mod error;
pub mod exec;
pub mod fitter;
pub mod ingest;
pub mod laws;
pub mod lbfgs;
pub mod model;
pub mod solvers;
pub mod validation;

pub use error::{Error, Result};
pub use exec::Execution;
pub use fitter::{fit, FitConfig, FitResult, Metrics};
pub use laws::{DcptParams, LawArtifact, LawId, LawParams, LawPoint};
pub use model::{CorpusSide, DataPoint, LossCurve, Sample, TrainConfig};
