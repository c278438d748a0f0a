//! Deep structured energy-based models for unsupervised anomaly detection.
//!
//! An energy `E(x; θ)` is parameterized by a dense, recurrent or
//! convolutional network and trained by denoising score matching, i.e. as a
//! denoising autoencoder with reconstruction `f(x) = x − ∇ₓE(x)`. Samples are
//! then flagged either by high energy or by large reconstruction error.

pub mod datasets;
pub mod detection;
pub mod energy_conv;
pub mod energy_dense;
pub mod energy_recurrent;
pub mod error;
pub mod gradcheck;
pub mod landscape;
pub mod model;
pub mod numerics;
pub mod persistence;
pub mod training;

pub use datasets::{DataKind, Item, LabeledDataset, Split};
pub use detection::{evaluate, score_samples, Criterion, EvalReport, ScoreReport, ThresholdMode, Thresholds};
pub use energy_conv::{ConvEnergyParams, LayerSpec};
pub use energy_dense::DenseEnergyParams;
pub use energy_recurrent::{RecurrentEnergyParams, Sequence};
pub use error::{DsebmError, Result};
pub use model::{Architecture, Detector, Model, ModelSpec, Normalizer, Parameters, Sample};
pub use numerics::{RngStream, Tensor};
pub use training::{fit_detector, train, TrainConfig, TrainTrace};
