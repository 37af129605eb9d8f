//! Correlated MRI signatures for cancer localisation.
//!
//! The pipeline has two learned stages. A linear correlational network is fit
//! on paired per-pixel MRI and histopathology features; its MRI-side
//! projection then feeds a deeply supervised convolutional predictor that
//! needs MRI alone at inference time.

pub mod corrnet;
pub mod error;
pub mod evalmetrics;
pub mod featext;
pub mod numcore;
pub mod predictor;
pub mod preprocess;
pub mod synthdata;

pub use error::{Error, Result};
pub use corrnet::{CorrNetParams, CorrNetTrainConfig};
pub use evalmetrics::{EvalConfig, EvalReport};
pub use featext::ExtractorWeights;
pub use numcore::{Graph, Tensor, WeightFile};
pub use predictor::{PredictorModel, PredictorTrainConfig, Variant};
pub use preprocess::dataset::{Dataset, Split};
pub use preprocess::{Mask, NyulModel, SliceRecord};
pub use synthdata::PhantomConfig;
