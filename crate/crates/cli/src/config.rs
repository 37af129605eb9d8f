use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use corrsig::predictor::VGG_WIDTHS;
use corrsig::preprocess::PreprocessConfig;
use corrsig::{CorrNetTrainConfig, EvalConfig, PhantomConfig, PredictorTrainConfig, Variant};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorStageConfig {
    pub variant: Variant,
    /// Filter widths of the five conv blocks.
    pub widths: [usize; 5],
    pub train: PredictorTrainConfig,
}

impl Default for PredictorStageConfig {
    fn default() -> Self {
        Self {
            variant: Variant::HedBranch3,
            widths: VGG_WIDTHS,
            train: PredictorTrainConfig::default(),
        }
    }
}

/// Whole-pipeline configuration, read from `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Raw dataset root (written by `gen-synthetic`).
    pub dataset: PathBuf,
    /// Extractor weights; `<dataset>/extractor.cswt` when absent.
    pub extractor: Option<PathBuf>,
    pub out: PathBuf,
    /// Propagated into every stage's own seed.
    pub seed: u64,
    pub synthetic: PhantomConfig,
    pub preprocess: PreprocessConfig,
    pub corrnet: CorrNetTrainConfig,
    /// Cap on balanced pixel samples drawn from each training slice for
    /// CorrNet; `null` keeps all of them.
    pub corrnet_samples_per_slice: Option<usize>,
    pub predictor: PredictorStageConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/phantom"),
            extractor: None,
            out: PathBuf::from("runs"),
            seed: 0,
            synthetic: PhantomConfig::default(),
            preprocess: PreprocessConfig::default(),
            corrnet: CorrNetTrainConfig {
                lr: 1e-4,
                batch_size: 512,
                ..CorrNetTrainConfig::default()
            },
            corrnet_samples_per_slice: Some(400),
            predictor: PredictorStageConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub variant: Option<Variant>,
    pub k: Option<usize>,
}

fn invalid(path: &str, message: impl Into<String>) -> CliError {
    CliError::Validation {
        path: path.into(),
        message: message.into(),
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            invalid(&path, e.into_inner().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Applies overrides, propagates the seed and validates.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(p) = &o.dataset {
            self.dataset = p.clone();
        }
        if let Some(v) = o.variant {
            self.predictor.variant = v;
        }
        if let Some(k) = o.k {
            self.corrnet.k = k;
        }
        self.synthetic.seed = self.seed;
        self.corrnet.seed = self.seed;
        self.predictor.train.seed = self.seed;
        self.eval.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |path: &'static str| move |e: corrsig::Error| invalid(path, e.to_string());
        self.synthetic.validate().map_err(wrap("synthetic"))?;
        self.corrnet.validate().map_err(wrap("corrnet"))?;
        self.predictor.train.validate().map_err(wrap("predictor.train"))?;
        if self.preprocess.grid == 0 || !self.preprocess.grid.is_multiple_of(16) {
            return Err(invalid("preprocess.grid", "must be a positive multiple of 16"));
        }
        if !(self.preprocess.hist_sigma >= 0.0) {
            return Err(invalid("preprocess.hist_sigma", "must be >= 0"));
        }
        if self.predictor.widths.contains(&0) {
            return Err(invalid("predictor.widths", "must all be positive"));
        }
        if self.corrnet_samples_per_slice == Some(0) {
            return Err(invalid("corrnet_samples_per_slice", "must be >= 1 or null"));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(invalid("eval.threshold", "must lie in [0, 1]"));
        }
        if self.eval.lesion_resamples == 0 {
            return Err(invalid("eval.lesion_resamples", "must be >= 1"));
        }
        Ok(())
    }

    pub fn extractor_path(&self) -> PathBuf {
        self.extractor
            .clone()
            .unwrap_or_else(|| self.dataset.join(crate::stages::EXTRACTOR_FILE))
    }
}
