//! `corrsig` pipeline orchestration: JSON config, content-addressed stage
//! directories and run logs.

pub mod config;
pub mod error;
pub mod runlog;
pub mod stages;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{Overrides, PipelineConfig};
pub use error::{CliError, Result};
pub use runlog::RunLog;
pub use stages::{Pipeline, Report};

#[derive(Debug, Parser)]
#[command(name = "corrsig", version, about = "Correlated MRI signatures for cancer localisation")]
pub struct Args {
    /// Pipeline config (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed for every stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root for stage artifacts.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Raw dataset root.
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Predictor variant: hed3 or hedbranch3.
    #[arg(long, global = true)]
    pub variant: Option<corrsig::Variant>,
    /// CorrNet representation size.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded phantom dataset and random extractor weights.
    GenSynthetic,
    /// Conform, standardise and normalise the raw dataset.
    Preprocess,
    /// Fit the correlational network on paired MRI/histopathology pixels.
    TrainCorrnet,
    /// Compute normalised CorrNet maps from MRI.
    Extract,
    /// Train the deeply supervised predictor.
    TrainPredictor,
    /// Predict test-split probability maps without histopathology.
    Predict {
        /// Also write 8-bit PNG previews.
        #[arg(long)]
        png: bool,
    },
    /// Pixel and lesion metrics on the test split.
    Evaluate,
    /// Compare every evaluated model in a table.
    Report,
}

impl Args {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            dataset: self.dataset.clone(),
            variant: self.variant,
            k: self.k,
        }
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        let base = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        base.resolve(&self.overrides())
    }
}

/// Outcome of one subcommand.
#[derive(Debug)]
pub enum Outcome {
    Stage(RunLog),
    Report(Report),
}

pub fn run(args: &Args) -> Result<Outcome> {
    let p = Pipeline::new(args.pipeline_config()?)?;
    let log = match args.command {
        Command::GenSynthetic => p.gen_synthetic()?,
        Command::Preprocess => p.preprocess()?,
        Command::TrainCorrnet => p.train_corrnet()?,
        Command::Extract => p.extract()?,
        Command::TrainPredictor => p.train_predictor()?,
        Command::Predict { png } => p.predict(png)?,
        Command::Evaluate => p.evaluate()?,
        Command::Report => return Ok(Outcome::Report(p.report()?)),
    };
    Ok(Outcome::Stage(log))
}
