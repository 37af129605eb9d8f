//! Pipeline stages. Each stage reads its predecessors' artifacts from
//! content-addressed directories and writes its own plus a run log.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use corrsig::corrnet::train_corrnet;
use corrsig::evalmetrics::{evaluate, intensity_baseline, BaselineAuc, VolumeRef};
use corrsig::featext::cohort_views;
use corrsig::predictor::{
    corr_map, slice_inputs, train_predictor, volume_samples, MapStats, Predictor, Sample, SliceInputs,
};
use corrsig::preprocess::dataset::{raw_path, Channel, read_f32_map, read_json, write_f32_map, write_json};
use corrsig::preprocess::preprocess_dataset;
use corrsig::synthdata::generate;
use corrsig::{
    CorrNetParams, Dataset, EvalReport, ExtractorWeights, Mask, PredictorModel, SliceRecord, Split, Tensor,
    Variant,
};

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};
use crate::runlog::{dir_digests, file_digest, sha256_hex, RunLog, Stage, RUN_LOG};

pub const EXTRACTOR_FILE: &str = "extractor.cswt";
pub const CORRNET_FILE: &str = "corrnet.cswt";
pub const PREDICTOR_FILE: &str = "predictor.cswt";
pub const MAP_STATS_FILE: &str = "map_stats.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const CORR_SUFFIX: &str = "corr";
pub const PROB_SUFFIX: &str = "prob";

/// Resolved configuration plus the worker pool used inside stages.
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pool: rayon::ThreadPool,
}

/// Worker count from `CORRSIG_THREADS`, defaulting to the machine's
/// parallelism.
pub fn thread_count() -> Result<usize> {
    match std::env::var("CORRSIG_THREADS") {
        Ok(v) => v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| CliError::Validation {
            path: "CORRSIG_THREADS".into(),
            message: format!("expected a positive integer, got `{v}`"),
        }),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn patients(ds: &Dataset, split: Split) -> Vec<String> {
    ds.manifest.split(split).map(|p| p.id.clone()).collect()
}

fn open_dataset(root: &Path, stage: &'static str) -> Result<Dataset> {
    if !root.join("manifest.json").is_file() {
        return Err(CliError::MissingStage {
            stage,
            what: "dataset manifest".into(),
            path: root.join("manifest.json"),
        });
    }
    Ok(Dataset::open(root)?)
}

/// Content digest of a raw dataset: its manifest and every non-histopathology
/// file of the listed patients. Histopathology is left out so inference keeps
/// working on copies without it.
fn dataset_digest(root: &Path) -> Result<String> {
    let manifest = require_file(root.join("manifest.json"), "gen-synthetic", "raw dataset manifest")?;
    let ds = open_dataset(root, "gen-synthetic")?;
    let hist = format!(".{}.", Channel::Hist.suffix());
    let mut files = BTreeMap::new();
    files.insert("manifest.json".to_string(), file_digest(&manifest)?);
    for p in &ds.manifest.patients {
        for (name, digest) in dir_digests(&ds.patient_dir(&p.id))? {
            if !name.contains(&hist) {
                files.insert(format!("{}/{name}", p.id), digest);
            }
        }
    }
    Ok(sha256_hex(json!(files).to_string().as_bytes()))
}

fn require_file(path: PathBuf, stage: &'static str, what: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::MissingStage {
            stage,
            what: what.into(),
            path,
        })
    }
}

/// Reads a `[k, H, W]` map, restoring the channel axis for `k = 1`.
fn read_map(path: &Path) -> Result<Tensor> {
    let (t, _) = read_f32_map(path)?;
    Ok(if t.ndim() == 2 {
        let shape = [&[1][..], t.shape()].concat();
        t.reshape(shape)?
    } else {
        t
    })
}

fn write_png(path: &Path, prob: &Tensor) -> Result<()> {
    let (h, w) = (prob.shape()[0], prob.shape()[1]);
    let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = prob.data().iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    enc.write_header()
        .and_then(|mut wr| wr.write_image_data(&bytes))
        .map_err(|e| CliError::io(path, std::io::Error::other(e)))
}

/// Evaluation artifact of one trained model on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub model: String,
    pub variant: Variant,
    pub k: usize,
    pub predictor_hash: String,
    pub report: EvalReport,
    pub baseline: BaselineAuc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub auc: f64,
    /// Mean and std of the lesion-level AUC.
    pub lesion_auc: Option<(f64, f64)>,
    pub evaluation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn markdown(&self) -> String {
        let f = |v: Option<f64>| v.map_or("–".to_string(), |x| format!("{x:.3}"));
        let mut s = String::from("| Model | Sensitivity | Specificity | AUC | Lesion AUC |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            let lesion = r.lesion_auc.map_or("–".to_string(), |(m, sd)| format!("{m:.3} ± {sd:.3}"));
            s.push_str(&format!(
                "| {} | {} | {} | {:.3} | {} |\n",
                r.model,
                f(r.sensitivity),
                f(r.specificity),
                r.auc,
                lesion
            ));
        }
        s
    }
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(thread_count()?)
            .build()
            .map_err(|e| corrsig::Error::Usage(format!("thread pool: {e}")))?;
        Ok(Self { cfg, pool })
    }

    // ---- stage addressing ---------------------------------------------------

    pub fn synthetic_stage(&self) -> Stage {
        Stage::at(self.cfg.dataset.clone(), "gen-synthetic", json!({ "synthetic": self.cfg.synthetic }))
    }

    pub fn preprocess_stage(&self) -> Result<Stage> {
        Ok(Stage::new(
            &self.cfg.out,
            "preprocess",
            json!({
                "dataset": dataset_digest(&self.cfg.dataset)?,
                "preprocess": self.cfg.preprocess,
            }),
        ))
    }

    pub fn corrnet_stage(&self) -> Result<Stage> {
        let pre = self.preprocess_stage()?;
        let ext = require_file(self.cfg.extractor_path(), "gen-synthetic", "extractor weights")?;
        Ok(Stage::new(
            &self.cfg.out,
            "corrnet",
            json!({
                "preprocess": pre.hash,
                "extractor": file_digest(&ext)?,
                "corrnet": self.cfg.corrnet,
                "samples_per_slice": self.cfg.corrnet_samples_per_slice,
            }),
        ))
    }

    pub fn extract_stage(&self) -> Result<Stage> {
        let c = self.corrnet_stage()?;
        Ok(Stage::new(&self.cfg.out, "extract", json!({ "corrnet": c.hash })))
    }

    pub fn predictor_stage(&self) -> Result<Stage> {
        let e = self.extract_stage()?;
        Ok(Stage::new(
            &self.cfg.out,
            "predictor",
            json!({ "extract": e.hash, "predictor": self.cfg.predictor }),
        ))
    }

    pub fn predict_stage(&self) -> Result<Stage> {
        let p = self.predictor_stage()?;
        Ok(Stage::new(&self.cfg.out, "predict", json!({ "predictor": p.hash })))
    }

    pub fn evaluate_stage(&self) -> Result<Stage> {
        let p = self.predict_stage()?;
        Ok(Stage::new(
            &self.cfg.out,
            "evaluate",
            json!({ "predict": p.hash, "eval": self.cfg.eval }),
        ))
    }

    fn preprocessed(&self) -> Result<(Stage, Dataset)> {
        let pre = self.preprocess_stage()?;
        pre.require("preprocess")?;
        let ds = open_dataset(&pre.dir, "preprocess")?;
        Ok((pre, ds))
    }

    fn extractor(&self) -> Result<ExtractorWeights> {
        let p = require_file(self.cfg.extractor_path(), "gen-synthetic", "extractor weights")?;
        Ok(ExtractorWeights::load(p)?)
    }

    // ---- stages -------------------------------------------------------------

    /// Writes a phantom dataset plus random extractor weights. Refuses to
    /// overwrite a directory it did not create.
    pub fn gen_synthetic(&self) -> Result<RunLog> {
        let started = Instant::now();
        let stage = self.synthetic_stage();
        let root = &stage.dir;
        let nonempty = root.is_dir() && fs::read_dir(root).map_err(|e| CliError::io(root, e))?.next().is_some();
        if nonempty && !root.join(RUN_LOG).is_file() {
            return Err(corrsig::Error::Data(format!(
                "{} exists and was not written by gen-synthetic; refusing to overwrite",
                root.display()
            ))
            .into());
        }
        stage.begin()?;
        let written = generate(&self.cfg.synthetic, root).and_then(|_| {
            ExtractorWeights::random(self.cfg.seed)
                .to_weight_file()
                .save(self.cfg.extractor_path())
        });
        if let Err(e) = written {
            // leave nothing half-written behind
            let _ = fs::remove_dir_all(root);
            return Err(e.into());
        }
        stage.finish(started)
    }

    pub fn preprocess(&self) -> Result<RunLog> {
        let started = Instant::now();
        let raw = open_dataset(&self.cfg.dataset, "gen-synthetic")?;
        let stage = self.preprocess_stage()?;
        stage.begin()?;
        let state = preprocess_dataset(&raw, &stage.dir, &self.cfg.preprocess)?;
        write_json(&stage.dir.join("preprocess.json"), &state)?;
        stage.finish(started)
    }

    /// The only stage after preprocessing that reads histopathology.
    pub fn train_corrnet(&self) -> Result<RunLog> {
        let started = Instant::now();
        let (_, ds) = self.preprocessed()?;
        let ext = self.extractor()?;
        let stage = self.corrnet_stage()?;
        let mut records = Vec::new();
        for id in patients(&ds, Split::Train) {
            records.extend(ds.read_patient(&id, true)?);
        }
        let views = cohort_views(&records, &ext, self.cfg.corrnet_samples_per_slice, self.cfg.seed)?;
        drop(records);
        log::info!("corrnet: {} balanced pixel samples", views.len());
        stage.begin()?;
        let fit = train_corrnet(&views, &self.cfg.corrnet)?;
        fit.params
            .to_weight_file(fit.metadata(&self.cfg.corrnet))
            .save(stage.dir.join(CORRNET_FILE))?;
        write_json(
            &stage.dir.join("trace.json"),
            &json!({
                "samples": views.len(),
                "loss": fit.loss_trace,
                "correlation": fit.corr_trace,
            }),
        )?;
        stage.finish(started)
    }

    /// Normalised CorrNet maps for every slice, from MRI alone.
    pub fn extract(&self) -> Result<RunLog> {
        let started = Instant::now();
        let (_, ds) = self.preprocessed()?;
        let ext = self.extractor()?;
        let cstage = self.corrnet_stage()?;
        cstage.require("train-corrnet")?;
        let cn = CorrNetParams::load(cstage.dir.join(CORRNET_FILE))?;
        let stage = self.extract_stage()?;

        let ids: Vec<&str> = ds.manifest.patients.iter().map(|p| p.id.as_str()).collect();
        let volumes: Vec<(Vec<SliceRecord>, Vec<Tensor>)> = self.pool.install(|| {
            ids.par_iter()
                .map(|id| -> Result<_> {
                    let recs = ds.read_patient(id, false)?;
                    let maps = recs.iter().map(|r| corr_map(r, &ext, &cn)).collect::<Result<Vec<_>, _>>()?;
                    Ok((recs, maps))
                })
                .collect::<Result<_>>()
        })?;
        let train: Vec<(&Tensor, &Mask)> = ds
            .manifest
            .patients
            .iter()
            .zip(&volumes)
            .filter(|(p, _)| p.split == Split::Train)
            .flat_map(|(_, (recs, maps))| maps.iter().zip(recs.iter().map(|r| &r.prostate_mask)))
            .collect();
        let stats = MapStats::pooled(train)?;

        stage.begin()?;
        write_json(&stage.dir.join(MAP_STATS_FILE), &stats)?;
        for (id, (recs, maps)) in ids.iter().zip(&volumes) {
            for (r, m) in recs.iter().zip(maps) {
                let path = raw_path(&stage.dir.join(id), r.index, CORR_SUFFIX);
                write_f32_map(&path, &stats.apply(m)?, r.spacing_mm, r.missing_label)?;
            }
        }
        stage.finish(started)
    }

    fn samples(&self, ds: &Dataset, extract_dir: &Path, split: Split, variant: Variant) -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for id in patients(ds, split) {
            let recs = ds.read_patient(&id, false)?;
            let vol: Vec<SliceInputs> = recs
                .iter()
                .map(|r| {
                    let path = raw_path(&extract_dir.join(&id), r.index, CORR_SUFFIX);
                    let path = require_file(path, "extract", "CorrNet map")?;
                    Ok(slice_inputs(r, read_map(&path)?)?)
                })
                .collect::<Result<_>>()?;
            let labels: Vec<Mask> = recs.iter().map(|r| r.cancer_label.clone()).collect();
            let samples = volume_samples(variant, &vol, &labels)?;
            // slices without a usable label are context only
            out.extend(samples.into_iter().zip(&recs).filter(|(_, r)| !r.missing_label).map(|(s, _)| s));
        }
        Ok(out)
    }

    pub fn train_predictor(&self) -> Result<RunLog> {
        let started = Instant::now();
        let (_, ds) = self.preprocessed()?;
        let estage = self.extract_stage()?;
        estage.require("extract")?;
        let stage = self.predictor_stage()?;
        let pc = &self.cfg.predictor;
        let train = self.samples(&ds, &estage.dir, Split::Train, pc.variant)?;
        let val = self.samples(&ds, &estage.dir, Split::Val, pc.variant)?;
        log::info!("predictor: {} training and {} validation slices", train.len(), val.len());

        stage.begin()?;
        let mut model = PredictorModel::build(pc.variant, self.cfg.corrnet.k, pc.widths, self.cfg.seed)?;
        let history = train_predictor(&mut model, &train, &val, &pc.train)?;
        model.save(
            stage.dir.join(PREDICTOR_FILE),
            json!({
                "epoch": history.best_epoch,
                "val_loss": history.best_val_loss,
            }),
        )?;
        write_json(&stage.dir.join("history.json"), &history)?;
        stage.finish(started)
    }

    /// Test-split probability maps computed from MRI only.
    pub fn predict(&self, png: bool) -> Result<RunLog> {
        let started = Instant::now();
        let (_, ds) = self.preprocessed()?;
        let ext = self.extractor()?;
        let cstage = self.corrnet_stage()?;
        cstage.require("train-corrnet")?;
        let estage = self.extract_stage()?;
        estage.require("extract")?;
        let pstage = self.predictor_stage()?;
        pstage.require("train-predictor")?;
        let cn = CorrNetParams::load(cstage.dir.join(CORRNET_FILE))?;
        let stats: MapStats = read_json(&estage.dir.join(MAP_STATS_FILE))?;
        let model = PredictorModel::load(pstage.dir.join(PREDICTOR_FILE))?;
        let stage = self.predict_stage()?;

        let ids = patients(&ds, Split::Test);
        let maps: Vec<(Vec<SliceRecord>, Vec<Tensor>)> = self.pool.install(|| {
            ids.par_iter()
                .map(|id| -> Result<_> {
                    let recs = ds.read_patient(id, false)?;
                    let mut model = model.clone();
                    let mut p = Predictor {
                        model: &mut model,
                        extractor: &ext,
                        corrnet: &cn,
                        stats: &stats,
                    };
                    let probs = p.predict_patient(&recs)?;
                    Ok((recs, probs))
                })
                .collect::<Result<_>>()
        })?;

        stage.begin()?;
        for (id, (recs, probs)) in ids.iter().zip(&maps) {
            for (r, p) in recs.iter().zip(probs) {
                let path = raw_path(&stage.dir.join(id), r.index, PROB_SUFFIX);
                write_f32_map(&path, p, r.spacing_mm, r.missing_label)?;
                if png {
                    write_png(&path.with_extension("png"), p)?;
                }
            }
        }
        stage.finish(started)
    }

    pub fn evaluate(&self) -> Result<RunLog> {
        let started = Instant::now();
        let (_, ds) = self.preprocessed()?;
        let pstage = self.predict_stage()?;
        pstage.require("predict")?;
        let stage = self.evaluate_stage()?;

        let mut vols: Vec<(Vec<Tensor>, Vec<Mask>, Vec<Mask>)> = Vec::new();
        let mut kept = Vec::new();
        for id in patients(&ds, Split::Test) {
            let (mut probs, mut labels, mut masks) = (Vec::new(), Vec::new(), Vec::new());
            for r in ds.read_patient(&id, false)? {
                if r.missing_label {
                    continue;
                }
                let path = require_file(raw_path(&pstage.dir.join(&id), r.index, PROB_SUFFIX), "predict", "probability map")?;
                probs.push(read_f32_map(&path)?.0);
                labels.push(r.cancer_label.clone());
                masks.push(r.prostate_mask.clone());
                kept.push(r);
            }
            if !probs.is_empty() {
                vols.push((probs, labels, masks));
            }
        }
        let refs: Vec<VolumeRef<'_>> = vols
            .iter()
            .map(|(p, l, m)| VolumeRef {
                probs: p,
                labels: l,
                masks: m,
            })
            .collect();
        let report = evaluate(&refs, &self.cfg.eval)?;
        let baseline = intensity_baseline(&kept)?;
        let pc = &self.cfg.predictor;
        let eval = Evaluation {
            model: pc.variant.label(self.cfg.corrnet.k),
            variant: pc.variant,
            k: self.cfg.corrnet.k,
            predictor_hash: self.predictor_stage()?.hash,
            report,
            baseline,
        };
        stage.begin()?;
        write_json(&stage.dir.join(EVALUATION_FILE), &eval)?;
        log::info!(
            "{}: pixel AUC {:.4} (intensity baseline {} {:.4})",
            eval.model,
            eval.report.pixel_auc,
            eval.baseline.score,
            eval.baseline.auc
        );
        stage.finish(started)
    }

    /// Table of every completed evaluation under `out`, one row per model
    /// plus the intensity baseline.
    pub fn report(&self) -> Result<Report> {
        let root = self.cfg.out.join("evaluate");
        let mut evals = Vec::new();
        if root.is_dir() {
            let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
                .map_err(|e| CliError::io(&root, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join(RUN_LOG).is_file() && p.join(EVALUATION_FILE).is_file())
                .collect();
            dirs.sort();
            for d in dirs {
                let e: Evaluation = read_json(&d.join(EVALUATION_FILE))?;
                let hash = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                evals.push((e, hash));
            }
        }
        if evals.is_empty() {
            return Err(CliError::MissingStage {
                stage: "evaluate",
                what: "completed evaluation".into(),
                path: root,
            });
        }
        let mut rows: Vec<ReportRow> = evals
            .iter()
            .map(|(e, h)| ReportRow {
                model: e.model.clone(),
                sensitivity: Some(e.report.sensitivity),
                specificity: Some(e.report.specificity),
                auc: e.report.pixel_auc,
                lesion_auc: e.report.lesion.as_ref().map(|l| (l.mean, l.std)),
                evaluation: h.clone(),
            })
            .collect();
        rows.sort_by(|a, b| a.model.cmp(&b.model).then(a.evaluation.cmp(&b.evaluation)));
        let (b, h) = &evals[0];
        rows.push(ReportRow {
            model: format!("Intensity threshold ({})", b.baseline.score),
            sensitivity: None,
            specificity: None,
            auc: b.baseline.auc,
            lesion_auc: None,
            evaluation: h.clone(),
        });
        let report = Report { rows };
        write_json(&self.cfg.out.join("report.json"), &report)?;
        let md = self.cfg.out.join("report.md");
        fs::write(&md, report.markdown()).map_err(|e| CliError::io(&md, e))?;
        Ok(report)
    }
}
