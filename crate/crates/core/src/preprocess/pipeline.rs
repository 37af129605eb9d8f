use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{write_json, Dataset, Split};
use super::{gaussian_smooth, nyul_apply, nyul_learn, resample_record, NyulModel, SliceRecord, ZStats};
use super::{GRID, HIST_SIGMA};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub grid: usize,
    pub hist_sigma: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            grid: GRID,
            hist_sigma: HIST_SIGMA,
        }
    }
}

/// Everything learned on the training split, stored as `preprocess.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessState {
    pub config: PreprocessConfig,
    pub t2w_nyul: NyulModel,
    pub adc_nyul: NyulModel,
    pub t2w_z: ZStats,
    pub adc_z: ZStats,
}

impl PreprocessState {
    /// Applies the learned intensity maps to a resampled slice.
    pub fn standardize(&self, rec: &SliceRecord) -> Result<SliceRecord> {
        let m = &rec.prostate_mask;
        Ok(SliceRecord {
            t2w: self.t2w_z.apply(&nyul_apply(&rec.t2w, m, &self.t2w_nyul)?),
            adc: self.adc_z.apply(&nyul_apply(&rec.adc, m, &self.adc_nyul)?),
            ..rec.clone()
        })
    }
}

/// Per-channel min-max scaling to `[0, 1]`.
fn unit_range(t: &Tensor) -> Tensor {
    let plane = t.shape()[1] * t.shape()[2];
    let mut out = t.clone();
    for ch in out.data_mut().chunks_mut(plane) {
        let (lo, hi) = ch
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let span = hi - lo;
        for v in ch {
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
    }
    out
}

/// Geometric part of the chain: smooth histology, resample to the grid,
/// clip the label to the prostate.
pub fn conform(rec: &SliceRecord, cfg: &PreprocessConfig) -> Result<SliceRecord> {
    if rec.prostate_mask.is_empty() {
        return Err(Error::Data(format!("{}: prostate mask is empty", rec.name())));
    }
    let smoothed = SliceRecord {
        hist: rec
            .hist
            .as_ref()
            .map(|h| gaussian_smooth(h, cfg.hist_sigma))
            .transpose()?,
        ..rec.clone()
    };
    let mut out = resample_record(&smoothed, cfg.grid)?;
    if out.prostate_mask.is_empty() {
        return Err(Error::Data(format!(
            "{}: prostate mask vanished after resampling",
            rec.name()
        )));
    }
    out.hist = out.hist.as_ref().map(unit_range);
    out.cancer_label = out.cancer_label.and(&out.prostate_mask)?;
    Ok(out)
}

/// Runs the full chain over `raw`, learning intensity models on the training
/// split only, and writes the conformed dataset to `out_root`.
pub fn preprocess_dataset(raw: &Dataset, out_root: &Path, cfg: &PreprocessConfig) -> Result<PreprocessState> {
    if cfg.grid == 0 {
        return Err(Error::Config("preprocess grid must be positive".into()));
    }
    let mut slices = Vec::new();
    for p in &raw.manifest.patients {
        for i in 0..p.slices {
            let with_hist = raw.has_hist(&p.id, i);
            let rec = raw.read_slice(&p.id, i, with_hist)?;
            slices.push((p.split, conform(&rec, cfg)?));
        }
    }
    let train: Vec<&SliceRecord> = slices
        .iter()
        .filter(|(s, _)| *s == Split::Train)
        .map(|(_, r)| r)
        .collect();
    let names: Vec<String> = train.iter().map(|r| r.name()).collect();
    let learn = |pick: fn(&SliceRecord) -> &Tensor| {
        let samples: Vec<_> = train
            .iter()
            .zip(&names)
            .map(|(r, n)| (n.as_str(), pick(r), &r.prostate_mask))
            .collect();
        nyul_learn(&samples)
    };
    let t2w_nyul = learn(|r| &r.t2w)?;
    let adc_nyul = learn(|r| &r.adc)?;

    let mut nyul_t2w = Vec::with_capacity(train.len());
    let mut nyul_adc = Vec::with_capacity(train.len());
    for r in &train {
        nyul_t2w.push(nyul_apply(&r.t2w, &r.prostate_mask, &t2w_nyul)?);
        nyul_adc.push(nyul_apply(&r.adc, &r.prostate_mask, &adc_nyul)?);
    }
    let t2w_z = ZStats::pooled(nyul_t2w.iter().zip(train.iter().map(|r| &r.prostate_mask)))?;
    let adc_z = ZStats::pooled(nyul_adc.iter().zip(train.iter().map(|r| &r.prostate_mask)))?;
    drop((nyul_t2w, nyul_adc));

    let state = PreprocessState {
        config: cfg.clone(),
        t2w_nyul,
        adc_nyul,
        t2w_z,
        adc_z,
    };
    let out = Dataset::create(out_root, raw.manifest.clone())?;
    for (_, rec) in &slices {
        out.write_slice(&state.standardize(rec)?)?;
    }
    write_json(&out_root.join("preprocess.json"), &state)?;
    log::info!(
        "preprocessed {} slices ({} train) onto a {g}x{g} grid",
        slices.len(),
        train.len(),
        g = cfg.grid
    );
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::dataset::{Manifest, PatientEntry};
    use crate::preprocess::Mask;

    fn raw_dataset(dir: &Path) -> Dataset {
        let manifest = Manifest {
            patients: ["a", "b", "c"]
                .iter()
                .zip([Split::Train, Split::Train, Split::Test])
                .map(|(id, split)| PatientEntry {
                    id: id.to_string(),
                    split,
                    slices: 2,
                })
                .collect(),
        };
        let ds = Dataset::create(dir, manifest).unwrap();
        for (n, p) in ["a", "b", "c"].iter().enumerate() {
            for i in 0..2 {
                let mut rec = crate::preprocess::tests::random_record(30, 40, (n * 2 + i) as u64);
                rec.patient = p.to_string();
                rec.index = i;
                rec.t2w = rec.t2w.map(|v| 200.0 + 40.0 * v * (n + 1) as f32);
                // label leaks outside the prostate; must be clipped
                rec.cancer_label.set(0, 0, true);
                ds.write_slice(&rec).unwrap();
            }
        }
        ds
    }

    #[test]
    fn pipeline_output_is_on_the_grid_and_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let raw = raw_dataset(&dir.path().join("raw"));
        let cfg = PreprocessConfig {
            grid: 16,
            ..Default::default()
        };
        let out_root = dir.path().join("pre");
        let state = preprocess_dataset(&raw, &out_root, &cfg).unwrap();
        let out = Dataset::open(&out_root).unwrap();
        let mut pooled = Vec::new();
        for p in ["a", "b", "c"] {
            for rec in out.read_patient(p, true).unwrap() {
                assert_eq!(rec.dims(), (16, 16));
                assert!(rec.cancer_label.is_subset_of(&rec.prostate_mask));
                let h = rec.hist.as_ref().unwrap();
                assert!(h.data().iter().all(|v| (0.0..=1.0).contains(v)));
                assert!((rec.spacing_mm.0 - 0.29 * 40.0 / 16.0).abs() < 1e-12);
                if p != "c" {
                    pooled.push(rec);
                }
            }
        }
        let z = ZStats::pooled(pooled.iter().map(|r| (&r.t2w, &r.prostate_mask))).unwrap();
        assert!(z.mean.abs() < 1e-4 && (z.std - 1.0).abs() < 1e-4, "{z:?}");
        let saved: PreprocessState =
            crate::preprocess::dataset::read_json(&out_root.join("preprocess.json")).unwrap();
        assert_eq!(saved, state);
    }

    #[test]
    fn empty_mask_names_the_slice() {
        let dir = tempfile::tempdir().unwrap();
        let raw = raw_dataset(dir.path());
        let mut rec = raw.read_slice("b", 1, true).unwrap();
        rec.prostate_mask = Mask::zeros(30, 40);
        rec.cancer_label = Mask::zeros(30, 40);
        raw.write_slice(&rec).unwrap();
        let err = preprocess_dataset(&raw, &dir.path().join("o"), &PreprocessConfig::default()).unwrap_err();
        assert!(err.to_string().contains("b/slice_1"), "{err}");
    }
}
