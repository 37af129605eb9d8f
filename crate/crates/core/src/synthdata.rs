//! Registered MRI / histopathology phantoms with planted lesions.
//!
//! Each patient gets an elliptical gland, smooth background texture, white
//! noise, and ellipsoidal lesions that darken both MRI channels. The
//! histopathology lesion signal is `c·a·blob + sqrt(1 − c²)·F`, where `a` is
//! the lesion's latent amplitude shared with MRI and `F` an independent
//! smooth field, so `c = 0` makes histology carry no MRI-related signal.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalmetrics::{extract_lesions, MIN_LESION_PX};
use crate::numcore::{seeded_rng, Rng as ChaRng, Tensor};
use crate::preprocess::dataset::{Dataset, Manifest, PatientEntry, Split};
use crate::preprocess::{gaussian_smooth, Mask, SliceRecord, GRID, GRID_SPACING_MM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub n_patients: usize,
    pub slices_per_patient: usize,
    /// Inclusive range.
    pub lesions_per_patient: (usize, usize),
    /// In-plane lesion radius range, pixels.
    pub lesion_radius_px: (f64, f64),
    /// Lesion darkening in units of the in-gland background σ.
    pub mri_contrast: f64,
    pub cross_modal_correlation: f64,
    /// White-noise σ relative to a unit-scale texture amplitude.
    pub noise_sigma: f64,
    /// `(train, val, test)` patient counts; derived from `n_patients` when absent.
    pub splits: Option<(usize, usize, usize)>,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            n_patients: 29,
            slices_per_patient: 7,
            lesions_per_patient: (1, 3),
            lesion_radius_px: (8.0, 16.0),
            mri_contrast: 1.5,
            cross_modal_correlation: 0.9,
            noise_sigma: 0.8,
            splits: None,
            height: GRID,
            width: GRID,
            seed: 0,
        }
    }
}

const TEXTURE_STD: f64 = 0.6;
const TEXTURE_SIGMA: f64 = 4.0;
const HIST_FIELD_SIGMA: f64 = 6.0;
const HIST_FIELD_STD: f64 = 0.5;
const PLACEMENT_RETRIES: usize = 100;

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("phantom: {m}")));
        if self.n_patients == 0 || self.slices_per_patient == 0 {
            return bad("n_patients and slices_per_patient must be positive");
        }
        let (lo, hi) = self.lesions_per_patient;
        if lo == 0 || hi < lo {
            return bad("lesions_per_patient must be a positive range");
        }
        let (rlo, rhi) = self.lesion_radius_px;
        if !(rlo > 0.0) || rhi < rlo {
            return bad("lesion_radius_px must be a positive range");
        }
        if !(0.0..=1.0).contains(&self.cross_modal_correlation) {
            return bad("cross_modal_correlation must lie in [0, 1]");
        }
        if !(self.mri_contrast >= 0.0) || !(self.noise_sigma >= 0.0) {
            return bad("mri_contrast and noise_sigma must be non-negative");
        }
        if self.height < 32 || self.width < 32 {
            return bad("images must be at least 32x32");
        }
        let (tr, va, te) = self.split_counts();
        if tr + va + te != self.n_patients || tr < 2 {
            return bad("splits must sum to n_patients with at least 2 training patients");
        }
        Ok(())
    }

    /// Patient counts per split; defaults scale a 66/9/20 division.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        if let Some(s) = self.splits {
            return s;
        }
        let n = self.n_patients as f64;
        let train = ((n * 66.0 / 95.0).round() as usize).max(2).min(self.n_patients);
        let val = ((n * 9.0 / 95.0).round() as usize).max(1).min(self.n_patients - train);
        (train, val, self.n_patients - train - val)
    }

    fn background_sigma(&self) -> f64 {
        (TEXTURE_STD * TEXTURE_STD + self.noise_sigma * self.noise_sigma).sqrt()
    }
}

/// White noise blurred to correlation length `sigma`, rescaled to `std`.
fn smooth_field(h: usize, w: usize, sigma: f64, std: f64, rng: &mut ChaRng) -> Result<Tensor> {
    let white = Tensor::rand_normal([h, w], 1.0, rng);
    let f = gaussian_smooth(&white, sigma)?;
    let mean = f.sum() / f.len() as f64;
    let sd = (f.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / f.len() as f64).sqrt();
    Ok(f.map(|v| ((v as f64 - mean) / sd * std) as f32))
}

#[derive(Debug, Clone, Copy)]
struct Lesion {
    row: f64,
    col: f64,
    slice: f64,
    radius: f64,
    z_radius: f64,
    amplitude: f64,
}

impl Lesion {
    fn radius_at(&self, s: usize) -> Option<f64> {
        let dz = (s as f64 - self.slice) / self.z_radius;
        (dz.abs() < 1.0).then(|| self.radius * (1.0 - dz * dz).sqrt()).filter(|&r| r >= 2.0)
    }
}

/// Smooth plateau: 1 at the centre, 1/2 at the edge of the label.
fn blob(d: f64) -> f64 {
    (-(d.powi(4)) * std::f64::consts::LN_2).exp()
}

struct Patient {
    centre: (f64, f64),
    axes: (f64, f64),
    lesions: Vec<Lesion>,
    gains: [(f64, f64); 2],
}

fn plan_patient(cfg: &PhantomConfig, rng: &mut ChaRng, name: &str) -> Result<Patient> {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let centre = (h / 2.0 + rng.gen_range(-0.04..0.04) * h, w / 2.0 + rng.gen_range(-0.04..0.04) * w);
    let axes = (rng.gen_range(0.24..0.30) * h, rng.gen_range(0.27..0.34) * w);
    let n = rng.gen_range(cfg.lesions_per_patient.0..=cfg.lesions_per_patient.1);
    let s = cfg.slices_per_patient as f64;
    let mut lesions: Vec<Lesion> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let radius = rng.gen_range(cfg.lesion_radius_px.0..=cfg.lesion_radius_px.1);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let rho = rng.gen_range(0.0..1.0f64).sqrt();
            let (ar, ac) = (axes.0 - 1.5 * radius, axes.1 - 1.5 * radius);
            if ar <= 0.0 || ac <= 0.0 {
                continue;
            }
            let cand = Lesion {
                row: centre.0 + rho * ar * angle.sin(),
                col: centre.1 + rho * ac * angle.cos(),
                slice: rng.gen_range(0.0..s.max(1.0)).min(s - 1.0),
                radius,
                z_radius: rng.gen_range(1.2..2.6),
                amplitude: rng.gen_range(0.7..1.3),
            };
            let clear = lesions.iter().all(|o| {
                let d = ((o.row - cand.row).powi(2) + (o.col - cand.col).powi(2)).sqrt();
                d > 1.2 * (o.radius + cand.radius) || (o.slice - cand.slice).abs() > o.z_radius + cand.z_radius
            });
            if clear {
                placed = Some(cand);
                break;
            }
        }
        lesions.push(placed.ok_or_else(|| {
            Error::Data(format!(
                "{name}: could not place lesion {} after {PLACEMENT_RETRIES} attempts",
                lesions.len() + 1
            ))
        })?);
    }
    let gain = |rng: &mut ChaRng| (rng.gen_range(0.7..1.5), rng.gen_range(50.0..150.0));
    Ok(Patient {
        centre,
        axes,
        lesions,
        gains: [gain(rng), gain(rng)],
    })
}

fn render_slice(cfg: &PhantomConfig, p: &Patient, patient: &str, s: usize, rng: &mut ChaRng) -> Result<SliceRecord> {
    let (h, w) = (cfg.height, cfg.width);
    let n = cfg.slices_per_patient as f64;
    let mid = (n - 1.0) / 2.0;
    let shrink = if n > 1.0 { 1.0 - 0.3 * ((s as f64 - mid) / mid).abs() } else { 1.0 };
    let (ar, ac) = (p.axes.0 * shrink, p.axes.1 * shrink);
    let inside = |r: usize, c: usize| {
        ((r as f64 - p.centre.0) / ar).powi(2) + ((c as f64 - p.centre.1) / ac).powi(2) <= 1.0
    };
    let mask = Mask::from_fn(h, w, inside);

    let mut lesion_field = vec![0f64; h * w];
    let mut label = Mask::zeros(h, w);
    for l in &p.lesions {
        let Some(rad) = l.radius_at(s) else { continue };
        let r0 = (l.row - 2.0 * rad).max(0.0) as usize;
        let r1 = ((l.row + 2.0 * rad).ceil() as usize).min(h - 1);
        let c0 = (l.col - 2.0 * rad).max(0.0) as usize;
        let c1 = ((l.col + 2.0 * rad).ceil() as usize).min(w - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let d = ((r as f64 - l.row).powi(2) + (c as f64 - l.col).powi(2)).sqrt() / rad;
                let v = l.amplitude * blob(d);
                let cell = &mut lesion_field[r * w + c];
                *cell = cell.max(v);
                if d <= 1.0 && mask.get(r, c) {
                    label.set(r, c, true);
                }
            }
        }
    }

    let shift = cfg.mri_contrast * cfg.background_sigma();
    let mut mri = |(gain, offset): (f64, f64), outside_level: f64| -> Result<Tensor> {
        let tex = smooth_field(h, w, TEXTURE_SIGMA, TEXTURE_STD, rng)?;
        let noise: Tensor = Tensor::rand_normal([h, w], cfg.noise_sigma, rng);
        let data = (0..h * w)
            .map(|i| {
                let base = if mask.data()[i] != 0 { 0.0 } else { outside_level };
                let v = base + tex[i] as f64 + noise[i] as f64 - shift * lesion_field[i];
                (offset + gain * 10.0 * (v + 10.0)) as f32
            })
            .collect();
        Tensor::new([h, w], data)
    };
    let t2w = mri(p.gains[0], 1.5)?;
    let adc = mri(p.gains[1], 1.0)?;

    let c = cfg.cross_modal_correlation;
    let indep = smooth_field(h, w, HIST_FIELD_SIGMA, HIST_FIELD_STD, rng)?;
    let colour = [(0.85, 0.25), (0.60, 0.35), (0.75, 0.15)];
    let mut hist = Vec::with_capacity(3 * h * w);
    for (base, weight) in colour {
        let tex = smooth_field(h, w, TEXTURE_SIGMA, 0.05, rng)?;
        let noise: Tensor = Tensor::rand_normal([h, w], 0.02 * cfg.noise_sigma, rng);
        hist.extend((0..h * w).map(|i| {
            let signal = c * lesion_field[i] + (1.0 - c * c).sqrt() * indep[i] as f64;
            (base + tex[i] as f64 + noise[i] as f64 - weight * signal).clamp(0.0, 1.0) as f32
        }));
    }

    let spacing = GRID_SPACING_MM * GRID as f64 / h.max(w) as f64;
    Ok(SliceRecord {
        patient: patient.to_string(),
        index: s,
        t2w,
        adc,
        hist: Some(Tensor::new([3, h, w], hist)?),
        prostate_mask: mask,
        cancer_label: label,
        missing_label: false,
        spacing_mm: (spacing, spacing),
    })
}

pub fn patient_id(i: usize) -> String {
    format!("P{i:03}")
}

/// Writes a phantom dataset to `out`; identical configs give identical bytes.
pub fn generate(cfg: &PhantomConfig, out: &Path) -> Result<Dataset> {
    cfg.validate()?;
    let (tr, va, _) = cfg.split_counts();
    let manifest = Manifest {
        patients: (0..cfg.n_patients)
            .map(|i| PatientEntry {
                id: patient_id(i),
                split: if i < tr {
                    Split::Train
                } else if i < tr + va {
                    Split::Val
                } else {
                    Split::Test
                },
                slices: cfg.slices_per_patient,
            })
            .collect(),
    };
    let ds = Dataset::create(out, manifest)?;
    for i in 0..cfg.n_patients {
        let id = patient_id(i);
        let mut rng = seeded_rng(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64));
        let plan = plan_patient(cfg, &mut rng, &id)?;
        for s in 0..cfg.slices_per_patient {
            let rec = render_slice(cfg, &plan, &id, s, &mut rng)?;
            ds.write_slice(&rec)?;
        }
    }
    log::info!("generated {} phantom patients in {}", cfg.n_patients, out.display());
    Ok(ds)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub patients: usize,
    pub slices: usize,
    pub lesions: usize,
    pub mask_px: usize,
    pub cancer_px: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub patients: usize,
    pub slices: usize,
    pub lesions: usize,
    pub cancer_fraction: f64,
    pub splits: BTreeMap<Split, SplitSummary>,
}

/// Counts patients, slices and lesions, and the in-gland cancer fraction.
pub fn describe(root: &Path) -> Result<DatasetSummary> {
    let ds = Dataset::open(root)?;
    let mut splits: BTreeMap<Split, SplitSummary> = BTreeMap::new();
    for p in &ds.manifest.patients {
        let recs = ds.read_patient(&p.id, false)?;
        let labels: Vec<Mask> = recs.iter().map(|r| r.cancer_label.clone()).collect();
        let e = splits.entry(p.split).or_default();
        e.patients += 1;
        e.slices += recs.len();
        e.lesions += extract_lesions(&labels, MIN_LESION_PX)?.len();
        for r in &recs {
            e.mask_px += r.prostate_mask.count();
            e.cancer_px += r.cancer_label.and(&r.prostate_mask)?.count();
        }
    }
    let total = |f: fn(&SplitSummary) -> usize| splits.values().map(f).sum::<usize>();
    let mask_px = total(|s| s.mask_px);
    Ok(DatasetSummary {
        patients: total(|s| s.patients),
        slices: total(|s| s.slices),
        lesions: total(|s| s.lesions),
        cancer_fraction: if mask_px == 0 {
            0.0
        } else {
            total(|s| s.cancer_px) as f64 / mask_px as f64
        },
        splits,
    })
}
