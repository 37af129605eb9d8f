//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<patient>/slice_<i>.<channel>.raw   little-endian f32, or u8 for masks
//! <root>/<patient>/slice_<i>.<channel>.json  sidecar
//! ```
//!
//! Channels are `t2w`, `adc`, `hist` (3 planes), `mask` and `label`. Derived
//! per-slice maps (`corr`, `prob`) use the same raw + sidecar convention.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Mask, SliceRecord};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientEntry {
    pub id: String,
    pub split: Split,
    pub slices: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Manifest {
    pub patients: Vec<PatientEntry>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &PatientEntry> {
        self.patients.iter().filter(move |p| p.split == split)
    }

    pub fn patient(&self, id: &str) -> Option<&PatientEntry> {
        self.patients.iter().find(|p| p.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

fn one() -> usize {
    1
}

/// JSON sidecar next to every `.raw` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub height: usize,
    pub width: usize,
    pub dtype: Dtype,
    #[serde(default = "one")]
    pub channels: usize,
    pub spacing_mm: [f64; 2],
    #[serde(default)]
    pub missing_label: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    T2w,
    Adc,
    Hist,
    Mask,
    Label,
}

impl Channel {
    pub fn suffix(self) -> &'static str {
        match self {
            Channel::T2w => "t2w",
            Channel::Adc => "adc",
            Channel::Hist => "hist",
            Channel::Mask => "mask",
            Channel::Label => "label",
        }
    }
}

pub fn raw_path(dir: &Path, index: usize, suffix: &str) -> PathBuf {
    dir.join(format!("slice_{index}.{suffix}.raw"))
}

fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

fn read_sidecar(raw: &Path) -> Result<Sidecar> {
    let p = sidecar_path(raw);
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Data(format!("sidecar {}: {e}", p.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Writes a `[C, H, W]` or `[H, W]` float map with its sidecar.
pub fn write_f32_map(raw: &Path, t: &Tensor, spacing_mm: (f64, f64), missing_label: bool) -> Result<()> {
    let (c, h, w) = match *t.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(Error::Dimension(format!("cannot store shape {:?}", t.shape()))),
    };
    let mut bytes = Vec::with_capacity(4 * t.len());
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = raw.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(raw, bytes).map_err(|e| Error::io(raw, e))?;
    write_json(
        &sidecar_path(raw),
        &Sidecar {
            height: h,
            width: w,
            dtype: Dtype::F32,
            channels: c,
            spacing_mm: [spacing_mm.0, spacing_mm.1],
            missing_label,
        },
    )
}

/// Reads a float map; single-channel maps come back as `[H, W]`.
pub fn read_f32_map(raw: &Path) -> Result<(Tensor, Sidecar)> {
    let sc = read_sidecar(raw)?;
    if sc.dtype != Dtype::F32 {
        return Err(Error::Data(format!("{}: expected f32 data", raw.display())));
    }
    let bytes = fs::read(raw).map_err(|e| Error::io(raw, e))?;
    let n = sc.channels * sc.height * sc.width;
    if bytes.len() != 4 * n {
        return Err(Error::Data(format!(
            "{}: {} bytes, sidecar implies {}",
            raw.display(),
            bytes.len(),
            4 * n
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let shape = if sc.channels == 1 {
        vec![sc.height, sc.width]
    } else {
        vec![sc.channels, sc.height, sc.width]
    };
    Ok((Tensor::new(shape, data)?, sc))
}

fn write_mask(raw: &Path, m: &Mask, spacing_mm: (f64, f64), missing_label: bool) -> Result<()> {
    let (h, w) = m.dims();
    fs::write(raw, m.data()).map_err(|e| Error::io(raw, e))?;
    write_json(
        &sidecar_path(raw),
        &Sidecar {
            height: h,
            width: w,
            dtype: Dtype::U8,
            channels: 1,
            spacing_mm: [spacing_mm.0, spacing_mm.1],
            missing_label,
        },
    )
}

fn read_mask(raw: &Path) -> Result<(Mask, Sidecar)> {
    let sc = read_sidecar(raw)?;
    if sc.dtype != Dtype::U8 {
        return Err(Error::Data(format!("{}: expected u8 data", raw.display())));
    }
    let bytes = fs::read(raw).map_err(|e| Error::io(raw, e))?;
    Ok((Mask::new(sc.height, sc.width, bytes)?, sc))
}

/// Dataset rooted at a directory containing `manifest.json`.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let path = root.join("manifest.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Data(format!("malformed manifest {}: {e}", path.display())))?;
        let mut seen = std::collections::HashSet::new();
        for p in &manifest.patients {
            if p.slices == 0 || !seen.insert(&p.id) {
                return Err(Error::Data(format!(
                    "malformed manifest {}: patient `{}` is duplicated or has no slices",
                    path.display(),
                    p.id
                )));
            }
        }
        Ok(Self { root, manifest })
    }

    pub fn create(root: impl Into<PathBuf>, manifest: Manifest) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        write_json(&root.join("manifest.json"), &manifest)?;
        Ok(Self { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn patient_dir(&self, patient: &str) -> PathBuf {
        self.root.join(patient)
    }

    pub fn channel_path(&self, patient: &str, index: usize, ch: Channel) -> PathBuf {
        raw_path(&self.patient_dir(patient), index, ch.suffix())
    }

    pub fn has_hist(&self, patient: &str, index: usize) -> bool {
        self.channel_path(patient, index, Channel::Hist).exists()
    }

    /// Loads one slice. With `with_hist == false` the histopathology file is
    /// never opened.
    pub fn read_slice(&self, patient: &str, index: usize, with_hist: bool) -> Result<SliceRecord> {
        let (t2w, sc) = read_f32_map(&self.channel_path(patient, index, Channel::T2w))?;
        let (adc, _) = read_f32_map(&self.channel_path(patient, index, Channel::Adc))?;
        let (mask, _) = read_mask(&self.channel_path(patient, index, Channel::Mask))?;
        let (label, lsc) = read_mask(&self.channel_path(patient, index, Channel::Label))?;
        let hist = if with_hist {
            let p = self.channel_path(patient, index, Channel::Hist);
            if !p.exists() {
                return Err(Error::Data(format!(
                    "{patient}/slice_{index}: histopathology file {} is missing",
                    p.display()
                )));
            }
            Some(read_f32_map(&p)?.0)
        } else {
            None
        };
        let rec = SliceRecord {
            patient: patient.to_string(),
            index,
            t2w,
            adc,
            hist,
            prostate_mask: mask,
            cancer_label: label,
            missing_label: lsc.missing_label || sc.missing_label,
            spacing_mm: (sc.spacing_mm[0], sc.spacing_mm[1]),
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn read_patient(&self, patient: &str, with_hist: bool) -> Result<Vec<SliceRecord>> {
        let entry = self
            .manifest
            .patient(patient)
            .ok_or_else(|| Error::Data(format!("patient `{patient}` not in manifest")))?;
        (0..entry.slices)
            .map(|i| self.read_slice(patient, i, with_hist))
            .collect()
    }

    pub fn write_slice(&self, rec: &SliceRecord) -> Result<()> {
        rec.validate()?;
        let dir = self.patient_dir(&rec.patient);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let sp = rec.spacing_mm;
        let ml = rec.missing_label;
        let path = |ch: Channel| raw_path(&dir, rec.index, ch.suffix());
        write_f32_map(&path(Channel::T2w), &rec.t2w, sp, ml)?;
        write_f32_map(&path(Channel::Adc), &rec.adc, sp, ml)?;
        if let Some(h) = &rec.hist {
            write_f32_map(&path(Channel::Hist), h, sp, ml)?;
        }
        write_mask(&path(Channel::Mask), &rec.prostate_mask, sp, ml)?;
        write_mask(&path(Channel::Label), &rec.cancer_label, sp, ml)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slice_round_trip_and_hist_optional() {
        let dir = tempfile::tempdir().unwrap();
        let rec = crate::preprocess::tests::random_record(6, 5, 9);
        let ds = Dataset::create(
            dir.path(),
            Manifest {
                patients: vec![PatientEntry {
                    id: "p".into(),
                    split: Split::Train,
                    slices: 1,
                }],
            },
        )
        .unwrap();
        ds.write_slice(&rec).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.read_slice("p", 0, true).unwrap(), rec);
        let no_hist = ds.read_slice("p", 0, false).unwrap();
        assert!(no_hist.hist.is_none());

        fs::remove_file(ds.channel_path("p", 0, Channel::Hist)).unwrap();
        assert!(ds.read_slice("p", 0, false).is_ok());
        assert!(matches!(ds.read_slice("p", 0, true), Err(Error::Data(_))));
    }

    #[test]
    fn malformed_manifest_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("manifest.json"), b"{\"patients\": 3}").unwrap();
        assert!(matches!(Dataset::open(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn sidecar_schema() {
        let sc: Sidecar = serde_json::from_str(
            r#"{"height": 4, "width": 5, "dtype": "u8", "spacing_mm": [0.29, 0.29], "missing_label": true}"#,
        )
        .unwrap();
        assert_eq!(sc.channels, 1);
        assert!(sc.missing_label);
    }
}
