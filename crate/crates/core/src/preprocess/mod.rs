//! Slice preprocessing: smoothing, resampling onto the common grid, Nyúl
//! intensity standardisation and z-scoring.

pub mod dataset;
mod nyul;
mod pipeline;
mod resample;
mod smooth;
mod znorm;

pub use nyul::{nyul_apply, nyul_learn, percentile_rank, NyulModel, DECILES};
pub use pipeline::{conform, preprocess_dataset, PreprocessConfig, PreprocessState};
pub use resample::{resample, resample_mask, resample_record, Interp};
pub use smooth::{gaussian_kernel, gaussian_smooth};
pub use znorm::{znorm, ZStats};

use crate::error::{dim_err, Result};
use crate::numcore::Tensor;

/// Default target grid edge.
pub const GRID: usize = 224;
/// In-plane spacing of the target grid.
pub const GRID_SPACING_MM: f64 = 0.29;
/// Histopathology smoothing before downsampling, in pixels.
pub const HIST_SIGMA: f64 = 0.25;

/// Binary image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w || h == 0 || w == 0 {
            return Err(dim_err!("mask {h}x{w} with {} values", data.len()));
        }
        Ok(Self {
            h,
            w,
            data: data.into_iter().map(|v| u8::from(v != 0)).collect(),
        })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(u8::from(f(r, c)));
            }
        }
        Self { h, w, data }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.w + c] != 0
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.w + c] = u8::from(v);
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Pixel-wise AND.
    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.dims() != other.dims() {
            return Err(dim_err!("mask {:?} vs {:?}", self.dims(), other.dims()));
        }
        Ok(Mask {
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a & b)
                .collect(),
        })
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims() == other.dims()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(&a, &b)| a == 0 || b != 0)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.h, self.w], self.data.iter().map(|&v| v as f32).collect())
            .expect("mask dims are valid")
    }

    /// Flat indices of set pixels.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| i)
    }

    pub fn hflip(&self) -> Mask {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.w) {
            row.reverse();
        }
        Mask { data, ..*self }
    }
}

/// One registered cross-section of a patient.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceRecord {
    pub patient: String,
    pub index: usize,
    /// `[H, W]`
    pub t2w: Tensor,
    /// `[H, W]`
    pub adc: Tensor,
    /// `[3, H, W]`, absent at inference time.
    pub hist: Option<Tensor>,
    pub prostate_mask: Mask,
    pub cancer_label: Mask,
    pub missing_label: bool,
    /// (row, col) spacing.
    pub spacing_mm: (f64, f64),
}

impl SliceRecord {
    pub fn dims(&self) -> (usize, usize) {
        self.prostate_mask.dims()
    }

    pub fn name(&self) -> String {
        format!("{}/slice_{}", self.patient, self.index)
    }

    /// Checks that every channel shares the mask geometry.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.dims();
        for (name, t) in [("t2w", &self.t2w), ("adc", &self.adc)] {
            if t.shape() != [h, w] {
                return Err(dim_err!(
                    "{}: {name} is {:?}, mask is {h}x{w}",
                    self.name(),
                    t.shape()
                ));
            }
        }
        if let Some(hist) = &self.hist {
            if hist.shape() != [3, h, w] {
                return Err(dim_err!(
                    "{}: hist is {:?}, expected [3, {h}, {w}]",
                    self.name(),
                    hist.shape()
                ));
            }
        }
        if self.cancer_label.dims() != (h, w) {
            return Err(dim_err!("{}: label dims differ from mask", self.name()));
        }
        Ok(())
    }
}

fn hflip_planes(t: &Tensor, w: usize) -> Tensor {
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Mirrors every channel, the mask and the label about the vertical axis.
pub fn augment_hflip(record: &SliceRecord) -> SliceRecord {
    let (_, w) = record.dims();
    SliceRecord {
        t2w: hflip_planes(&record.t2w, w),
        adc: hflip_planes(&record.adc, w),
        hist: record.hist.as_ref().map(|h| hflip_planes(h, w)),
        prostate_mask: record.prostate_mask.hflip(),
        cancer_label: record.cancer_label.hflip(),
        ..record.clone()
    }
}
