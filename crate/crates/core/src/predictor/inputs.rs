use serde::{Deserialize, Serialize};

use super::{assemble, predict_volume, PredictorModel, Sample, SliceInputs, Variant};
use crate::corrnet::CorrNetParams;
use crate::error::{dim_err, Error, Result};
use crate::featext::{mri_features, ExtractorWeights};
use crate::numcore::Tensor;
use crate::preprocess::{Mask, SliceRecord, ZStats};

/// Raw (unnormalised) CorrNet representation `[k, H, W]` of a slice. Only
/// the MRI channels are read.
pub fn corr_map(rec: &SliceRecord, extractor: &ExtractorWeights, corrnet: &CorrNetParams) -> Result<Tensor> {
    corrnet.project(&mri_features(rec, extractor)?)
}

/// Per-channel z-scoring of CorrNet maps, pooled over in-mask training
/// pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapStats {
    pub channels: Vec<ZStats>,
}

impl MapStats {
    pub fn pooled<'a>(maps: impl IntoIterator<Item = (&'a Tensor, &'a Mask)>) -> Result<Self> {
        let maps: Vec<_> = maps.into_iter().collect();
        let k = match maps.first() {
            Some((m, _)) if m.ndim() == 3 => m.shape()[0],
            Some((m, _)) => return Err(dim_err!("corr map must be [k, H, W], got {:?}", m.shape())),
            None => return Err(Error::Data("no corr maps to pool statistics over".into())),
        };
        let planes: Vec<Vec<Tensor>> = maps
            .iter()
            .map(|(m, _)| {
                if m.ndim() != 3 || m.shape()[0] != k {
                    return Err(dim_err!("corr maps disagree: {:?} vs k = {k}", m.shape()));
                }
                Ok((0..k).map(|c| m.index_axis0(c)).collect())
            })
            .collect::<Result<_>>()?;
        let channels = (0..k)
            .map(|c| ZStats::pooled(planes.iter().zip(&maps).map(|(p, (_, mask))| (&p[c], *mask))))
            .collect::<Result<_>>()?;
        Ok(Self { channels })
    }

    pub fn apply(&self, map: &Tensor) -> Result<Tensor> {
        let k = self.channels.len();
        if map.ndim() != 3 || map.shape()[0] != k {
            return Err(dim_err!("corr map {:?} vs {k} channel statistics", map.shape()));
        }
        let hw = map.len() / k;
        let mut out = map.clone();
        for (plane, z) in out.data_mut().chunks_mut(hw).zip(&self.channels) {
            for v in plane {
                *v = ((*v as f64 - z.mean) / z.std) as f32;
            }
        }
        Ok(out)
    }
}

/// Predictor inputs of one slice from its standardised MRI and normalised
/// CorrNet map.
pub fn slice_inputs(rec: &SliceRecord, corr: Tensor) -> Result<SliceInputs> {
    let s = SliceInputs {
        t2w: rec.t2w.clone(),
        adc: rec.adc.clone(),
        corr,
    };
    let k = s.corr.shape().first().copied().unwrap_or(0);
    s.check(k)?;
    Ok(s)
}

/// Training samples for every slice of one patient volume, labelled with
/// the central slice's cancer mask.
pub fn volume_samples(variant: Variant, volume: &[SliceInputs], labels: &[Mask]) -> Result<Vec<Sample>> {
    if volume.len() != labels.len() {
        return Err(dim_err!("{} slices vs {} labels", volume.len(), labels.len()));
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, label)| {
            Ok(Sample {
                inputs: assemble(variant, volume, i)?,
                label: label.clone(),
            })
        })
        .collect()
}

/// Everything needed to go from MRI-only slice records to probability maps.
pub struct Predictor<'a> {
    pub model: &'a mut PredictorModel,
    pub extractor: &'a ExtractorWeights,
    pub corrnet: &'a CorrNetParams,
    pub stats: &'a MapStats,
}

impl Predictor<'_> {
    pub fn inputs(&self, records: &[SliceRecord]) -> Result<Vec<SliceInputs>> {
        records
            .iter()
            .map(|r| slice_inputs(r, self.stats.apply(&corr_map(r, self.extractor, self.corrnet)?)?))
            .collect()
    }

    /// Fused probability map per slice of one patient, in slice order.
    pub fn predict_patient(&mut self, records: &[SliceRecord]) -> Result<Vec<Tensor>> {
        if records.is_empty() {
            return Err(Error::Data("patient has no slices".into()));
        }
        let volume = self.inputs(records)?;
        predict_volume(self.model, &volume)
    }
}
