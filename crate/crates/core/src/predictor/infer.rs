use super::{PredictorModel, Variant, WINDOW};
use crate::error::{dim_err, Error, Result};
use crate::numcore::Tensor;

/// MRI-derived inputs of one slice: `t2w`, `adc` are `[H, W]`, `corr` is
/// `[k, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceInputs {
    pub t2w: Tensor,
    pub adc: Tensor,
    pub corr: Tensor,
}

impl SliceInputs {
    pub(crate) fn check(&self, k: usize) -> Result<(usize, usize)> {
        let (h, w) = match self.t2w.shape() {
            &[h, w] => (h, w),
            s => return Err(dim_err!("t2w must be [H, W], got {s:?}")),
        };
        if self.adc.shape() != [h, w] || self.corr.shape() != [k, h, w] {
            return Err(dim_err!(
                "slice inputs disagree: t2w {:?}, adc {:?}, corr {:?} (k = {k})",
                self.t2w.shape(),
                self.adc.shape(),
                self.corr.shape()
            ));
        }
        Ok((h, w))
    }
}

/// Per-stream `[C, H, W]` inputs for slice `index`, built from the
/// neighbouring slices with edge replication.
pub fn assemble(variant: Variant, volume: &[SliceInputs], index: usize) -> Result<Vec<Tensor>> {
    if index >= volume.len() {
        return Err(Error::Usage(format!("slice {index} of a {}-slice volume", volume.len())));
    }
    let last = volume.len() - 1;
    let window: Vec<&SliceInputs> = (0..WINDOW)
        .map(|o| &volume[(index + o).saturating_sub(WINDOW / 2).min(last)])
        .collect();
    let stack = |f: fn(&SliceInputs) -> &Tensor| -> Result<Tensor> {
        let parts: Vec<Tensor> = window
            .iter()
            .map(|s| {
                let t = f(s);
                if t.ndim() == 2 {
                    t.clone().reshape([&[1][..], t.shape()].concat())
                } else {
                    Ok(t.clone())
                }
            })
            .collect::<Result<_>>()?;
        Tensor::concat0(&parts)
    };
    let corr = stack(|s| &s.corr)?;
    Ok(match variant {
        Variant::Hed3 => vec![corr],
        Variant::HedBranch3 => vec![stack(|s| &s.t2w)?, stack(|s| &s.adc)?, corr],
    })
}

/// Fused cancer-probability map `[H, W]` for every slice of a volume.
pub fn predict_volume(model: &mut PredictorModel, volume: &[SliceInputs]) -> Result<Vec<Tensor>> {
    if volume.is_empty() {
        return Err(Error::Data("cannot predict an empty volume".into()));
    }
    let (h, w) = volume[0].check(model.k)?;
    for s in volume {
        if s.check(model.k)? != (h, w) {
            return Err(dim_err!("slices of one volume must share their extent"));
        }
    }
    (0..volume.len())
        .map(|i| {
            let inputs = assemble(model.variant, volume, i)?
                .into_iter()
                .map(|t| t.clone().reshape([&[1][..], t.shape()].concat()))
                .collect::<Result<Vec<_>>>()?;
            let (_, fused) = model.predict(&inputs)?;
            fused.reshape([h, w])
        })
        .collect()
}
