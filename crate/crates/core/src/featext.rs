//! Fixed two-layer VGG front end and per-pixel two-view assembly.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Error, Result};
use crate::numcore::kernels::{conv2d_forward, ConvGeometry};
use crate::numcore::{seeded_rng, Tensor, WeightFile};
use crate::preprocess::SliceRecord;

pub const FEATURES: usize = 64;
/// Width of the MRI view (T2W features then ADC features).
pub const R_DIM: usize = 2 * FEATURES;
pub const P_DIM: usize = FEATURES;

/// Weights of the first two 3x3 conv layers of a VGG-16 trunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorWeights {
    pub conv1_weight: Tensor,
    pub conv1_bias: Tensor,
    pub conv2_weight: Tensor,
    pub conv2_bias: Tensor,
}

const SHAPES: [(&str, &[usize]); 4] = [
    ("conv1.weight", &[FEATURES, 3, 3, 3]),
    ("conv1.bias", &[FEATURES]),
    ("conv2.weight", &[FEATURES, FEATURES, 3, 3]),
    ("conv2.bias", &[FEATURES]),
];

impl ExtractorWeights {
    pub fn from_weight_file(wf: &WeightFile) -> Result<Self> {
        let get = |i: usize| wf.expect(SHAPES[i].0, SHAPES[i].1).cloned();
        Ok(Self {
            conv1_weight: get(0)?,
            conv1_bias: get(1)?,
            conv2_weight: get(2)?,
            conv2_bias: get(3)?,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_weight_file(&WeightFile::load(path)?)
    }

    pub fn to_weight_file(&self) -> WeightFile {
        let mut wf = WeightFile::new(serde_json::json!({ "model": "vgg16-block1" }));
        for ((name, _), t) in SHAPES.iter().zip(self.tensors()) {
            wf.push(*name, t.clone());
        }
        wf
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [
            &self.conv1_weight,
            &self.conv1_bias,
            &self.conv2_weight,
            &self.conv2_bias,
        ]
    }

    /// He-initialised weights with small positive biases, standing in for
    /// pretrained filters.
    pub fn random(seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut he = |shape: &[usize]| {
            let fan_in: usize = shape[1..].iter().product();
            Tensor::rand_normal(shape.to_vec(), (2.0 / fan_in as f64).sqrt(), &mut rng)
        };
        let conv1_weight = he(SHAPES[0].1);
        let conv2_weight = he(SHAPES[2].1);
        let mut rng = seeded_rng(seed ^ 0x5eed);
        let bias = Normal::new(0.05, 0.02).unwrap();
        let mut b = || {
            Tensor::new(
                [FEATURES],
                (0..FEATURES).map(|_| bias.sample(&mut rng) as f32).collect(),
            )
            .unwrap()
        };
        Self {
            conv1_weight,
            conv1_bias: b(),
            conv2_weight,
            conv2_bias: b(),
        }
    }

    pub fn zeros() -> Self {
        Self {
            conv1_weight: Tensor::zeros(SHAPES[0].1),
            conv1_bias: Tensor::zeros(SHAPES[1].1),
            conv2_weight: Tensor::zeros(SHAPES[2].1),
            conv2_bias: Tensor::zeros(SHAPES[3].1),
        }
    }
}

fn relu_in_place(v: &mut [f32]) {
    for x in v {
        *x = x.max(0.0);
    }
}

/// `conv3x3 -> ReLU -> conv3x3 -> ReLU` on a `[3, H, W]` image.
pub fn extract(image: &Tensor, w: &ExtractorWeights) -> Result<Tensor> {
    let &[3, h, wd] = image.shape() else {
        return Err(dim_err!(
            "extract expects a [3, H, W] image, got {:?}",
            image.shape()
        ));
    };
    let g1 = ConvGeometry::new(&[1, 3, h, wd], w.conv1_weight.shape(), 1, 1)?;
    let mut a = conv2d_forward(&g1, image.data(), w.conv1_weight.data(), Some(w.conv1_bias.data()));
    relu_in_place(&mut a);
    let g2 = ConvGeometry::new(&[1, FEATURES, h, wd], w.conv2_weight.shape(), 1, 1)?;
    let mut b = conv2d_forward(&g2, &a, w.conv2_weight.data(), Some(w.conv2_bias.data()));
    relu_in_place(&mut b);
    Tensor::new([FEATURES, h, wd], b)
}

/// Replicates a single-channel `[H, W]` image into `[3, H, W]`.
pub fn replicate3(image: &Tensor) -> Result<Tensor> {
    image.expect_ndim(2, "replicate3")?;
    Tensor::stack(&[image.clone(), image.clone(), image.clone()])
}

/// Features of both MRI channels stacked as `[128, H, W]`, T2W first.
pub fn mri_features(rec: &SliceRecord, w: &ExtractorWeights) -> Result<Tensor> {
    let t = extract(&replicate3(&rec.t2w)?, w)?;
    let a = extract(&replicate3(&rec.adc)?, w)?;
    Tensor::concat0(&[t, a])
}

/// Location of a pixel in a cohort; `slice` indexes [`Views::slices`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PixelId {
    pub slice: u32,
    pub row: u16,
    pub col: u16,
}

/// Borrowed view of one pixel.
#[derive(Debug, Clone, Copy)]
pub struct PixelView<'a> {
    pub r: &'a [f32],
    pub p: &'a [f32],
    pub id: PixelId,
    pub cancer: bool,
}

/// Row-major, struct-of-arrays store of per-pixel two-view samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Views {
    pub r: Vec<f32>,
    pub p: Vec<f32>,
    pub ids: Vec<PixelId>,
    pub cancer: Vec<bool>,
    /// Slice names, indexed by [`PixelId::slice`].
    pub slices: Vec<String>,
}

impl Views {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, i: usize) -> PixelView<'_> {
        PixelView {
            r: &self.r[i * R_DIM..(i + 1) * R_DIM],
            p: &self.p[i * P_DIM..(i + 1) * P_DIM],
            id: self.ids[i],
            cancer: self.cancer[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = PixelView<'_>> {
        (0..self.len()).map(|i| self.get(i))
    }

    pub fn n_cancer(&self) -> usize {
        self.cancer.iter().filter(|&&c| c).count()
    }

    fn push(&mut self, v: PixelView<'_>) {
        self.r.extend_from_slice(v.r);
        self.p.extend_from_slice(v.p);
        self.ids.push(v.id);
        self.cancer.push(v.cancer);
    }

    /// Appends `other`, renumbering its slice ids.
    pub fn append(&mut self, other: Views) {
        let base = self.slices.len() as u32;
        self.r.extend(other.r);
        self.p.extend(other.p);
        self.ids.extend(other.ids.into_iter().map(|id| PixelId {
            slice: id.slice + base,
            ..id
        }));
        self.cancer.extend(other.cancer);
        self.slices.extend(other.slices);
    }

    pub fn select(&self, order: &[usize]) -> Views {
        let mut out = Views {
            slices: self.slices.clone(),
            ..Default::default()
        };
        out.r.reserve(order.len() * R_DIM);
        out.p.reserve(order.len() * P_DIM);
        for &i in order {
            out.push(self.get(i));
        }
        out
    }

    /// `[N, 128]` and `[N, 64]` matrices.
    pub fn matrices(&self) -> Result<(Tensor, Tensor)> {
        if self.is_empty() {
            return Err(Error::Usage("no pixel views".into()));
        }
        Ok((
            Tensor::new([self.len(), R_DIM], self.r.clone())?,
            Tensor::new([self.len(), P_DIM], self.p.clone())?,
        ))
    }
}

/// One two-view sample per in-mask pixel of a preprocessed slice.
pub fn build_views(rec: &SliceRecord, w: &ExtractorWeights) -> Result<Views> {
    let hist = rec.hist.as_ref().ok_or_else(|| {
        Error::Usage(format!(
            "{}: building training views requires histopathology",
            rec.name()
        ))
    })?;
    let (h, wd) = rec.dims();
    let r = mri_features(rec, w)?;
    let p = extract(hist, w)?;
    let plane = h * wd;
    let mut views = Views {
        slices: vec![rec.name()],
        ..Default::default()
    };
    let (rd, pd) = (r.data(), p.data());
    for i in rec.prostate_mask.indices() {
        views.r.extend((0..R_DIM).map(|c| rd[c * plane + i]));
        views.p.extend((0..P_DIM).map(|c| pd[c * plane + i]));
        views.ids.push(PixelId {
            slice: 0,
            row: (i / wd) as u16,
            col: (i % wd) as u16,
        });
        views.cancer.push(rec.cancer_label.data()[i] != 0);
    }
    Ok(views)
}

/// Keeps every cancer pixel plus an equal number of benign ones, shuffled.
pub fn balanced_sample(views: &Views, seed: u64) -> Result<Views> {
    let (cancer, benign): (Vec<usize>, Vec<usize>) = (0..views.len()).partition(|&i| views.cancer[i]);
    let c = cancer.len();
    if c == 0 {
        return Err(Error::Data("balanced sampling: cohort has no cancer pixels".into()));
    }
    if benign.is_empty() {
        return Err(Error::Data("balanced sampling: cohort has no benign pixels".into()));
    }
    let mut rng = seeded_rng(seed);
    let picked: Vec<usize> = if benign.len() >= c {
        benign.choose_multiple(&mut rng, c).copied().collect()
    } else {
        (0..c).map(|_| benign[rng.gen_range(0..benign.len())]).collect()
    };
    let mut order: Vec<usize> = cancer.into_iter().chain(picked).collect();
    order.shuffle(&mut rng);
    Ok(views.select(&order))
}

/// Balanced pixel views pooled over a cohort: each slice with both classes
/// contributes its cancer pixels and as many benign ones, optionally capped
/// at `per_slice` samples. Slices without cancer contribute nothing.
pub fn cohort_views(
    records: &[SliceRecord],
    w: &ExtractorWeights,
    per_slice: Option<usize>,
    seed: u64,
) -> Result<Views> {
    let mut out = Views::default();
    for (i, rec) in records.iter().enumerate() {
        let cancer = rec.cancer_label.and(&rec.prostate_mask)?.count();
        if cancer == 0 || cancer == rec.prostate_mask.count() {
            continue;
        }
        let mut v = balanced_sample(&build_views(rec, w)?, seed.wrapping_add(i as u64))?;
        if let Some(cap) = per_slice.filter(|&c| c < v.len()) {
            v = v.select(&(0..cap).collect::<Vec<_>>());
        }
        out.append(v);
    }
    if out.is_empty() {
        return Err(Error::Data("no slice in the cohort has both cancer and benign pixels".into()));
    }
    Ok(out)
}
