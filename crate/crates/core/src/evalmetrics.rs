//! Pixel- and lesion-level evaluation of probability maps.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numcore::{seeded_rng, Tensor};
use crate::preprocess::{percentile_rank, Mask, SliceRecord};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const MIN_LESION_PX: usize = 10;
pub const LESION_RESAMPLES: usize = 100;
/// Percentile of in-lesion probability used as the lesion score.
pub const LESION_PERCENTILE: f64 = 90.0;
const ROC_MAX_POINTS: usize = 1000;
const PLACEMENT_ATTEMPTS: usize = 200;

fn class_counts(scores: &[f32], labels: &[bool]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(dim_err!("{} scores vs {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "need both classes, got {pos} positive and {neg} negative samples"
        )));
    }
    Ok((pos, neg))
}

fn sorted_order(scores: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// Area under the ROC curve as the Mann-Whitney statistic: the fraction of
/// positive/negative pairs ordered correctly, ties counting one half.
pub fn roc_auc(scores: &[f32], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let idx = sorted_order(scores);
    // twice the number of won pairs, exact in integers
    let mut twice_wins: u128 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        let (mut gp, mut gn) = (0u64, 0u64);
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                gp += 1;
            } else {
                gn += 1;
            }
            i += 1;
        }
        twice_wins += gp as u128 * (2 * neg_below + gn) as u128;
        neg_below += gn;
    }
    Ok(twice_wins as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Sensitivity and specificity with positives predicted at `score >= threshold`.
pub fn sens_spec(scores: &[f32], labels: &[bool], threshold: f64) -> Result<(f64, f64)> {
    let (pos, neg) = class_counts(scores, labels)?;
    let (mut tp, mut tn) = (0u64, 0u64);
    for (&s, &l) in scores.iter().zip(labels) {
        let predicted = s as f64 >= threshold;
        match (l, predicted) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            _ => {}
        }
    }
    Ok((tp as f64 / pos as f64, tn as f64 / neg as f64))
}

/// ROC vertices `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one per distinct
/// score.
pub fn roc_curve(scores: &[f32], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut idx = sorted_order(scores);
    idx.reverse();
    let mut out = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(out)
}

fn thin(curve: Vec<(f64, f64)>, max: usize) -> Vec<(f64, f64)> {
    if curve.len() <= max {
        return curve;
    }
    let last = curve.len() - 1;
    (0..max)
        .map(|i| curve[i * last / (max - 1)])
        .collect()
}

/// A connected set of labelled pixels, possibly spanning adjacent slices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lesion {
    /// `(slice, flat pixel index)`, sorted.
    pub pixels: Vec<(usize, usize)>,
    /// Sorted, deduplicated slice positions.
    pub slices: Vec<usize>,
}

impl Lesion {
    pub fn size(&self) -> usize {
        self.pixels.len()
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (a, b) = (self.find(a), self.find(b));
        if a != b {
            self.0[a.max(b)] = a.min(b);
        }
    }
}

/// Labels 4-connected components of one slice; returns per-pixel component
/// ids (`usize::MAX` for background) and the component count.
fn components(m: &Mask) -> (Vec<usize>, usize) {
    let (h, w) = m.dims();
    let mut comp = vec![usize::MAX; h * w];
    let mut n = 0;
    let mut queue = VecDeque::new();
    for start in m.indices() {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = n;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if m.data()[j] != 0 && comp[j] == usize::MAX {
                    comp[j] = n;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        n += 1;
    }
    (comp, n)
}

/// 4-connected components per slice, merged across adjacent slices when
/// they share a pixel position; lesions smaller than `min_size` are dropped.
pub fn extract_lesions(labels: &[Mask], min_size: usize) -> Result<Vec<Lesion>> {
    if let Some(first) = labels.first() {
        if labels.iter().any(|m| m.dims() != first.dims()) {
            return Err(dim_err!("label volume slices differ in size"));
        }
    }
    let per_slice: Vec<(Vec<usize>, usize)> = labels.iter().map(components).collect();
    let offsets: Vec<usize> = per_slice
        .iter()
        .scan(0, |acc, (_, n)| {
            let o = *acc;
            *acc += n;
            Some(o)
        })
        .collect();
    let total: usize = per_slice.iter().map(|(_, n)| n).sum();
    let mut uf = UnionFind((0..total).collect());
    for s in 1..labels.len() {
        let (prev, cur) = (&per_slice[s - 1].0, &per_slice[s].0);
        for (&a, &b) in prev.iter().zip(cur) {
            if a != usize::MAX && b != usize::MAX {
                uf.union(offsets[s - 1] + a, offsets[s] + b);
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<(usize, usize)>> = Default::default();
    for (s, (comp, _)) in per_slice.iter().enumerate() {
        for (i, &c) in comp.iter().enumerate() {
            if c != usize::MAX {
                let root = uf.find(offsets[s] + c);
                groups.entry(root).or_default().push((s, i));
            }
        }
    }
    Ok(groups
        .into_values()
        .filter(|p| p.len() >= min_size)
        .map(|mut pixels| {
            pixels.sort_unstable();
            let mut slices: Vec<usize> = pixels.iter().map(|p| p.0).collect();
            slices.dedup();
            Lesion { pixels, slices }
        })
        .collect())
}

/// One patient's slices in anatomical order.
#[derive(Debug, Clone, Copy)]
pub struct VolumeRef<'a> {
    pub probs: &'a [Tensor],
    pub labels: &'a [Mask],
    pub masks: &'a [Mask],
}

impl VolumeRef<'_> {
    fn validate(&self) -> Result<()> {
        if self.probs.len() != self.labels.len() || self.labels.len() != self.masks.len() {
            return Err(dim_err!(
                "volume has {} maps, {} labels and {} masks",
                self.probs.len(),
                self.labels.len(),
                self.masks.len()
            ));
        }
        for ((p, l), m) in self.probs.iter().zip(self.labels).zip(self.masks) {
            let (h, w) = m.dims();
            if p.shape() != [h, w] || l.dims() != (h, w) {
                return Err(dim_err!(
                    "probability map {:?}, label {:?}, mask {:?}",
                    p.shape(),
                    l.dims(),
                    m.dims()
                ));
            }
        }
        Ok(())
    }
}

fn region_score(values: impl Iterator<Item = f32>) -> f64 {
    let mut v: Vec<f32> = values.collect();
    v.sort_by(f32::total_cmp);
    percentile_rank(&v, LESION_PERCENTILE) as f64
}

/// Grows a 4-connected in-mask, label-free region of exactly `size` pixels
/// from a random seed on a random slice.
fn place_negative(vol: &VolumeRef<'_>, size: usize, rng: &mut impl Rng) -> Option<Vec<(usize, usize)>> {
    let free: Vec<Vec<usize>> = vol
        .masks
        .iter()
        .zip(vol.labels)
        .map(|(m, l)| m.indices().filter(|&i| l.data()[i] == 0).collect())
        .collect();
    let usable: Vec<usize> = (0..free.len()).filter(|&s| free[s].len() >= size).collect();
    if usable.is_empty() {
        return None;
    }
    for _ in 0..PLACEMENT_ATTEMPTS {
        let s = usable[rng.gen_range(0..usable.len())];
        let (m, l) = (&vol.masks[s], &vol.labels[s]);
        let (h, w) = m.dims();
        let ok = |j: usize| m.data()[j] != 0 && l.data()[j] == 0;
        let start = free[s][rng.gen_range(0..free[s].len())];
        let mut seen = vec![false; h * w];
        let mut region = Vec::with_capacity(size);
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            region.push((s, i));
            if region.len() == size {
                return Some(region);
            }
            let (r, c) = (i / w, i % w);
            let mut nbrs = Vec::with_capacity(4);
            if r > 0 {
                nbrs.push(i - w);
            }
            if r + 1 < h {
                nbrs.push(i + w);
            }
            if c > 0 {
                nbrs.push(i - 1);
            }
            if c + 1 < w {
                nbrs.push(i + 1);
            }
            for j in nbrs {
                if !seen[j] && ok(j) {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionAuc {
    pub mean: f64,
    pub std: f64,
    pub samples: Vec<f64>,
    pub n_lesions: usize,
}

/// Lesion-level AUC: each lesion is scored by the 90th percentile of its
/// probabilities and paired with a size-matched random negative region from
/// the same patient; repeated for `resamples` seeded draws.
pub fn lesion_auc(volumes: &[VolumeRef<'_>], min_size: usize, resamples: usize, seed: u64) -> Result<LesionAuc> {
    let mut lesions = Vec::new();
    for (v, vol) in volumes.iter().enumerate() {
        vol.validate()?;
        for l in extract_lesions(vol.labels, min_size)? {
            let score = region_score(l.pixels.iter().map(|&(s, i)| vol.probs[s][i]));
            lesions.push((v, l.size(), score));
        }
    }
    if lesions.is_empty() {
        return Err(Error::UndefinedMetric("no lesions to score".into()));
    }
    if resamples == 0 {
        return Err(Error::Config("lesion resamples must be >= 1".into()));
    }
    let mut samples = Vec::with_capacity(resamples);
    for r in 0..resamples {
        let mut rng = seeded_rng(seed.wrapping_add(r as u64));
        let mut scores = Vec::with_capacity(2 * lesions.len());
        let mut labels = Vec::with_capacity(2 * lesions.len());
        for &(v, size, score) in &lesions {
            let vol = &volumes[v];
            let region = place_negative(vol, size, &mut rng).ok_or_else(|| {
                Error::Data(format!(
                    "cannot place a {size}-pixel lesion-free region inside the prostate"
                ))
            })?;
            scores.push(score as f32);
            labels.push(true);
            scores.push(region_score(region.iter().map(|&(s, i)| vol.probs[s][i])) as f32);
            labels.push(false);
        }
        samples.push(roc_auc(&scores, &labels)?);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let std = (samples.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(LesionAuc {
        mean,
        std,
        samples,
        n_lesions: lesions.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionSummary {
    pub mean: f64,
    pub std: f64,
    pub n_lesions: usize,
    pub n_resamples: usize,
    pub min_lesion_px: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub n_pixels: usize,
    pub sensitivity: f64,
    pub specificity: f64,
    pub pixel_auc: f64,
    pub roc: Vec<(f64, f64)>,
    /// Absent when the split contains no lesion of the minimum size.
    pub lesion: Option<LesionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: f64,
    pub min_lesion_px: usize,
    pub lesion_resamples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            min_lesion_px: MIN_LESION_PX,
            lesion_resamples: LESION_RESAMPLES,
            seed: 0,
        }
    }
}

/// In-mask scores and labels pooled over all slices of all volumes.
pub fn pooled_pixels(volumes: &[VolumeRef<'_>]) -> Result<(Vec<f32>, Vec<bool>)> {
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for vol in volumes {
        vol.validate()?;
        for ((p, l), m) in vol.probs.iter().zip(vol.labels).zip(vol.masks) {
            for i in m.indices() {
                scores.push(p[i]);
                labels.push(l.data()[i] != 0);
            }
        }
    }
    Ok((scores, labels))
}

/// Pixel metrics pooled over every in-mask pixel, plus the lesion protocol.
pub fn evaluate(volumes: &[VolumeRef<'_>], cfg: &EvalConfig) -> Result<EvalReport> {
    let (scores, labels) = pooled_pixels(volumes)?;
    let (sensitivity, specificity) = sens_spec(&scores, &labels, cfg.threshold)?;
    let lesion = match lesion_auc(volumes, cfg.min_lesion_px, cfg.lesion_resamples, cfg.seed) {
        Ok(l) => Some(LesionSummary {
            mean: l.mean,
            std: l.std,
            n_lesions: l.n_lesions,
            n_resamples: cfg.lesion_resamples,
            min_lesion_px: cfg.min_lesion_px,
        }),
        Err(Error::UndefinedMetric(msg)) => {
            log::warn!("lesion-level metrics skipped: {msg}");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        threshold: cfg.threshold,
        n_pixels: scores.len(),
        sensitivity,
        specificity,
        pixel_auc: roc_auc(&scores, &labels)?,
        roc: thin(roc_curve(&scores, &labels)?, ROC_MAX_POINTS),
        lesion,
    })
}

/// Intensity-threshold reference: lesions are dark on both T2W and ADC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineAuc {
    /// The winning score, one of `-t2w`, `-adc`, `-(t2w+adc)`.
    pub score: String,
    pub auc: f64,
    /// AUC of each candidate score, in the order above.
    pub candidates: Vec<(String, f64)>,
}

/// Best in-mask pixel AUC over the candidate intensity scores.
pub fn intensity_baseline<'a>(records: impl IntoIterator<Item = &'a SliceRecord>) -> Result<BaselineAuc> {
    let mut scores: [Vec<f32>; 3] = Default::default();
    let mut labels = Vec::new();
    for r in records {
        for i in r.prostate_mask.indices() {
            let (t, a) = (r.t2w[i], r.adc[i]);
            scores[0].push(-t);
            scores[1].push(-a);
            scores[2].push(-(t + a));
            labels.push(r.cancer_label.data()[i] != 0);
        }
    }
    let candidates = ["-t2w", "-adc", "-(t2w+adc)"]
        .iter()
        .zip(&scores)
        .map(|(n, s)| Ok((n.to_string(), roc_auc(s, &labels)?)))
        .collect::<Result<Vec<_>>>()?;
    let (score, auc) = candidates
        .iter()
        .cloned()
        .fold((String::new(), f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best });
    Ok(BaselineAuc {
        score,
        auc,
        candidates,
    })
}
