//! Linear correlational network over paired MRI / histopathology pixel views.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::featext::{Views, P_DIM, R_DIM};
use crate::numcore::graph::column_correlations;
use crate::numcore::{seeded_rng, Adam, AdamConfig, Element, Graph, Tensor, Var, WeightFile};

/// Encoder `W, V, b` and decoder `Wp, Vp, bp`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrNetParams<T: Element = f32> {
    /// `[k, 128]`
    pub w: Tensor<T>,
    /// `[k, 64]`
    pub v: Tensor<T>,
    /// `[k]`
    pub b: Tensor<T>,
    /// `[128, k]`
    pub wp: Tensor<T>,
    /// `[64, k]`
    pub vp: Tensor<T>,
    /// `[192]`
    pub bp: Tensor<T>,
}

const NAMES: [&str; 6] = ["W", "V", "b", "Wp", "Vp", "bp"];

fn shapes(k: usize) -> [Vec<usize>; 6] {
    [
        vec![k, R_DIM],
        vec![k, P_DIM],
        vec![k],
        vec![R_DIM, k],
        vec![P_DIM, k],
        vec![R_DIM + P_DIM],
    ]
}

/// `x · wᵀ (+ b)` for `x: [N, in]`, `w: [out, in]`.
fn affine<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(dim_err!("input {xs:?} incompatible with weight {ws:?}"));
    }
    let (n, din, dout) = (xs[0], xs[1], ws[0]);
    let mut out = vec![T::zero(); n * dout];
    let beta = match b {
        Some(b) => {
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(b.data());
            }
            T::one()
        }
        None => T::zero(),
    };
    T::gemm(
        n, din, dout, T::one(), x.data(), din as isize, 1, w.data(), 1, din as isize, beta,
        &mut out, dout as isize, 1,
    );
    Tensor::new([n, dout], out)
}

impl<T: Element> CorrNetParams<T> {
    pub fn k(&self) -> usize {
        self.b.len()
    }

    pub fn zeros(k: usize) -> Self {
        let [a, b, c, d, e, f] = shapes(k);
        Self {
            w: Tensor::zeros(a),
            v: Tensor::zeros(b),
            b: Tensor::zeros(c),
            wp: Tensor::zeros(d),
            vp: Tensor::zeros(e),
            bp: Tensor::zeros(f),
        }
    }

    /// Weights ~ N(0, 1/fan_in), zero biases.
    pub fn init(k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("CorrNet hidden dimension k must be >= 1".into()));
        }
        let mut rng = seeded_rng(seed);
        let mut n = |shape: Vec<usize>| {
            let std = (1.0 / shape[1] as f64).sqrt();
            Tensor::rand_normal(shape, std, &mut rng)
        };
        let [a, b, c, d, e, f] = shapes(k);
        Ok(Self {
            w: n(a),
            v: n(b),
            b: Tensor::zeros(c),
            wp: n(d),
            vp: n(e),
            bp: Tensor::zeros(f),
        })
    }

    pub fn tensors(&self) -> [&Tensor<T>; 6] {
        [&self.w, &self.v, &self.b, &self.wp, &self.vp, &self.bp]
    }

    fn from_tensors(t: Vec<Tensor<T>>) -> Result<Self> {
        let [w, v, b, wp, vp, bp]: [Tensor<T>; 6] = t
            .try_into()
            .map_err(|_| dim_err!("CorrNet needs exactly 6 tensors"))?;
        let p = Self { w, v, b, wp, vp, bp };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 {
            return Err(dim_err!("CorrNet bias is empty"));
        }
        for ((name, t), s) in NAMES.iter().zip(self.tensors()).zip(shapes(k)) {
            if t.shape() != s.as_slice() {
                return Err(dim_err!("CorrNet {name}: shape {:?}, expected {s:?}", t.shape()));
            }
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> CorrNetParams<U> {
        CorrNetParams {
            w: self.w.cast(),
            v: self.v.cast(),
            b: self.b.cast(),
            wp: self.wp.cast(),
            vp: self.vp.cast(),
            bp: self.bp.cast(),
        }
    }

    /// Hidden layer from either or both views: `WR + VP + b` with absent
    /// views dropped.
    pub fn hidden(&self, r: Option<&Tensor<T>>, p: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        match (r, p) {
            (None, None) => Err(Error::Usage("hidden needs at least one view".into())),
            (Some(r), None) => affine(r, &self.w, Some(&self.b)),
            (None, Some(p)) => affine(p, &self.v, Some(&self.b)),
            (Some(r), Some(p)) => {
                let mut h = affine(r, &self.w, Some(&self.b))?;
                h.add_assign(&affine(p, &self.v, None)?)?;
                Ok(h)
            }
        }
    }

    /// `[W'h, V'h] + b'`, width 192.
    pub fn reconstruct(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        let zr = affine(h, &self.wp, None)?;
        let zp = affine(h, &self.vp, None)?;
        let n = h.shape()[0];
        let mut out = Vec::with_capacity(n * (R_DIM + P_DIM));
        for i in 0..n {
            out.extend_from_slice(&zr.data()[i * R_DIM..(i + 1) * R_DIM]);
            out.extend_from_slice(&zp.data()[i * P_DIM..(i + 1) * P_DIM]);
        }
        let mut z = Tensor::new([n, R_DIM + P_DIM], out)?;
        let bp = self.bp.data();
        for row in z.data_mut().chunks_mut(R_DIM + P_DIM) {
            for (x, &b) in row.iter_mut().zip(bp) {
                *x += b;
            }
        }
        Ok(z)
    }

    /// MRI-side projection `W·R + b` of a `[128]` vector or a `[128, H, W]`
    /// feature map.
    pub fn project(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let k = self.k();
        match *features.shape() {
            [R_DIM] => {
                let x = features.clone().reshape([1, R_DIM])?;
                affine(&x, &self.w, Some(&self.b))?.reshape([k])
            }
            [R_DIM, h, w] => {
                let hw = h * w;
                let mut out = vec![T::zero(); k * hw];
                for (row, &b) in out.chunks_mut(hw).zip(self.b.data()) {
                    row.fill(b);
                }
                T::gemm(
                    k, R_DIM, hw, T::one(), self.w.data(), R_DIM as isize, 1, features.data(),
                    hw as isize, 1, T::one(), &mut out, hw as isize, 1,
                );
                Tensor::new([k, h, w], out)
            }
            _ => Err(dim_err!(
                "project expects [128] or [128, H, W], got {:?}",
                features.shape()
            )),
        }
    }
}

impl CorrNetParams<f32> {
    pub fn to_weight_file(&self, metadata: serde_json::Value) -> WeightFile {
        let mut wf = WeightFile::new(metadata);
        for (name, t) in NAMES.iter().zip(self.tensors()) {
            wf.push(*name, t.clone());
        }
        wf
    }

    pub fn from_weight_file(wf: &WeightFile) -> Result<Self> {
        let k = wf
            .get("b")
            .ok_or_else(|| Error::Data("CorrNet weights lack entry `b`".into()))?
            .len();
        let t = NAMES
            .iter()
            .zip(shapes(k))
            .map(|(n, s)| wf.expect(n, &s).cloned())
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_weight_file(&WeightFile::load(path)?)
    }
}

/// Sum over hidden coordinates of the Pearson correlation between matching
/// columns of `[N, k]` matrices; degenerate columns contribute 0.
pub fn correlation<T: Element>(hr: &Tensor<T>, hp: &Tensor<T>) -> Result<f64> {
    hr.expect_same_shape(hp)?;
    hr.expect_ndim(2, "correlation")?;
    let (n, k) = (hr.shape()[0], hr.shape()[1]);
    if n < 2 {
        return Err(Error::Usage(format!("correlation needs at least 2 samples, got {n}")));
    }
    Ok(column_correlations(hr.data(), hp.data(), n, k)
        .iter()
        .map(|c| c.0)
        .sum())
}

/// Parameters registered on a graph, in [`NAMES`] order.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub w: Var,
    pub v: Var,
    pub b: Var,
    pub wp: Var,
    pub vp: Var,
    pub bp: Var,
}

impl ParamVars {
    pub fn from_slice(v: &[Var]) -> Self {
        Self {
            w: v[0],
            v: v[1],
            b: v[2],
            wp: v[3],
            vp: v[4],
            bp: v[5],
        }
    }

    pub fn register<T: Element>(g: &mut Graph<T>, p: &CorrNetParams<T>) -> Self {
        let v: Vec<Var> = p.tensors().iter().map(|t| g.param((*t).clone())).collect();
        Self::from_slice(&v)
    }

    pub fn all(&self) -> [Var; 6] {
        [self.w, self.v, self.b, self.wp, self.vp, self.bp]
    }
}

/// Graph nodes of one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub hr: Var,
    pub hp: Var,
}

fn reconstruct_on<T: Element>(g: &mut Graph<T>, pv: &ParamVars, h: Var) -> Result<Var> {
    let zr = g.linear(h, pv.wp)?;
    let zp = g.linear(h, pv.vp)?;
    let z = g.concat(&[zr, zp])?;
    g.add_bias(z, pv.bp)
}

/// Builds the CorrNet objective for a batch `r: [N, 128]`, `p: [N, 64]`:
/// three squared reconstruction errors summed over the batch, minus
/// `lambda` times the cross-view hidden correlation.
pub fn loss_on_graph<T: Element>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    r: Var,
    p: Var,
    lambda: f64,
) -> Result<LossVars> {
    let n = g.shape(r)[0];
    if n == 0 {
        return Err(Error::Usage("CorrNet loss of an empty batch".into()));
    }
    let z = g.concat(&[r, p])?;
    let wr = g.linear(r, pv.w)?;
    let vp = g.linear(p, pv.v)?;
    let hr = g.add_bias(wr, pv.b)?;
    let hp = g.add_bias(vp, pv.b)?;
    let hz = g.add(hr, vp)?;
    let mut total = None;
    for h in [hz, hr, hp] {
        let rec = reconstruct_on(g, pv, h)?;
        let se = g.squared_error(rec, z)?;
        total = Some(match total {
            None => se,
            Some(t) => g.add(t, se)?,
        });
    }
    let mut total = total.unwrap();
    if lambda != 0.0 {
        let c = g.correlation(hr, hp)?;
        let c = g.scale(c, -lambda);
        total = g.add(total, c)?;
    }
    Ok(LossVars { total, hr, hp })
}

/// Evaluates the objective for matrices `r`, `p` without gradients.
pub fn corrnet_loss<T: Element>(
    r: &Tensor<T>,
    p: &Tensor<T>,
    params: &CorrNetParams<T>,
    lambda: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let pv = ParamVars::register(&mut g, params);
    let (r, p) = (g.constant(r.clone()), g.constant(p.clone()));
    let l = loss_on_graph(&mut g, &pv, r, p, lambda)?;
    Ok(g.value(l.total)[0].as_f64())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrNetTrainConfig {
    pub k: usize,
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CorrNetTrainConfig {
    fn default() -> Self {
        Self {
            k: 5,
            lambda: 2.0,
            lr: 1e-5,
            epochs: 300,
            batch_size: 4096,
            seed: 0,
        }
    }
}

impl CorrNetTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("corrnet.k must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("corrnet.lambda must be >= 0".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("corrnet.lr must be > 0".into()));
        }
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config(
                "corrnet.epochs must be >= 1 and corrnet.batch_size >= 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CorrNetFit {
    pub params: CorrNetParams,
    /// Per-epoch objective divided by the number of samples.
    pub loss_trace: Vec<f64>,
    /// Per-epoch mean cross-view correlation over batches.
    pub corr_trace: Vec<f64>,
}

impl CorrNetFit {
    pub fn metadata(&self, cfg: &CorrNetTrainConfig) -> serde_json::Value {
        serde_json::json!({
            "k": cfg.k,
            "lambda": cfg.lambda,
            "epochs": cfg.epochs,
            "seed": cfg.seed,
            "final_loss": self.loss_trace.last(),
        })
    }
}

fn gather(src: &[f32], dim: usize, rows: &[usize]) -> Result<Tensor> {
    let mut out = Vec::with_capacity(rows.len() * dim);
    for &i in rows {
        out.extend_from_slice(&src[i * dim..(i + 1) * dim]);
    }
    Tensor::new([rows.len(), dim], out)
}

/// Minibatch Adam on the CorrNet objective. Batches are reshuffled every
/// epoch from `cfg.seed`; a trailing batch of fewer than 2 samples is skipped.
pub fn train_corrnet_matrices(r: &Tensor, p: &Tensor, cfg: &CorrNetTrainConfig) -> Result<CorrNetFit> {
    cfg.validate()?;
    if r.shape().len() != 2 || r.shape()[1] != R_DIM || p.shape() != [r.shape()[0], P_DIM] {
        return Err(dim_err!(
            "CorrNet training expects [N, {R_DIM}] and [N, {P_DIM}], got {:?} and {:?}",
            r.shape(),
            p.shape()
        ));
    }
    let n = r.shape()[0];
    if n < 2 {
        return Err(Error::Usage(format!("CorrNet training needs at least 2 samples, got {n}")));
    }
    let params = CorrNetParams::<f32>::init(cfg.k, cfg.seed)?;
    let mut tensors: Vec<Tensor> = params.tensors().iter().map(|t| (*t).clone()).collect();
    let mut adam = Adam::new(AdamConfig::new(cfg.lr), tensors.iter());
    let mut rng = seeded_rng(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    let mut corr_trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut corr, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut g = Graph::new();
            let vars: Vec<Var> = tensors.iter().map(|t| g.param(t.clone())).collect();
            let pv = ParamVars::from_slice(&vars);
            let rb = g.constant(gather(r.data(), R_DIM, chunk)?);
            let pb = g.constant(gather(p.data(), P_DIM, chunk)?);
            let l = loss_on_graph(&mut g, &pv, rb, pb, cfg.lambda)?;
            let value = g.value(l.total)[0] as f64;
            if !value.is_finite() {
                return Err(Error::Training {
                    stage: "corrnet",
                    index: epoch,
                    reason: format!("loss became {value}"),
                });
            }
            corr += correlation(g.value(l.hr), g.value(l.hp))?;
            g.backward(l.total)?;
            let grads: Vec<Tensor> = vars
                .iter()
                .map(|&v| g.take_grad(v).expect("parameters require grad"))
                .collect();
            adam.step(&mut tensors, &grads).map_err(|e| match e {
                Error::Training { reason, .. } => Error::Training {
                    stage: "corrnet",
                    index: epoch,
                    reason,
                },
                e => e,
            })?;
            total += value;
            batches += 1;
        }
        loss_trace.push(total / n as f64);
        corr_trace.push(corr / batches as f64);
        log::debug!(
            "corrnet epoch {epoch}: loss {:.6} corr {:.4}",
            loss_trace[epoch],
            corr_trace[epoch]
        );
    }
    Ok(CorrNetFit {
        params: CorrNetParams::from_tensors(tensors)?,
        loss_trace,
        corr_trace,
    })
}

pub fn train_corrnet(views: &Views, cfg: &CorrNetTrainConfig) -> Result<CorrNetFit> {
    let (r, p) = views.matrices()?;
    train_corrnet_matrices(&r, &p, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck;

    fn random_params(k: usize, seed: u64) -> CorrNetParams<f64> {
        let mut rng = seeded_rng(seed);
        let mut p = CorrNetParams::<f64>::init(k, seed).unwrap();
        p.b = Tensor::rand_normal([k], 1.0, &mut rng);
        p.bp = Tensor::rand_normal([R_DIM + P_DIM], 1.0, &mut rng);
        p
    }

    fn random_views(n: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = seeded_rng(seed);
        (
            Tensor::rand_normal([n, R_DIM], 1.0, &mut rng),
            Tensor::rand_normal([n, P_DIM], 1.0, &mut rng),
        )
    }

    #[test]
    fn hidden_is_bias_when_weights_or_inputs_vanish() {
        let mut p = random_params(3, 1);
        let (r, pp) = random_views(4, 2);
        let b_rows = |h: &Tensor<f64>| h.data().chunks(3).all(|row| row == p.b.data());
        let zr = Tensor::zeros([4, R_DIM]);
        let zp = Tensor::zeros([4, P_DIM]);
        assert!(b_rows(&p.hidden(Some(&zr), Some(&zp)).unwrap()));
        p.w = Tensor::zeros([3, R_DIM]);
        p.v = Tensor::zeros([3, P_DIM]);
        assert!(b_rows(&p.hidden(Some(&r), Some(&pp)).unwrap()));
        assert!(matches!(p.hidden(None, None), Err(Error::Usage(_))));
    }

    #[test]
    fn hidden_linearity_identity() {
        for seed in 0..10 {
            let p = random_params(5, seed);
            let (r, pp) = random_views(7, seed + 100);
            let both = p.hidden(Some(&r), Some(&pp)).unwrap();
            let hr = p.hidden(Some(&r), None).unwrap();
            let hp = p.hidden(None, Some(&pp)).unwrap();
            for (i, &v) in both.data().iter().enumerate() {
                let e = hr[i] + hp[i] - p.b[i % 5];
                assert!((v - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn reconstruct_zero_hidden_is_bias_and_width_is_192() {
        let p = random_params(2, 3);
        let z = p.reconstruct(&Tensor::zeros([3, 2])).unwrap();
        assert_eq!(z.shape(), &[3, 192]);
        for row in z.data().chunks(192) {
            assert_eq!(row, p.bp.data());
        }
    }

    /// k = 192 identity autoencoder: H(Z) = Z and reconstruct(h) = h.
    fn identity_params() -> CorrNetParams<f64> {
        let k = R_DIM + P_DIM;
        let mut p = CorrNetParams::<f64>::zeros(k);
        for i in 0..R_DIM {
            p.w[i * R_DIM + i] = 1.0;
            p.wp[i * k + i] = 1.0;
        }
        for j in 0..P_DIM {
            p.v[(R_DIM + j) * P_DIM + j] = 1.0;
            p.vp[j * k + R_DIM + j] = 1.0;
        }
        p
    }

    #[test]
    fn identity_autoencoder_reconstructs_exactly() {
        let p = identity_params();
        let (r, pp) = random_views(3, 4);
        let h = p.hidden(Some(&r), Some(&pp)).unwrap();
        let z = p.reconstruct(&h).unwrap();
        for i in 0..3 {
            for j in 0..R_DIM {
                assert_eq!(z.at(&[i, j]), r.at(&[i, j]));
            }
            for j in 0..P_DIM {
                assert_eq!(z.at(&[i, R_DIM + j]), pp.at(&[i, j]));
            }
        }
    }

    #[test]
    fn identity_autoencoder_loss_by_hand() {
        // With the identity construction, H(R) reconstructs [R, 0] and H(P)
        // reconstructs [0, P], so the single-view errors are ‖P‖² and ‖R‖².
        let p = identity_params();
        let (r, pp) = random_views(2, 5);
        let mut expected = 0.0;
        for i in 0..2 {
            for j in 0..R_DIM {
                expected += r.at(&[i, j]).powi(2);
            }
            for j in 0..P_DIM {
                expected += pp.at(&[i, j]).powi(2);
            }
        }
        let got = corrnet_loss(&r, &pp, &p, 0.0).unwrap();
        assert!((got - expected).abs() < 1e-9 * expected, "{got} vs {expected}");
    }

    #[test]
    fn all_zero_loss_is_zero() {
        let p = CorrNetParams::<f64>::zeros(4);
        let r = Tensor::zeros([5, R_DIM]);
        let pp = Tensor::zeros([5, P_DIM]);
        for lambda in [0.0, 2.0, 10.0] {
            assert_eq!(corrnet_loss(&r, &pp, &p, lambda).unwrap(), 0.0);
        }
    }

    #[test]
    fn correlation_extremes_and_scale_invariance() {
        let mut rng = seeded_rng(7);
        let h = Tensor::<f64>::rand_normal([50, 3], 1.0, &mut rng);
        assert!((correlation(&h, &h).unwrap() - 3.0).abs() < 1e-12);
        let neg = h.map(|x| -x);
        assert!((correlation(&h, &neg).unwrap() + 3.0).abs() < 1e-12);
        let other = Tensor::<f64>::rand_normal([50, 3], 1.0, &mut rng);
        let base = correlation(&h, &other).unwrap();
        let scaled = h.map(|x| 4.2 * x - 7.0);
        assert!((correlation(&scaled, &other).unwrap() - base).abs() < 1e-6);
        let one = Tensor::<f64>::zeros([1, 3]);
        assert!(matches!(correlation(&one, &one), Err(Error::Usage(_))));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        // small k keeps the check fast; the batch views are inputs too
        for seed in 0..3 {
            let p = random_params(2, seed);
            let (r, pp) = random_views(4, seed + 50);
            let mut inputs: Vec<Tensor<f64>> = p.tensors().iter().map(|t| (*t).clone()).collect();
            inputs.push(r);
            inputs.push(pp);
            let res = gradcheck::check(&inputs, 1e-3, |g, v| {
                let pv = ParamVars::from_slice(&v[..6]);
                Ok(loss_on_graph(g, &pv, v[6], v[7], 2.0)?.total)
            })
            .unwrap();
            assert!(res.max_rel_error() < 1e-4, "{:?}", res.rel_errors);
        }
    }

    #[test]
    fn lambda_zero_drops_the_correlation_term() {
        let p = random_params(3, 9);
        let (r, pp) = random_views(6, 10);
        let with = corrnet_loss(&r, &pp, &p, 2.0).unwrap();
        let without = corrnet_loss(&r, &pp, &p, 0.0).unwrap();
        let c = correlation(
            &p.hidden(Some(&r), None).unwrap(),
            &p.hidden(None, Some(&pp)).unwrap(),
        )
        .unwrap();
        assert!((without - (with + 2.0 * c)).abs() < 1e-9 * without.abs().max(1.0));
    }

    #[test]
    fn projection_map_matches_per_pixel() {
        let p = random_params(5, 11).cast::<f32>();
        let mut rng = seeded_rng(12);
        let f = Tensor::rand_normal([R_DIM, 8, 8], 1.0, &mut rng);
        let map = p.project(&f).unwrap();
        assert_eq!(map.shape(), &[5, 8, 8]);
        for r in 0..8 {
            for c in 0..8 {
                let px = Tensor::new([R_DIM], (0..R_DIM).map(|ch| f.at(&[ch, r, c])).collect()).unwrap();
                let v = p.project(&px).unwrap();
                for j in 0..5 {
                    assert!((v[j] - map.at(&[j, r, c])).abs() < 1e-5);
                }
            }
        }
        assert!(p.project(&Tensor::zeros([64, 2, 2])).is_err());
    }

    #[test]
    fn selecting_projection() {
        let mut p = CorrNetParams::<f32>::zeros(1);
        p.w[0] = 1.0;
        let mut rng = seeded_rng(13);
        let f = Tensor::rand_normal([R_DIM, 4, 4], 1.0, &mut rng);
        let out = p.project(&f).unwrap();
        assert_eq!(out.data(), &f.data()[..16]);
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let mut rng = seeded_rng(14);
        let r = Tensor::rand_normal([300, R_DIM], 1.0, &mut rng);
        let p = Tensor::rand_normal([300, P_DIM], 1.0, &mut rng);
        let cfg = CorrNetTrainConfig {
            epochs: 3,
            batch_size: 128,
            ..Default::default()
        };
        let a = train_corrnet_matrices(&r, &p, &cfg).unwrap();
        let b = train_corrnet_matrices(&r, &p, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.loss_trace.len(), 3);
        assert!(a.loss_trace.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn divergence_reports_the_epoch() {
        let mut r = Tensor::zeros([10, R_DIM]);
        r[5] = f32::NAN;
        let p = Tensor::zeros([10, P_DIM]);
        let cfg = CorrNetTrainConfig {
            epochs: 2,
            batch_size: 10,
            ..Default::default()
        };
        match train_corrnet_matrices(&r, &p, &cfg) {
            Err(Error::Training { stage, index, .. }) => assert_eq!((stage, index), ("corrnet", 0)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn weight_file_round_trip() {
        let p = random_params(3, 15).cast::<f32>();
        let wf = p.to_weight_file(serde_json::json!({"k": 3}));
        let back = WeightFile::from_bytes(&wf.to_bytes().unwrap(), Path::new("mem")).unwrap();
        assert_eq!(CorrNetParams::from_weight_file(&back).unwrap(), p);
    }
}
