//! Independent reference implementations shared by integration tests.
#![allow(dead_code)]

use corrsig::featext::{P_DIM, R_DIM};
use corrsig::numcore::seeded_rng;
use corrsig::Tensor;
use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

/// Two views driven by a shared Gaussian latent: `R = A s + noise`,
/// `P = B s + noise`.
pub fn shared_latent(n: usize, latent: usize, noise: f64, seed: u64) -> (Tensor, Tensor) {
    let mut rng = seeded_rng(seed);
    let mut draw = |len: usize| -> Vec<f64> {
        (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
    };
    let a = draw(R_DIM * latent);
    let b = draw(P_DIM * latent);
    let s = draw(n * latent);
    let nr = draw(n * R_DIM);
    let np = draw(n * P_DIM);
    let view = |m: &[f64], dim: usize, noise_draws: &[f64]| {
        let mut out = Vec::with_capacity(n * dim);
        for i in 0..n {
            for d in 0..dim {
                let v: f64 = (0..latent).map(|l| m[d * latent + l] * s[i * latent + l]).sum();
                out.push((v + noise * noise_draws[i * dim + d]) as f32);
            }
        }
        Tensor::new([n, dim], out).unwrap()
    };
    (view(&a, R_DIM, &nr), view(&b, P_DIM, &np))
}

fn centred_cov(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let xm = x.row_mean();
    let ym = y.row_mean();
    let mut xc = x.clone();
    let mut yc = y.clone();
    for mut r in xc.row_iter_mut() {
        r -= &xm;
    }
    for mut r in yc.row_iter_mut() {
        r -= &ym;
    }
    xc.transpose() * yc / (n - 1.0)
}

fn inv_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = m.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| 1.0 / v.max(1e-12).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Canonical correlations, descending.
pub fn canonical_correlations(r: &Tensor, p: &Tensor) -> Vec<f64> {
    let to = |t: &Tensor| DMatrix::from_row_slice(t.shape()[0], t.shape()[1], &t.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
    let (x, y) = (to(r), to(p));
    let t = inv_sqrt(&centred_cov(&x, &x)) * centred_cov(&x, &y) * inv_sqrt(&centred_cov(&y, &y));
    let mut s: Vec<f64> = t.svd(false, false).singular_values.iter().cloned().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

