//! Central finite-difference checks for graph-built functions.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Per input: `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞)`.
    pub rel_errors: Vec<f64>,
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().cloned().fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against
/// `(f(x + eps) − f(x − eps)) / 2eps` for every input element.
pub fn check<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.value(root)[0])
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut d = Tensor::zeros(inputs[i].shape().to_vec());
        for j in 0..inputs[i].len() {
            let x0 = inputs[i][j];
            work[i][j] = x0 + eps;
            let up = eval(&work)?;
            work[i][j] = x0 - eps;
            let down = eval(&work)?;
            work[i][j] = x0;
            d[j] = (up - down) / (2.0 * eps);
        }
        numeric.push(d);
    }

    let rel_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let diff = a
                .data()
                .iter()
                .zip(n.data())
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            let scale = a.max_abs().max(n.max_abs());
            // gradients that vanish identically are compared absolutely
            if scale < 1e-8 {
                diff
            } else {
                diff / scale
            }
        })
        .collect();
    Ok(GradCheck {
        rel_errors,
        analytic,
        numeric,
    })
}
