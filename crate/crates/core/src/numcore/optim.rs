use super::{Element, Tensor};
use crate::error::{dim_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the parameters (AdamW) instead of
    /// adding an L2 term to the gradient.
    pub decoupled: bool,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled: false,
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }
}

/// Adam optimiser state for an ordered list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam<T: Element = f32> {
    pub config: AdamConfig,
    step: usize,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![T::zero(); p.len()], vec![T::zero(); p.len()]))
            .unzip();
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(dim_err!(
                "adam: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.m.len()
            ));
        }
        let step = self.step + 1;
        for (i, g) in grads.iter().enumerate() {
            params[i].expect_same_shape(g)?;
            if !g.is_finite() {
                return Err(Error::Training {
                    stage: "optimizer step",
                    index: step,
                    reason: format!("non-finite gradient in parameter {i}"),
                });
            }
        }
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(step as i32);
        let bc2 = 1.0 - c.beta2.powi(step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let mut grad = gv.as_f64();
                let mut param = pv.as_f64();
                if c.weight_decay != 0.0 && !c.decoupled {
                    grad += c.weight_decay * param;
                }
                let m1 = c.beta1 * mv.as_f64() + (1.0 - c.beta1) * grad;
                let v1 = c.beta2 * vv.as_f64() + (1.0 - c.beta2) * grad * grad;
                *mv = T::from_f64(m1);
                *vv = T::from_f64(v1);
                if c.decoupled {
                    param -= c.lr * c.weight_decay * param;
                }
                param -= c.lr * (m1 / bc1) / ((v1 / bc2).sqrt() + c.eps);
                *pv = T::from_f64(param);
            }
        }
        self.step = step;
        Ok(())
    }
}
