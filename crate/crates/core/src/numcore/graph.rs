//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Nodes are pushed in evaluation order, so the tape index order is already a
//! topological order of the op graph and the backward sweep simply walks it
//! in reverse.

use super::kernels::{self, ConvGeometry};
use super::{Element, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv2d,
    MaxPool2d,
    BatchNorm,
    Relu,
    Sigmoid,
    Linear,
    AddBias,
    Concat,
    Add,
    Mul,
    Scale,
    Upsample,
    Reduce,
    SquaredError,
    Correlation,
    BalancedBce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<u32>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Linear {
        x: Var,
        w: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Concat {
        inputs: Vec<Var>,
        sizes: Vec<usize>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Upsample {
        input: Var,
        from: (usize, usize),
        to: (usize, usize),
    },
    Sum(Var),
    Mean(Var),
    SquaredError {
        pred: Var,
        target: Var,
    },
    Correlation {
        a: Var,
        b: Var,
        /// Per-coordinate gradient factors: (1/sqrt(Saa*Sbb), rho/Saa, rho/Sbb).
        factors: Vec<(f64, f64, f64)>,
    },
    BalancedBce {
        pred: Var,
        /// d loss / d pred per pixel, precomputed in forward.
        dpred: Vec<f64>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Linear { .. } => OpKind::Linear,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Concat { .. } => OpKind::Concat,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Upsample { .. } => OpKind::Upsample,
            Op::Sum(_) | Op::Mean(_) => OpKind::Reduce,
            Op::SquaredError { .. } => OpKind::SquaredError,
            Op::Correlation { .. } => OpKind::Correlation,
            Op::BalancedBce { .. } => OpKind::BalancedBce,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Tape of tensor operations supporting one or more backward sweeps.
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-coordinate sample correlation of two `[N, k]` matrices.
///
/// Returns, for each column, `(rho, 1/sqrt(Saa*Sbb), Saa, Sbb)`; columns whose
/// centred norm falls below `1e-12` get `rho = 0`.
pub(crate) fn column_correlations<T: Element>(
    a: &[T],
    b: &[T],
    n: usize,
    k: usize,
) -> Vec<(f64, f64, f64, f64)> {
    (0..k)
        .map(|j| {
            let ma = (0..n).map(|i| a[i * k + j].as_f64()).sum::<f64>() / n as f64;
            let mb = (0..n).map(|i| b[i * k + j].as_f64()).sum::<f64>() / n as f64;
            let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
            for i in 0..n {
                let da = a[i * k + j].as_f64() - ma;
                let db = b[i * k + j].as_f64() - mb;
                sab += da * db;
                saa += da * da;
                sbb += db * db;
            }
            if saa.sqrt() < 1e-12 || sbb.sqrt() < 1e-12 {
                (0.0, 0.0, saa, sbb)
            } else {
                let inv = 1.0 / (saa * sbb).sqrt();
                (sab * inv, inv, saa, sbb)
            }
        })
        .collect()
}

/// Clamp floor for log arguments in the balanced cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

/// Balanced BCE of one image; returns the loss and optionally fills dL/dp.
pub(crate) fn balanced_bce_image<T: Element>(
    pred: &[T],
    label: &[u8],
    mut dpred: Option<&mut [f64]>,
) -> f64 {
    let npix = pred.len() as f64;
    let negatives = label.iter().filter(|&&y| y == 0).count() as f64;
    let beta = negatives / npix;
    let mut loss = 0.0;
    for (i, (&p, &y)) in pred.iter().zip(label).enumerate() {
        let p = p.as_f64();
        let (term, d) = if y != 0 {
            let arg = p.max(BCE_CLAMP);
            let d = if p > BCE_CLAMP { -beta / p } else { 0.0 };
            (-beta * arg.ln(), d)
        } else {
            let q = 1.0 - p;
            let arg = q.max(BCE_CLAMP);
            let d = if q > BCE_CLAMP { (1.0 - beta) / q } else { 0.0 };
            (-(1.0 - beta) * arg.ln(), d)
        };
        loss += term;
        if let Some(dp) = dpred.as_deref_mut() {
            dp[i] = d / npix;
        }
    }
    loss / npix
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Leaves with `requires_grad` receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- forward ops -------------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(weight), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.f] {
                return Err(dim_err!(
                    "conv2d bias shape {:?}, expected [{}]",
                    self.shape(b),
                    geom.f
                ));
            }
        }
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new([geom.n, geom.f, geom.ho, geom.wo], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &inputs,
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (ho, wo) = kernels::maxpool_dims(&shape, k, stride)?;
        let (out, argmax) = kernels::maxpool_forward(&shape, self.value(input).data(), k, stride)?;
        let value = Tensor::new([shape[0], shape[1], ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, &[input]))
    }

    /// Per-channel batch normalisation of an NCHW tensor.
    ///
    /// In train mode the batch statistics normalise the input and are folded
    /// into `state`'s running averages; in eval mode the running averages are
    /// used as-is.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        state: &mut BatchNormState,
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(dim_err!("batchnorm expects NCHW input, got {shape:?}"));
        }
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err!("batchnorm gamma/beta must have shape [{c}]"));
        }
        if state.running_mean.len() != c {
            return Err(dim_err!(
                "batchnorm state has {} channels, input has {c}",
                state.running_mean.len()
            ));
        }
        let m = n * hw;
        let train = mode == NormMode::Train;
        if train && m < 2 {
            return Err(dim_err!(
                "batchnorm in train mode needs at least 2 values per channel, got {m}"
            ));
        }
        let stats: Vec<(f64, f64)> = if train {
            let s = kernels::channel_stats(&shape, self.value(input).data());
            for (ch, &(mean, var)) in s.iter().enumerate() {
                let unbiased = var * m as f64 / (m as f64 - 1.0);
                state.running_mean[ch] =
                    (1.0 - state.momentum) * state.running_mean[ch] + state.momentum * mean;
                state.running_var[ch] =
                    (1.0 - state.momentum) * state.running_var[ch] + state.momentum * unbiased;
            }
            s
        } else {
            state
                .running_mean
                .iter()
                .zip(&state.running_var)
                .map(|(&m, &v)| (m, v))
                .collect()
        };
        let inv_std: Vec<f64> = stats
            .iter()
            .map(|&(_, v)| 1.0 / (v + state.eps).sqrt())
            .collect();
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..n {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                let (mean, is) = (stats[ch].0, inv_std[ch]);
                let (gv, bv) = (g[ch].as_f64(), b[ch].as_f64());
                for i in off..off + hw {
                    let xh = (x[i].as_f64() - mean) * is;
                    xhat[i] = T::from_f64(xh);
                    out[i] = T::from_f64(gv * xh + bv);
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[input, gamma, beta],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// `x · wᵀ` for `x: [N, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(dim_err!("linear: x {xs:?} incompatible with weight {ws:?}"));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * dout];
        T::gemm(
            n,
            din,
            dout,
            T::one(),
            self.value(x).data(),
            din as isize,
            1,
            self.value(w).data(),
            1,
            din as isize,
            T::zero(),
            &mut out,
            dout as isize,
            1,
        );
        let value = Tensor::new([n, dout], out)?;
        Ok(self.push(value, Op::Linear { x, w }, &[x, w]))
    }

    /// Adds a bias broadcast along axis 1 (features of `[N, D]`, channels of
    /// `[N, C, H, W]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(bias) != [xs[1]] {
            return Err(dim_err!(
                "add_bias: bias {:?} does not match axis 1 of {xs:?}",
                self.shape(bias)
            ));
        }
        let inner: usize = xs[2..].iter().product();
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += b[(i / inner) % xs[1]];
        }
        Ok(self.push(value, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// Concatenates along axis 1.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| dim_err!("concat of nothing"))?)
            .to_vec();
        if first.len() < 2 {
            return Err(dim_err!("concat needs at least 2-d tensors"));
        }
        let mut sizes = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(dim_err!("concat: shape {s:?} incompatible with {first:?}"));
            }
            sizes.push(s[1]);
        }
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(n * total * inner);
        for b in 0..n {
            for (&v, &c) in inputs.iter().zip(&sizes) {
                let d = self.value(v).data();
                data.extend_from_slice(&d[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                sizes,
            },
            inputs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let value = self.value(x).map(|v| v * f);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    /// Bilinear resize of the two trailing axes of an NCHW tensor.
    pub fn upsample(&mut self, input: Var, to: (usize, usize)) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(dim_err!("upsample expects NCHW input, got {s:?}"));
        }
        let from = (s[2], s[3]);
        let out = kernels::bilinear_forward(s[0] * s[1], from, to, self.value(input).data());
        let value = Tensor::new([s[0], s[1], to.0, to.1], out)?;
        Ok(self.push(value, Op::Upsample { input, from, to }, &[input]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(T::from_f64(self.value(x).sum()));
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(T::from_f64(t.sum() / t.len() as f64));
        self.push(value, Op::Mean(x), &[x])
    }

    /// `Σ (pred − target)²` over all elements.
    pub fn squared_error(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.value(pred).expect_same_shape(self.value(target))?;
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&p, &t)| {
                let d = p.as_f64() - t.as_f64();
                d * d
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(T::from_f64(s)),
            Op::SquaredError { pred, target },
            &[pred, target],
        ))
    }

    /// Sum over columns of the sample correlation between matching columns of
    /// two `[N, k]` matrices.
    pub fn correlation(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || self.shape(b) != sa.as_slice() {
            return Err(dim_err!(
                "correlation needs two equal [N, k] matrices, got {sa:?} and {:?}",
                self.shape(b)
            ));
        }
        let (n, k) = (sa[0], sa[1]);
        if n < 2 {
            return Err(Error::Usage(format!(
                "correlation needs at least 2 samples, got {n}"
            )));
        }
        let cols = column_correlations(self.value(a).data(), self.value(b).data(), n, k);
        let total: f64 = cols.iter().map(|c| c.0).sum();
        let factors = cols
            .iter()
            .map(|&(rho, inv, saa, sbb)| {
                if inv == 0.0 {
                    (0.0, 0.0, 0.0)
                } else {
                    (inv, rho / saa, rho / sbb)
                }
            })
            .collect();
        Ok(self.push(
            Tensor::scalar(T::from_f64(total)),
            Op::Correlation { a, b, factors },
            &[a, b],
        ))
    }

    /// Class-balanced binary cross-entropy of probability maps `[N, 1, H, W]`
    /// (or `[N, H, W]`) against binary labels, averaged over images.
    pub fn balanced_bce(&mut self, pred: Var, label: &[u8]) -> Result<Var> {
        let s = self.shape(pred).to_vec();
        if self.value(pred).len() != label.len() {
            return Err(dim_err!(
                "balanced_bce: prediction {s:?} vs {} labels",
                label.len()
            ));
        }
        let n = s[0];
        let per = label.len() / n;
        let mut dpred = vec![0.0; label.len()];
        let mut total = 0.0;
        let p = self.value(pred).data();
        for b in 0..n {
            let r = b * per..(b + 1) * per;
            total += balanced_bce_image(&p[r.clone()], &label[r.clone()], Some(&mut dpred[r]));
        }
        for d in &mut dpred {
            *d /= n as f64;
        }
        Ok(self.push(
            Tensor::scalar(T::from_f64(total / n as f64)),
            Op::BalancedBce { pred, dpred },
            &[pred],
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulates d`root`/d`leaf` into every leaf that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.shape(root).to_vec()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.local_backward(i, &g)?;
            for (v, gv) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&gv)?,
                    slot => *slot = Some(gv),
                }
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g)?,
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn want(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_backward(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let grads = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g.data(),
                    self.want(*input),
                    self.want(*weight),
                    bias.is_some_and(|b| self.want(b)),
                );
                if let Some(d) = grads.input {
                    out.push((*input, Tensor::new(self.shape(*input).to_vec(), d)?));
                }
                if let Some(d) = grads.weight {
                    out.push((*weight, Tensor::new(self.shape(*weight).to_vec(), d)?));
                }
                if let (Some(b), Some(d)) = (bias, grads.bias) {
                    out.push((*b, Tensor::new([geom.f], d)?));
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let mut d = Tensor::zeros(self.shape(*input).to_vec());
                let dd = d.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dd[src as usize] += gv;
                }
                out.push((*input, d));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = self.shape(*input).to_vec();
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let m = (n * hw) as f64;
                let gd = g.data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for k in off..off + hw {
                            let gv = gd[k].as_f64();
                            sum_g[ch] += gv;
                            sum_gx[ch] += gv * xhat[k].as_f64();
                        }
                    }
                }
                if self.want(*input) {
                    let gamma_v = self.value(*gamma).data();
                    let mut dx = vec![T::zero(); gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            let scale = gamma_v[ch].as_f64() * inv_std[ch];
                            for k in off..off + hw {
                                let gv = gd[k].as_f64();
                                let v = if *train {
                                    scale
                                        * (gv - sum_g[ch] / m - xhat[k].as_f64() * sum_gx[ch] / m)
                                } else {
                                    scale * gv
                                };
                                dx[k] = T::from_f64(v);
                            }
                        }
                    }
                    out.push((*input, Tensor::new(shape.clone(), dx)?));
                }
                if self.want(*gamma) {
                    out.push((
                        *gamma,
                        Tensor::new([c], sum_gx.iter().map(|&v| T::from_f64(v)).collect())?,
                    ));
                }
                if self.want(*beta) {
                    out.push((
                        *beta,
                        Tensor::new([c], sum_g.iter().map(|&v| T::from_f64(v)).collect())?,
                    ));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = g.zip_map(xv, |gv, xv| if xv > T::zero() { gv } else { T::zero() })?;
                out.push((*x, d));
            }
            Op::Sigmoid(x) => {
                let d = g.zip_map(&node.value, |gv, s| gv * s * (T::one() - s))?;
                out.push((*x, d));
            }
            Op::Linear { x, w } => {
                let (n, din) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dout = self.shape(*w)[0];
                if self.want(*x) {
                    // dx (N x in) = g (N x out) · w (out x in)
                    let mut dx = vec![T::zero(); n * din];
                    T::gemm(
                        n,
                        dout,
                        din,
                        T::one(),
                        g.data(),
                        dout as isize,
                        1,
                        self.value(*w).data(),
                        din as isize,
                        1,
                        T::zero(),
                        &mut dx,
                        din as isize,
                        1,
                    );
                    out.push((*x, Tensor::new([n, din], dx)?));
                }
                if self.want(*w) {
                    // dw (out x in) = gᵀ (out x N) · x (N x in)
                    let mut dw = vec![T::zero(); dout * din];
                    T::gemm(
                        dout,
                        n,
                        din,
                        T::one(),
                        g.data(),
                        1,
                        dout as isize,
                        self.value(*x).data(),
                        din as isize,
                        1,
                        T::zero(),
                        &mut dw,
                        din as isize,
                        1,
                    );
                    out.push((*w, Tensor::new([dout, din], dw)?));
                }
            }
            Op::AddBias { x, bias } => {
                if self.want(*bias) {
                    let xs = self.shape(*x);
                    let c = xs[1];
                    let inner: usize = xs[2..].iter().product();
                    let mut acc = vec![0.0; c];
                    for (i, gv) in g.data().iter().enumerate() {
                        acc[(i / inner) % c] += gv.as_f64();
                    }
                    out.push((
                        *bias,
                        Tensor::new([c], acc.into_iter().map(T::from_f64).collect())?,
                    ));
                }
                out.push((*x, g.clone()));
            }
            Op::Concat { inputs, sizes } => {
                let shape = g.shape();
                let n = shape[0];
                let inner: usize = shape[2..].iter().product();
                let total: usize = sizes.iter().sum();
                let mut start = 0;
                for (&v, &c) in inputs.iter().zip(sizes) {
                    if self.want(v) {
                        let mut d = Vec::with_capacity(n * c * inner);
                        for b in 0..n {
                            let off = (b * total + start) * inner;
                            d.extend_from_slice(&g.data()[off..off + c * inner]);
                        }
                        out.push((v, Tensor::new(self.shape(v).to_vec(), d)?));
                    }
                    start += c;
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                out.push((*a, g.zip_map(self.value(*b), |gv, bv| gv * bv)?));
                out.push((*b, g.zip_map(self.value(*a), |gv, av| gv * av)?));
            }
            Op::Scale(x, f) => {
                let f = T::from_f64(*f);
                out.push((*x, g.map(|gv| gv * f)));
            }
            Op::Upsample { input, from, to } => {
                let s = self.shape(*input);
                let d = kernels::bilinear_backward(s[0] * s[1], *from, *to, g.data());
                out.push((*input, Tensor::new(s.to_vec(), d)?));
            }
            Op::Sum(x) => {
                out.push((*x, Tensor::full(self.shape(*x).to_vec(), g[0])));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                out.push((
                    *x,
                    Tensor::full(self.shape(*x).to_vec(), T::from_f64(g[0].as_f64() / n)),
                ));
            }
            Op::SquaredError { pred, target } => {
                let g0 = g[0].as_f64();
                let two = T::from_f64(2.0 * g0);
                let diff = self
                    .value(*pred)
                    .zip_map(self.value(*target), |p, t| (p - t) * two)?;
                out.push((*target, diff.map(|v| -v)));
                out.push((*pred, diff));
            }
            Op::Correlation { a, b, factors } => {
                let g0 = g[0].as_f64();
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let means = |m: &[T]| -> Vec<f64> {
                    (0..k)
                        .map(|j| (0..n).map(|i| m[i * k + j].as_f64()).sum::<f64>() / n as f64)
                        .collect()
                };
                let (ma, mb) = (means(av), means(bv));
                let mut da = vec![T::zero(); n * k];
                let mut db = vec![T::zero(); n * k];
                for i in 0..n {
                    for j in 0..k {
                        let (inv, ra, rb) = factors[j];
                        let ca = av[i * k + j].as_f64() - ma[j];
                        let cb = bv[i * k + j].as_f64() - mb[j];
                        da[i * k + j] = T::from_f64(g0 * (cb * inv - ra * ca));
                        db[i * k + j] = T::from_f64(g0 * (ca * inv - rb * cb));
                    }
                }
                out.push((*a, Tensor::new([n, k], da)?));
                out.push((*b, Tensor::new([n, k], db)?));
            }
            Op::BalancedBce { pred, dpred } => {
                let g0 = g[0].as_f64();
                let d = dpred.iter().map(|&d| T::from_f64(g0 * d)).collect();
                out.push((*pred, Tensor::new(self.shape(*pred).to_vec(), d)?));
            }
        }
        Ok(out)
    }
}
