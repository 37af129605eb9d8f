use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::PredictorModel;
use crate::error::{dim_err, Error, Result};
use crate::numcore::{seeded_rng, Adam, AdamConfig, Graph, NormMode, Tensor, Var};
use crate::preprocess::Mask;

/// One training example: per-stream `[C, H, W]` inputs and the label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub inputs: Vec<Tensor>,
    pub label: Mask,
}

impl Sample {
    pub fn hflip(&self) -> Sample {
        Sample {
            inputs: self.inputs.iter().map(hflip_chw).collect(),
            label: self.label.hflip(),
        }
    }
}

fn hflip_chw(t: &Tensor) -> Tensor {
    let w = *t.shape().last().unwrap_or(&1);
    let mut out = t.clone();
    for (dst, src) in out.data_mut().chunks_mut(w).zip(t.data().chunks(w)) {
        for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
            *d = *s;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorTrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; `None` runs
    /// all epochs.
    pub patience: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    /// Random horizontal flips of each training sample.
    pub flip_augment: bool,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.1,
            max_epochs: 200,
            patience: Some(10),
            batch_size: 4,
            seed: 0,
            flip_augment: true,
        }
    }
}

impl PredictorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_epochs and batch_size must be >= 1".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Mean summed (sides + fused) loss per training batch.
    pub train_loss: Vec<f64>,
    /// Mean fused loss on the validation set, eval mode.
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Class-balanced BCE of one probability map against its label, computed
/// directly (no graph).
pub fn balanced_bce(prob: &[f32], label: &[u8]) -> f64 {
    crate::numcore::graph::balanced_bce_image(prob, label, None)
}

fn batch(samples: &[&Sample]) -> Result<(Vec<Tensor>, Vec<u8>)> {
    let streams = samples[0].inputs.len();
    let inputs = (0..streams)
        .map(|s| {
            let items: Vec<Tensor> = samples.iter().map(|x| x.inputs[s].clone()).collect();
            Tensor::stack(&items)
        })
        .collect::<Result<_>>()?;
    let labels = samples.iter().flat_map(|x| x.label.data().iter().copied()).collect();
    Ok((inputs, labels))
}

fn check_samples(model: &PredictorModel, samples: &[Sample]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        let shapes: Vec<Vec<usize>> = s.inputs.iter().map(|t| [&[1][..], t.shape()].concat()).collect();
        let refs: Vec<&[usize]> = shapes.iter().map(|v| v.as_slice()).collect();
        let (_, h, w) = model.check_inputs(&refs).map_err(|e| dim_err!("sample {i}: {e}"))?;
        if s.label.dims() != (h, w) {
            return Err(dim_err!("sample {i}: label {:?} vs input {h}x{w}", s.label.dims()));
        }
    }
    Ok(())
}

/// Summed balanced BCE over every side output and the fused output.
fn deep_loss(g: &mut Graph, outputs: impl Iterator<Item = Var>, labels: &[u8]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for o in outputs {
        let p = g.sigmoid(o);
        let l = g.balanced_bce(p, labels)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::Usage("model has no outputs".into()))
}

/// Mean eval-mode fused loss over `samples`.
pub fn validation_loss(model: &mut PredictorModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("empty validation set".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let inputs: Vec<Tensor> = s
            .inputs
            .iter()
            .map(|t| t.clone().reshape([&[1][..], t.shape()].concat()))
            .collect::<Result<_>>()?;
        let (_, fused) = model.predict(&inputs)?;
        total += balanced_bce(fused.data(), s.label.data());
    }
    Ok(total / samples.len() as f64)
}

/// Trains `model` in place. With a non-empty validation set the best
/// validation epoch's weights are restored at the end; otherwise the final
/// weights are kept.
pub fn train_predictor(
    model: &mut PredictorModel,
    train: &[Sample],
    val: &[Sample],
    cfg: &PredictorTrainConfig,
) -> Result<History> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Usage("no training samples".into()));
    }
    check_samples(model, train)?;
    check_samples(model, val)?;

    let mut adam = Adam::new(
        AdamConfig::new(cfg.lr).with_weight_decay(cfg.weight_decay),
        model.params.iter(),
    );
    let mut rng = seeded_rng(cfg.seed.wrapping_add(2));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = History {
        best_val_loss: f64::INFINITY,
        ..History::default()
    };
    let mut best = (model.params.clone(), model.bn.clone());
    let mut stale = 0;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let flipped: Vec<Sample>;
            let items: Vec<&Sample> = if cfg.flip_augment {
                flipped = chunk
                    .iter()
                    .map(|&i| if rng.gen_bool(0.5) { train[i].hflip() } else { train[i].clone() })
                    .collect();
                flipped.iter().collect()
            } else {
                chunk.iter().map(|&i| &train[i]).collect()
            };
            let (inputs, labels) = batch(&items)?;

            let mut g = Graph::new();
            let p = model.register(&mut g, true);
            let x: Vec<Var> = inputs.into_iter().map(|t| g.constant(t)).collect();
            let out = model.forward(&mut g, &p, &x, NormMode::Train)?;
            let loss = deep_loss(&mut g, out.all(), &labels)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Training {
                    stage: "predictor",
                    index: epoch,
                    reason: format!("non-finite training loss {value}"),
                });
            }
            g.backward(loss)?;
            let grads: Vec<Tensor> = p
                .iter()
                .zip(&model.params)
                .map(|(&v, t)| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
                .collect();
            adam.step(&mut model.params, &grads).map_err(|e| match e {
                Error::Training { reason, .. } => Error::Training {
                    stage: "predictor",
                    index: epoch,
                    reason,
                },
                e => e,
            })?;
            epoch_loss += value;
            batches += 1;
        }
        let train_loss = epoch_loss / batches as f64;
        history.train_loss.push(train_loss);

        let monitored = if val.is_empty() {
            train_loss
        } else {
            let v = validation_loss(model, val)?;
            history.val_loss.push(v);
            v
        };
        log::debug!("predictor epoch {epoch}: train {train_loss:.5} monitored {monitored:.5}");
        if !monitored.is_finite() {
            return Err(Error::Training {
                stage: "predictor",
                index: epoch,
                reason: format!("non-finite validation loss {monitored}"),
            });
        }
        if monitored < history.best_val_loss {
            history.best_val_loss = monitored;
            history.best_epoch = epoch;
            stale = 0;
            if !val.is_empty() {
                best = (model.params.clone(), model.bn.clone());
            }
        } else {
            stale += 1;
            if cfg.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }
    if !val.is_empty() {
        (model.params, model.bn) = best;
    }
    Ok(history)
}
