use alloc::string::ToString;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{backward, forward, loss_and_grads, LayerGrad, Model, Sample};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// How per-sample losses combine into a batch loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// SGD with momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-2,
            momentum: 0.9,
            weight_decay: 1e-3,
            batch_size: 64,
            epochs: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be > 0".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".to_string()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must be in [0, 1)".to_string()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument("weight_decay must be >= 0".to_string()));
        }
        Ok(())
    }
}

/// Loss and parameter gradients of a batch under the given reduction.
pub fn batch_grad(model: &Model, batch: &[Sample], reduction: Reduction) -> Result<(f64, Vec<LayerGrad>)> {
    let mut pass = forward(model, batch)?;
    let (losses, mut grads) = loss_and_grads(model.loss_kind(), &pass.outputs, batch)?;
    let mut loss: f64 = losses.iter().sum();
    if reduction == Reduction::Mean && !batch.is_empty() {
        let inv = 1.0 / batch.len() as f64;
        loss *= inv;
        for g in &mut grads {
            *g = g.scale(inv);
        }
    }
    let layer_grads = backward(model, &mut pass, &grads)?;
    Ok((loss, layer_grads))
}

struct Velocity {
    weight: Matrix,
    bias: Option<Vec<f64>>,
}

/// Minibatch SGD with momentum on the mean batch loss.
///
/// Shuffling is driven by `cfg.seed` only, so the result is a pure function of
/// `(model, dataset, cfg)`. Weight decay is added to the gradient of every
/// parameter, and the update is `v ← μv + g`, `θ ← θ − ηv`.
pub fn train(model: &Model, dataset: &[Sample], cfg: &TrainConfig) -> Result<Model> {
    cfg.validate()?;
    let mut model = model.clone();
    if cfg.epochs == 0 {
        return Ok(model);
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Velocity> = model
        .layers()
        .iter()
        .map(|l| Velocity {
            weight: Matrix::zeros(l.n_out(), l.n_in()),
            bias: l.bias.as_ref().map(|b| alloc::vec![0.0; b.len()]),
        })
        .collect();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| dataset[i].clone()));
            let (loss, grads) = batch_grad(&model, &batch, Reduction::Mean)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            for ((layer, g), v) in model.layers_mut().iter_mut().zip(grads).zip(&mut velocity) {
                let mut gw = g.weight;
                gw.add_scaled(cfg.weight_decay, &layer.weight);
                v.weight = v.weight.scale(cfg.momentum);
                v.weight.add_scaled(1.0, &gw);
                layer.weight.add_scaled(-cfg.learning_rate, &v.weight);
                if let (Some(b), Some(gb), Some(vb)) = (&mut layer.bias, g.bias, &mut v.bias) {
                    for ((bi, gi), vi) in b.iter_mut().zip(gb).zip(vb.iter_mut()) {
                        let grad = gi + cfg.weight_decay * *bi;
                        *vi = cfg.momentum * *vi + grad;
                        *bi -= cfg.learning_rate * *vi;
                    }
                }
            }
            if !model.layers().iter().all(|l| l.weight.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: f64::NAN,
                });
            }
        }
    }
    Ok(model)
}
