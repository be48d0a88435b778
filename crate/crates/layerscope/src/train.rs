//! SGD-with-momentum training and deterministic evaluation.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{BatchCtx, LayerState, Model};
use crate::ops::{softmax_cross_entropy, softmax_cross_entropy_backward};
use crate::rng::{derive_rng, STREAM_SHUFFLE};
use crate::tensor::Tensor;

/// Evaluation always walks the dataset in fixed chunks of this many
/// examples, so the cost summation order (and thus the exact result) never
/// depends on how large the dataset is or who calls it.
pub const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Root seed for the shuffle and dropout streams.
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 128,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning defaults: same as training but a 10x smaller step.
    pub fn fine_tune() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.001,
            ..TrainConfig::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> TrainConfig {
        self.seed = seed;
        self
    }

    pub fn with_epochs(mut self, epochs: usize) -> TrainConfig {
        self.epochs = epochs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArg("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArg(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArg(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-example loss over the epoch, computed on the training
    /// forward pass (dropout active).
    pub mean_loss: f64,
    pub accuracy: f64,
}

/// SGD with classical momentum: v <- mu*v + g; p <- p - lr*v.
/// One velocity tensor per parameter tensor, in the stable layer order.
/// Frozen parameters are skipped entirely (value and velocity untouched).
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    learning_rate: f64,
    momentum: f64,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn for_layers(layers: &[LayerState], learning_rate: f64, momentum: f64) -> SgdMomentum {
        let velocity = layers
            .iter()
            .filter_map(|l| l.params.as_ref())
            .flat_map(|p| [Tensor::zeros(p.weights.value.shape()), Tensor::zeros(p.bias.value.shape())])
            .collect();
        SgdMomentum {
            learning_rate,
            momentum,
            velocity,
        }
    }

    pub fn step(&mut self, layers: &mut [LayerState]) {
        let params = layers
            .iter_mut()
            .filter_map(|l| l.params.as_mut())
            .flat_map(|p| [&mut p.weights, &mut p.bias]);
        for (v, p) in self.velocity.iter_mut().zip(params) {
            if p.frozen {
                continue;
            }
            let vd = v.data_mut();
            let pd = p.value.data_mut();
            let gd = p.grad.data();
            for i in 0..vd.len() {
                vd[i] = self.momentum * vd[i] + gd[i];
                pd[i] -= self.learning_rate * vd[i];
            }
        }
    }
}

/// Predicted class per row: argmax with ties resolved to the lowest index.
pub fn count_correct(probs: &Tensor, labels: &[usize]) -> usize {
    let k = probs.dim(1);
    probs
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count()
}

pub(crate) fn epoch_order(n: usize, cfg: &TrainConfig, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if cfg.shuffle {
        use rand::seq::SliceRandom;
        let mut rng = derive_rng(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]);
        order.shuffle(&mut rng);
    }
    order
}

/// Train in place. Epoch shuffling, dropout, and summation order are all
/// derived from the config seed, so the result is bitwise reproducible.
/// Non-finite loss aborts with a divergence error naming the batch.
pub fn train(model: &mut Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArg("cannot train on an empty dataset".into()));
    }
    let n = dataset.len();
    let mut opt = SgdMomentum::for_layers(model.layers(), cfg.learning_rate, cfg.momentum);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(n, cfg, epoch);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (bi, batch_indices) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = dataset.batch(batch_indices);
            let ctx = BatchCtx {
                root_seed: cfg.seed,
                epoch: epoch as u64,
                batch: bi as u64,
            };
            let (logits, caches) = model.forward_train(&x, &ctx)?;
            let sx = softmax_cross_entropy(&logits, &labels)?;
            if !sx.mean_loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: bi });
            }
            loss_sum += sx.per_example.iter().sum::<f64>();
            correct += count_correct(&sx.probs, &labels);
            let grad_logits = softmax_cross_entropy_backward(&sx.probs, &labels);
            model.backward(&caches, &grad_logits)?;
            opt.step(model.layers_mut());
        }
        history.push(EpochStats {
            epoch,
            mean_loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
        });
    }
    Ok(history)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_cost: f64,
}

/// Mean cross-entropy cost and accuracy in eval mode (dropout off).
/// Deterministic: fixed chunking, per-example losses summed in index order.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::InvalidArg("cannot evaluate an empty dataset".into()));
    }
    let n = dataset.len();
    let indices: Vec<usize> = (0..n).collect();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, labels) = dataset.batch(chunk);
        let logits = model.forward_eval(&x)?;
        let sx = softmax_cross_entropy(&logits, &labels)?;
        loss_sum += sx.per_example.iter().sum::<f64>();
        correct += count_correct(&sx.probs, &labels);
    }
    Ok(Evaluation {
        accuracy: correct as f64 / n as f64,
        mean_cost: loss_sum / n as f64,
    })
}
