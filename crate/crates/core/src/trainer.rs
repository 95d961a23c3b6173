//! Re-training a linear classifier head on frozen features with mini-batch
//! SGD (momentum, L2 weight decay) under the NABM objective.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{nabm_loss_batch, softmax, MarginConfig};
use crate::priors::{ClassPrior, TransitionMatrix};

const STREAM_INIT: u64 = 21;
const STREAM_SHUFFLE: u64 = 22;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    /// C rows of length d.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearClassifier {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        Self {
            weights: vec![vec![0.0; dim]; classes],
            bias: vec![0.0; classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(features).map(|(a, x)| a * x).sum::<f64>() + b)
            .collect()
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().flatten().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Uniform weights in `[-1/sqrt(d), 1/sqrt(d))`, zero bias.
pub fn init_classifier(dim: usize, classes: usize, seed: u64) -> Result<LinearClassifier> {
    if dim == 0 || classes == 0 {
        return Err(Error::invalid("classifier needs positive dim and class count"));
    }
    let bound = 1.0 / (dim as f64).sqrt();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_INIT);
    let weights = (0..classes)
        .map(|_| (0..dim).map(|_| rng.random_range(-bound..bound)).collect())
        .collect();
    Ok(LinearClassifier {
        weights,
        bias: vec![0.0; classes],
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `factor` every `every` epochs.
    Step { every: usize, factor: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    pub shuffle: bool,
    pub schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            learning_rate: 0.1,
            weight_decay: 1e-4,
            momentum: 0.9,
            seed: 0,
            shuffle: true,
            schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be at least 1"));
        }
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !nonneg(self.learning_rate) || !nonneg(self.weight_decay) || !nonneg(self.momentum) {
            return Err(Error::invalid(
                "learning rate, weight decay and momentum must be finite and nonnegative",
            ));
        }
        if let LrSchedule::Step { every, factor } = self.schedule {
            if every == 0 || !nonneg(factor) {
                return Err(Error::invalid("step schedule needs every >= 1 and factor >= 0"));
            }
        }
        Ok(())
    }

    fn rate_for_epoch(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Step { every, factor } => {
                self.learning_rate * factor.powi((epoch / every) as i32)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub epoch_accuracy: Vec<f64>,
    pub classifier: LinearClassifier,
    pub wall_clock_seconds: f64,
}

impl TrainReport {
    /// Equality on everything except timing.
    pub fn same_result(&self, other: &TrainReport) -> bool {
        self.epoch_loss == other.epoch_loss
            && self.epoch_accuracy == other.epoch_accuracy
            && self.classifier == other.classifier
    }
}

/// Gradients of the mean batch loss with respect to weights and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub loss: f64,
}

/// Mean NABM loss over `indices` and its gradient through the linear map.
/// Contributions are summed in index order.
pub fn batch_gradient(
    classifier: &LinearClassifier,
    dataset: &Dataset,
    indices: &[usize],
    m: &TransitionMatrix,
    prior: &ClassPrior,
    margin: &MarginConfig,
) -> Result<ParamGrad> {
    let samples = dataset.samples();
    let logits: Vec<Vec<f64>> = indices
        .iter()
        .map(|&i| classifier.logits(&samples[i].features))
        .collect();
    let labels: Vec<usize> = indices.iter().map(|&i| samples[i].noisy_label).collect();
    let batch = nabm_loss_batch(&logits, &labels, m, prior, margin)?;
    let scale = 1.0 / indices.len() as f64;
    let mut grad = LinearClassifier::zeros(classifier.dim(), classifier.num_classes());
    for (&i, g) in indices.iter().zip(&batch.grad_logits) {
        let x = &samples[i].features;
        for ((row, b), &gk) in grad.weights.iter_mut().zip(&mut grad.bias).zip(g) {
            let gk = gk * scale;
            *b += gk;
            row.iter_mut().zip(x).for_each(|(w, xv)| *w += gk * xv);
        }
    }
    Ok(ParamGrad {
        weights: grad.weights,
        bias: grad.bias,
        loss: batch.mean(),
    })
}

pub fn train(
    clean_subset: &Dataset,
    m: &TransitionMatrix,
    prior: &ClassPrior,
    margin: &MarginConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_from(
        init_classifier(clean_subset.feature_dim(), clean_subset.num_classes(), cfg.seed)?,
        clean_subset,
        m,
        prior,
        margin,
        cfg,
    )
}

/// Runs the training loop from a given starting classifier.
pub fn train_from(
    mut classifier: LinearClassifier,
    clean_subset: &Dataset,
    m: &TransitionMatrix,
    prior: &ClassPrior,
    margin: &MarginConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    margin.validate()?;
    if clean_subset.is_empty() {
        return Err(Error::EmptySelection);
    }
    if classifier.dim() != clean_subset.feature_dim() || classifier.num_classes() != clean_subset.num_classes() {
        return Err(Error::invalid("classifier shape does not match the dataset"));
    }
    let start = Instant::now();
    let n = clean_subset.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_SHUFFLE);
    let mut velocity = LinearClassifier::zeros(classifier.dim(), classifier.num_classes());
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut epoch_accuracy = Vec::with_capacity(cfg.epochs);
    let labels = clean_subset.noisy_labels();

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let lr = cfg.rate_for_epoch(epoch);
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let grad = batch_gradient(&classifier, clean_subset, batch, m, prior, margin)?;
            if !grad.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            loss_sum += grad.loss * batch.len() as f64;
            let params = classifier
                .weights
                .iter_mut()
                .flatten()
                .chain(classifier.bias.iter_mut());
            let vel = velocity.weights.iter_mut().flatten().chain(velocity.bias.iter_mut());
            let grads = grad.weights.iter().flatten().chain(&grad.bias);
            for ((p, v), g) in params.zip(vel).zip(grads) {
                let d = g + cfg.weight_decay * *p;
                *v = cfg.momentum * *v + d;
                *p -= lr * *v;
            }
            if !classifier.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
        }
        epoch_loss.push(loss_sum / n as f64);
        let (pred, _) = predict(&classifier, clean_subset)?;
        epoch_accuracy.push(
            pred.iter().zip(&labels).filter(|(a, b)| a == b).count() as f64 / n as f64,
        );
    }

    Ok(TrainReport {
        epoch_loss,
        epoch_accuracy,
        classifier,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Plain softmax over raw logits; the training margins are not applied.
pub fn predict(classifier: &LinearClassifier, dataset: &Dataset) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    if classifier.dim() != dataset.feature_dim() {
        return Err(Error::DimensionMismatch {
            record: 0,
            expected: classifier.dim(),
            got: dataset.feature_dim(),
        });
    }
    let probs: Vec<Vec<f64>> = dataset
        .samples()
        .iter()
        .map(|s| softmax(&classifier.logits(&s.features)))
        .collect();
    Ok((probs.iter().map(|p| argmax(p)).collect(), probs))
}
