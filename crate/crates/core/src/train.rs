//! Minibatch gradient descent with cross-entropy on synthetic clips.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::block::{build_stack, cross_entropy, Model, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::params::{accumulate, axpy, Parameters};
use crate::synthetic::{gen_direction_dataset, Dataset, DatasetSpec, MotionClip};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of all steps spent ramping the rate linearly from `lr / warmup`.
    pub warmup_frac: f64,
    /// Seed of the clip order, which is drawn once and reused every epoch.
    pub seed: u64,
    /// Leading clips of that order used by [`Model::center_affinity`] before
    /// the first step; 0 skips centering.
    pub center_clips: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            lr: 0.2,
            batch_size: 8,
            warmup_frac: 0.05,
            seed: 0,
            center_clips: 64,
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, train_clips: usize) -> usize {
        train_clips.div_ceil(self.batch_size.max(1))
    }

    pub fn warmup_steps(&self, train_clips: usize) -> usize {
        let total = self.epochs * self.steps_per_epoch(train_clips);
        (self.warmup_frac * total as f64).ceil() as usize
    }

    /// Rate used at zero-based `step`.
    pub fn lr_at(&self, step: usize, warmup: usize) -> f64 {
        if step < warmup {
            self.lr * (step + 1) as f64 / warmup as f64
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub initial_val_acc: f64,
    pub epochs: Vec<EpochMetrics>,
}

impl TrainReport {
    pub fn final_val_acc(&self) -> f64 {
        self.epochs.last().map_or(self.initial_val_acc, |m| m.val_acc)
    }
}

/// Fraction of `indices` the model classifies correctly.
pub fn accuracy(model: &Model, clips: &[MotionClip], indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for &i in indices {
        if model.predict(&clips[i].clip)? == clips[i].label {
            correct += 1;
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Loss and mean gradient over one minibatch, accumulated in order.
pub fn batch_gradient(model: &Model, clips: &[MotionClip], batch: &[usize]) -> Result<(f64, usize, ModelParams)> {
    let mut grads = model.params.zeroed();
    let mut loss = 0.0;
    let mut correct = 0;
    for &i in batch {
        let (logits, tape) = model.forward_saved(&clips[i].clip)?;
        let (l, d_logits) = cross_entropy(&logits, clips[i].label)?;
        if crate::block::argmax(logits.data()) == clips[i].label {
            correct += 1;
        }
        loss += l;
        accumulate(&mut grads, &model.backward(&d_logits, &tape)?);
    }
    let inv = 1.0 / batch.len() as f64;
    grads.visit_mut("", &mut |_, t| t.scale(inv));
    Ok((loss, correct, grads))
}

/// Trains in place; `on_epoch` sees each epoch's metrics as they finish.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<TrainReport> {
    if cfg.batch_size == 0 || !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::config("batch size and learning rate must be positive"));
    }
    if data.train.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    let mut order = data.train.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let warmup = cfg.warmup_steps(order.len());
    if cfg.epochs > 0 && cfg.center_clips > 0 {
        let sample: Vec<&Tensor> = order.iter().take(cfg.center_clips).map(|&i| &data.clips[i].clip).collect();
        model.center_affinity(&sample)?;
    }
    let initial_val_acc = accuracy(model, &data.clips, &data.val)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut loss = 0.0;
        let mut correct = 0;
        for batch in order.chunks(cfg.batch_size) {
            let (l, c, grads) = batch_gradient(model, &data.clips, batch)?;
            if !l.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss += l;
            correct += c;
            axpy(&mut model.params, &grads, -cfg.lr_at(step, warmup));
            step += 1;
        }
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss / order.len() as f64,
            train_acc: correct as f64 / order.len() as f64,
            val_acc: accuracy(model, &data.clips, &data.val)?,
        };
        on_epoch(&metrics);
        epochs.push(metrics);
    }
    Ok(TrainReport { initial_val_acc, epochs })
}

/// One seeded direction-classification run. The defaults are the frozen
/// calibration of the E-O toy model.
#[derive(Debug, Clone, PartialEq)]
#[derive(Default)]
pub struct ToyExperiment {
    pub model: ModelConfig,
    pub data: DatasetSpec,
    pub train: TrainConfig,
    /// Seed of the parameter initialization.
    pub init_seed: u64,
}


impl ToyExperiment {
    /// Uses `seed` for the data, the initialization and the clip order.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.train.seed = seed;
        self.init_seed = seed;
        self
    }

    /// Same budget and seeds without the motion MLP.
    pub fn ablated(&self) -> Self {
        let mut out = self.clone();
        out.model.ablate_motion = true;
        out
    }

    pub fn run(&self, on_epoch: impl FnMut(&EpochMetrics)) -> Result<(Model, TrainReport)> {
        let data = gen_direction_dataset(&self.data)?;
        let mut model = build_stack(&self.model, self.init_seed)?;
        let report = train(&mut model, &data, &self.train, on_epoch)?;
        Ok((model, report))
    }
}
