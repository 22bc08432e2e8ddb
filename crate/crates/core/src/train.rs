//! SGD with momentum, the cosine schedule, the training loop and evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{NamedTensor, StagedModel};
use crate::data::{stream, Dataset};
use crate::error::{Error, Result};
use crate::nn::NormMode;
use crate::paradigm::{count_trainable_params, FrozenReport, TunableModel};
use crate::prompt::PromptedModel;
use crate::tensor::{no_grad, ops, Tensor};

const SHUFFLE: u64 = 0x5348_5546;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fraction of the total steps spent in linear warmup.
    pub warmup_frac: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Exact step count; overrides `epochs` when set.
    pub steps: Option<usize>,
    /// Rescales the gradient when its global L2 norm exceeds this value.
    pub grad_clip: Option<f64>,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self { lr: 0.05, momentum: 0.9, weight_decay: 1e-4, warmup_frac: 0.05, batch_size: 64, epochs: 10, steps: None, grad_clip: None }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must be in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    /// Total optimizer steps for a dataset of `n` samples.
    pub fn total_steps(&self, n: usize) -> usize {
        self.steps.unwrap_or(self.epochs * n.div_ceil(self.batch_size))
    }
}

/// Linear warmup then cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn new(base: f64, warmup_frac: f64, total: usize) -> Self {
        Self { base, warmup: (warmup_frac * total as f64).round() as usize, total }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.base * (step + 1) as f64 / self.warmup as f64;
        }
        let span = (self.total - self.warmup).max(1) as f64;
        let t = ((step - self.warmup) as f64 / span).min(1.0);
        0.5 * self.base * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Momentum buffers for the trainable tensors, in a fixed order.
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    params: Vec<NamedTensor<f32>>,
    decay: Vec<bool>,
    velocity: Vec<Vec<f32>>,
}

/// Weight decay applies to convolution and linear weights only.
fn decays(p: &NamedTensor<f32>) -> bool {
    p.name.ends_with(".weight") && p.tensor.ndim() >= 2
}

impl Sgd {
    pub fn new(params: Vec<NamedTensor<f32>>, momentum: f64, weight_decay: f64) -> Self {
        let decay = params.iter().map(decays).collect();
        let velocity = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Self { momentum, weight_decay, grad_clip: None, params, decay, velocity }
    }

    pub fn params(&self) -> &[NamedTensor<f32>] {
        &self.params
    }

    /// Global L2 norm of the current gradients.
    pub fn grad_norm(&self) -> f64 {
        let sq: f64 = self.params.iter().filter_map(|p| p.tensor.grad()).flatten().map(|g| (g as f64).powi(2)).sum();
        sq.sqrt()
    }

    /// `v ← μv + s·g; p ← p − lr·(v + wd·p)`, then clears the grads. `s` is 1
    /// unless clipping shrinks the gradient to norm `grad_clip`.
    pub fn step(&mut self, lr: f64) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| !p.tensor.has_grad()) {
            return Err(Error::Parameter { name: p.name.clone(), reason: "trainable tensor received no gradient".into() });
        }
        let scale = match self.grad_clip {
            Some(c) => {
                let norm = self.grad_norm();
                if norm > c { (c / norm) as f32 } else { 1.0 }
            }
            None => 1.0,
        };
        let (mu, lr) = (self.momentum as f32, lr as f32);
        for ((p, v), &decay) in self.params.iter().zip(&mut self.velocity).zip(&self.decay) {
            let mut g = p.tensor.grad().expect("checked above");
            if scale != 1.0 {
                g.iter_mut().for_each(|g| *g *= scale);
            }
            let wd = if decay { self.weight_decay as f32 } else { 0.0 };
            let mut data = p.tensor.data_mut();
            for ((w, v), g) in data.iter_mut().zip(v.iter_mut()).zip(&g) {
                *v = mu * *v + g;
                *w -= lr * (*v + wd * *w);
            }
            drop(data);
            p.tensor.zero_grad();
        }
        Ok(())
    }
}

/// Anything that maps an image batch to logits.
pub trait Classifier {
    fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Classifier for StagedModel<f32> {
    fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        StagedModel::logits(self, x)
    }
}

impl Classifier for PromptedModel<f32> {
    fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        PromptedModel::logits(self, x)
    }
}

impl Classifier for TunableModel {
    fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.model.logits(x)
    }
}

const EVAL_BATCH: usize = 128;

/// Top-1 accuracy, computed without recording a graph.
pub fn evaluate(model: &dyn Classifier, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let _guard = no_grad();
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = ds.batch(chunk);
        let pred = ops::argmax_rows(&model.logits(&x)?);
        correct += pred.iter().zip(&y).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub epoch_val_accuracy: Vec<f64>,
    pub final_accuracy: f64,
    pub trainable_params: usize,
    pub steps: usize,
    pub seed: u64,
    pub wall_seconds: f64,
    #[serde(skip)]
    pub frozen: FrozenReport,
}

impl TrainReport {
    pub fn valid(&self) -> bool {
        self.frozen.is_clean()
    }
}

/// Mini-batch SGD over `ds` for the tensors in `params`, invoking
/// `after_epoch(epoch, mean_loss)` at the end of each pass.
fn run(
    model: &PromptedModel<f32>,
    params: Vec<NamedTensor<f32>>,
    ds: &Dataset,
    hp: &HyperParams,
    seed: u64,
    after_epoch: &mut dyn FnMut(usize, f64) -> Result<()>,
) -> Result<usize> {
    hp.validate()?;
    if ds.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let total = hp.total_steps(ds.len());
    let schedule = LrSchedule::new(hp.lr, hp.warmup_frac, total);
    let mut opt = Sgd::new(params, hp.momentum, hp.weight_decay);
    opt.grad_clip = hp.grad_clip;
    let mut step = 0;
    let mut epoch = 0;
    while step < total {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut stream(seed, SHUFFLE, epoch as u64));
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(hp.batch_size) {
            if step == total {
                break;
            }
            let (x, y) = ds.batch(chunk);
            let loss = ops::softmax_cross_entropy(&model.logits(&x)?, &y)?;
            let value = loss.item() as f64;
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            loss.backward()?;
            opt.step(schedule.lr(step))?;
            loss_sum += value;
            batches += 1;
            step += 1;
        }
        after_epoch(epoch, loss_sum / batches.max(1) as f64)?;
        epoch += 1;
    }
    Ok(step)
}

/// Trains the mask-true tensors of `tm` with norm statistics frozen and
/// reports the final accuracy on `val` (or on `train_ds` when absent).
/// `val` is also evaluated after every epoch.
pub fn train(tm: &mut TunableModel, train_ds: &Dataset, val: Option<&Dataset>, hp: &HyperParams, seed: u64) -> Result<TrainReport> {
    train_inner(tm, train_ds, val, hp, seed, true)
}

/// Like [`train`] but evaluates `test` once, after the last step.
/// `epoch_val_accuracy` stays empty.
pub fn train_then_evaluate(tm: &mut TunableModel, train_ds: &Dataset, test: &Dataset, hp: &HyperParams, seed: u64) -> Result<TrainReport> {
    train_inner(tm, train_ds, Some(test), hp, seed, false)
}

fn train_inner(
    tm: &mut TunableModel,
    train_ds: &Dataset,
    val: Option<&Dataset>,
    hp: &HyperParams,
    seed: u64,
    each_epoch: bool,
) -> Result<TrainReport> {
    let start = Instant::now();
    tm.model.base.norm_mode = NormMode::Frozen;
    let trainable_params = count_trainable_params(tm)?;
    let eval_ds = val.unwrap_or(train_ds);
    let mut epoch_loss = Vec::new();
    let mut epoch_val_accuracy = Vec::new();
    let model = &tm.model;
    let steps = run(model, tm.trainable(), train_ds, hp, seed, &mut |_, loss| {
        epoch_loss.push(loss);
        if each_epoch && val.is_some() {
            epoch_val_accuracy.push(evaluate(model, eval_ds)?);
        }
        Ok(())
    })?;
    let final_accuracy = match epoch_val_accuracy.last() {
        Some(&a) => a,
        None => evaluate(&tm.model, eval_ds)?,
    };
    Ok(TrainReport {
        epoch_loss,
        epoch_val_accuracy,
        final_accuracy,
        trainable_params,
        steps,
        seed,
        wall_seconds: start.elapsed().as_secs_f64(),
        frozen: tm.verify_frozen(),
    })
}

/// Trains every parameter of a backbone on the source task with batch
/// statistics, then switches normalization to the updated running statistics.
pub fn pretrain(model: StagedModel<f32>, ds: &Dataset, hp: &HyperParams, seed: u64) -> Result<StagedModel<f32>> {
    model.set_trainable(true);
    let mut pm = PromptedModel::plain(model);
    pm.base.norm_mode = NormMode::BatchStats;
    let params = pm.named_tensors().into_iter().filter(|n| n.slot == crate::nn::Slot::Param).collect();
    run(&pm, params, ds, hp, seed, &mut |_, _| Ok(()))?;
    pm.base.norm_mode = NormMode::Frozen;
    Ok(pm.base)
}
