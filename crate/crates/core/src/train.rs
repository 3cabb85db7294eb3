//! SGD training: baseline pretraining, multi-stream finetuning and evaluation.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CamClass, Classifier, RaGcnModel};
use crate::params::ParamSet;
use crate::preprocess::{assemble_batch, SkeletonSequence};
use crate::stgcn::{Mode, StgcnNetwork};
use crate::tape::Tape;
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplies the learning rate at each epoch listed in `lr_steps`.
    pub lr_decay: f64,
    pub lr_steps: Vec<usize>,
    pub seed: u64,
    /// Stop once the validation accuracy reaches this value.
    pub stop_at_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay: 0.1,
            lr_steps: vec![20, 40],
            seed: 0,
            stop_at_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_steps.iter().filter(|&&s| epoch >= s).count();
        self.learning_rate * self.lr_decay.powi(decays as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }
}

/// SGD with momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: Vec::new() }
    }

    /// Updates every trainable entry that received a gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Vec<f64>>], lr: f64) {
        self.velocity.resize(params.len(), None);
        for ((entry, grad), vel) in params.entries_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            let Some(grad) = grad else { continue };
            if !entry.trainable {
                continue;
            }
            let vel = vel.get_or_insert_with(|| vec![0.0; grad.len()]);
            for ((p, &g), v) in entry.value.data_mut().iter_mut().zip(grad).zip(vel.iter_mut()) {
                let g = g + self.weight_decay * *p;
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
        }
    }
}

/// One progress line: `epoch,split,loss,accuracy`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{:.6},{:.6}", self.epoch, self.split, self.loss, self.accuracy)
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    /// Snapshot with the best validation accuracy (training accuracy when
    /// no validation set is given).
    pub best: M,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    /// State after the last epoch.
    pub last: M,
    pub history: Vec<EpochLog>,
}

fn labels_of(batch: &[&SkeletonSequence]) -> Vec<usize> {
    batch.iter().map(|s| s.label).collect()
}

fn batch_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits.data().chunks(k).zip(labels).filter(|(row, &l)| argmax(row) == l).count()
}

fn cross_entropy_sum(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .map(|(row, &l)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() - row[l]
        })
        .sum()
}

/// Evaluation-mode loss and accuracy over `samples`.
pub fn evaluate<C: Classifier + ?Sized>(model: &mut C, samples: &[SkeletonSequence], batch_size: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty dataset".into()));
    }
    let k = model.num_classes();
    if let Some(bad) = samples.iter().find(|s| s.label >= k) {
        return Err(Error::Input(format!("sample {} has label {} for {k} classes", bad.sample_id, bad.label)));
    }
    let center = model.center_joint();
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SkeletonSequence> = chunk.iter().collect();
        let x = assemble_batch(&refs, center)?;
        let logits = model.predict_logits(&x)?;
        loss += cross_entropy_sum(&logits, &labels_of(&refs));
        predictions.extend(logits.data().chunks(k).map(argmax));
    }
    let correct = predictions.iter().zip(samples).filter(|(p, s)| **p == s.label).count();
    Ok(Evaluation {
        loss: loss / samples.len() as f64,
        accuracy: correct as f64 / samples.len() as f64,
        predictions,
    })
}

struct EpochTotals {
    loss: f64,
    correct: usize,
    seen: usize,
}

fn shuffled_batches<'a>(samples: &'a [SkeletonSequence], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<&'a SkeletonSequence>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    order.chunks(batch).map(|c| c.iter().map(|&i| &samples[i]).collect()).collect()
}

fn check_training_set(samples: &[SkeletonSequence], num_classes: usize) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    if let Some(bad) = samples.iter().find(|s| s.label >= num_classes) {
        return Err(Error::Input(format!(
            "sample {} has label {} for {num_classes} classes",
            bad.sample_id, bad.label
        )));
    }
    Ok(())
}

/// Trains a single ST-GCN (every mask all ones) with cross-entropy and SGD.
pub fn pretrain_baseline(
    mut net: StgcnNetwork,
    train: &[SkeletonSequence],
    val: Option<&[SkeletonSequence]>,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome<StgcnNetwork>> {
    cfg.validate()?;
    check_training_set(train, net.config().num_classes)?;
    let center = net.graph().center_joint();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut history = Vec::new();
    let mut best = (net.clone(), 0, f64::NEG_INFINITY);
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        let mut totals = EpochTotals { loss: 0.0, correct: 0, seen: 0 };
        for batch in shuffled_batches(train, cfg.batch_size, &mut rng) {
            let labels = labels_of(&batch);
            let x = assemble_batch(&batch, center)?;
            let mut tape = Tape::new();
            let bind = net.bind(&mut tape);
            let (_, logits) = net.forward(&mut tape, &bind, &x, Mode::Train, &mut rng)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            tape.backward(loss)?;
            let grads = bind.grads(&tape);
            sgd.step(&mut net.params, &grads, lr);
            totals.loss += tape.value(loss).data()[0] * labels.len() as f64;
            totals.correct += batch_correct(tape.value(logits), &labels);
            totals.seen += labels.len();
        }
        let done = record_epoch(&mut net, epoch, &totals, val, cfg, &mut history, &mut best, log)?;
        if done {
            break;
        }
    }
    let (best, best_epoch, best_accuracy) = best;
    Ok(TrainOutcome { best, best_epoch, best_accuracy, last: net, history })
}

#[allow(clippy::too_many_arguments)]
fn record_epoch<M: Classifier + Clone>(
    model: &mut M,
    epoch: usize,
    totals: &EpochTotals,
    val: Option<&[SkeletonSequence]>,
    cfg: &TrainConfig,
    history: &mut Vec<EpochLog>,
    best: &mut (M, usize, f64),
    log: &mut dyn FnMut(&EpochLog),
) -> Result<bool> {
    let train_line = EpochLog {
        epoch,
        split: "train".into(),
        loss: totals.loss / totals.seen as f64,
        accuracy: totals.correct as f64 / totals.seen as f64,
    };
    log(&train_line);
    let mut score = train_line.accuracy;
    history.push(train_line);
    if let Some(val) = val {
        let eval = evaluate(model, val, cfg.batch_size)?;
        let line = EpochLog { epoch, split: "val".into(), loss: eval.loss, accuracy: eval.accuracy };
        log(&line);
        history.push(line);
        score = eval.accuracy;
    }
    if score > best.2 {
        *best = (model.clone(), epoch, score);
    }
    Ok(cfg.stop_at_accuracy.is_some_and(|target| score >= target))
}

/// Jointly trains all streams and the fusion head. Masks are rebuilt for
/// every batch from the current parameters and the true labels.
pub fn finetune(
    mut model: RaGcnModel,
    train: &[SkeletonSequence],
    val: Option<&[SkeletonSequence]>,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochLog),
    on_epoch: &mut dyn FnMut(usize, &RaGcnModel) -> Result<()>,
) -> Result<TrainOutcome<RaGcnModel>> {
    cfg.validate()?;
    check_training_set(train, model.config().num_classes)?;
    let center = model.center_joint();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stream_opts = vec![Sgd::new(cfg.momentum, cfg.weight_decay); model.num_streams()];
    let mut fusion_opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut history = Vec::new();
    let mut best = (model.clone(), 0, f64::NEG_INFINITY);
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        let mut totals = EpochTotals { loss: 0.0, correct: 0, seen: 0 };
        for batch in shuffled_batches(train, cfg.batch_size, &mut rng) {
            let labels = labels_of(&batch);
            let x = assemble_batch(&batch, center)?;
            let mut tape = Tape::new();
            let bind = model.bind(&mut tape);
            let pass = model.forward_pass(&mut tape, &bind, &x, CamClass::Labels(&labels), None, Mode::Train, &mut rng)?;
            let loss = model.loss(&mut tape, &pass, &labels, true)?;
            tape.backward(loss)?;
            for (s, opt) in stream_opts.iter_mut().enumerate() {
                let grads = bind.streams[s].grads(&tape);
                opt.step(&mut model.streams[s].params, &grads, lr);
            }
            fusion_opt.step(&mut model.fusion, &bind.fusion.grads(&tape), lr);
            let fusion_loss = {
                let logits = tape.value(pass.logits);
                cross_entropy_sum(logits, &labels)
            };
            totals.loss += fusion_loss;
            totals.correct += batch_correct(tape.value(pass.logits), &labels);
            totals.seen += labels.len();
        }
        let done = record_epoch(&mut model, epoch, &totals, val, cfg, &mut history, &mut best, log)?;
        on_epoch(epoch, &model)?;
        if done {
            break;
        }
    }
    let (best, best_epoch, best_accuracy) = best;
    Ok(TrainOutcome { best, best_epoch, best_accuracy, last: model, history })
}
