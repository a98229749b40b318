//! Adam, cosine-annealed learning rate and the training loop.

use std::sync::mpsc;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{self, ImagePair, PairedDataset};
use crate::error::{Error, Result};
use crate::losses::{self, FeatureExtractor, LossWeights, TERM_NAMES};
use crate::model::LtcfNet;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Bias-corrected Adam update followed by `zero_grad`.
    ///
    /// Parameters whose gradient is identically zero keep their value and
    /// moments; the step counter advances regardless.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !store.grads_ready() {
            return Err(Error::Usage(
                "adam step without gradients; run backward first".into(),
            ));
        }
        if self.m.len() != store.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powf(self.t as f64);
        let c2 = 1.0 - b2.powf(self.t as f64);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if p.grad.data().iter().all(|g| *g == T::zero()) {
                continue;
            }
            let values = p.value.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, &g) in p.grad.data().iter().enumerate() {
                let g = g.to_f64_lossy();
                let mi = b1 * m[i].to_f64_lossy() + (1.0 - b1) * g;
                let vi = b2 * v[i].to_f64_lossy() + (1.0 - b2) * g * g;
                m[i] = T::of(mi);
                v[i] = T::of(vi);
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                values[i] = T::of(values[i].to_f64_lossy() - update);
            }
        }
        store.zero_grad();
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub lr_initial: f64,
    pub lr_final: f64,
    pub total_epochs: usize,
    pub warmup_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            lr_initial: 2e-4,
            lr_final: 1e-6,
            total_epochs: 1000,
            warmup_epochs: 0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_initial > self.lr_final && self.lr_final > 0.0) {
            return Err(Error::Config(format!(
                "learning rates must satisfy initial > final > 0, got {} and {}",
                self.lr_initial, self.lr_final
            )));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::Config("warmup is longer than the schedule".into()));
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_initial` to `lr_final` over `total_epochs`,
/// after an optional linear warmup. Out-of-range epochs are clamped.
pub fn cosine_lr(s: &ScheduleConfig, epoch: f64) -> f64 {
    let total = s.total_epochs as f64;
    let e = if epoch.is_nan() {
        0.0
    } else {
        epoch.clamp(0.0, total)
    };
    if e != epoch {
        warn!("epoch {epoch} outside [0, {total}], clamped to {e}");
    }
    let warm = s.warmup_epochs as f64;
    if e < warm {
        return s.lr_initial * (e + 1.0) / (warm + 1.0);
    }
    let span = total - warm;
    let progress = if span > 0.0 { (e - warm) / span } else { 1.0 };
    s.lr_final + 0.5 * (s.lr_initial - s.lr_final) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Square crop size; `0` trains on whole images.
    pub patch: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Load and crop the next batch on a worker thread.
    pub prefetch: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 8,
            patch: 64,
            seed: 0,
            clip_norm: 5.0,
            prefetch: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub terms: [f64; 6],
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub terms: [f64; 6],
    pub steps: usize,
}

impl EpochRecord {
    /// Per-term breakdown keyed by term name.
    pub fn named_terms(&self) -> impl Iterator<Item = (&'static str, f64)> + '_ {
        TERM_NAMES.iter().copied().zip(self.terms.iter().copied())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// Mean step loss over consecutive windows of `size` steps; a trailing
    /// partial window is dropped.
    pub fn window_means(&self, size: usize, term: Option<usize>) -> Vec<f64> {
        self.steps
            .chunks_exact(size.max(1))
            .map(|w| {
                w.iter()
                    .map(|s| term.map_or(s.loss, |t| s.terms[t]))
                    .sum::<f64>()
                    / w.len() as f64
            })
            .collect()
    }
}

pub enum TrainEvent<'a> {
    Step(&'a StepRecord),
    Epoch {
        record: &'a EpochRecord,
        net: &'a LtcfNet,
    },
}

struct Batch {
    epoch: usize,
    pairs: Vec<ImagePair>,
}

/// Epoch-by-epoch batch order. Crop windows are seeded per step so the
/// sequence is the same whether or not a worker thread produces it.
fn batches(
    dataset: &PairedDataset,
    opts: &TrainOptions,
    mut emit: impl FnMut(Result<Batch>) -> bool,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0u64;
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch_size) {
            let batch = chunk
                .iter()
                .enumerate()
                .map(|(j, &i)| {
                    let pair = dataset.get(i)?;
                    if opts.patch == 0 {
                        return Ok(pair);
                    }
                    let seed = opts.seed
                        ^ data::fnv1a(&[step.to_le_bytes(), (j as u64).to_le_bytes()].concat());
                    data::random_crop_pair(&pair, opts.patch, seed)
                })
                .collect::<Result<Vec<_>>>()
                .map(|pairs| Batch { epoch, pairs });
            step += 1;
            if !emit(batch) {
                return;
            }
        }
    }
}

/// Trains `net` in place and returns the loss history.
///
/// The callback sees every step and every finished epoch; returning an
/// error from it stops training with that error.
pub fn train(
    net: &mut LtcfNet,
    dataset: &PairedDataset,
    weights: &LossWeights,
    extractor: &FeatureExtractor,
    schedule: &ScheduleConfig,
    opts: &TrainOptions,
    callback: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<History> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("training set has no pairs".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    weights.validate()?;
    schedule.validate()?;
    if opts.patch > 0 {
        net.check_input_size(opts.patch, opts.patch)?;
    }
    let mut history = History::default();
    if opts.epochs == 0 {
        return Ok(history);
    }
    let mut adam = AdamState::new(&net.store);
    let mut run = |batch: Result<Batch>, history: &mut History| -> Result<()> {
        let batch = batch?;
        let lr = cosine_lr(schedule, batch.epoch as f64);
        let record = train_step(
            net,
            &mut adam,
            &batch.pairs,
            weights,
            extractor,
            lr,
            opts.clip_norm,
            history.steps.len(),
            batch.epoch,
        )?;
        callback(TrainEvent::Step(&record))?;
        history.steps.push(record);
        let per_epoch = dataset.len().div_ceil(opts.batch_size);
        if history.steps.len() % per_epoch == 0 {
            let recent = &history.steps[history.steps.len() - per_epoch..];
            let n = recent.len() as f64;
            let rec = EpochRecord {
                epoch: batch.epoch,
                lr,
                loss: recent.iter().map(|s| s.loss).sum::<f64>() / n,
                terms: std::array::from_fn(|t| recent.iter().map(|s| s.terms[t]).sum::<f64>() / n),
                steps: recent.len(),
            };
            callback(TrainEvent::Epoch { record: &rec, net })?;
            history.epochs.push(rec);
        }
        Ok(())
    };

    if opts.prefetch {
        std::thread::scope(|scope| {
            let (tx, rx) = mpsc::sync_channel::<Result<Batch>>(1);
            scope.spawn(move || batches(dataset, opts, |b| tx.send(b).is_ok()));
            for b in rx {
                run(b, &mut history)?;
            }
            Ok::<_, Error>(())
        })?;
    } else {
        let mut outcome = Ok(());
        batches(dataset, opts, |b| {
            outcome = run(b, &mut history);
            outcome.is_ok()
        });
        outcome?;
    }
    Ok(history)
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    net: &mut LtcfNet,
    adam: &mut AdamState,
    pairs: &[ImagePair],
    weights: &LossWeights,
    extractor: &FeatureExtractor,
    lr: f64,
    clip_norm: f64,
    step: usize,
    epoch: usize,
) -> Result<StepRecord> {
    let mut loss = 0.0;
    let mut terms = [0.0; 6];
    let inv = 1.0 / pairs.len() as f64;
    net.store.zero_grad();
    for pair in pairs {
        let grads = {
            let mut g = Graph::new(&net.store);
            let x = g.input(pair.low.clone());
            let y = g.input(pair.high.clone());
            let pred = net.forward(&mut g, x)?;
            let l = losses::total_loss(&mut g, weights, extractor, y, pred)?;
            let value = g.value(l.total).data()[0] as f64;
            if !value.is_finite() {
                let culprit = g.first_non_finite().unwrap_or_else(|| "loss".into());
                return Err(Error::NonFinite(format!(
                    "step {step} (`{}`): loss is {value}; first non-finite value in {culprit}",
                    pair.name
                )));
            }
            loss += value * inv;
            for (t, v) in terms.iter_mut().zip(&l.terms) {
                *t += g.value(*v).data()[0] as f64 * inv;
            }
            g.backward(l.total)?
        };
        net.store.accumulate(&grads);
    }
    net.store.scale_grads(inv as f32);
    let norm = net.store.grad_norm() as f64;
    if !norm.is_finite() {
        let culprit = net
            .store
            .iter()
            .find(|(_, p)| !p.grad.is_finite() || !p.value.is_finite())
            .map_or_else(
                || "unknown tensor".into(),
                |(_, p)| format!("parameter `{}`", p.name),
            );
        return Err(Error::NonFinite(format!(
            "step {step}: gradient norm is {norm}; first non-finite gradient in {culprit}"
        )));
    }
    let clipped = norm > clip_norm;
    if clipped {
        debug!("step {step}: clipping gradient norm {norm:.3} to {clip_norm}");
        net.store.scale_grads((clip_norm / norm) as f32);
    }
    adam.step(&mut net.store, lr)?;
    Ok(StepRecord {
        step,
        epoch,
        lr,
        loss,
        terms,
        grad_norm: norm,
        clipped,
    })
}
