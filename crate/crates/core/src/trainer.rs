//! Minibatch training with the decaying observation-reconstruction term.

use std::borrow::Cow;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::datamodel::TrafficSample;
use crate::error::{Error, Result};
use crate::head::{observation_targets, MetricAccumulator, MetricReport, EPS_MAPE};
use crate::model::{ForwardOptions, Model};
use crate::params::ParamStore;
use crate::synthdata::normalize::Normalizer;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub patience: usize,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            patience: 10,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return Err(Error::Config("train.gamma must be a finite value >= 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config("train.epochs, batch_size and patience must be positive".into()));
        }
        if self.learning_rate < 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::Config("train.learning_rate must be >= 0 and clip_norm > 0".into()));
        }
        Ok(())
    }
}

/// `L1 + 0.9^epoch · γ · L2`.
pub fn total_loss(l1: f64, l2: f64, gamma: f64, epoch: usize) -> f64 {
    l1 + l2_weight(gamma, epoch) * l2
}

pub fn l2_weight(gamma: f64, epoch: usize) -> f64 {
    0.9f64.powi(epoch as i32) * gamma
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_l1: f64,
    pub train_l2: f64,
    pub val_l1: f64,
    pub alpha: f64,
    pub elapsed_s: f64,
}

/// Adam moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            step: 0,
            m: store.zeros_like(),
            v: store.zeros_like(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Mat], lr: f64) {
        self.step += 1;
        let b1 = 1.0 - BETA1.powi(self.step as i32);
        let b2 = 1.0 - BETA2.powi(self.step as i32);
        for (k, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let (m, v, g) = (self.m[k].data_mut(), self.v[k].data_mut(), grads[k].data());
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let step = lr * (m[i] / b1) / ((v[i] / b2).sqrt() + ADAM_EPS);
                p[i] -= step;
            }
        }
    }
}

pub fn clip_global_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Mat::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

/// Scored entries of the observation-reconstruction term.
pub fn l2_count(sample: &TrafficSample) -> f64 {
    observation_targets(sample).1.iter().sum()
}

pub fn l1_count(sample: &TrafficSample) -> f64 {
    2.0 * sample.n_supervised() as f64
}

#[derive(Clone, Debug)]
pub struct BatchResult {
    pub grads: Vec<Mat>,
    pub loss: f64,
    pub l1: f64,
    pub l2: f64,
}

/// Gradient of the pooled batch loss. Per-sample gradients are summed in
/// batch order, so the result does not depend on thread scheduling.
pub fn batch_gradient(model: &Model, batch: &[&TrafficSample], statics: &Mat, l2_w: f64) -> Result<BatchResult> {
    let c1: f64 = batch.iter().map(|s| l1_count(s)).sum();
    if c1 == 0.0 {
        return Err(Error::NoSupervisedTargets);
    }
    let use_l2 = l2_w != 0.0;
    let c2: f64 = if use_l2 { batch.iter().map(|s| l2_count(s)).sum() } else { 0.0 };
    let opts = ForwardOptions { l2: use_l2 && c2 > 0.0 };
    let parts: Vec<Result<(Vec<Mat>, f64, f64)>> = batch
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new();
            let f = model.forward(&mut tape, s, statics, opts)?;
            let l1 = tape.scale(f.l1_sq, 1.0 / c1);
            let (loss, l2v) = match f.l2_sq {
                Some(sq) => {
                    let l2 = tape.scale(sq, 1.0 / c2);
                    let w = tape.scale(l2, l2_w);
                    (tape.add(l1, w), tape.value(l2).item())
                }
                None => (l1, 0.0),
            };
            let mut grads = model.store.zeros_like();
            tape.backward_into(loss, 1.0, &mut grads);
            Ok((grads, tape.value(l1).item(), l2v))
        })
        .collect();
    let mut grads = model.store.zeros_like();
    let (mut l1, mut l2) = (0.0, 0.0);
    for p in parts {
        let (g, a, b) = p?;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi);
        }
        l1 += a;
        l2 += b;
    }
    Ok(BatchResult {
        grads,
        loss: l1 + l2_w * l2,
        l1,
        l2,
    })
}

/// Indexed access to normalized training windows.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn get(&self, i: usize) -> Cow<'_, TrafficSample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [TrafficSample] {
    fn len(&self) -> usize {
        <[TrafficSample]>::len(self)
    }

    fn get(&self, i: usize) -> Cow<'_, TrafficSample> {
        Cow::Borrowed(&self[i])
    }
}

impl SampleSource for Vec<TrafficSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, i: usize) -> Cow<'_, TrafficSample> {
        Cow::Borrowed(&self[i])
    }
}

/// Pooled query MSE (normalized units) over a sample set.
pub fn mean_l1(model: &Model, samples: &(impl SampleSource + ?Sized), statics: &Mat) -> Result<f64> {
    let parts: Vec<Result<(f64, f64)>> = (0..samples.len())
        .into_par_iter()
        .map(|i| {
            let s = samples.get(i);
            let mut tape = Tape::new();
            let f = model.forward(&mut tape, &s, statics, ForwardOptions::default())?;
            Ok((tape.value(f.l1_sq).item(), f.l1_count))
        })
        .collect();
    let (mut sq, mut n) = (0.0, 0.0);
    for p in parts {
        let (a, b) = p?;
        sq += a;
        n += b;
    }
    if n == 0.0 {
        return Err(Error::NoSupervisedTargets);
    }
    Ok(sq / n)
}

/// Batch-mean losses of one pass over the training data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub l1: f64,
    pub l2: f64,
    pub batches: usize,
}

/// One optimization pass over `train_set` in the given sample order.
pub fn run_epoch(
    model: &mut Model,
    adam: &mut AdamState,
    train_set: &(impl SampleSource + ?Sized),
    order: &[usize],
    statics: &Mat,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    let l2_w = l2_weight(cfg.gamma, epoch);
    let (mut loss, mut l1, mut l2, mut batches) = (0.0, 0.0, 0.0, 0usize);
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let owned: Vec<Cow<'_, TrafficSample>> = chunk.par_iter().map(|&i| train_set.get(i)).collect();
        let batch: Vec<&TrafficSample> = owned.iter().map(|c| c.as_ref()).collect();
        let mut r = batch_gradient(model, &batch, statics, l2_w)?;
        let finite = r.loss.is_finite() && r.grads.iter().all(Mat::is_finite);
        if !finite {
            let norms = model
                .store
                .norms()
                .iter()
                .map(|(n, v)| format!("{n}={v:.3e}"))
                .collect::<Vec<_>>()
                .join(", ");
            return Err(Error::NonFiniteLoss { epoch, batch: b, norms });
        }
        clip_global_norm(&mut r.grads, cfg.clip_norm);
        adam.update(&mut model.store, &r.grads, cfg.learning_rate);
        loss += r.loss;
        l1 += r.l1;
        l2 += r.l2;
        batches += 1;
    }
    let nb = batches.max(1) as f64;
    Ok(EpochStats {
        loss: loss / nb,
        l1: l1 / nb,
        l2: l2 / nb,
        batches,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_l1: f64,
    pub optimizer: AdamState,
}

/// Trains `model` in place on normalized samples and leaves it holding the
/// parameters with the best validation L1.
pub fn train(
    model: &mut Model,
    train_set: &(impl SampleSource + ?Sized),
    val_set: &(impl SampleSource + ?Sized),
    statics: &Mat,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::NoAdmissibleWindows("empty training set".into()));
    }
    let started = Instant::now();
    let mut adam = AdamState::new(&model.store);
    let mut best: Option<(f64, usize, ParamStore, AdamState)> = None;
    let mut history = Vec::new();
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let stats = run_epoch(model, &mut adam, train_set, &order, statics, cfg, epoch)?;
        let val_l1 = if val_set.is_empty() { f64::NAN } else { mean_l1(model, val_set, statics)? };
        let rec = EpochRecord {
            epoch,
            train_loss: stats.loss,
            train_l1: stats.l1,
            train_l2: stats.l2,
            val_l1,
            alpha: model.alpha(),
            elapsed_s: started.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        history.push(rec);
        // without validation data the latest parameters are kept
        let improved = match &best {
            None => true,
            Some((b, ..)) => val_l1 < *b || val_l1.is_nan(),
        };
        if improved {
            best = Some((val_l1, epoch, model.store.clone(), adam.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (best_val_l1, best_epoch, store, optimizer) = best.expect("at least one epoch ran");
    model.store = store;
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_l1,
        optimizer,
    })
}

/// Raw-unit metrics of `model` over raw samples, normalized on the fly.
pub fn evaluate<I>(model: &Model, samples: I, normalizer: &Normalizer, statics: &Mat, split: &str) -> Result<MetricReport>
where
    I: IntoParallelIterator<Item = TrafficSample>,
{
    let accs: Vec<Result<MetricAccumulator>> = samples
        .into_par_iter()
        .map(|raw| {
            let norm = normalizer.apply_sample(&raw);
            let mut pred = model.predict(&norm, statics)?;
            let h2 = pred.cols();
            for q in 0..pred.rows() {
                for j in 0..h2 {
                    let z = pred[(q, j)];
                    pred.row_mut(q)[j] = normalizer.invert_traffic(j % 2, z);
                }
            }
            let mut acc = MetricAccumulator::new(EPS_MAPE);
            acc.push_sample(&pred, &raw);
            Ok(acc)
        })
        .collect();
    let mut total = MetricAccumulator::new(EPS_MAPE);
    for a in accs {
        total.merge(&a?);
    }
    Ok(total.finish("deepstate", split, model.task.mode, model.task.horizon))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_schedule() {
        assert_eq!(total_loss(1.0, 1.0, 1.0, 0), 2.0);
        let l = total_loss(3.0, 2.0, 0.5, 7);
        assert!((l - (3.0 + 0.4782969)).abs() < 1e-12);
        let far = total_loss(1.0, 1.0, 1.0, 200);
        assert!((far - 1.0).abs() < 1e-9);
        for e in 0..50 {
            assert!(l2_weight(0.5, e + 1) < l2_weight(0.5, e));
        }
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Mat::row_vector(&[3.0, 4.0]), Mat::row_vector(&[12.0])];
        let n = clip_global_norm(&mut g, 5.0);
        assert_eq!(n, 13.0);
        let after = g.iter().map(Mat::norm_sq).sum::<f64>().sqrt();
        assert!((after - 5.0).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        use crate::params::Init;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store.add("p", 1, 2, Init::Constant(1.0), &mut rng);
        let mut adam = AdamState::new(&store);
        adam.update(&mut store, &[Mat::row_vector(&[0.5, -2.0])], 0.1);
        // bias-corrected first step is lr · sign(g) up to eps
        let p = store.get(crate::params::ParamId(0)).data();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] - 1.1).abs() < 1e-6);
        let before = store.clone();
        adam.update(&mut store, &[Mat::row_vector(&[0.5, -2.0])], 0.0);
        assert_eq!(store, before);
    }
}
