//! Per-sensor dense-attention model used as the scalability contrast.
//!
//! Every observation sensor keeps its own state and attends to every other
//! one, so a window costs `O(|S|²)` on top of the per-sensor encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::datamodel::{FeatureLayout, TaskMode, TrafficSample};
use crate::error::{Error, Result};
use crate::head::{query_dim, query_features, query_targets};
use crate::layers::{Gru, Linear, Mlp};
use crate::params::ParamStore;
use crate::tensor::Mat;
use crate::trainer::{clip_global_norm, AdamState, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceConfig {
    pub hidden: usize,
    pub head_hidden: usize,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            head_hidden: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReferenceModel {
    pub config: ReferenceConfig,
    pub layout: FeatureLayout,
    pub task: TaskMode,
    pub store: ParamStore,
    gru: Gru,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    query_mlp: Mlp,
    head: Mlp,
}

impl ReferenceModel {
    pub fn new(config: ReferenceConfig, layout: FeatureLayout, task: TaskMode, seed: u64) -> Result<Self> {
        if config.hidden == 0 || config.head_hidden == 0 {
            return Err(Error::Config("reference dims must be positive".into()));
        }
        task.validate()?;
        let d = config.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "ref.gru", layout.f_total() + 1, d, &mut rng);
        let wq = Linear::new(&mut store, "ref.q", d, d, &mut rng);
        let wk = Linear::new(&mut store, "ref.k", d, d, &mut rng);
        let wv = Linear::new(&mut store, "ref.v", d, d, &mut rng);
        let query_mlp = Mlp::new(&mut store, "ref.query", query_dim(&layout), d, d, &mut rng);
        let head = Mlp::new(&mut store, "ref.head", 2 * d, config.head_hidden, 2 * task.horizon, &mut rng);
        Ok(Self {
            config,
            layout,
            task,
            store,
            gru,
            wq,
            wk,
            wv,
            query_mlp,
            head,
        })
    }

    fn attend(&self, tape: &mut Tape, q: Var, k: Var, v: Var) -> Var {
        let s = tape.matmul_nt(q, k);
        let s = tape.scale(s, 1.0 / (self.config.hidden as f64).sqrt());
        let p = tape.softmax_rows(s);
        tape.matmul(p, v)
    }

    /// Predictions and the summed squared query error for one normalized window.
    pub fn forward(&self, tape: &mut Tape, sample: &TrafficSample) -> Result<(Var, Var, f64)> {
        if sample.task != self.task || sample.f_total != self.layout.f_total() {
            return Err(Error::Shape("sample does not match the reference model".into()));
        }
        let (s_n, w, f) = (sample.n_obs(), sample.window(), sample.f_total);
        if s_n == 0 {
            return Err(Error::Shape("window without observation sensors".into()));
        }
        let store = &self.store;
        let steps: Vec<Var> = (0..w)
            .map(|t| {
                let mut m = Mat::zeros(s_n, f + 1);
                for s in 0..s_n {
                    let row = m.row_mut(s);
                    for (j, r) in row.iter_mut().take(f).enumerate() {
                        *r = sample.obs(s, t, j);
                    }
                    row[f] = f64::from(sample.obs_valid(s, t));
                }
                tape.constant(m)
            })
            .collect();
        let h = self.gru.run(tape, store, &steps);
        let q = self.wq.forward(tape, store, h);
        let k = self.wk.forward(tape, store, h);
        let v = self.wv.forward(tape, store, h);
        let mixed = self.attend(tape, q, k, v);
        let h = tape.add(h, mixed);

        let qf = tape.constant(query_features(sample, &self.layout));
        let qe = self.query_mlp.forward(tape, store, qf);
        let qq = self.wq.forward(tape, store, qe);
        let k = self.wk.forward(tape, store, h);
        let v = self.wv.forward(tape, store, h);
        let cross = self.attend(tape, qq, k, v);
        let x = tape.concat_cols(&[qe, cross]);
        let pred = self.head.forward(tape, store, x);
        let (y, mask) = query_targets(sample);
        let count: f64 = mask.iter().sum();
        let sq = tape.masked_sq_err(pred, y, mask);
        Ok((pred, sq, count))
    }

    /// One Adam step on the pooled query MSE of `batch`; returns the loss.
    pub fn train_step(&mut self, adam: &mut AdamState, batch: &[TrafficSample], cfg: &TrainConfig) -> Result<f64> {
        let parts: Vec<Result<(Vec<Mat>, f64, f64)>> = batch
            .par_iter()
            .map(|s| {
                let mut tape = Tape::new();
                let (_, sq, n) = self.forward(&mut tape, s)?;
                let mut g = self.store.zeros_like();
                tape.backward_into(sq, 1.0, &mut g);
                Ok((g, tape.value(sq).item(), n))
            })
            .collect();
        let mut grads = self.store.zeros_like();
        let (mut sq, mut n) = (0.0, 0.0);
        for p in parts {
            let (g, a, b) = p?;
            for (acc, gi) in grads.iter_mut().zip(&g) {
                acc.add_assign(gi);
            }
            sq += a;
            n += b;
        }
        if n == 0.0 {
            return Err(Error::NoSupervisedTargets);
        }
        for g in grads.iter_mut() {
            g.scale_assign(1.0 / n);
        }
        clip_global_norm(&mut grads, cfg.clip_norm);
        adam.update(&mut self.store, &grads, cfg.learning_rate);
        Ok(sq / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Mode;
    use crate::gradcheck::tiny_problem;

    #[test]
    fn predictions_have_query_shape_and_training_reduces_loss() {
        let p = tiny_problem(Mode::Reconstruct, crate::gradcheck::tiny_config(), 3).unwrap();
        let mut m = ReferenceModel::new(ReferenceConfig::default(), p.model.layout.clone(), p.model.task, 1).unwrap();
        let s = &p.samples[0];
        let mut tape = Tape::new();
        let (pred, _, _) = m.forward(&mut tape, s).unwrap();
        assert_eq!(tape.value(pred).shape(), (s.n_query(), 2 * s.horizon()));
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let mut adam = AdamState::new(&m.store);
        let first = m.train_step(&mut adam, &p.samples, &cfg).unwrap();
        let mut last = first;
        for _ in 0..50 {
            last = m.train_step(&mut adam, &p.samples, &cfg).unwrap();
        }
        assert!(last < first, "{last} !< {first}");
    }
}
