//! Query-side prediction head, training losses and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::datamodel::{FeatureLayout, Mode, TrafficSample};
use crate::error::{Error, Result};
use crate::layers::Mlp;
use crate::params::ParamStore;
use crate::tensor::Mat;

pub const EPS_MAPE: f64 = 1.0;
pub const TRAFFIC_NAMES: [&str; 2] = ["speed", "flow"];

/// Width of the query feature vector: static block plus the last and the
/// window-mean dynamic rows.
pub fn query_dim(layout: &FeatureLayout) -> usize {
    layout.f_static() + 2 * layout.f_dynamic()
}

/// Builds `[static; last dynamic; mean dynamic]` rows from a context-only
/// accessor `get(row, t, f)` indexed over static then dynamic features.
fn context_rows(n: usize, w: usize, layout: &FeatureLayout, get: impl Fn(usize, usize, usize) -> f64) -> Mat {
    let (fs, fd) = (layout.f_static(), layout.f_dynamic());
    let mut m = Mat::zeros(n, fs + 2 * fd);
    for r in 0..n {
        let row = m.row_mut(r);
        for f in 0..fs {
            row[f] = get(r, 0, f);
        }
        for f in 0..fd {
            row[fs + f] = get(r, w - 1, fs + f);
            row[fs + fd + f] = (0..w).map(|t| get(r, t, fs + f)).sum::<f64>() / w as f64;
        }
    }
    m
}

/// Query features `|Q| × query_dim`.
pub fn query_features(sample: &TrafficSample, layout: &FeatureLayout) -> Mat {
    context_rows(sample.n_query(), sample.window(), layout, |q, t, f| sample.query(q, t, f))
}

/// Observation sensors presented as queries: the same features with the
/// traffic channels left out.
pub fn observation_query_features(sample: &TrafficSample, layout: &FeatureLayout) -> Mat {
    let off = layout.static_offset();
    context_rows(sample.n_obs(), sample.window(), layout, |s, t, f| sample.obs(s, t, off + f))
}

/// Window means of the environmental features, `rows × 3`.
fn env_rows(n: usize, w: usize, idx: &[usize], get: impl Fn(usize, usize, usize) -> f64) -> Mat {
    let mut m = Mat::zeros(n, idx.len());
    for r in 0..n {
        for (k, &f) in idx.iter().enumerate() {
            m[(r, k)] = (0..w).map(|t| get(r, t, f)).sum::<f64>() / w as f64;
        }
    }
    m
}

pub fn observation_env_summary(sample: &TrafficSample, layout: &FeatureLayout) -> Mat {
    let off = layout.dynamic_offset();
    let idx: Vec<usize> = layout.environmental_dynamic_indices().iter().map(|i| off + i).collect();
    env_rows(sample.n_obs(), sample.window(), &idx, |s, t, f| sample.obs(s, t, f))
}

pub fn query_env_summary(sample: &TrafficSample, layout: &FeatureLayout) -> Mat {
    let off = layout.dynamic_offset() - layout.static_offset();
    let idx: Vec<usize> = layout.environmental_dynamic_indices().iter().map(|i| off + i).collect();
    env_rows(sample.n_query(), sample.window(), &idx, |q, t, f| sample.query(q, t, f))
}

/// Observed traffic over the last `H` window steps, `S × 2H`, with its mask.
pub fn observation_targets(sample: &TrafficSample) -> (Mat, Vec<f64>) {
    let (s_n, w, h) = (sample.n_obs(), sample.window(), sample.horizon());
    let mut y = Mat::zeros(s_n, 2 * h);
    let mut mask = vec![0.0; s_n * 2 * h];
    for s in 0..s_n {
        for k in 0..h {
            let t = w - h + k;
            if sample.obs_valid(s, t) {
                for c in 0..2 {
                    y[(s, 2 * k + c)] = sample.obs(s, t, c);
                    mask[s * 2 * h + 2 * k + c] = 1.0;
                }
            }
        }
    }
    (y, mask)
}

/// Query targets `|Q| × 2H` with a per-entry mask.
pub fn query_targets(sample: &TrafficSample) -> (Mat, Vec<f64>) {
    let (q_n, h) = (sample.n_query(), sample.horizon());
    let y = Mat::from_vec(q_n, 2 * h, sample.y_target.clone());
    let mask = sample.target_mask.iter().flat_map(|&m| [f64::from(m); 2]).collect();
    (y, mask)
}

/// `MLP([q; A_q Z; A_q Z'; g])` for every query; output `|Q| × 2H` with
/// column `2h + c` holding channel `c` at horizon step `h`.
#[allow(clippy::too_many_arguments)]
pub fn infer(tape: &mut Tape, store: &ParamStore, mlp: &Mlp, q: Var, a_q: Var, z: Var, z_post: Var, g: Var) -> Var {
    let n_q = tape.shape(q).0;
    let az = tape.matmul(a_q, z);
    let azp = tape.matmul(a_q, z_post);
    let gb = tape.broadcast_rows(g, n_q);
    let x = tape.concat_cols(&[q, az, azp, gb]);
    mlp.forward(tape, store, x)
}

/// Mean squared error over mask-true entries.
pub fn loss_query(pred: &Mat, target: &Mat, mask: &[f64]) -> Result<f64> {
    let n: f64 = mask.iter().sum();
    if n == 0.0 {
        return Err(Error::NoSupervisedTargets);
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .zip(mask)
        .map(|((p, y), m)| m * (p - y) * (p - y))
        .sum();
    Ok(s / n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMetrics {
    pub feature: String,
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    /// Entries scored for MAE and RMSE.
    pub n: usize,
    /// Entries additionally scored for MAPE.
    pub n_mape: usize,
    pub n_masked: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub split: String,
    pub mode: Mode,
    pub horizon: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub query_ratio: Option<f64>,
    pub features: Vec<FeatureMetrics>,
}

impl MetricReport {
    pub fn feature(&self, name: &str) -> Option<&FeatureMetrics> {
        self.features.iter().find(|f| f.feature == name)
    }

    pub fn mae(&self, name: &str) -> f64 {
        self.feature(name).map_or(f64::NAN, |f| f.mae)
    }
}

/// Streaming accumulator over raw-unit (prediction, target, valid) triples.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    eps_mape: f64,
    abs: [f64; 2],
    sq: [f64; 2],
    ape: [f64; 2],
    n: [usize; 2],
    n_mape: [usize; 2],
    n_masked: [usize; 2],
}

impl MetricAccumulator {
    pub fn new(eps_mape: f64) -> Self {
        Self {
            eps_mape,
            abs: [0.0; 2],
            sq: [0.0; 2],
            ape: [0.0; 2],
            n: [0; 2],
            n_mape: [0; 2],
            n_masked: [0; 2],
        }
    }

    pub fn push(&mut self, channel: usize, pred: f64, target: f64, valid: bool) {
        if !valid {
            self.n_masked[channel] += 1;
            return;
        }
        let e = pred - target;
        self.abs[channel] += e.abs();
        self.sq[channel] += e * e;
        self.n[channel] += 1;
        if target.abs() >= self.eps_mape {
            self.ape[channel] += (e / target).abs();
            self.n_mape[channel] += 1;
        }
    }

    /// Adds predictions `|Q| × 2H` against a sample's raw targets.
    pub fn push_sample(&mut self, pred: &Mat, sample: &TrafficSample) {
        for q in 0..sample.n_query() {
            for h in 0..sample.horizon() {
                let valid = sample.target_valid(q, h);
                for c in 0..2 {
                    self.push(c, pred[(q, 2 * h + c)], sample.target(q, h, c), valid);
                }
            }
        }
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        for c in 0..2 {
            self.abs[c] += other.abs[c];
            self.sq[c] += other.sq[c];
            self.ape[c] += other.ape[c];
            self.n[c] += other.n[c];
            self.n_mape[c] += other.n_mape[c];
            self.n_masked[c] += other.n_masked[c];
        }
    }

    pub fn finish(&self, model: &str, split: &str, mode: Mode, horizon: usize) -> MetricReport {
        let div = |a: f64, n: usize| if n == 0 { f64::NAN } else { a / n as f64 };
        MetricReport {
            model: model.into(),
            split: split.into(),
            mode,
            horizon,
            query_ratio: None,
            features: (0..2)
                .map(|c| FeatureMetrics {
                    feature: TRAFFIC_NAMES[c].into(),
                    mae: div(self.abs[c], self.n[c]),
                    rmse: div(self.sq[c], self.n[c]).sqrt(),
                    mape: 100.0 * div(self.ape[c], self.n_mape[c]),
                    n: self.n[c],
                    n_mape: self.n_mape[c],
                    n_masked: self.n_masked[c],
                })
                .collect(),
        }
    }
}

/// Single-channel metrics over flat slices.
pub fn metrics(pred: &[f64], target: &[f64], mask: &[bool], eps_mape: f64) -> FeatureMetrics {
    let mut acc = MetricAccumulator::new(eps_mape);
    for ((&p, &y), &m) in pred.iter().zip(target).zip(mask) {
        acc.push(0, p, y, m);
    }
    acc.finish("", "", Mode::Reconstruct, 0).features.remove(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn loss_examples() {
        let y = Mat::from_rows(&[vec![1.0, 2.0]]);
        assert_eq!(loss_query(&y, &y, &[1.0, 1.0]).unwrap(), 0.0);
        let p = Mat::from_rows(&[vec![2.0, 3.0]]);
        assert_eq!(loss_query(&p, &y, &[1.0, 1.0]).unwrap(), 1.0);
        let p = Mat::from_rows(&[vec![2.0, -1.0]]);
        assert_eq!(loss_query(&p, &y, &[1.0, 1.0]).unwrap(), 5.0);
        assert!(matches!(loss_query(&p, &y, &[0.0, 0.0]), Err(Error::NoSupervisedTargets)));
    }

    #[test]
    fn metric_examples() {
        let m = metrics(&[3.0, 4.0], &[0.0, 0.0], &[true, true], EPS_MAPE);
        assert_eq!(m.mae, 3.5);
        assert!((m.rmse - 12.5f64.sqrt()).abs() < 1e-15);
        assert!((m.rmse - 3.5355).abs() < 1e-4);
        // y = 0 entries count for MAE but not MAPE
        assert_eq!(m.n_mape, 0);
        let m = metrics(&[10.0, 20.0], &[10.0, 20.0], &[true, true], EPS_MAPE);
        assert_eq!((m.mae, m.rmse, m.mape), (0.0, 0.0, 0.0));
        let m = metrics(&[11.0, 5.0, 100.0], &[10.0, 0.5, 0.0], &[true, true, false], EPS_MAPE);
        assert_eq!(m.n, 2);
        assert_eq!(m.n_mape, 1);
        assert_eq!(m.n_masked, 1);
        assert!((m.mape - 10.0).abs() < 1e-12);
    }

    #[test]
    fn zero_head_weights_return_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "head", 2 + 1 + 1 + 2, 3, 4, &mut rng);
        for id in [mlp.l1.w, mlp.l2.w] {
            let m = store.get_mut(id);
            *m = Mat::zeros(m.rows(), m.cols());
        }
        store.get_mut(mlp.l2.b).data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let mut t = Tape::new();
        let q = t.constant(Mat::from_rows(&[vec![1.0, 2.0], vec![-5.0, 0.0]]));
        let aq = t.constant(Mat::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]]));
        let z = t.constant(Mat::from_rows(&[vec![1.0], vec![2.0]]));
        let g = t.constant(Mat::row_vector(&[0.3, 0.1]));
        let y = infer(&mut t, &store, &mlp, q, aq, z, z, g);
        assert_eq!(t.value(y).row(0), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.value(y).row(1), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn one_query_toy_matches_hand_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        // input [q (1); A_qZ (1); A_qZ' (1); g (2)] = 5, hidden 1, output 2
        let mlp = Mlp::new(&mut store, "head", 5, 1, 2, &mut rng);
        store.get_mut(mlp.l1.w).data_mut().copy_from_slice(&[1.0, -1.0, 0.5, 2.0, 0.0]);
        store.get_mut(mlp.l1.b).data_mut().copy_from_slice(&[0.2]);
        store.get_mut(mlp.l2.w).data_mut().copy_from_slice(&[2.0, -3.0]);
        store.get_mut(mlp.l2.b).data_mut().copy_from_slice(&[0.1, 0.0]);
        let mut t = Tape::new();
        let q = t.constant(Mat::row_vector(&[0.7]));
        let aq = t.constant(Mat::row_vector(&[0.5, 1.0]));
        let z = t.constant(Mat::from_rows(&[vec![2.0], vec![-1.0]]));
        let zp = t.constant(Mat::from_rows(&[vec![4.0], vec![1.0]]));
        let g = t.constant(Mat::row_vector(&[0.25, 9.0]));
        let y = infer(&mut t, &store, &mlp, q, aq, z, zp, g);
        let az = 0.5 * 2.0 + 1.0 * -1.0;
        let azp = 0.5 * 4.0 + 1.0 * 1.0;
        let h = (0.7 - az + 0.5 * azp + 2.0 * 0.25 + 0.2f64).tanh();
        let expect = [2.0 * h + 0.1, -3.0 * h];
        for (a, b) in t.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
