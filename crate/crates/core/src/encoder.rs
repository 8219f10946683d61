//! Per-sensor window encoder: dynamic context, static context, traffic, fusion.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::datamodel::{FeatureLayout, TrafficSample};
use crate::error::{Error, Result};
use crate::layers::{Gru, Mlp};
use crate::params::ParamStore;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub d_d: usize,
    pub d_c: usize,
    pub d_t: usize,
    pub d_e: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub dyn_gru: Gru,
    pub ctx_mlp: Mlp,
    pub traffic_gru: Gru,
    pub fuse_mlp: Mlp,
}

/// Encoder inputs of one window, one matrix per timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInputs {
    /// `W` matrices of `S × F_dynamic`.
    pub dynamic: Vec<Mat>,
    /// `S × F_static`.
    pub statics: Mat,
    /// `W` matrices of `S × 3`: speed, flow, mask. Masked traffic is zero.
    pub traffic: Vec<Mat>,
}

impl EncoderInputs {
    pub fn from_sample(sample: &TrafficSample, layout: &FeatureLayout) -> Self {
        let (s_n, w) = (sample.n_obs(), sample.window());
        let (so, fs) = (layout.static_offset(), layout.f_static());
        let (d_o, fd) = (layout.dynamic_offset(), layout.f_dynamic());
        let mut dynamic = Vec::with_capacity(w);
        let mut traffic = Vec::with_capacity(w);
        for t in 0..w {
            let mut dm = Mat::zeros(s_n, fd);
            let mut tm = Mat::zeros(s_n, 3);
            for s in 0..s_n {
                for f in 0..fd {
                    dm[(s, f)] = sample.obs(s, t, d_o + f);
                }
                if sample.obs_valid(s, t) {
                    tm[(s, 0)] = sample.obs(s, t, 0);
                    tm[(s, 1)] = sample.obs(s, t, 1);
                    tm[(s, 2)] = 1.0;
                }
            }
            dynamic.push(dm);
            traffic.push(tm);
        }
        let mut statics = Mat::zeros(s_n, fs);
        if w > 0 {
            for s in 0..s_n {
                for f in 0..fs {
                    statics[(s, f)] = sample.obs(s, 0, so + f);
                }
            }
        }
        Self { dynamic, statics, traffic }
    }

    pub fn n_sensors(&self) -> usize {
        self.statics.rows()
    }
}

/// Intermediate and final embeddings, all `S × dim`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub h_dynamic: Var,
    pub h_context: Var,
    pub h_traffic: Var,
    pub h_obs: Var,
}

impl EncoderParams {
    pub fn new(store: &mut ParamStore, layout: &FeatureLayout, dims: EncoderDims, rng: &mut ChaCha8Rng) -> Self {
        Self {
            dims,
            dyn_gru: Gru::new(store, "encoder.dynamic_gru", layout.f_dynamic(), dims.d_d, rng),
            ctx_mlp: Mlp::new(store, "encoder.context_mlp", dims.d_d + layout.f_static(), dims.d_c, dims.d_c, rng),
            traffic_gru: Gru::new(store, "encoder.traffic_gru", 3, dims.d_t, rng),
            fuse_mlp: Mlp::new(store, "encoder.fuse_mlp", dims.d_t + dims.d_c, dims.d_e, dims.d_e, rng),
        }
    }

    /// Final GRU state over each sensor's dynamic-context series. Sensors with
    /// bit-identical series share one recurrence.
    pub fn embed_dynamic_context(&self, tape: &mut Tape, store: &ParamStore, dynamic: &[Mat]) -> Result<Var> {
        if dynamic.is_empty() {
            return Err(Error::Shape("window length W = 0".into()));
        }
        let s_n = dynamic[0].rows();
        let mut key_of: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut unique: Vec<usize> = Vec::new();
        let mut map = Vec::with_capacity(s_n);
        for s in 0..s_n {
            let key: Vec<u64> = dynamic.iter().flat_map(|m| m.row(s).iter().map(|v| v.to_bits())).collect();
            let next = unique.len();
            let u = *key_of.entry(key).or_insert(next);
            if u == next {
                unique.push(s);
            }
            map.push(u);
        }
        let steps: Vec<Var> = dynamic.iter().map(|m| tape.constant(m.gather_rows(&unique))).collect();
        let h = self.dyn_gru.run(tape, store, &steps);
        if unique.len() == s_n {
            Ok(h)
        } else {
            Ok(tape.gather_rows(h, map))
        }
    }

    pub fn embed_context(&self, tape: &mut Tape, store: &ParamStore, h_dynamic: Var, statics: &Mat) -> Result<Var> {
        if tape.shape(h_dynamic).0 != statics.rows() {
            return Err(Error::Shape("context rows differ from dynamic rows".into()));
        }
        let x = tape.constant(statics.clone());
        let cat = tape.concat_cols(&[h_dynamic, x]);
        Ok(self.ctx_mlp.forward(tape, store, cat))
    }

    pub fn embed_traffic(&self, tape: &mut Tape, store: &ParamStore, traffic: &[Mat]) -> Result<Var> {
        if traffic.is_empty() {
            return Err(Error::Shape("window length W = 0".into()));
        }
        let steps: Vec<Var> = traffic.iter().map(|m| tape.constant(m.clone())).collect();
        Ok(self.traffic_gru.run(tape, store, &steps))
    }

    pub fn fuse(&self, tape: &mut Tape, store: &ParamStore, h_traffic: Var, h_context: Var) -> Result<Var> {
        if tape.shape(h_traffic).0 != tape.shape(h_context).0 {
            return Err(Error::Shape("traffic rows differ from context rows".into()));
        }
        let cat = tape.concat_cols(&[h_traffic, h_context]);
        Ok(self.fuse_mlp.forward(tape, store, cat))
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, inputs: &EncoderInputs) -> Result<EncoderOutput> {
        let h_dynamic = self.embed_dynamic_context(tape, store, &inputs.dynamic)?;
        let h_context = self.embed_context(tape, store, h_dynamic, &inputs.statics)?;
        let h_traffic = self.embed_traffic(tape, store, &inputs.traffic)?;
        let h_obs = self.fuse(tape, store, h_traffic, h_context)?;
        Ok(EncoderOutput {
            h_dynamic,
            h_context,
            h_traffic,
            h_obs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamId;
    use rand::SeedableRng;

    fn small() -> (ParamStore, EncoderParams, FeatureLayout) {
        let layout = FeatureLayout::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let dims = EncoderDims {
            d_d: 3,
            d_c: 4,
            d_t: 2,
            d_e: 5,
        };
        let enc = EncoderParams::new(&mut store, &layout, dims, &mut rng);
        (store, enc, layout)
    }

    fn inputs(s_n: usize, w: usize, seed: u64) -> EncoderInputs {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |r: usize, c: usize| Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect());
        let dynamic = (0..w).map(|_| m(s_n, 12)).collect();
        let statics = m(s_n, 12);
        let traffic = (0..w).map(|_| m(s_n, 3)).collect();
        EncoderInputs { dynamic, statics, traffic }
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// One GRU step from a zero state, evaluated entry by entry.
    fn hand_gru(x: &[f64], w: &Mat, bx: &[f64], bh: &[f64], hd: usize) -> Vec<f64> {
        (0..hd)
            .map(|j| {
                let gx = |g: usize| x.iter().enumerate().map(|(i, xi)| xi * w[(i, g * hd + j)]).sum::<f64>() + bx[g * hd + j];
                let r = sigmoid(gx(0) + bh[j]);
                let z = sigmoid(gx(1) + bh[hd + j]);
                let n = (gx(2) + r * bh[2 * hd + j]).tanh();
                (1.0 - z) * n
            })
            .collect()
    }

    fn randomize_biases(store: &mut ParamStore, ids: &[ParamId]) {
        for (k, id) in ids.iter().enumerate() {
            for (i, v) in store.get_mut(*id).data_mut().iter_mut().enumerate() {
                *v = 0.1 * ((k * 7 + i) as f64).sin();
            }
        }
    }

    #[test]
    fn single_step_traffic_gru_matches_hand_cell() {
        let (mut store, enc, _) = small();
        let g = enc.traffic_gru;
        randomize_biases(&mut store, &[g.bx, g.bh]);
        let x = vec![0.4, -1.2, 1.0];
        let mut tape = Tape::new();
        let h = enc.embed_traffic(&mut tape, &store, &[Mat::from_vec(1, 3, x.clone())]).unwrap();
        let expect = hand_gru(&x, store.get(g.w), store.get(g.bx).data(), store.get(g.bh).data(), 2);
        for (a, b) in tape.value(h).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_step_dynamic_gru_matches_hand_cell() {
        let (mut store, enc, _) = small();
        let g = enc.dyn_gru;
        randomize_biases(&mut store, &[g.bx, g.bh]);
        let inp = inputs(2, 1, 5);
        let mut tape = Tape::new();
        let h = enc.embed_dynamic_context(&mut tape, &store, &inp.dynamic).unwrap();
        for s in 0..2 {
            let expect = hand_gru(inp.dynamic[0].row(s), store.get(g.w), store.get(g.bx).data(), store.get(g.bh).data(), 3);
            for (j, e) in expect.iter().enumerate() {
                assert!((tape.value(h)[(s, j)] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mlp_toy_matches_hand_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", 2, 2, 1, &mut rng);
        store.get_mut(mlp.l1.w).data_mut().copy_from_slice(&[1.0, -1.0, 0.5, 2.0]);
        store.get_mut(mlp.l1.b).data_mut().copy_from_slice(&[0.1, 0.0]);
        store.get_mut(mlp.l2.w).data_mut().copy_from_slice(&[3.0, -2.0]);
        store.get_mut(mlp.l2.b).data_mut().copy_from_slice(&[0.5]);
        let mut tape = Tape::new();
        let x = tape.constant(Mat::row_vector(&[0.2, -0.4]));
        let y = mlp.forward(&mut tape, &store, x);
        let h0 = (0.2 * 1.0 + -0.4 * 0.5 + 0.1f64).tanh();
        let h1 = (0.2 * -1.0 + -0.4 * 2.0f64).tanh();
        assert!((tape.value(y).item() - (3.0 * h0 - 2.0 * h1 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn identity_single_layer_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lin = crate::layers::Linear::new(&mut store, "id", 3, 3, &mut rng);
        *store.get_mut(lin.w) = Mat::identity(3);
        let mut tape = Tape::new();
        let x = Mat::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 3.0, 4.0]]);
        let xv = tape.constant(x.clone());
        let y = lin.forward(&mut tape, &store, xv);
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn zero_fuse_weights_give_zero_output() {
        let (mut store, enc, _) = small();
        for id in [enc.fuse_mlp.l1.w, enc.fuse_mlp.l2.w] {
            let m = store.get_mut(id);
            *m = Mat::zeros(m.rows(), m.cols());
        }
        let mut tape = Tape::new();
        let out = enc.encode(&mut tape, &store, &inputs(3, 4, 2)).unwrap();
        assert!(tape.value(out.h_obs).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shapes_and_per_sensor_locality() {
        let (store, enc, _) = small();
        let base = inputs(4, 3, 9);
        let mut tape = Tape::new();
        let out = enc.encode(&mut tape, &store, &base).unwrap();
        assert_eq!(tape.shape(out.h_dynamic), (4, 3));
        assert_eq!(tape.shape(out.h_context), (4, 4));
        assert_eq!(tape.shape(out.h_traffic), (4, 2));
        assert_eq!(tape.shape(out.h_obs), (4, 5));
        let mut changed = base.clone();
        changed.traffic[1][(2, 0)] += 1.0;
        changed.dynamic[0][(2, 3)] -= 0.5;
        changed.statics[(2, 1)] = 7.0;
        let mut t2 = Tape::new();
        let out2 = enc.encode(&mut t2, &store, &changed).unwrap();
        for v in [(out.h_dynamic, out2.h_dynamic), (out.h_context, out2.h_context), (out.h_traffic, out2.h_traffic), (out.h_obs, out2.h_obs)] {
            let (a, b) = (tape.value(v.0), t2.value(v.1));
            for s in 0..4 {
                assert_eq!(a.row(s) == b.row(s), s != 2);
            }
        }
    }

    #[test]
    fn permuting_sensors_permutes_rows() {
        let (store, enc, _) = small();
        let base = inputs(3, 2, 4);
        let perm = [2, 0, 1];
        let permuted = EncoderInputs {
            dynamic: base.dynamic.iter().map(|m| m.gather_rows(&perm)).collect(),
            statics: base.statics.gather_rows(&perm),
            traffic: base.traffic.iter().map(|m| m.gather_rows(&perm)).collect(),
        };
        let mut t1 = Tape::new();
        let a = enc.encode(&mut t1, &store, &base).unwrap().h_obs;
        let mut t2 = Tape::new();
        let b = enc.encode(&mut t2, &store, &permuted).unwrap().h_obs;
        assert_eq!(t1.value(a).gather_rows(&perm), *t2.value(b));
    }

    #[test]
    fn shared_dynamic_series_equal_separate_runs() {
        let (store, enc, _) = small();
        let mut inp = inputs(3, 3, 8);
        for m in inp.dynamic.iter_mut() {
            let r0 = m.row(0).to_vec();
            m.row_mut(2).copy_from_slice(&r0);
        }
        let mut t = Tape::new();
        let h = enc.embed_dynamic_context(&mut t, &store, &inp.dynamic).unwrap();
        let mut t2 = Tape::new();
        let single: Vec<Mat> = inp.dynamic.iter().map(|m| m.gather_rows(&[2])).collect();
        let h2 = enc.embed_dynamic_context(&mut t2, &store, &single).unwrap();
        assert_eq!(t.value(h).row(2), t2.value(h2).row(0));
        assert_eq!(t.value(h).row(0), t.value(h).row(2));
    }

    #[test]
    fn fully_masked_sensor_is_finite_and_deterministic() {
        let (store, enc, _) = small();
        let mut inp = inputs(2, 4, 3);
        for m in inp.traffic.iter_mut() {
            m.row_mut(1).fill(0.0);
        }
        let mut t1 = Tape::new();
        let a = enc.encode(&mut t1, &store, &inp).unwrap();
        let mut t2 = Tape::new();
        let b = enc.encode(&mut t2, &store, &inp).unwrap();
        assert!(t1.value(a.h_obs).is_finite());
        assert_eq!(t1.value(a.h_obs), t2.value(b.h_obs));
    }

    #[test]
    fn empty_window_is_an_error() {
        let (store, enc, _) = small();
        let mut tape = Tape::new();
        assert!(enc.embed_dynamic_context(&mut tape, &store, &[]).is_err());
        assert!(enc.embed_traffic(&mut tape, &store, &[]).is_err());
    }
}
