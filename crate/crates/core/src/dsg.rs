//! Per-window deep state graph: node states, the long-short Laplacian,
//! residual graph convolution and type-wise pooling.

use std::ops::Range;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::layers::Mlp;
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DsgDims {
    pub n_nodes: usize,
    pub d_z: usize,
    pub k: usize,
    pub e: usize,
    pub heads: usize,
    pub d_id: usize,
    pub n_layers: usize,
    pub prune_k: f64,
    /// Softplus in place of relu, for finite-difference checks.
    pub smooth: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DsgParams {
    pub dims: DsgDims,
    pub identity: ParamId,
    pub init_mlp: Mlp,
    pub attn_q: Vec<ParamId>,
    pub attn_k: Vec<ParamId>,
    pub e_s: ParamId,
    pub e_t: ParamId,
    pub alpha_raw: ParamId,
    pub gcn_w: Vec<ParamId>,
    /// Residual projection for the last layer when `k != d_z`.
    pub gcn_proj: Option<ParamId>,
}

/// Graph-level outputs of one window.
#[derive(Clone, Debug)]
pub struct Pooled {
    pub g: Var,
    /// One `1 × 2k` vector per node type, in registry order.
    pub per_type: Vec<Var>,
    /// Types without nodes, which pool to zero.
    pub empty_types: Vec<usize>,
}

impl DsgParams {
    pub fn new(store: &mut ParamStore, dims: DsgDims, global_len: usize, rng: &mut ChaCha8Rng) -> Self {
        let n = dims.n_nodes;
        let d_h = head_dim(dims.d_z, dims.heads);
        let attn_q = (0..dims.heads)
            .map(|h| store.add(&format!("dsg.attn.q{h}"), dims.d_z, d_h, Init::Xavier, rng))
            .collect();
        let attn_k = (0..dims.heads)
            .map(|h| store.add(&format!("dsg.attn.k{h}"), dims.d_z, d_h, Init::Xavier, rng))
            .collect();
        let identity = store.add("dsg.identity", n, dims.d_id, Init::Normal(1.0), rng);
        let init_mlp = Mlp::new(store, "dsg.init_mlp", global_len + dims.d_id, dims.d_z, dims.d_z, rng);
        let e_s = store.add("dsg.e_s", n, dims.e, Init::Normal(0.5), rng);
        let e_t = store.add("dsg.e_t", n, dims.e, Init::Normal(0.5), rng);
        let alpha_raw = store.add("dsg.alpha_raw", 1, 1, Init::Zeros, rng);
        let gcn_w = (0..dims.n_layers)
            .map(|l| {
                let out = if l + 1 == dims.n_layers { dims.k } else { dims.d_z };
                store.add(&format!("dsg.gcn.w{l}"), dims.d_z, out, Init::Normal(0.1 / (dims.d_z as f64).sqrt()), rng)
            })
            .collect();
        let gcn_proj = (dims.k != dims.d_z).then(|| store.add("dsg.gcn.proj", dims.d_z, dims.k, Init::Xavier, rng));
        Self {
            dims,
            identity,
            init_mlp,
            attn_q,
            attn_k,
            e_s,
            e_t,
            alpha_raw,
            gcn_w,
            gcn_proj,
        }
    }

    /// `z_i = MLP([global_context; e_i])` for every node.
    pub fn init_states(&self, tape: &mut Tape, store: &ParamStore, global_context: &[f64]) -> Var {
        let gc = tape.constant(Mat::row_vector(global_context));
        let gc = tape.broadcast_rows(gc, self.dims.n_nodes);
        let ids = tape.param(store, self.identity);
        let x = tape.concat_cols(&[gc, ids]);
        self.init_mlp.forward(tape, store, x)
    }

    pub fn short_term_laplacian(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Var {
        let qs: Vec<Var> = self.attn_q.iter().map(|&p| tape.param(store, p)).collect();
        let ks: Vec<Var> = self.attn_k.iter().map(|&p| tape.param(store, p)).collect();
        attention_weights(tape, z, &qs, &ks)
    }

    pub fn long_term_laplacian(&self, tape: &mut Tape, store: &ParamStore) -> Var {
        let es = tape.param(store, self.e_s);
        let et = tape.param(store, self.e_t);
        long_term_laplacian(tape, es, et, self.dims.smooth)
    }

    pub fn laplacian(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Var {
        let ls = self.short_term_laplacian(tape, store, z);
        let ll = self.long_term_laplacian(tape, store);
        let a = tape.param(store, self.alpha_raw);
        combine_and_prune(tape, ls, ll, a, self.dims.prune_k)
    }

    pub fn graph_convolve(&self, tape: &mut Tape, store: &ParamStore, z: Var, l: Var) -> Var {
        let mut h = z;
        for (i, &w) in self.gcn_w.iter().enumerate() {
            let w = tape.param(store, w);
            let last = i + 1 == self.gcn_w.len();
            let residual = match (last, self.gcn_proj) {
                (true, Some(p)) => {
                    let p = tape.param(store, p);
                    tape.matmul(h, p)
                }
                _ => h,
            };
            h = gcn_layer(tape, h, residual, l, w, self.dims.smooth);
        }
        h
    }

    /// Stand-in for the convolution when it is disabled: `Z` itself, or its
    /// residual projection when `k != d_z`.
    pub fn skip_convolve(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Var {
        match self.gcn_proj {
            Some(p) => {
                let p = tape.param(store, p);
                tape.matmul(z, p)
            }
            None => z,
        }
    }
}

pub fn head_dim(d_z: usize, heads: usize) -> usize {
    (d_z / heads.max(1)).max(1)
}

/// `Z = Z0 + ΔZ` where `Δz_i` is the mean over `S_i = {j : A[i,j] > 0}` of
/// `A[i,j] · H[j]`, and zero for an empty `S_i`.
pub fn update_states(tape: &mut Tape, z0: Var, a: Var, h_obs: Var) -> Var {
    let am = tape.value(a);
    let factors: Vec<f64> = (0..am.rows())
        .map(|i| {
            let n = am.row(i).iter().filter(|&&v| v > 0.0).count();
            if n == 0 {
                0.0
            } else {
                1.0 / n as f64
            }
        })
        .collect();
    let scaled = tape.row_scale(a, factors);
    let dz = tape.matmul(scaled, h_obs);
    tape.add(z0, dz)
}

/// Head-averaged scaled dot-product attention weights of `z` against itself.
pub fn attention_weights(tape: &mut Tape, z: Var, qs: &[Var], ks: &[Var]) -> Var {
    let mut acc: Option<Var> = None;
    for (&wq, &wk) in qs.iter().zip(ks) {
        let d_h = tape.shape(wq).1 as f64;
        let q = tape.matmul(z, wq);
        let k = tape.matmul(z, wk);
        let s = tape.matmul_nt(q, k);
        let s = tape.scale(s, 1.0 / d_h.sqrt());
        let p = tape.softmax_rows(s);
        acc = Some(match acc {
            Some(a) => tape.add(a, p),
            None => p,
        });
    }
    let acc = acc.expect("at least one attention head");
    tape.scale(acc, 1.0 / qs.len() as f64)
}

/// `softmax_rows(relu(E_s E_tᵀ))`.
pub fn long_term_laplacian(tape: &mut Tape, es: Var, et: Var, smooth: bool) -> Var {
    let p = tape.matmul_nt(es, et);
    let p = if smooth { tape.softplus(p) } else { tape.relu(p) };
    tape.softmax_rows(p)
}

/// Zero-mask dropping the `⌊K·n⌋` smallest entries; ties go to the lowest
/// flat (row, col) index first.
pub fn prune_mask(l: &Mat, prune_k: f64) -> Vec<f64> {
    let n = l.len();
    let drop = (prune_k * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| l.data()[a].total_cmp(&l.data()[b]).then(a.cmp(&b)));
    let mut mask = vec![1.0; n];
    for &i in &order[..drop.min(n)] {
        mask[i] = 0.0;
    }
    mask
}

/// `α L_s + (1 − α) L_l` with `α = sigmoid(alpha_raw)`, then pruned.
pub fn combine_and_prune(tape: &mut Tape, ls: Var, ll: Var, alpha_raw: Var, prune_k: f64) -> Var {
    let a = tape.sigmoid(alpha_raw);
    let one_minus = tape.affine(a, -1.0, 1.0);
    let s = tape.scale_by(ls, a);
    let t = tape.scale_by(ll, one_minus);
    let l = tape.add(s, t);
    let mask = prune_mask(tape.value(l), prune_k);
    tape.mask(l, mask)
}

/// One residual layer: `act(L Z W) + residual`.
pub fn gcn_layer(tape: &mut Tape, z: Var, residual: Var, l: Var, w: Var, smooth: bool) -> Var {
    let lz = tape.matmul(l, z);
    let m = tape.matmul(lz, w);
    let m = if smooth { tape.softplus(m) } else { tape.relu(m) };
    tape.add(m, residual)
}

/// `p_t = [mean; max]` over each type's rows, `g` the mean of the `p_t`.
pub fn pool(tape: &mut Tape, z_post: Var, ranges: &[Range<usize>]) -> Pooled {
    let k = tape.shape(z_post).1;
    let mut per_type = Vec::with_capacity(ranges.len());
    let mut empty_types = Vec::new();
    for (t, r) in ranges.iter().enumerate() {
        let p = if r.is_empty() {
            empty_types.push(t);
            tape.constant(Mat::zeros(1, 2 * k))
        } else {
            let rows = tape.slice_rows(z_post, r.start, r.end);
            let mean = tape.mean_rows(rows);
            let max = tape.max_rows(rows);
            tape.concat_cols(&[mean, max])
        };
        per_type.push(p);
    }
    let mut g = per_type[0];
    for &p in &per_type[1..] {
        g = tape.add(g, p);
    }
    let g = tape.scale(g, 1.0 / ranges.len() as f64);
    Pooled { g, per_type, empty_types }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn close(a: &Mat, b: &Mat, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        assert!(a.max_abs_diff(b) < tol, "{a:?} vs {b:?}");
    }

    fn c(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        tape.constant(Mat::from_rows(rows))
    }

    fn dims(n: usize) -> DsgDims {
        DsgDims {
            n_nodes: n,
            d_z: 4,
            k: 4,
            e: 3,
            heads: 2,
            d_id: 2,
            n_layers: 2,
            prune_k: 0.3,
            smooth: false,
        }
    }

    #[test]
    fn update_states_examples() {
        let mut t = Tape::new();
        let z0 = c(&mut t, &[vec![0.0, 0.0]]);
        let a = c(&mut t, &[vec![1.0, 1.0]]);
        let h = c(&mut t, &[vec![1.0, 3.0], vec![3.0, 5.0]]);
        let z = update_states(&mut t, z0, a, h);
        assert_eq!(t.value(z), &Mat::from_rows(&[vec![2.0, 4.0]]));

        let z0 = c(&mut t, &[vec![0.0, 0.0], vec![7.0, -1.0]]);
        let a = c(&mut t, &[vec![0.5, 0.0, 1.0], vec![0.0, 0.0, 0.0]]);
        let h = c(&mut t, &[vec![2.0, 2.0], vec![9.0, 9.0], vec![4.0, 4.0]]);
        let z = update_states(&mut t, z0, a, h);
        close(t.value(z), &Mat::from_rows(&[vec![2.5, 2.5], vec![7.0, -1.0]]), 1e-12);
    }

    #[test]
    fn long_term_toy() {
        let mut t = Tape::new();
        let es = c(&mut t, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let et = c(&mut t, &[vec![2.0, 0.0], vec![0.0, 0.0]]);
        let l = long_term_laplacian(&mut t, es, et, false);
        let e2 = 2f64.exp();
        let expect = Mat::from_rows(&[vec![e2 / (e2 + 1.0), 1.0 / (e2 + 1.0)], vec![0.5, 0.5]]);
        close(t.value(l), &expect, 1e-12);
        close(t.value(l), &Mat::from_rows(&[vec![0.8808, 0.1192], vec![0.5, 0.5]]), 1e-4);
    }

    #[test]
    fn long_term_all_negative_is_uniform() {
        let mut t = Tape::new();
        let es = c(&mut t, &[vec![1.0], vec![2.0], vec![0.5]]);
        let et = c(&mut t, &[vec![-1.0], vec![-3.0], vec![-0.1]]);
        let l = long_term_laplacian(&mut t, es, et, false);
        close(t.value(l), &Mat::filled(3, 3, 1.0 / 3.0), 1e-15);
    }

    #[test]
    fn blend_and_prune_examples() {
        let mut t = Tape::new();
        let ls = c(&mut t, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let ll = c(&mut t, &[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let a = c(&mut t, &[vec![0.0]]);
        let l = combine_and_prune(&mut t, ls, ll, a, 0.0);
        close(t.value(l), &Mat::filled(2, 2, 0.5), 1e-15);

        let m = Mat::from_rows(&[vec![0.5, 0.1], vec![0.3, 0.2]]);
        let mask = prune_mask(&m, 0.25);
        assert_eq!(mask, vec![1.0, 0.0, 1.0, 1.0]);

        let a = c(&mut t, &[vec![-20.0]]);
        let ls = c(&mut t, &[vec![0.9, 0.1], vec![0.2, 0.8]]);
        let ll = c(&mut t, &[vec![0.3, 0.7], vec![0.6, 0.4]]);
        let l = combine_and_prune(&mut t, ls, ll, a, 0.0);
        close(t.value(l), &Mat::from_rows(&[vec![0.3, 0.7], vec![0.6, 0.4]]), 1e-8);
    }

    #[test]
    fn prune_ties_are_lexicographic() {
        let m = Mat::from_rows(&[vec![0.2, 0.1], vec![0.1, 0.1]]);
        assert_eq!(prune_mask(&m, 0.5), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn attention_toy_matches_hand_computation() {
        let mut t = Tape::new();
        let z = c(&mut t, &[vec![1.0, 0.0], vec![0.0, 2.0]]);
        let wq = c(&mut t, &[vec![1.0], vec![0.5]]);
        let wk = c(&mut t, &[vec![2.0], vec![1.0]]);
        let l = attention_weights(&mut t, z, &[wq], &[wk]);
        // q = [1, 1], k = [2, 2]; scores = q kᵀ with d_h = 1
        let q = [1.0, 1.0];
        let k = [2.0, 2.0];
        let mut expect = Mat::zeros(2, 2);
        for i in 0..2 {
            let s: Vec<f64> = k.iter().map(|kj| q[i] * kj).collect();
            let den: f64 = s.iter().map(|v| v.exp()).sum();
            for j in 0..2 {
                expect[(i, j)] = s[j].exp() / den;
            }
        }
        close(t.value(l), &expect, 1e-12);

        let z = c(&mut t, &[vec![0.3, -1.0], vec![0.3, -1.0], vec![0.3, -1.0]]);
        let wq2 = c(&mut t, &[vec![1.0], vec![-2.0]]);
        let l = attention_weights(&mut t, z, &[wq, wq2], &[wk, wk]);
        close(t.value(l), &Mat::filled(3, 3, 1.0 / 3.0), 1e-15);
    }

    #[test]
    fn gcn_layer_toy_and_residual_cases() {
        let mut t = Tape::new();
        let z = c(&mut t, &[vec![1.0, -1.0], vec![2.0, 0.5]]);
        let l = c(&mut t, &[vec![0.5, 0.5], vec![0.0, 1.0]]);
        let w = c(&mut t, &[vec![1.0, 0.0], vec![1.0, -1.0]]);
        let out = gcn_layer(&mut t, z, z, l, w, false);
        // L Z = [[1.5, -0.25], [2, 0.5]]; (L Z) W = [[1.25, 0.25], [2.5, -0.5]]
        let expect = Mat::from_rows(&[vec![1.25 + 1.0, 0.25 - 1.0], vec![2.5 + 2.0, 0.0 + 0.5]]);
        close(t.value(out), &expect, 1e-15);

        let zero_l = c(&mut t, &[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let out = gcn_layer(&mut t, z, z, zero_l, w, false);
        assert_eq!(t.value(out), t.value(z));
        let zero_w = c(&mut t, &[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let out = gcn_layer(&mut t, z, z, l, zero_w, false);
        assert_eq!(t.value(out), t.value(z));
    }

    #[test]
    fn pool_examples() {
        let mut t = Tape::new();
        let z = c(&mut t, &[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.0, 5.0], vec![2.0, 2.0]]);
        let p = pool(&mut t, z, &[0..2, 2..4]);
        // type 0: mean [2, 0.5], max [3, 2]; type 1: mean [1, 3.5], max [2, 5]
        let expect = Mat::row_vector(&[1.5, 2.0, 2.5, 3.5]);
        close(t.value(p.g), &expect, 1e-15);

        let v = [0.5, -2.0];
        let z = c(&mut t, &[v.to_vec(), v.to_vec(), v.to_vec()]);
        let p = pool(&mut t, z, &[0..1, 1..2, 2..3]);
        assert_eq!(t.value(p.g), &Mat::row_vector(&[0.5, -2.0, 0.5, -2.0]));
        assert_eq!(t.value(p.per_type[1]), &Mat::row_vector(&[0.5, -2.0, 0.5, -2.0]));

        let p = pool(&mut t, z, &[0..3, 3..3]);
        assert_eq!(p.empty_types, vec![1]);
        assert_eq!(t.value(p.g), &Mat::row_vector(&[0.25, -1.0, 0.25, -1.0]));
    }

    #[test]
    fn init_states_are_distinct_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let p = DsgParams::new(&mut store, dims(5), 9, &mut rng);
        let gc = [0.1; 9];
        let mut t = Tape::new();
        let z = p.init_states(&mut t, &store, &gc);
        let z2 = p.init_states(&mut t, &store, &gc);
        assert_eq!(t.value(z), t.value(z2));
        let zm = t.value(z);
        for i in 0..5 {
            for j in i + 1..5 {
                assert_ne!(zm.row(i), zm.row(j));
            }
        }
    }

    #[test]
    fn init_states_toy_matches_hand_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mut d = dims(2);
        d.d_z = 1;
        d.d_id = 1;
        let p = DsgParams::new(&mut store, d, 1, &mut rng);
        store.get_mut(p.identity).data_mut().copy_from_slice(&[1.0, -1.0]);
        store.get_mut(p.init_mlp.l1.w).data_mut().copy_from_slice(&[0.5, 2.0]);
        store.get_mut(p.init_mlp.l1.b).data_mut().copy_from_slice(&[0.1]);
        store.get_mut(p.init_mlp.l2.w).data_mut().copy_from_slice(&[3.0]);
        store.get_mut(p.init_mlp.l2.b).data_mut().copy_from_slice(&[-1.0]);
        let mut t = Tape::new();
        let z = p.init_states(&mut t, &store, &[0.4]);
        let hand = |e: f64| 3.0 * (0.5 * 0.4 + 2.0 * e + 0.1f64).tanh() - 1.0;
        close(t.value(z), &Mat::from_rows(&[vec![hand(1.0)], vec![hand(-1.0)]]), 1e-12);
    }

    #[test]
    fn laplacian_rows_and_prune_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let p = DsgParams::new(&mut store, dims(7), 9, &mut rng);
        let mut t = Tape::new();
        let z = p.init_states(&mut t, &store, &[0.3; 9]);
        let ll = p.long_term_laplacian(&mut t, &store);
        for r in 0..7 {
            assert!((t.value(ll).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let l = p.laplacian(&mut t, &store, z);
        let nnz = t.value(l).data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nnz, 49 - (0.3f64 * 49.0).floor() as usize);
    }

    #[test]
    fn projection_used_when_k_differs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let mut d = dims(3);
        d.k = 6;
        let p = DsgParams::new(&mut store, d, 9, &mut rng);
        let mut t = Tape::new();
        let z = p.init_states(&mut t, &store, &[0.0; 9]);
        let l = p.laplacian(&mut t, &store, z);
        let zp = p.graph_convolve(&mut t, &store, z, l);
        assert_eq!(t.shape(zp), (3, 6));
        let skip = p.skip_convolve(&mut t, &store, z);
        assert_eq!(t.shape(skip), (3, 6));
    }
}
