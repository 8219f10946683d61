//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] walks the records in reverse and accumulates gradients
//! for the parameter leaves. Selection operations (threshold masks, pruning,
//! max-pooling, relu) treat their selected support as constant, so their
//! gradient is the subgradient of the active branch.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    /// `scale * x + shift`
    Affine(Var, f64),
    ScaleVar(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    BroadcastRows(Var),
    RowScale(Var, Vec<f64>),
    Mask(Var, Vec<f64>),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    SumAll(Var),
    MaskedSqErr(Var, Mat, Vec<f64>),
    Gru(Box<GruRecord>),
    PairGate(Box<PairGateRecord>),
}

struct GruRecord {
    x: Var,
    h: Var,
    w: Var,
    u: Var,
    bx: Var,
    bh: Var,
    r: Mat,
    z: Mat,
    n: Mat,
    ghn: Mat,
}

struct PairGateRecord {
    u: Var,
    v: Var,
    w2: Var,
    b2: Var,
    tanh: Vec<f64>,
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation.
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    param_lookup: HashMap<ParamId, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            params: Vec::new(),
            param_lookup: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same variable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_lookup.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.push((id, v));
        self.param_lookup.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Mat::zeros(va.rows(), vb.cols());
        gemm(1.0, va, false, vb, false, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Mat::zeros(va.rows(), vb.rows());
        gemm(1.0, va, false, vb, true, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulNT(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let va = self.value(a);
        let vr = self.value(row);
        assert_eq!(vr.rows(), 1, "add_row expects a row vector");
        assert_eq!(va.cols(), vr.cols(), "add_row width mismatch");
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).map(|x| scale * x + shift);
        let ng = self.ng(a);
        self.push(out, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// Multiplies `a` by the value of the `1 × 1` variable `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let out = self.value(a).map(|x| x * sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(out, Op::ScaleVar(a, s), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(out, Op::Softplus(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        assert!(start <= end && end <= va.rows(), "slice_rows out of range");
        let out = Mat::from_vec(end - start, va.cols(), va.data()[start * va.cols()..end * va.cols()].to_vec());
        let ng = self.ng(a);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let out = self.value(a).gather_rows(&idx);
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, idx), ng)
    }

    /// Repeats a `1 × c` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows(), 1, "broadcast_rows expects a row vector");
        let mut data = Vec::with_capacity(n * va.cols());
        for _ in 0..n {
            data.extend_from_slice(va.data());
        }
        let out = Mat::from_vec(n, va.cols(), data);
        let ng = self.ng(a);
        self.push(out, Op::BroadcastRows(a), ng)
    }

    /// Multiplies row `i` of `a` by the constant `factors[i]`.
    pub fn row_scale(&mut self, a: Var, factors: Vec<f64>) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(factors.len(), out.rows());
        for (r, f) in factors.iter().enumerate() {
            for v in out.row_mut(r) {
                *v *= f;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::RowScale(a, factors), ng)
    }

    /// Elementwise product with a constant mask (typically 0/1).
    pub fn mask(&mut self, a: Var, mask: Vec<f64>) -> Var {
        let va = self.value(a);
        assert_eq!(mask.len(), va.len());
        let data = va.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Mat::from_vec(va.rows(), va.cols(), data);
        let ng = self.ng(a);
        self.push(out, Op::Mask(a, mask), ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        assert!(va.rows() > 0, "mean_rows of empty matrix");
        let mut out = va.sum_rows();
        out.scale_assign(1.0 / va.rows() as f64);
        let ng = self.ng(a);
        self.push(out, Op::MeanRows(a), ng)
    }

    /// Column-wise maximum; ties resolve to the lowest row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        assert!(va.rows() > 0, "max_rows of empty matrix");
        let mut arg = vec![0usize; va.cols()];
        let mut out = Mat::from_vec(1, va.cols(), va.row(0).to_vec());
        for r in 1..va.rows() {
            for (c, &v) in va.row(r).iter().enumerate() {
                if v > out[(0, c)] {
                    out[(0, c)] = v;
                    arg[c] = r;
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::MaxRows(a, arg), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Mat::scalar(s), Op::SumAll(a), ng)
    }

    /// `Σ mask ⊙ (pred − target)²` as a `1 × 1` value.
    pub fn masked_sq_err(&mut self, pred: Var, target: Mat, mask: Vec<f64>) -> Var {
        let vp = self.value(pred);
        assert_eq!(vp.shape(), target.shape(), "masked_sq_err shape mismatch");
        assert_eq!(mask.len(), vp.len());
        let s: f64 = vp
            .data()
            .iter()
            .zip(target.data())
            .zip(&mask)
            .map(|((p, t), m)| m * (p - t) * (p - t))
            .sum();
        let ng = self.ng(pred);
        self.push(Mat::scalar(s), Op::MaskedSqErr(pred, target, mask), ng)
    }

    /// One GRU step. `x: B×I`, `h: B×H`, `w: I×3H`, `u: H×3H`, biases `1×3H`,
    /// gate blocks ordered reset, update, candidate.
    pub fn gru_cell(&mut self, x: Var, h: Var, w: Var, u: Var, bx: Var, bh: Var) -> Var {
        let (vx, vh) = (self.value(x), self.value(h));
        let (vw, vu) = (self.value(w), self.value(u));
        let hd = vh.cols();
        assert_eq!(vw.cols(), 3 * hd, "gru input weight width");
        assert_eq!(vu.shape(), (hd, 3 * hd), "gru recurrent weight shape");
        let b = vx.rows();
        let mut gx = Mat::zeros(b, 3 * hd);
        gemm(1.0, vx, false, vw, false, 0.0, &mut gx);
        let mut gh = Mat::zeros(b, 3 * hd);
        gemm(1.0, vh, false, vu, false, 0.0, &mut gh);
        let (vbx, vbh) = (self.value(bx).data(), self.value(bh).data());
        let mut r = Mat::zeros(b, hd);
        let mut z = Mat::zeros(b, hd);
        let mut n = Mat::zeros(b, hd);
        let mut ghn = Mat::zeros(b, hd);
        let mut out = Mat::zeros(b, hd);
        for i in 0..b {
            let gxr = gx.row(i);
            let ghr = gh.row(i);
            let hp = vh.row(i);
            for j in 0..hd {
                let rv = sigmoid(gxr[j] + vbx[j] + ghr[j] + vbh[j]);
                let zv = sigmoid(gxr[hd + j] + vbx[hd + j] + ghr[hd + j] + vbh[hd + j]);
                let hn = ghr[2 * hd + j] + vbh[2 * hd + j];
                let nv = (gxr[2 * hd + j] + vbx[2 * hd + j] + rv * hn).tanh();
                r[(i, j)] = rv;
                z[(i, j)] = zv;
                n[(i, j)] = nv;
                ghn[(i, j)] = hn;
                out[(i, j)] = (1.0 - zv) * nv + zv * hp[j];
            }
        }
        let ng = [x, h, w, u, bx, bh].iter().any(|&v| self.ng(v));
        self.push(
            out,
            Op::Gru(Box::new(GruRecord {
                x,
                h,
                w,
                u,
                bx,
                bh,
                r,
                z,
                n,
                ghn,
            })),
            ng,
        )
    }

    /// Pairwise gate: `out[m, s] = σ(Σ_g tanh(u[s,g] + v[m,g]) · w2[g] + b2)`.
    /// `u: S×G`, `v: M×G`, `w2: G×1`, `b2: 1×1`; output `M×S`.
    pub fn pair_gate(&mut self, u: Var, v: Var, w2: Var, b2: Var) -> Var {
        let (vu, vv, vw, vb) = (self.value(u), self.value(v), self.value(w2), self.value(b2));
        let g = vu.cols();
        assert_eq!(vv.cols(), g, "pair_gate hidden width mismatch");
        assert_eq!(vw.shape(), (g, 1), "pair_gate output weight shape");
        let (s_n, m_n) = (vu.rows(), vv.rows());
        let b = vb.item();
        let mut tanh = vec![0.0; m_n * s_n * g];
        let mut out = Mat::zeros(m_n, s_n);
        for m in 0..m_n {
            let vr = vv.row(m);
            for s in 0..s_n {
                let ur = vu.row(s);
                let base = (m * s_n + s) * g;
                let mut acc = b;
                for k in 0..g {
                    let t = (ur[k] + vr[k]).tanh();
                    tanh[base + k] = t;
                    acc += t * vw.data()[k];
                }
                out[(m, s)] = sigmoid(acc);
            }
        }
        let ng = [u, v, w2, b2].iter().any(|&x| self.ng(x));
        self.push(out, Op::PairGate(Box::new(PairGateRecord { u, v, w2, b2, tanh })), ng)
    }

    /// Accumulates `scale · ∂loss/∂θ` into `grads` (indexed like the store).
    pub fn backward_into(&self, loss: Var, scale: f64, grads: &mut [Mat]) {
        let node_grads = self.backward_nodes(loss, scale);
        for &(pid, var) in &self.params {
            if let Some(g) = &node_grads[var.0] {
                grads[pid.0].add_assign(g);
            }
        }
    }

    /// Gradients of `loss` for each parameter leaf on this tape.
    pub fn backward(&self, loss: Var) -> Vec<(ParamId, Mat)> {
        let node_grads = self.backward_nodes(loss, 1.0);
        self.params
            .iter()
            .map(|&(pid, var)| {
                let g = node_grads[var.0]
                    .clone()
                    .unwrap_or_else(|| Mat::zeros(self.value(var).rows(), self.value(var).cols()));
                (pid, g)
            })
            .collect()
    }

    fn backward_nodes(&self, loss: Var, scale: f64) -> Vec<Option<Mat>> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(scale));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Mat>], v: Var, f: impl FnOnce() -> Mat) {
        if self.ng(v) {
            let g = f();
            self.acc(grads, v, g);
        }
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, || {
                    let mut ga = Mat::zeros(va.rows(), va.cols());
                    gemm(1.0, g, false, vb, true, 0.0, &mut ga);
                    ga
                });
                self.acc_with(grads, *b, || {
                    let mut gb = Mat::zeros(vb.rows(), vb.cols());
                    gemm(1.0, va, true, g, false, 0.0, &mut gb);
                    gb
                });
            }
            Op::MatMulNT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, || {
                    let mut ga = Mat::zeros(va.rows(), va.cols());
                    gemm(1.0, g, false, vb, false, 0.0, &mut ga);
                    ga
                });
                self.acc_with(grads, *b, || {
                    let mut gb = Mat::zeros(vb.rows(), vb.cols());
                    gemm(1.0, g, true, va, false, 0.0, &mut gb);
                    gb
                });
            }
            Op::Transpose(a) => self.acc_with(grads, *a, || g.transpose()),
            Op::Add(a, b) => {
                self.acc_with(grads, *a, || g.clone());
                self.acc_with(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *a, || g.clone());
                self.acc_with(grads, *b, || g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                self.acc_with(grads, *a, || g.zip_map(self.value(*b), |x, y| x * y));
                self.acc_with(grads, *b, || g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                self.acc_with(grads, *a, || g.clone());
                self.acc_with(grads, *row, || g.sum_rows());
            }
            Op::Affine(a, s) => self.acc_with(grads, *a, || g.map(|x| x * s)),
            Op::ScaleVar(a, s) => {
                let sv = self.value(*s).item();
                self.acc_with(grads, *a, || g.map(|x| x * sv));
                self.acc_with(grads, *s, || {
                    let d: f64 = g.data().iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum();
                    Mat::scalar(d)
                });
            }
            Op::Sigmoid(a) => self.acc_with(grads, *a, || g.zip_map(out, |x, y| x * y * (1.0 - y))),
            Op::Tanh(a) => self.acc_with(grads, *a, || g.zip_map(out, |x, y| x * (1.0 - y * y))),
            Op::Relu(a) => self.acc_with(grads, *a, || g.zip_map(out, |x, y| if y > 0.0 { x } else { 0.0 })),
            Op::Softplus(a) => self.acc_with(grads, *a, || g.zip_map(self.value(*a), |x, y| x * sigmoid(y))),
            Op::SoftmaxRows(a) => self.acc_with(grads, *a, || {
                let mut ga = Mat::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gy) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for (o, (yv, gv)) in ga.row_mut(r).iter_mut().zip(y.iter().zip(gy)) {
                        *o = yv * (gv - dot);
                    }
                }
                ga
            }),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    self.acc_with(grads, p, || {
                        let mut gp = Mat::zeros(g.rows(), c);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + c]);
                        }
                        gp
                    });
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.value(p).shape();
                    self.acc_with(grads, p, || Mat::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec()));
                    off += r;
                }
            }
            Op::SliceRows(a, start) => self.acc_with(grads, *a, || {
                let va = self.value(*a);
                let mut ga = Mat::zeros(va.rows(), va.cols());
                let c = va.cols();
                ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                ga
            }),
            Op::GatherRows(a, idx) => self.acc_with(grads, *a, || {
                let va = self.value(*a);
                let mut ga = Mat::zeros(va.rows(), va.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                ga
            }),
            Op::BroadcastRows(a) => self.acc_with(grads, *a, || g.sum_rows()),
            Op::RowScale(a, f) => self.acc_with(grads, *a, || {
                let mut ga = g.clone();
                for (r, s) in f.iter().enumerate() {
                    for v in ga.row_mut(r) {
                        *v *= s;
                    }
                }
                ga
            }),
            Op::Mask(a, m) => self.acc_with(grads, *a, || {
                Mat::from_vec(g.rows(), g.cols(), g.data().iter().zip(m).map(|(x, y)| x * y).collect())
            }),
            Op::MeanRows(a) => self.acc_with(grads, *a, || {
                let n = self.value(*a).rows();
                let mut ga = Mat::zeros(n, g.cols());
                for r in 0..n {
                    for (o, v) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *o = v / n as f64;
                    }
                }
                ga
            }),
            Op::MaxRows(a, arg) => self.acc_with(grads, *a, || {
                let va = self.value(*a);
                let mut ga = Mat::zeros(va.rows(), va.cols());
                for (c, &r) in arg.iter().enumerate() {
                    ga[(r, c)] = g[(0, c)];
                }
                ga
            }),
            Op::SumAll(a) => self.acc_with(grads, *a, || {
                let (r, c) = self.value(*a).shape();
                Mat::filled(r, c, g.item())
            }),
            Op::MaskedSqErr(p, t, m) => self.acc_with(grads, *p, || {
                let gv = g.item();
                let vp = self.value(*p);
                let data = vp
                    .data()
                    .iter()
                    .zip(t.data())
                    .zip(m)
                    .map(|((p, t), m)| 2.0 * gv * m * (p - t))
                    .collect();
                Mat::from_vec(vp.rows(), vp.cols(), data)
            }),
            Op::Gru(rec) => self.gru_backward(rec, g, grads),
            Op::PairGate(rec) => self.pair_gate_backward(rec, out, g, grads),
        }
    }

    fn gru_backward(&self, rec: &GruRecord, g: &Mat, grads: &mut [Option<Mat>]) {
        let vh = self.value(rec.h);
        let (b, hd) = vh.shape();
        let mut dgx = Mat::zeros(b, 3 * hd);
        let mut dgh = Mat::zeros(b, 3 * hd);
        let mut dh_direct = Mat::zeros(b, hd);
        for i in 0..b {
            for j in 0..hd {
                let go = g[(i, j)];
                let (r, z, n, hn) = (rec.r[(i, j)], rec.z[(i, j)], rec.n[(i, j)], rec.ghn[(i, j)]);
                let dn = go * (1.0 - z);
                let dz = go * (vh[(i, j)] - n);
                dh_direct[(i, j)] = go * z;
                let dn_pre = dn * (1.0 - n * n);
                let dr_pre = dn_pre * hn * r * (1.0 - r);
                let dz_pre = dz * z * (1.0 - z);
                dgx[(i, j)] = dr_pre;
                dgx[(i, hd + j)] = dz_pre;
                dgx[(i, 2 * hd + j)] = dn_pre;
                dgh[(i, j)] = dr_pre;
                dgh[(i, hd + j)] = dz_pre;
                dgh[(i, 2 * hd + j)] = dn_pre * r;
            }
        }
        let (vx, vw, vu) = (self.value(rec.x), self.value(rec.w), self.value(rec.u));
        self.acc_with(grads, rec.x, || {
            let mut gx = Mat::zeros(vx.rows(), vx.cols());
            gemm(1.0, &dgx, false, vw, true, 0.0, &mut gx);
            gx
        });
        self.acc_with(grads, rec.w, || {
            let mut gw = Mat::zeros(vw.rows(), vw.cols());
            gemm(1.0, vx, true, &dgx, false, 0.0, &mut gw);
            gw
        });
        self.acc_with(grads, rec.bx, || dgx.sum_rows());
        self.acc_with(grads, rec.h, || {
            let mut gh = dh_direct.clone();
            gemm(1.0, &dgh, false, vu, true, 1.0, &mut gh);
            gh
        });
        self.acc_with(grads, rec.u, || {
            let mut gu = Mat::zeros(vu.rows(), vu.cols());
            gemm(1.0, vh, true, &dgh, false, 0.0, &mut gu);
            gu
        });
        self.acc_with(grads, rec.bh, || dgh.sum_rows());
    }

    fn pair_gate_backward(&self, rec: &PairGateRecord, out: &Mat, g: &Mat, grads: &mut [Option<Mat>]) {
        let (vu, vv, vw) = (self.value(rec.u), self.value(rec.v), self.value(rec.w2));
        let (m_n, s_n, gd) = (vv.rows(), vu.rows(), vu.cols());
        let mut du = Mat::zeros(s_n, gd);
        let mut dv = Mat::zeros(m_n, gd);
        let mut dw = Mat::zeros(gd, 1);
        let mut db = 0.0;
        for m in 0..m_n {
            for s in 0..s_n {
                let o = out[(m, s)];
                let dp = g[(m, s)] * o * (1.0 - o);
                if dp == 0.0 {
                    continue;
                }
                db += dp;
                let base = (m * s_n + s) * gd;
                for k in 0..gd {
                    let t = rec.tanh[base + k];
                    dw.data_mut()[k] += dp * t;
                    let dpre = dp * vw.data()[k] * (1.0 - t * t);
                    du[(s, k)] += dpre;
                    dv[(m, k)] += dpre;
                }
            }
        }
        self.acc(grads, rec.u, du);
        self.acc(grads, rec.v, dv);
        self.acc(grads, rec.w2, dw);
        self.acc(grads, rec.b2, Mat::scalar(db));
    }
}
