//! Parameterized building blocks shared by the model components.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::params::{Init, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.add(&format!("{name}.w"), inp, out, Init::Xavier, rng),
            b: store.add(&format!("{name}.b"), 1, out, Init::Zeros, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

/// Two affine layers with `tanh` between them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, inp: usize, hidden: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.l1"), inp, hidden, rng),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, out, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.l1.forward(tape, store, x);
        let h = tape.tanh(h);
        self.l2.forward(tape, store, h)
    }
}

/// Gated recurrent unit; gate columns are ordered reset, update, candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gru {
    pub w: ParamId,
    pub u: ParamId,
    pub bx: ParamId,
    pub bh: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, inp: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.add(&format!("{name}.w"), inp, 3 * hidden, Init::Xavier, rng),
            u: store.add(&format!("{name}.u"), hidden, 3 * hidden, Init::Xavier, rng),
            bx: store.add(&format!("{name}.bx"), 1, 3 * hidden, Init::Zeros, rng),
            bh: store.add(&format!("{name}.bh"), 1, 3 * hidden, Init::Zeros, rng),
            hidden,
        }
    }

    /// Runs over `steps` (one `rows × inp` input per timestamp) from a zero
    /// state and returns the final hidden state.
    pub fn run(&self, tape: &mut Tape, store: &ParamStore, steps: &[Var]) -> Var {
        let rows = steps.first().map_or(0, |&x| tape.shape(x).0);
        let w = tape.param(store, self.w);
        let u = tape.param(store, self.u);
        let bx = tape.param(store, self.bx);
        let bh = tape.param(store, self.bh);
        let mut h = tape.constant(crate::tensor::Mat::zeros(rows, self.hidden));
        for &x in steps {
            h = tape.gru_cell(x, h, w, u, bx, bh);
        }
        h
    }
}

/// Two-layer gate scoring every (sensor, node) pair:
/// `sigmoid(w2 · tanh(W1x x + W1z z + b1) + b2)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairGate {
    pub wx: ParamId,
    pub wz: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl PairGate {
    pub fn new(store: &mut ParamStore, name: &str, d_x: usize, d_z: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            wx: store.add(&format!("{name}.wx"), d_x, hidden, Init::Xavier, rng),
            wz: store.add(&format!("{name}.wz"), d_z, hidden, Init::Xavier, rng),
            b1: store.add(&format!("{name}.b1"), 1, hidden, Init::Zeros, rng),
            w2: store.add(&format!("{name}.w2"), hidden, 1, Init::Xavier, rng),
            b2: store.add(&format!("{name}.b2"), 1, 1, Init::Zeros, rng),
        }
    }

    /// Projects sensor summaries `x` (`S × d_x`) into the gate's hidden space.
    pub fn project_x(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let wx = tape.param(store, self.wx);
        tape.matmul(x, wx)
    }

    /// Gate weights `M × S` for node states `z` (`M × d_z`) against an
    /// already projected `S × hidden` sensor block.
    pub fn weights(&self, tape: &mut Tape, store: &ParamStore, ux: Var, z: Var) -> Var {
        let wz = tape.param(store, self.wz);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let v = tape.matmul(z, wz);
        let v = tape.add_row(v, b1);
        tape.pair_gate(ux, v, w2, b2)
    }
}
