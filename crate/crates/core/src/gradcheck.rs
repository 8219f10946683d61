//! Central finite-difference verification of analytic gradients.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::assignment::DsnRegistry;
use crate::autodiff::Tape;
use crate::datamodel::{FeatureLayout, Mode, TaskMode, TrafficSample};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model, ModelConfig};
use crate::params::ParamStore;
use crate::synthdata::normalize::Normalizer;
use crate::synthdata::windows::{make_windows, Split, SplitSpec};
use crate::synthdata::{generate_world, Tables, WorldConfig};
use crate::tensor::Mat;
use crate::trainer::{batch_gradient, l1_count, l2_count, l2_weight};

pub const DEFAULT_H: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    /// Entries whose perturbation flipped a threshold, prune or max selection.
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn failures(&self) -> Vec<&TensorCheck> {
        self.tensors.iter().filter(|t| !t.passed).collect()
    }

    pub fn worst(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let list = self
            .failures()
            .iter()
            .map(|t| format!("{} (rel err {:.3e} at index {})", t.name, t.max_rel_err, t.worst_index))
            .collect::<Vec<_>>()
            .join(", ");
        Err(Error::GradCheck(list))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` (one matrix per tensor of `store`) against central
/// differences of `eval`, which returns the loss and a signature of every
/// discrete selection made while computing it.
pub fn check_gradients(
    store: &ParamStore,
    analytic: &[Mat],
    h: f64,
    tolerance: f64,
    eval: impl Fn(&ParamStore) -> (f64, u64),
) -> GradCheckReport {
    let (_, base_sig) = eval(store);
    let mut work = store.clone();
    let mut tensors = Vec::new();
    for (k, id) in store.ids().enumerate() {
        let mut worst = 0.0f64;
        let mut worst_index = 0;
        let (mut checked, mut skipped) = (0, 0);
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let (lp, sp) = eval(&work);
            work.get_mut(id).data_mut()[i] = orig - h;
            let (lm, sm) = eval(&work);
            work.get_mut(id).data_mut()[i] = orig;
            if sp != base_sig || sm != base_sig {
                skipped += 1;
                continue;
            }
            checked += 1;
            let rel = relative_error(analytic[k].data()[i], (lp - lm) / (2.0 * h));
            if rel > worst {
                worst = rel;
                worst_index = i;
            }
        }
        tensors.push(TensorCheck {
            name: store.name(id).to_string(),
            max_rel_err: worst,
            worst_index,
            checked,
            skipped,
            passed: worst < tolerance,
        });
    }
    GradCheckReport { h, tolerance, tensors }
}

fn selection_signature(tape: &Tape, vars: &[crate::autodiff::Var]) -> u64 {
    let mut hasher = DefaultHasher::new();
    for &v in vars {
        for &x in tape.value(v).data() {
            (x != 0.0).hash(&mut hasher);
        }
    }
    hasher.finish()
}

/// Batch loss `L1 + 0.9^epoch · γ · L2` and its selection signature.
pub fn batch_loss(model: &Model, batch: &[&TrafficSample], statics: &Mat, l2_w: f64) -> Result<(f64, u64)> {
    let c1: f64 = batch.iter().map(|s| l1_count(s)).sum();
    let c2: f64 = batch.iter().map(|s| l2_count(s)).sum();
    let opts = ForwardOptions {
        l2: l2_w != 0.0 && c2 > 0.0,
    };
    let (mut loss, mut hasher) = (0.0, DefaultHasher::new());
    for s in batch {
        let mut tape = Tape::new();
        let f = model.forward(&mut tape, s, statics, opts)?;
        loss += tape.value(f.l1_sq).item() / c1;
        if let Some(sq) = f.l2_sq {
            loss += l2_w * tape.value(sq).item() / c2;
        }
        let mut vars = vec![f.a];
        vars.extend(f.a_q);
        vars.extend(f.laplacian);
        selection_signature(&tape, &vars).hash(&mut hasher);
        let zp = tape.value(f.z_post);
        for t in crate::assignment::DsnType::ALL {
            let r = model.registry.range(t);
            for c in 0..zp.cols() {
                r.clone().max_by(|&a, &b| zp[(a, c)].total_cmp(&zp[(b, c)]).then(b.cmp(&a))).hash(&mut hasher);
            }
        }
    }
    Ok((loss, hasher.finish()))
}

/// Checks every parameter tensor of `model` on `batch`. `corrupt` doubles the
/// analytic gradient of the named tensor before comparison.
#[allow(clippy::too_many_arguments)]
pub fn gradcheck_model(
    model: &Model,
    batch: &[&TrafficSample],
    statics: &Mat,
    gamma: f64,
    epoch: usize,
    h: f64,
    tolerance: f64,
    corrupt: Option<&str>,
) -> Result<GradCheckReport> {
    let l2_w = l2_weight(gamma, epoch);
    let mut analytic = batch_gradient(model, batch, statics, l2_w)?.grads;
    if let Some(name) = corrupt {
        let id = model
            .store
            .find(name)
            .ok_or_else(|| Error::GradCheck(format!("no tensor named `{name}`")))?;
        analytic[id.0].scale_assign(2.0);
    }
    let probe_cell = std::cell::RefCell::new(model.clone());
    let eval = |store: &ParamStore| {
        let mut m = probe_cell.borrow_mut();
        m.store.clone_from(store);
        batch_loss(&m, batch, statics, l2_w).expect("forward pass on the gradcheck batch")
    };
    Ok(check_gradients(&model.store, &analytic, h, tolerance, eval))
}

/// A small world and model for gradient checks and overfit runs.
#[derive(Clone, Debug)]
pub struct TinyProblem {
    pub tables: Tables,
    pub model: Model,
    pub statics: Mat,
    pub normalizer: Normalizer,
    /// Normalized windows.
    pub samples: Vec<TrafficSample>,
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_d: 3,
        d_c: 3,
        d_t: 3,
        d_e: 4,
        k: 4,
        e: 3,
        heads: 2,
        n_env: 2,
        n_tmp: 2,
        n_layers: 2,
        d_id: 2,
        gate_hidden: 3,
        head_hidden: 4,
        smooth: true,
        ..ModelConfig::default()
    }
}

/// Ten sensors in one neighborhood with one freeway, `W = 4`, `H = 2`; the
/// registry keeps only road-class semantic nodes so that `N = 8`.
pub fn tiny_problem(mode: Mode, config: ModelConfig, seed: u64) -> Result<TinyProblem> {
    let world = WorldConfig {
        n_sensors: 10,
        n_neighborhoods: 1,
        n_freeways: 1,
        duration: 1,
        outage_rate: 0.05,
        seed,
        ..WorldConfig::default()
    };
    let tables = generate_world(&world)?;
    let layout = FeatureLayout::standard();
    let task = TaskMode::new(mode, 4, 2);
    let spec = SplitSpec {
        train: [0.0, 0.5],
        val: [0.5, 0.75],
        test: [0.75, 1.0],
        query_fraction: 0.2,
        stride: 7,
        ..SplitSpec::default()
    };
    let windows = make_windows(&tables, &layout, task, &spec, Split::Train, seed)?;
    windows.require_nonempty()?;
    let raw: Vec<TrafficSample> = windows.samples(&tables, &layout).collect();
    let normalizer = Normalizer::fit(raw.iter(), &layout);
    let samples = raw.iter().map(|s| normalizer.apply_sample(s)).collect();
    let mut registry = DsnRegistry::from_sensors(&tables.sensors, config.n_env, config.n_tmp, config.sigma_km);
    registry.restrict_semantic(&["road_class"]);
    let model = Model::new(config, registry, layout, task, seed)?;
    let statics = model.static_table(&tables.sensors)?;
    Ok(TinyProblem {
        tables,
        model,
        statics,
        normalizer,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_toy_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let w = store.add("w", 2, 1, Init::Normal(1.0), &mut rng);
        let x = Mat::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.3], vec![2.0, -1.0]]);
        let y = Mat::from_rows(&[vec![0.5], vec![1.0], vec![-2.0]]);
        let loss = |s: &ParamStore| {
            let r = x.matmul(s.get(w));
            r.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        };
        // analytic: 2 Xᵀ (X w − y)
        let r = x.matmul(store.get(w)).zip_map(&y, |a, b| 2.0 * (a - b));
        let g = x.transpose().matmul(&r);
        let report = check_gradients(&store, &[g], 1e-5, 1e-9, |s| (loss(s), 0));
        assert!(report.passed(), "{report:?}");
        assert!(report.worst() < 1e-9);
    }
}
