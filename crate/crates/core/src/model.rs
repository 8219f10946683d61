//! The full estimator: encoder, assignment, graph, and head wired together.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{check_gate_input, threshold_var, DsnRegistry, DsnType};
use crate::autodiff::{Tape, Var};
use crate::datamodel::{FeatureLayout, Mode, TaskMode, TrafficSample, GLOBAL_CONTEXT_LEN};
use crate::dsg::{update_states, DsgDims, DsgParams, Pooled};
use crate::encoder::{EncoderDims, EncoderInputs, EncoderParams};
use crate::error::{Error, Result};
use crate::head::{
    infer, observation_env_summary, observation_query_features, observation_targets, query_dim, query_env_summary,
    query_features, query_targets,
};
use crate::layers::{Mlp, PairGate};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_d: usize,
    pub d_c: usize,
    pub d_t: usize,
    /// Observation embedding width; node states share it.
    pub d_e: usize,
    pub k: usize,
    pub e: usize,
    pub heads: usize,
    pub n_env: usize,
    pub n_tmp: usize,
    pub tau: f64,
    pub prune_k: f64,
    pub n_layers: usize,
    pub d_id: usize,
    pub gate_hidden: usize,
    pub head_hidden: usize,
    pub sigma_km: f64,
    pub use_static: bool,
    pub use_dynamic: bool,
    pub use_gcn: bool,
    pub smooth: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_d: 32,
            d_c: 32,
            d_t: 32,
            d_e: 64,
            k: 64,
            e: 16,
            heads: 4,
            n_env: 8,
            n_tmp: 8,
            tau: 0.05,
            prune_k: 0.3,
            n_layers: 2,
            d_id: 8,
            gate_hidden: 16,
            head_hidden: 64,
            sigma_km: 2.0,
            use_static: true,
            use_dynamic: true,
            use_gcn: true,
            smooth: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_d", self.d_d),
            ("d_c", self.d_c),
            ("d_t", self.d_t),
            ("d_e", self.d_e),
            ("k", self.k),
            ("e", self.e),
            ("heads", self.heads),
            ("d_id", self.d_id),
            ("gate_hidden", self.gate_hidden),
            ("head_hidden", self.head_hidden),
            ("n_layers", self.n_layers),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::Config(format!("model.tau = {} outside [0, 1)", self.tau)));
        }
        if !(0.0..1.0).contains(&self.prune_k) {
            return Err(Error::Config(format!("model.prune_k = {} outside [0, 1)", self.prune_k)));
        }
        if self.sigma_km <= 0.0 {
            return Err(Error::Config("model.sigma_km must be positive".into()));
        }
        if !self.use_static && !self.use_dynamic {
            return Err(Error::Config("at least one of use_static / use_dynamic must hold".into()));
        }
        if self.use_dynamic && (self.n_env == 0 || self.n_tmp == 0) {
            return Err(Error::Config("n_env and n_tmp must be positive when dynamic nodes are used".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Evaluate the observation-reconstruction term.
    pub l2: bool,
}

/// Handles into one window's forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `|Q| × 2H` predictions in normalized units.
    pub pred: Var,
    /// Sum of squared query errors and the number of scored entries.
    pub l1_sq: Var,
    pub l1_count: f64,
    pub l2_sq: Option<Var>,
    pub l2_count: f64,
    /// Thresholded `N × |S|` assignment.
    pub a: Var,
    /// Thresholded `|Q| × N` query assignment.
    pub a_q: Option<Var>,
    pub z0: Var,
    pub z: Var,
    pub laplacian: Option<Var>,
    pub z_post: Var,
    pub pooled: Pooled,
}

#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub registry: DsnRegistry,
    pub layout: FeatureLayout,
    pub task: TaskMode,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub dsg: DsgParams,
    pub env_gate: Option<PairGate>,
    pub tmp_gate: Option<PairGate>,
    /// Stand-in traffic summary for sensors without traffic.
    pub placeholder: Option<ParamId>,
    pub head: Mlp,
    /// Separate reconstruction head used when the main head forecasts.
    pub aux_head: Option<Mlp>,
    gcn_calls: AtomicUsize,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            registry: self.registry.clone(),
            layout: self.layout.clone(),
            task: self.task,
            store: self.store.clone(),
            encoder: self.encoder,
            dsg: self.dsg.clone(),
            env_gate: self.env_gate,
            tmp_gate: self.tmp_gate,
            placeholder: self.placeholder,
            head: self.head,
            aux_head: self.aux_head,
            gcn_calls: AtomicUsize::new(self.gcn_calls.load(Ordering::Relaxed)),
        }
    }
}

impl Model {
    /// `registry` fixes the node taxonomy; its static/dynamic switches are
    /// overwritten from `config`.
    pub fn new(config: ModelConfig, mut registry: DsnRegistry, layout: FeatureLayout, task: TaskMode, seed: u64) -> Result<Self> {
        config.validate()?;
        task.validate()?;
        registry.use_static = config.use_static;
        registry.use_dynamic = config.use_dynamic;
        registry.n_env = config.n_env;
        registry.n_tmp = config.n_tmp;
        registry.sigma_km = config.sigma_km;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::new(
            &mut store,
            &layout,
            EncoderDims {
                d_d: config.d_d,
                d_c: config.d_c,
                d_t: config.d_t,
                d_e: config.d_e,
            },
            &mut rng,
        );
        let d_z = config.d_e;
        let dsg = DsgParams::new(
            &mut store,
            DsgDims {
                n_nodes: registry.n_nodes(),
                d_z,
                k: config.k,
                e: config.e,
                heads: config.heads,
                d_id: config.d_id,
                n_layers: config.n_layers,
                prune_k: config.prune_k,
                smooth: config.smooth,
            },
            GLOBAL_CONTEXT_LEN,
            &mut rng,
        );
        let (env_gate, tmp_gate, placeholder) = if config.use_dynamic {
            let n_envf = layout.environmental_dynamic_indices().len();
            (
                Some(PairGate::new(&mut store, "assign.env_gate", n_envf, d_z, config.gate_hidden, &mut rng)),
                Some(PairGate::new(&mut store, "assign.temporal_gate", config.d_t, d_z, config.gate_hidden, &mut rng)),
                Some(store.add("assign.unknown_traffic", 1, config.d_t, Init::Normal(0.1), &mut rng)),
            )
        } else {
            (None, None, None)
        };
        let head_in = query_dim(&layout) + d_z + 3 * config.k;
        let out = 2 * task.horizon;
        let head = Mlp::new(&mut store, "head", head_in, config.head_hidden, out, &mut rng);
        let aux_head = (task.mode == Mode::Forecast)
            .then(|| Mlp::new(&mut store, "aux_head", head_in, config.head_hidden, out, &mut rng));
        Ok(Self {
            config,
            registry,
            layout,
            task,
            store,
            encoder,
            dsg,
            env_gate,
            tmp_gate,
            placeholder,
            head,
            aux_head,
            gcn_calls: AtomicUsize::new(0),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.registry.n_nodes()
    }

    /// Times the graph convolution has run on this model.
    pub fn gcn_calls(&self) -> usize {
        self.gcn_calls.load(Ordering::Relaxed)
    }

    /// Static assignment table for a dataset's sensors, `n_sensors × n_static`.
    pub fn static_table(&self, sensors: &[crate::datamodel::SensorContext]) -> Result<Mat> {
        self.registry.static_table(sensors)
    }

    pub fn alpha(&self) -> f64 {
        let a = self.store.get(self.dsg.alpha_raw).item();
        1.0 / (1.0 + (-a).exp())
    }

    /// Thresholded `N × M` assignment for `M` sensors given their static
    /// columns, environmental summaries and projected temporal inputs.
    fn assign(&self, tape: &mut Tape, z0: Var, statics: &Mat, env: &Mat, tmp_u: Option<Var>) -> Result<Var> {
        let mut blocks = Vec::new();
        if self.config.use_static {
            blocks.push(tape.constant(statics.transpose()));
        }
        if let (Some(eg), Some(tg), Some(tmp_u)) = (self.env_gate, self.tmp_gate, tmp_u) {
            check_gate_input(self.store.get(eg.wx).rows(), env.cols(), "environmental")?;
            let er = self.registry.range(DsnType::Environmental);
            let tr = self.registry.range(DsnType::Temporal);
            let ze = tape.slice_rows(z0, er.start, er.end);
            let zt = tape.slice_rows(z0, tr.start, tr.end);
            let envv = tape.constant(env.clone());
            let ue = eg.project_x(tape, &self.store, envv);
            blocks.push(eg.weights(tape, &self.store, ue, ze));
            blocks.push(tg.weights(tape, &self.store, tmp_u, zt));
        }
        let raw = if blocks.len() == 1 { blocks[0] } else { tape.concat_rows(&blocks) };
        Ok(threshold_var(tape, raw, self.config.tau))
    }

    /// Projected placeholder rows for `m` traffic-free sensors.
    fn placeholder_u(&self, tape: &mut Tape, m: usize) -> Option<Var> {
        let (tg, p) = (self.tmp_gate?, self.placeholder?);
        let p = tape.param(&self.store, p);
        let u = tg.project_x(tape, &self.store, p);
        Some(tape.broadcast_rows(u, m))
    }

    /// Context-only sensors to `|M| × 2H` predictions through `head`.
    #[allow(clippy::too_many_arguments)]
    fn predict_context(
        &self,
        tape: &mut Tape,
        head: &Mlp,
        z0: Var,
        z: Var,
        z_post: Var,
        g: Var,
        q: Mat,
        statics: &Mat,
        env: &Mat,
    ) -> Result<(Var, Var)> {
        let m = q.rows();
        let tmp_u = self.placeholder_u(tape, m);
        let a = self.assign(tape, z0, statics, env, tmp_u)?;
        let a_q = tape.transpose(a);
        let qv = tape.constant(q);
        Ok((infer(tape, &self.store, head, qv, a_q, z, z_post, g), a_q))
    }

    /// One window on normalized data. `statics` holds the static assignment
    /// rows of every dataset sensor, indexed by the sample's sensor indices.
    pub fn forward(&self, tape: &mut Tape, sample: &TrafficSample, statics: &Mat, opts: ForwardOptions) -> Result<Forward> {
        if sample.task != self.task {
            return Err(Error::Shape(format!(
                "sample task {:?} does not match model task {:?}",
                sample.task, self.task
            )));
        }
        if sample.f_total != self.layout.f_total() {
            return Err(Error::Layout(format!(
                "sample has {} features, model layout {}",
                sample.f_total,
                self.layout.f_total()
            )));
        }
        if sample.n_obs() == 0 {
            return Err(Error::Shape("window without observation sensors".into()));
        }
        let store = &self.store;
        let inputs = EncoderInputs::from_sample(sample, &self.layout);
        let enc = self.encoder.encode(tape, store, &inputs)?;

        let z0 = self.dsg.init_states(tape, store, &sample.global_context);
        let obs_statics = statics.gather_rows(&sample.obs_index);
        let obs_env = observation_env_summary(sample, &self.layout);
        let tmp_u = self.tmp_gate.map(|tg| tg.project_x(tape, store, enc.h_traffic));
        let a = self.assign(tape, z0, &obs_statics, &obs_env, tmp_u)?;
        let z = update_states(tape, z0, a, enc.h_obs);

        let (laplacian, z_post) = if self.config.use_gcn {
            let l = self.dsg.laplacian(tape, store, z);
            self.gcn_calls.fetch_add(1, Ordering::Relaxed);
            (Some(l), self.dsg.graph_convolve(tape, store, z, l))
        } else {
            (None, self.dsg.skip_convolve(tape, store, z))
        };
        let ranges: Vec<_> = DsnType::ALL.iter().map(|&t| self.registry.range(t)).collect();
        let pooled = crate::dsg::pool(tape, z_post, &ranges);

        let h2 = 2 * self.task.horizon;
        let (pred, a_q, l1_sq, l1_count) = if sample.n_query() == 0 {
            let pred = tape.constant(Mat::zeros(0, h2));
            let zero = tape.constant(Mat::scalar(0.0));
            (pred, None, zero, 0.0)
        } else {
            let q = query_features(sample, &self.layout);
            let q_statics = statics.gather_rows(&sample.query_index);
            let q_env = query_env_summary(sample, &self.layout);
            let (pred, a_q) = self.predict_context(tape, &self.head, z0, z, z_post, pooled.g, q, &q_statics, &q_env)?;
            let (y, mask) = query_targets(sample);
            let count: f64 = mask.iter().sum();
            let sq = tape.masked_sq_err(pred, y, mask);
            (pred, Some(a_q), sq, count)
        };

        let (l2_sq, l2_count) = if opts.l2 {
            let head = self.aux_head.as_ref().unwrap_or(&self.head);
            let q = observation_query_features(sample, &self.layout);
            let (rec, _) = self.predict_context(tape, head, z0, z, z_post, pooled.g, q, &obs_statics, &obs_env)?;
            let (y, mask) = observation_targets(sample);
            let count: f64 = mask.iter().sum();
            (Some(tape.masked_sq_err(rec, y, mask)), count)
        } else {
            (None, 0.0)
        };

        Ok(Forward {
            pred,
            l1_sq,
            l1_count,
            l2_sq,
            l2_count,
            a,
            a_q,
            z0,
            z,
            laplacian,
            z_post,
            pooled,
        })
    }

    /// Normalized `|Q| × 2H` predictions for one window.
    pub fn predict(&self, sample: &TrafficSample, statics: &Mat) -> Result<Mat> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, sample, statics, ForwardOptions::default())?;
        Ok(tape.value(f.pred).clone())
    }

    /// Structured text view of one window's assignment, Laplacian and pooled
    /// vectors.
    pub fn dump_window(&self, sample: &TrafficSample, statics: &Mat) -> Result<String> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, sample, statics, ForwardOptions::default())?;
        let labels: Vec<String> = (0..self.n_nodes()).map(|i| self.registry.node_label(i)).collect();
        let pooled: serde_json::Map<String, serde_json::Value> = DsnType::ALL
            .iter()
            .zip(&f.pooled.per_type)
            .map(|(t, &v)| (t.as_str().to_string(), serde_json::json!(tape.value(v).data())))
            .collect();
        let empty: Vec<&str> = f.pooled.empty_types.iter().map(|&i| DsnType::ALL[i].as_str()).collect();
        let doc = serde_json::json!({
            "window_id": sample.window_id,
            "start_time": sample.start_time,
            "nodes": labels,
            "observation_sensors": sample.sensor_ids_obs,
            "assignment": tape.value(f.a).to_rows(),
            "laplacian": f.laplacian.map(|l| tape.value(l).to_rows()),
            "alpha": self.alpha(),
            "pooled": pooled,
            "empty_types": empty,
            "g": tape.value(f.pooled.g).data(),
        });
        Ok(serde_json::to_string_pretty(&doc)?)
    }
}
