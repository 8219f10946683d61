//! End-to-end experiment drivers shared by the command line and the
//! acceptance suite.

use std::borrow::Cow;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::DsnRegistry;
use crate::baselines::{evaluate_baseline, Baseline};
use crate::config::{BenchmarkConfig, RunConfig};
use crate::datamodel::{DatasetMetadata, FeatureLayout, TaskMode, TrafficSample, DATASET_VERSION};
use crate::error::{Error, Result};
use crate::head::MetricReport;
use crate::model::{Model, ModelConfig};
use crate::reference::ReferenceModel;
use crate::synthdata::ingest::ingest_dir;
use crate::synthdata::normalize::Normalizer;
use crate::synthdata::windows::{make_windows, materialize, Split, SplitSpec, WindowSet};
use crate::synthdata::{generate_world, Tables, WorldConfig};
use crate::tensor::Mat;
use crate::trainer::{evaluate, run_epoch, train, AdamState, EpochRecord, SampleSource, TrainConfig, TrainOutcome};

pub const METADATA_FILE: &str = "metadata.json";

/// The dataset named by `cfg`: read from `dataset_dir` when set, otherwise
/// generated from `cfg.world`. Returns the tables and their version string.
pub fn load_tables(cfg: &RunConfig) -> Result<(Tables, String)> {
    match &cfg.dataset_dir {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(Error::io(
                    dir,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory does not exist"),
                ));
            }
            let tables = ingest_dir(dir)?;
            let meta = dir.join(METADATA_FILE);
            let version = if meta.exists() {
                DatasetMetadata::load(&meta)?.dataset_version
            } else {
                DATASET_VERSION.to_string()
            };
            Ok((tables, version))
        }
        None => Ok((generate_world(&cfg.world)?, DATASET_VERSION.to_string())),
    }
}

/// Windows, normalizer and static lookup tables for one dataset.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub tables: Tables,
    pub dataset_version: String,
    pub layout: FeatureLayout,
    pub task: TaskMode,
    pub registry: DsnRegistry,
    pub normalizer: Normalizer,
    /// Static assignment rows for every dataset sensor.
    pub statics: Mat,
    pub positions: Vec<(f64, f64)>,
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
    pub seed: u64,
}

impl Prepared {
    pub fn set(&self, split: Split) -> &WindowSet {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Normalized samples of `set`, materialized on demand.
    pub fn source<'a>(&'a self, set: &'a WindowSet) -> WindowSource<'a> {
        WindowSource { prep: self, set }
    }

    pub fn raw_sample(&self, set: &WindowSet, i: usize) -> TrafficSample {
        materialize(&self.tables, &self.layout, set.task, &set.plans[i])
    }

    pub fn metadata(&self) -> DatasetMetadata {
        DatasetMetadata {
            dataset_version: self.dataset_version.clone(),
            layout: self.layout.clone(),
            window: self.task.window,
            horizon: self.task.horizon,
            interval_minutes: self.tables.interval_minutes,
            start_time: self.tables.start,
            n_timestamps: self.tables.n_times,
            n_sensors: self.tables.n_sensors(),
            normalizer: Some(self.normalizer.clone()),
        }
    }
}

pub struct WindowSource<'a> {
    prep: &'a Prepared,
    set: &'a WindowSet,
}

impl SampleSource for WindowSource<'_> {
    fn len(&self) -> usize {
        self.set.len()
    }

    fn get(&self, i: usize) -> Cow<'_, TrafficSample> {
        Cow::Owned(self.prep.normalizer.apply_sample(&self.prep.raw_sample(self.set, i)))
    }
}

pub fn prepare(cfg: &RunConfig, tables: Tables, dataset_version: String) -> Result<Prepared> {
    let task = cfg.task.task();
    let layout = cfg.layout.clone();
    let seed = cfg.train.seed;
    let windows = |split| make_windows(&tables, &layout, task, &cfg.split, split, seed);
    let (train, val, test) = (windows(Split::Train)?, windows(Split::Val)?, windows(Split::Test)?);
    train.require_nonempty()?;
    let normalizer = Normalizer::fit(train.samples(&tables, &layout), &layout);
    let registry = DsnRegistry::from_sensors(&tables.sensors, cfg.model.n_env, cfg.model.n_tmp, cfg.model.sigma_km);
    let statics = registry.static_table(&tables.sensors)?;
    let positions = tables.sensors.iter().map(|s| (s.lat, s.lon)).collect();
    Ok(Prepared {
        tables,
        dataset_version,
        layout,
        task,
        registry,
        normalizer,
        statics,
        positions,
        train,
        val,
        test,
        seed,
    })
}

pub fn build_model(prep: &Prepared, model_cfg: &ModelConfig, seed: u64) -> Result<Model> {
    Model::new(model_cfg.clone(), prep.registry.clone(), prep.layout.clone(), prep.task, seed)
}

/// Builds and trains a model; the returned model holds the best-validation
/// parameters.
pub fn train_run(
    prep: &Prepared,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, TrainOutcome)> {
    let mut model = build_model(prep, model_cfg, train_cfg.seed)?;
    let outcome = train(
        &mut model,
        &prep.source(&prep.train),
        &prep.source(&prep.val),
        &prep.statics,
        train_cfg,
        on_epoch,
    )?;
    Ok((model, outcome))
}

fn with_ratio(prep: &Prepared, split: Split, query_ratio: Option<f64>) -> Cow<'_, WindowSet> {
    match query_ratio {
        Some(r) => Cow::Owned(prep.set(split).with_query_fraction(r, prep.seed)),
        None => Cow::Borrowed(prep.set(split)),
    }
}

/// Raw-unit metrics on `split`, optionally after re-partitioning every window
/// at another query ratio.
pub fn evaluate_model(model: &Model, prep: &Prepared, split: Split, query_ratio: Option<f64>) -> Result<MetricReport> {
    let set = with_ratio(prep, split, query_ratio);
    set.require_nonempty()?;
    let samples = set.plans.par_iter().map(|p| materialize(&prep.tables, &prep.layout, set.task, p));
    let mut r = evaluate(model, samples, &prep.normalizer, &prep.statics, split.as_str())?;
    r.query_ratio = query_ratio;
    Ok(r)
}

pub fn evaluate_reference(baseline: Baseline, prep: &Prepared, split: Split, query_ratio: Option<f64>) -> Result<MetricReport> {
    let set = with_ratio(prep, split, query_ratio);
    set.require_nonempty()?;
    let samples = set.plans.par_iter().map(|p| materialize(&prep.tables, &prep.layout, set.task, p));
    let mut r = evaluate_baseline(baseline, samples, &prep.positions, split.as_str());
    r.query_ratio = query_ratio;
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub query_ratio: f64,
    pub model: MetricReport,
    pub nearest: MetricReport,
}

/// One report per ratio for the model and the nearest-observation baseline.
pub fn query_sweep(model: &Model, prep: &Prepared, split: Split, ratios: &[f64]) -> Result<Vec<SweepRow>> {
    ratios
        .iter()
        .map(|&r| {
            Ok(SweepRow {
                query_ratio: r,
                model: evaluate_model(model, prep, split, Some(r))?,
                nearest: evaluate_reference(Baseline::NearestObservation, prep, split, Some(r))?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoDynamic,
    NoStatic,
    NoGcn,
    NoL2,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoDynamic, Variant::NoStatic, Variant::NoGcn, Variant::NoL2];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "DSG",
            Variant::NoDynamic => "DSG-d",
            Variant::NoStatic => "DSG-s",
            Variant::NoGcn => "DSG-gcn",
            Variant::NoL2 => "DSG-L2",
        }
    }

    pub fn apply(self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let (mut m, mut t) = (model.clone(), train.clone());
        match self {
            Variant::Full => {}
            Variant::NoDynamic => m.use_dynamic = false,
            Variant::NoStatic => m.use_static = false,
            Variant::NoGcn => m.use_gcn = false,
            Variant::NoL2 => t.gamma = 0.0,
        }
        (m, t)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub report: MetricReport,
    pub history: Vec<EpochRecord>,
    pub gcn_calls: usize,
}

/// Trains and tests one variant on the shared data and seed.
pub fn ablation_run(
    prep: &Prepared,
    cfg: &RunConfig,
    variant: Variant,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, AblationRow)> {
    let (m, t) = variant.apply(&cfg.model, &cfg.train);
    let (model, outcome) = train_run(prep, &m, &t, on_epoch)?;
    let mut report = evaluate_model(&model, prep, Split::Test, None)?;
    report.model = variant.label().to_string();
    let row = AblationRow {
        variant,
        label: variant.label().to_string(),
        report,
        history: outcome.history,
        gcn_calls: model.gcn_calls(),
    };
    Ok((model, row))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub n_sensors: usize,
    pub n_nodes: usize,
    pub mean_window_sensors: f64,
    pub deepstate_s: Vec<f64>,
    pub reference_s: Vec<f64>,
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v.sqrt())
}

impl TimingRow {
    pub fn deepstate(&self) -> (f64, f64) {
        mean_sd(&self.deepstate_s)
    }

    pub fn reference(&self) -> (f64, f64) {
        mean_sd(&self.reference_s)
    }
}

/// Normalized, pre-materialized training windows of a world with `n_sensors`
/// sensors, plus the tables they came from.
pub fn benchmark_batches(
    world: &WorldConfig,
    bench: &BenchmarkConfig,
    task: TaskMode,
    layout: &FeatureLayout,
    n_sensors: usize,
    seed: u64,
) -> Result<(Tables, Vec<TrafficSample>)> {
    let world = WorldConfig {
        n_sensors,
        duration: bench.duration,
        ..world.clone()
    };
    let tables = generate_world(&world)?;
    let d = f64::from(bench.duration);
    let per_day = tables.timestamps_per_day() as f64;
    let span = task.span() as f64;
    let stride = (((0.8 * d * per_day - span) / bench.windows_per_epoch as f64).floor() as usize).max(1);
    let spec = SplitSpec {
        train: [0.0, 0.8 * d],
        val: [0.8 * d, 0.9 * d],
        test: [0.9 * d, d],
        stride,
        ..SplitSpec::default()
    };
    let set = make_windows(&tables, layout, task, &spec, Split::Train, seed)?;
    set.require_nonempty()?;
    let raw: Vec<TrafficSample> = set.samples(&tables, layout).take(bench.windows_per_epoch).collect();
    let norm = Normalizer::fit(&raw, layout);
    let samples = raw.iter().map(|s| norm.apply_sample(s)).collect();
    Ok((tables, samples))
}

/// Per-epoch training wall time of both models at every sensor count.
pub fn benchmark(cfg: &RunConfig, mut on_row: impl FnMut(&TimingRow)) -> Result<Vec<TimingRow>> {
    let bench = &cfg.benchmark;
    bench.validate()?;
    let task = cfg.task.task();
    let train_cfg = TrainConfig {
        batch_size: bench.batch_size,
        ..cfg.train.clone()
    };
    let mut rows = Vec::new();
    for &n in &bench.sensor_counts {
        let (tables, samples) = benchmark_batches(&cfg.world, bench, task, &cfg.layout, n, cfg.train.seed)?;
        let registry = DsnRegistry::from_sensors(&tables.sensors, cfg.model.n_env, cfg.model.n_tmp, cfg.model.sigma_km);
        let statics = registry.static_table(&tables.sensors)?;
        let order: Vec<usize> = (0..samples.len()).collect();
        let mut row = TimingRow {
            n_sensors: n,
            n_nodes: registry.n_nodes(),
            mean_window_sensors: samples.iter().map(|s| (s.n_obs() + s.n_query()) as f64).sum::<f64>() / samples.len() as f64,
            deepstate_s: Vec::new(),
            reference_s: Vec::new(),
        };
        for _ in 0..bench.repetitions {
            let mut model = Model::new(cfg.model.clone(), registry.clone(), cfg.layout.clone(), task, cfg.train.seed)?;
            let mut adam = AdamState::new(&model.store);
            let t0 = Instant::now();
            run_epoch(&mut model, &mut adam, &samples, &order, &statics, &train_cfg, 0)?;
            row.deepstate_s.push(t0.elapsed().as_secs_f64());

            let mut reference = ReferenceModel::new(bench.reference.clone(), cfg.layout.clone(), task, cfg.train.seed)?;
            let mut adam = AdamState::new(&reference.store);
            let t0 = Instant::now();
            for chunk in samples.chunks(bench.batch_size) {
                reference.train_step(&mut adam, chunk, &train_cfg)?;
            }
            row.reference_s.push(t0.elapsed().as_secs_f64());
        }
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: Split,
    pub samples: usize,
    pub mean_sensors: f64,
    pub mean_observations: f64,
    pub mean_queries: f64,
}

/// Per-split window counts and mean sensors per window.
pub fn dataset_summary(prep: &Prepared) -> Vec<SplitSummary> {
    Split::ALL
        .iter()
        .map(|&split| {
            let set = prep.set(split);
            let n = set.len().max(1) as f64;
            SplitSummary {
                split,
                samples: set.len(),
                mean_sensors: set.mean_sensors(),
                mean_observations: set.plans.iter().map(|p| p.obs.len() as f64).sum::<f64>() / n,
                mean_queries: set.plans.iter().map(|p| p.query.len() as f64).sum::<f64>() / n,
            }
        })
        .collect()
}

/// Writes the CSV tables and `metadata.json` of a prepared dataset.
pub fn write_dataset(prep: &Prepared, dir: &Path) -> Result<()> {
    crate::synthdata::ingest::write_csv(&prep.tables, dir)?;
    prep.metadata().save(&dir.join(METADATA_FILE))
}
