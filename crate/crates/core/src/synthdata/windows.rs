//! Window admission, observation/query partitioning and sample materialization.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{stream, Tables};
use crate::datamodel::{encode_global_context, FeatureLayout, TaskMode, TrafficSample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Time ranges are half-open day offsets from the first timestamp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train: [f64; 2],
    pub val: [f64; 2],
    pub test: [f64; 2],
    /// Defaults to half of the sensor count.
    pub min_valid_sensors: Option<usize>,
    pub query_fraction: f64,
    /// Timestamps between consecutive window starts.
    pub stride: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: [0.0, 10.0],
            val: [10.0, 12.0],
            test: [12.0, 14.0],
            min_valid_sensors: None,
            query_fraction: 0.1,
            stride: 1,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let ranges = [self.train, self.val, self.test];
        for r in ranges {
            if !(r[0] >= 0.0 && r[0] < r[1]) {
                return Err(Error::Config(format!("split range {r:?} is empty or negative")));
            }
        }
        if !(self.train[1] <= self.val[0] && self.val[1] <= self.test[0]) {
            return Err(Error::Config("split ranges must be disjoint and ordered train < val < test".into()));
        }
        if !(self.query_fraction > 0.0 && self.query_fraction < 1.0) {
            return Err(Error::Config("query_fraction must lie in (0, 1)".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn range(&self, split: Split) -> [f64; 2] {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    /// Timestamp index range of a split in `tables`.
    pub fn index_range(&self, tables: &Tables, split: Split) -> std::ops::Range<usize> {
        let per_day = tables.timestamps_per_day() as f64;
        let [a, b] = self.range(split);
        let lo = ((a * per_day).round() as usize).min(tables.n_times);
        let hi = ((b * per_day).round() as usize).min(tables.n_times);
        lo..hi
    }

    pub fn min_valid(&self, n_sensors: usize) -> usize {
        self.min_valid_sensors.unwrap_or(n_sensors.div_ceil(2))
    }
}

/// An admitted window: start timestamp and the sensor partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub window_id: usize,
    pub start: usize,
    pub obs: Vec<usize>,
    pub query: Vec<usize>,
}

impl WindowPlan {
    pub fn n_sensors(&self) -> usize {
        self.obs.len() + self.query.len()
    }
}

/// All admitted windows of one split, in increasing start order.
#[derive(Clone, Debug)]
pub struct WindowSet {
    pub split: Split,
    pub task: TaskMode,
    pub plans: Vec<WindowPlan>,
    /// Why the set is empty, when it is.
    pub diagnostic: Option<String>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.plans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plans.is_empty()
    }

    pub fn mean_sensors(&self) -> f64 {
        if self.plans.is_empty() {
            return 0.0;
        }
        self.plans.iter().map(|p| p.n_sensors() as f64).sum::<f64>() / self.plans.len() as f64
    }

    /// Fails with the diagnostic when no window was admitted.
    pub fn require_nonempty(&self) -> Result<&Self> {
        match &self.diagnostic {
            Some(d) if self.plans.is_empty() => Err(Error::NoAdmissibleWindows(format!("{} split: {d}", self.split.as_str()))),
            _ => Ok(self),
        }
    }

    pub fn samples<'a>(&'a self, tables: &'a Tables, layout: &'a FeatureLayout) -> impl Iterator<Item = TrafficSample> + 'a {
        self.plans.iter().map(move |p| materialize(tables, layout, self.task, p))
    }

    /// Same windows with a fresh observation/query partition at another ratio.
    pub fn with_query_fraction(&self, query_fraction: f64, seed: u64) -> WindowSet {
        let plans = self
            .plans
            .iter()
            .map(|p| {
                let mut sensors: Vec<usize> = p.obs.iter().chain(&p.query).copied().collect();
                sensors.sort_unstable();
                let (obs, query) = partition(&sensors, query_fraction, seed, p.start);
                WindowPlan {
                    window_id: p.window_id,
                    start: p.start,
                    obs,
                    query,
                }
            })
            .collect();
        WindowSet {
            split: self.split,
            task: self.task,
            plans,
            diagnostic: self.diagnostic.clone(),
        }
    }
}

/// Seeded split of `sensors` into (observation, query) sets, both ascending.
/// The same `(seed, start)` always yields the same partition.
pub fn partition(sensors: &[usize], query_fraction: f64, seed: u64, start: usize) -> (Vec<usize>, Vec<usize>) {
    let n = sensors.len();
    let n_q = if n < 2 {
        0
    } else {
        ((query_fraction * n as f64).round() as usize).clamp(1, n - 1)
    };
    let mut shuffled = sensors.to_vec();
    let mut rng = stream(seed, 0x5157_0000_0000 + start as u64);
    shuffled.shuffle(&mut rng);
    let mut query = shuffled[..n_q].to_vec();
    let mut obs = shuffled[n_q..].to_vec();
    query.sort_unstable();
    obs.sort_unstable();
    (obs, query)
}

/// Admits every window of `split` whose input timestamps each have at least
/// `min_valid_sensors` valid readings, and partitions its sensors.
pub fn make_windows(
    tables: &Tables,
    layout: &FeatureLayout,
    task: TaskMode,
    spec: &SplitSpec,
    split: Split,
    seed: u64,
) -> Result<WindowSet> {
    task.validate()?;
    spec.validate()?;
    if layout.f_total() != FeatureLayout::standard().f_total() {
        return Err(Error::Layout("unsupported feature layout".into()));
    }
    let range = spec.index_range(tables, split);
    let min_valid = spec.min_valid(tables.n_sensors());
    let span = task.span();
    let mut plans = Vec::new();
    let mut diagnostic = None;
    if min_valid > tables.n_sensors() {
        diagnostic = Some(format!(
            "min_valid_sensors = {min_valid} exceeds the {} sensors in the dataset",
            tables.n_sensors()
        ));
    } else if range.len() < span {
        diagnostic = Some(format!(
            "split covers {} timestamps but a window needs {span}",
            range.len()
        ));
    } else {
        let mut valid_count = vec![0usize; tables.n_times];
        for s in 0..tables.n_sensors() {
            for (t, c) in valid_count.iter_mut().enumerate() {
                if tables.readings.valid[tables.idx(s, t)] {
                    *c += 1;
                }
            }
        }
        let mut rejected = 0usize;
        let mut start = range.start;
        while start + span <= range.end {
            let admissible = (start..start + task.window).all(|t| valid_count[t] >= min_valid);
            if admissible {
                let sensors: Vec<usize> = (0..tables.n_sensors())
                    .filter(|&s| (start..start + task.window).any(|t| tables.readings.valid[tables.idx(s, t)]))
                    .collect();
                let (obs, query) = partition(&sensors, spec.query_fraction, seed, start);
                plans.push(WindowPlan {
                    window_id: start,
                    start,
                    obs,
                    query,
                });
            } else {
                rejected += 1;
            }
            start += spec.stride;
        }
        if plans.is_empty() {
            diagnostic = Some(format!(
                "all {rejected} candidate windows have a timestamp with fewer than {min_valid} valid sensors"
            ));
        }
    }
    Ok(WindowSet {
        split,
        task,
        plans,
        diagnostic,
    })
}

/// Builds the raw (unnormalized) sample for a plan.
pub fn materialize(tables: &Tables, layout: &FeatureLayout, task: TaskMode, plan: &WindowPlan) -> TrafficSample {
    let (w, h) = (task.window, task.horizon);
    let f = layout.f_total();
    let fq = f - 2;
    let start_time = tables.time_at(plan.start);
    let static_of = |s: usize| {
        layout
            .static_vector(&tables.sensors[s])
            .expect("sensor contexts are validated on load")
    };
    let dynamic_of = |s: usize, t: usize| {
        let k = tables.ctx_idx(tables.sensor_neighborhood[s], t);
        layout.dynamic_vector(
            tables.context.precip[k],
            tables.context.temp[k],
            tables.context.aqi[k],
            tables.time_at(t),
        )
    };

    let mut x_obs = Vec::with_capacity(plan.obs.len() * w * f);
    let mut obs_mask = Vec::with_capacity(plan.obs.len() * w);
    for &s in &plan.obs {
        let st = static_of(s);
        for t in plan.start..plan.start + w {
            let i = tables.idx(s, t);
            let valid = tables.readings.valid[i];
            obs_mask.push(valid);
            if valid {
                x_obs.push(tables.readings.speed[i]);
                x_obs.push(tables.readings.flow[i]);
            } else {
                x_obs.extend_from_slice(&[0.0, 0.0]);
            }
            x_obs.extend_from_slice(&st);
            x_obs.extend(dynamic_of(s, t));
        }
    }

    let mut x_query = Vec::with_capacity(plan.query.len() * w * fq);
    let mut y_target = Vec::with_capacity(plan.query.len() * h * 2);
    let mut target_mask = Vec::with_capacity(plan.query.len() * h);
    for &s in &plan.query {
        let st = static_of(s);
        for t in plan.start..plan.start + w {
            x_query.extend_from_slice(&st);
            x_query.extend(dynamic_of(s, t));
        }
        for off in task.target_offsets() {
            let i = tables.idx(s, plan.start + off);
            let valid = tables.readings.valid[i];
            target_mask.push(valid);
            if valid {
                y_target.push(tables.readings.speed[i]);
                y_target.push(tables.readings.flow[i]);
            } else {
                y_target.extend_from_slice(&[0.0, 0.0]);
            }
        }
    }

    TrafficSample {
        window_id: plan.window_id,
        start_time,
        task,
        f_total: f,
        x_obs,
        obs_mask,
        x_query,
        y_target,
        target_mask,
        global_context: encode_global_context(start_time),
        sensor_ids_obs: plan.obs.iter().map(|&s| tables.sensors[s].sensor_id.clone()).collect(),
        sensor_ids_query: plan.query.iter().map(|&s| tables.sensors[s].sensor_id.clone()).collect(),
        obs_index: plan.obs.clone(),
        query_index: plan.query.clone(),
    }
}
