//! Reference predictors that use only the visible observations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::haversine_km;
use crate::datamodel::{Mode, TrafficSample};
use crate::head::{MetricAccumulator, MetricReport, EPS_MAPE};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Per-timestamp mean over valid observation sensors.
    MeanObservations,
    /// Value of the closest observation sensor valid at that timestamp.
    NearestObservation,
    /// Last valid value of the closest observation sensor, carried forward.
    Persistence,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Baseline::MeanObservations, Baseline::NearestObservation, Baseline::Persistence];

    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::MeanObservations => "mean_observations",
            Baseline::NearestObservation => "nearest_observation",
            Baseline::Persistence => "persistence",
        }
    }

    /// Raw-unit `|Q| × 2H` predictions. `positions` holds (lat, lon) of every
    /// dataset sensor.
    pub fn predict(self, sample: &TrafficSample, positions: &[(f64, f64)]) -> Mat {
        let (q_n, h_n, w) = (sample.n_query(), sample.horizon(), sample.window());
        let mut out = Mat::zeros(q_n, 2 * h_n);
        // window step whose observations stand in for horizon step h
        let step = |h: usize| match sample.task.mode {
            Mode::Reconstruct => w - h_n + h,
            Mode::Forecast => w - 1,
        };
        let means: Vec<[f64; 2]> = (0..w).map(|t| valid_mean(sample, t)).collect();
        for q in 0..q_n {
            let order = match self {
                Baseline::MeanObservations => Vec::new(),
                _ => by_distance(sample, q, positions),
            };
            for h in 0..h_n {
                let t = step(h);
                let v = match self {
                    Baseline::MeanObservations => means[t],
                    Baseline::NearestObservation => order
                        .iter()
                        .find(|&&s| sample.obs_valid(s, t))
                        .map_or(means[t], |&s| [sample.obs(s, t, 0), sample.obs(s, t, 1)]),
                    Baseline::Persistence => order
                        .iter()
                        .find_map(|&s| {
                            (0..w)
                                .rev()
                                .find(|&u| sample.obs_valid(s, u))
                                .map(|u| [sample.obs(s, u, 0), sample.obs(s, u, 1)])
                        })
                        .unwrap_or([0.0; 2]),
                };
                out[(q, 2 * h)] = v[0];
                out[(q, 2 * h + 1)] = v[1];
            }
        }
        out
    }
}

/// Mean speed and flow over sensors valid at `t`, falling back to the whole
/// window, then to zero.
fn valid_mean(sample: &TrafficSample, t: usize) -> [f64; 2] {
    let mean_over = |ts: &mut dyn Iterator<Item = usize>| {
        let mut acc = [0.0; 2];
        let mut n = 0usize;
        for u in ts {
            for s in 0..sample.n_obs() {
                if sample.obs_valid(s, u) {
                    acc[0] += sample.obs(s, u, 0);
                    acc[1] += sample.obs(s, u, 1);
                    n += 1;
                }
            }
        }
        (n > 0).then(|| [acc[0] / n as f64, acc[1] / n as f64])
    };
    mean_over(&mut std::iter::once(t))
        .or_else(|| mean_over(&mut (0..sample.window())))
        .unwrap_or([0.0; 2])
}

/// Observation sensors ordered by distance to query `q`, ties by position.
fn by_distance(sample: &TrafficSample, q: usize, positions: &[(f64, f64)]) -> Vec<usize> {
    let (qlat, qlon) = positions[sample.query_index[q]];
    let mut d: Vec<(f64, usize)> = (0..sample.n_obs())
        .map(|s| {
            let (lat, lon) = positions[sample.obs_index[s]];
            (haversine_km(qlat, qlon, lat, lon), s)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().map(|(_, s)| s).collect()
}

pub fn evaluate_baseline<I>(baseline: Baseline, samples: I, positions: &[(f64, f64)], split: &str) -> MetricReport
where
    I: IntoParallelIterator<Item = TrafficSample>,
{
    let mut task = None;
    let accs: Vec<(MetricAccumulator, (Mode, usize))> = samples
        .into_par_iter()
        .map(|s| {
            let pred = baseline.predict(&s, positions);
            let mut acc = MetricAccumulator::new(EPS_MAPE);
            acc.push_sample(&pred, &s);
            (acc, (s.task.mode, s.task.horizon))
        })
        .collect();
    let mut total = MetricAccumulator::new(EPS_MAPE);
    for (a, t) in &accs {
        total.merge(a);
        task = Some(*t);
    }
    let (mode, horizon) = task.unwrap_or((Mode::Reconstruct, 0));
    total.finish(baseline.as_str(), split, mode, horizon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{encode_global_context, TaskMode};
    use chrono::{TimeZone, Utc};

    /// Two observation sensors, one query; W = 2, H = 1, f_total = 4.
    fn toy(mode: Mode) -> TrafficSample {
        let start = Utc.with_ymd_and_hms(2022, 11, 14, 0, 0, 0).unwrap();
        let f = 4;
        // obs s0: (10,100) (20,200); obs s1: (30,300) (masked)
        let x_obs = vec![10.0, 100.0, 0.0, 0.0, 20.0, 200.0, 0.0, 0.0, 30.0, 300.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        TrafficSample {
            window_id: 0,
            start_time: start,
            task: TaskMode::new(mode, 2, 1),
            f_total: f,
            x_obs,
            obs_mask: vec![true, true, true, false],
            x_query: vec![0.0; 4],
            y_target: vec![25.0, 250.0],
            target_mask: vec![true],
            global_context: encode_global_context(start),
            sensor_ids_obs: vec!["a".into(), "b".into()],
            sensor_ids_query: vec!["q".into()],
            obs_index: vec![0, 1],
            query_index: vec![2],
        }
    }

    fn positions() -> Vec<(f64, f64)> {
        // the query sits next to sensor b
        vec![(34.0, -118.0), (34.1, -118.0), (34.1001, -118.0)]
    }

    #[test]
    fn mean_baseline_uses_valid_sensors_only() {
        let p = Baseline::MeanObservations.predict(&toy(Mode::Reconstruct), &positions());
        assert_eq!(p.row(0), &[20.0, 200.0]);
    }

    #[test]
    fn nearest_skips_invalid_neighbors() {
        let p = Baseline::NearestObservation.predict(&toy(Mode::Reconstruct), &positions());
        assert_eq!(p.row(0), &[20.0, 200.0]);
    }

    #[test]
    fn persistence_carries_last_valid_value() {
        let p = Baseline::Persistence.predict(&toy(Mode::Forecast), &positions());
        assert_eq!(p.row(0), &[30.0, 300.0]);
    }

    #[test]
    fn baseline_metrics_match_hand_values() {
        let r = evaluate_baseline(Baseline::MeanObservations, vec![toy(Mode::Reconstruct)], &positions(), "test");
        assert_eq!(r.mae("speed"), 5.0);
        assert_eq!(r.mae("flow"), 50.0);
    }
}
