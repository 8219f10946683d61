//! Per-feature z-score normalization fitted on the training split.

use std::borrow::Borrow;

use serde::{Deserialize, Serialize};

use crate::datamodel::{FeatureLayout, TrafficSample};

/// Affine statistics for every feature of a layout. Unscaled features
/// (one-hot encodings, the time-of-day pair) carry mean 0 and scale 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Clone, Copy, Default)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn std(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.m2 / self.n as f64).sqrt()
        }
    }
}

impl Normalizer {
    pub fn identity(f_total: usize) -> Self {
        Self {
            mean: vec![0.0; f_total],
            scale: vec![1.0; f_total],
        }
    }

    /// Single sequential pass over training samples. Masked traffic entries
    /// are excluded; a zero-variance feature gets scale 1.
    pub fn fit<S: Borrow<TrafficSample>>(samples: impl IntoIterator<Item = S>, layout: &FeatureLayout) -> Self {
        let f_total = layout.f_total();
        let mut acc = vec![Welford::default(); f_total];
        for s in samples {
            let s = s.borrow();
            let w = s.window();
            for i in 0..s.n_obs() {
                for t in 0..w {
                    let valid = s.obs_valid(i, t);
                    for (f, a) in acc.iter_mut().enumerate() {
                        if f < 2 && !valid {
                            continue;
                        }
                        a.push(s.obs(i, t, f));
                    }
                }
            }
            for q in 0..s.n_query() {
                for t in 0..w {
                    for (f, a) in acc.iter_mut().enumerate().skip(2) {
                        a.push(s.query(q, t, f - 2));
                    }
                }
                for h in 0..s.horizon() {
                    if s.target_valid(q, h) {
                        acc[0].push(s.target(q, h, 0));
                        acc[1].push(s.target(q, h, 1));
                    }
                }
            }
        }
        let mut out = Self::identity(f_total);
        for (f, a) in acc.iter().enumerate() {
            if !layout.is_scaled(f) {
                continue;
            }
            out.mean[f] = a.mean;
            let sd = a.std();
            out.scale[f] = if sd > 1e-12 { sd } else { 1.0 };
        }
        out
    }

    #[inline]
    pub fn apply(&self, f: usize, x: f64) -> f64 {
        (x - self.mean[f]) / self.scale[f]
    }

    #[inline]
    pub fn invert(&self, f: usize, z: f64) -> f64 {
        z * self.scale[f] + self.mean[f]
    }

    /// Normalized copy of a sample. Masked traffic entries stay exactly 0.
    pub fn apply_sample(&self, sample: &TrafficSample) -> TrafficSample {
        let mut out = sample.clone();
        let f_total = sample.f_total;
        let w = sample.window();
        for i in 0..sample.n_obs() {
            for t in 0..w {
                let valid = sample.obs_valid(i, t);
                let base = (i * w + t) * f_total;
                for f in 0..f_total {
                    let x = &mut out.x_obs[base + f];
                    *x = if f < 2 && !valid { 0.0 } else { self.apply(f, *x) };
                }
            }
        }
        for (k, x) in out.x_query.iter_mut().enumerate() {
            *x = self.apply(2 + k % (f_total - 2), *x);
        }
        for (k, y) in out.y_target.iter_mut().enumerate() {
            *y = if sample.target_mask[k / 2] { self.apply(k % 2, *y) } else { 0.0 };
        }
        out
    }

    /// Restores raw speed (`channel = 0`) or flow (`channel = 1`).
    pub fn invert_traffic(&self, channel: usize, z: f64) -> f64 {
        self.invert(channel, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{encode_global_context, Mode, TaskMode};
    use chrono::{TimeZone, Utc};
    use proptest::prelude::*;

    fn sample_with(speeds: &[f64], const_lat: f64) -> TrafficSample {
        let layout = FeatureLayout::standard();
        let f = layout.f_total();
        let w = speeds.len();
        let mut x_obs = vec![0.0; w * f];
        for (t, s) in speeds.iter().enumerate() {
            x_obs[t * f] = *s;
            x_obs[t * f + 1] = 2.0 * s;
            x_obs[t * f + 2 + 10] = const_lat;
        }
        let start = Utc.with_ymd_and_hms(2022, 11, 14, 0, 0, 0).unwrap();
        TrafficSample {
            window_id: 0,
            start_time: start,
            task: TaskMode::new(Mode::Reconstruct, w, 1),
            f_total: f,
            x_obs,
            obs_mask: vec![true; w],
            x_query: vec![],
            y_target: vec![],
            target_mask: vec![],
            global_context: encode_global_context(start),
            sensor_ids_obs: vec!["a".into()],
            sensor_ids_query: vec![],
            obs_index: vec![0],
            query_index: vec![],
        }
    }

    #[test]
    fn constant_feature_maps_to_zero() {
        let layout = FeatureLayout::standard();
        let s = sample_with(&[1.0, 2.0, 3.0], 7.0);
        let norm = Normalizer::fit([&s], &layout);
        assert_eq!(norm.scale[12], 1.0);
        let z = norm.apply_sample(&s);
        for t in 0..3 {
            assert_eq!(z.obs(0, t, 12), 0.0);
        }
    }

    #[test]
    fn statistics_come_from_the_training_split_only() {
        let layout = FeatureLayout::standard();
        let train = sample_with(&[10.0, 20.0, 30.0, 40.0], 1.0);
        let test = sample_with(&[100.0, 200.0], 1.0);
        let norm = Normalizer::fit([&train], &layout);
        // independent recomputation of the training speed statistics
        let xs = [10.0, 20.0, 30.0, 40.0];
        let m = xs.iter().sum::<f64>() / 4.0;
        let sd = (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0).sqrt();
        assert!((norm.mean[0] - m).abs() < 1e-12);
        assert!((norm.scale[0] - sd).abs() < 1e-12);
        let z = norm.apply_sample(&test);
        assert!((z.obs(0, 0, 0) - (100.0 - m) / sd).abs() < 1e-12);
    }

    #[test]
    fn masked_traffic_is_excluded_and_zero_filled() {
        let layout = FeatureLayout::standard();
        let mut s = sample_with(&[10.0, 20.0, 1000.0], 1.0);
        s.obs_mask[2] = false;
        let norm = Normalizer::fit([&s], &layout);
        assert!((norm.mean[0] - 15.0).abs() < 1e-12);
        let z = norm.apply_sample(&s);
        assert_eq!(z.obs(0, 2, 0), 0.0);
        assert_eq!(z.obs(0, 2, 1), 0.0);
    }

    #[test]
    fn one_hot_features_pass_through() {
        let layout = FeatureLayout::standard();
        let s = sample_with(&[1.0, 5.0], 3.0);
        let norm = Normalizer::fit([&s], &layout);
        for f in 0..layout.f_total() {
            if !layout.is_scaled(f) {
                assert_eq!((norm.mean[f], norm.scale[f]), (0.0, 1.0));
            }
        }
    }

    proptest! {
        #[test]
        fn apply_then_invert_round_trips(xs in proptest::collection::vec(-1e4f64..1e4, 1..50),
                                         mean in -100.0f64..100.0, scale in 0.01f64..50.0) {
            let norm = Normalizer { mean: vec![mean; 3], scale: vec![scale; 3] };
            for x in xs {
                let back = norm.invert(1, norm.apply(1, x));
                prop_assert!((back - x).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }
    }
}
