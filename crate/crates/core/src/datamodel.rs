//! Domain types shared by every stage: sensor context, feature layout,
//! windowed samples and the dataset metadata file.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use chrono::{DateTime, Datelike, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::normalize::Normalizer;

pub const DATASET_VERSION: &str = "deepstate-synth-1";
pub const GLOBAL_CONTEXT_LEN: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoadClass {
    Freeway,
    Arterial,
}

impl RoadClass {
    pub fn as_str(self) -> &'static str {
        match self {
            RoadClass::Freeway => "freeway",
            RoadClass::Arterial => "arterial",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "freeway" => Some(RoadClass::Freeway),
            "arterial" => Some(RoadClass::Arterial),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        match self {
            RoadClass::Freeway => 0,
            RoadClass::Arterial => 1,
        }
    }
}

pub const ROAD_CLASS_VALUES: [&str; 2] = ["freeway", "arterial"];
pub const LANE_BUCKETS: [&str; 4] = ["1", "2", "3", "4+"];
pub const SPEED_BUCKETS: [&str; 4] = ["<=30", "35-45", "50-60", ">=65"];

/// Bucket of a lane count: `{1, 2, 3, 4+}`.
pub fn lanes_bucket(lanes: u32) -> Result<usize> {
    match lanes {
        0 => Err(Error::Layout("lanes must be >= 1".into())),
        1..=3 => Ok(lanes as usize - 1),
        _ => Ok(3),
    }
}

/// Bucket of a posted speed in mph: `{≤30, 35–45, 50–60, ≥65}`. Values in the
/// gaps between buckets are a layout bug and rejected.
pub fn speed_bucket(max_speed: f64) -> Result<usize> {
    if max_speed <= 30.0 {
        Ok(0)
    } else if (35.0..=45.0).contains(&max_speed) {
        Ok(1)
    } else if (50.0..=60.0).contains(&max_speed) {
        Ok(2)
    } else if max_speed >= 65.0 {
        Ok(3)
    } else {
        Err(Error::Layout(format!("max_speed {max_speed} mph falls outside every speed bucket")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorContext {
    pub sensor_id: String,
    pub lat: f64,
    pub lon: f64,
    pub road_class: RoadClass,
    pub lanes: u32,
    pub max_speed: f64,
    pub neighborhood_id: String,
    pub freeway_id: Option<String>,
}

impl SensorContext {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(format!("lat {} outside [-90, 90]", self.lat));
        }
        if !(-180.0..=180.0).contains(&self.lon) {
            return Err(format!("lon {} outside [-180, 180]", self.lon));
        }
        if self.lanes < 1 {
            return Err("lanes >= 1 violated".into());
        }
        if !(self.max_speed > 0.0) {
            return Err("max_speed > 0 violated".into());
        }
        match (self.road_class, &self.freeway_id) {
            (RoadClass::Freeway, None) => Err("freeway sensor without freeway_id".into()),
            (RoadClass::Arterial, Some(_)) => Err("arterial sensor with freeway_id".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticFeature {
    pub name: String,
    /// `onehot` or `continuous`.
    pub encoding: String,
}

/// Ordered feature names of one dataset version. Per-timestamp feature
/// vectors are `[traffic | static | dynamic]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub version: String,
    pub traffic_features: Vec<String>,
    pub static_features: Vec<StaticFeature>,
    pub dynamic_features: Vec<String>,
}

pub const DOW_NAMES: [&str; 7] = ["mon", "tue", "wed", "thu", "fri", "sat", "sun"];

impl FeatureLayout {
    pub fn standard() -> Self {
        let onehot = |name: String| StaticFeature {
            name,
            encoding: "onehot".into(),
        };
        let mut static_features = Vec::new();
        for v in ROAD_CLASS_VALUES {
            static_features.push(onehot(format!("road_class={v}")));
        }
        for v in LANE_BUCKETS {
            static_features.push(onehot(format!("lanes={v}")));
        }
        for v in SPEED_BUCKETS {
            static_features.push(onehot(format!("max_speed={v}")));
        }
        for name in ["lat", "lon"] {
            static_features.push(StaticFeature {
                name: name.into(),
                encoding: "continuous".into(),
            });
        }
        let mut dynamic_features: Vec<String> = ["precip_mm", "temp_c", "aqi", "time_of_day_sin", "time_of_day_cos"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        dynamic_features.extend(DOW_NAMES.iter().map(|d| format!("day_of_week={d}")));
        Self {
            version: DATASET_VERSION.into(),
            traffic_features: vec!["speed".into(), "flow".into()],
            static_features,
            dynamic_features,
        }
    }

    pub fn f_static(&self) -> usize {
        self.static_features.len()
    }

    pub fn f_dynamic(&self) -> usize {
        self.dynamic_features.len()
    }

    pub fn f_total(&self) -> usize {
        self.traffic_features.len() + self.f_static() + self.f_dynamic()
    }

    pub fn static_offset(&self) -> usize {
        self.traffic_features.len()
    }

    pub fn dynamic_offset(&self) -> usize {
        self.static_offset() + self.f_static()
    }

    /// Positions (within the dynamic block) of the weather and air-quality
    /// features that drive environmental assignments.
    pub fn environmental_dynamic_indices(&self) -> Vec<usize> {
        ["precip_mm", "temp_c", "aqi"]
            .iter()
            .filter_map(|n| self.dynamic_features.iter().position(|f| f == n))
            .collect()
    }

    /// Whether the feature at absolute index `f` is normalized (z-scored).
    /// One-hot encodings and the bounded time-of-day pair pass through.
    pub fn is_scaled(&self, f: usize) -> bool {
        if f < self.static_offset() {
            return true;
        }
        if f < self.dynamic_offset() {
            return self.static_features[f - self.static_offset()].encoding == "continuous";
        }
        let name = &self.dynamic_features[f - self.dynamic_offset()];
        matches!(name.as_str(), "precip_mm" | "temp_c" | "aqi")
    }

    pub fn feature_name(&self, f: usize) -> String {
        if f < self.static_offset() {
            self.traffic_features[f].clone()
        } else if f < self.dynamic_offset() {
            self.static_features[f - self.static_offset()].name.clone()
        } else {
            self.dynamic_features[f - self.dynamic_offset()].clone()
        }
    }

    /// Static feature vector of one sensor in layout order.
    pub fn static_vector(&self, ctx: &SensorContext) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.f_static()];
        v[ctx.road_class.index()] = 1.0;
        v[2 + lanes_bucket(ctx.lanes)?] = 1.0;
        v[6 + speed_bucket(ctx.max_speed)?] = 1.0;
        v[10] = ctx.lat;
        v[11] = ctx.lon;
        Ok(v)
    }

    /// Dynamic feature vector for one sensor at one timestamp.
    pub fn dynamic_vector(&self, precip: f64, temp: f64, aqi: f64, time: DateTime<Utc>) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.f_dynamic());
        v.extend_from_slice(&[precip, temp, aqi]);
        v.extend(encode_global_context(time));
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Reconstruct,
    Forecast,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Reconstruct => "reconstruct",
            Mode::Forecast => "forecast",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reconstruct" => Ok(Mode::Reconstruct),
            "forecast" => Ok(Mode::Forecast),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMode {
    pub mode: Mode,
    pub window: usize,
    pub horizon: usize,
}

impl TaskMode {
    pub fn new(mode: Mode, window: usize, horizon: usize) -> Self {
        Self { mode, window, horizon }
    }

    /// Offsets, relative to the window start, of the target timestamps.
    pub fn target_offsets(&self) -> std::ops::Range<usize> {
        match self.mode {
            Mode::Reconstruct => self.window.saturating_sub(self.horizon)..self.window,
            Mode::Forecast => self.window..self.window + self.horizon,
        }
    }

    /// Number of timestamps a window occupies including any forecast horizon.
    pub fn span(&self) -> usize {
        match self.mode {
            Mode::Reconstruct => self.window,
            Mode::Forecast => self.window + self.horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.horizon == 0 {
            return Err(Error::Config("window and horizon must be >= 1".into()));
        }
        if self.mode == Mode::Reconstruct && self.horizon > self.window {
            return Err(Error::Config(format!(
                "reconstruct mode requires H <= W (H = {}, W = {})",
                self.horizon, self.window
            )));
        }
        Ok(())
    }
}

/// One windowed example.
///
/// Tensors are flat row-major: `x_obs[s][t][f]` has `f_total` features,
/// `x_query[q][t][f]` drops the two traffic features, `y_target[q][h][c]`
/// carries speed (`c = 0`) and flow (`c = 1`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficSample {
    pub window_id: usize,
    pub start_time: DateTime<Utc>,
    pub task: TaskMode,
    pub f_total: usize,
    pub x_obs: Vec<f64>,
    pub obs_mask: Vec<bool>,
    pub x_query: Vec<f64>,
    pub y_target: Vec<f64>,
    pub target_mask: Vec<bool>,
    pub global_context: Vec<f64>,
    pub sensor_ids_obs: Vec<String>,
    pub sensor_ids_query: Vec<String>,
    /// Positions of the observation / query sensors in the dataset's sensor list.
    pub obs_index: Vec<usize>,
    pub query_index: Vec<usize>,
}

impl TrafficSample {
    pub fn n_obs(&self) -> usize {
        self.sensor_ids_obs.len()
    }

    pub fn n_query(&self) -> usize {
        self.sensor_ids_query.len()
    }

    pub fn window(&self) -> usize {
        self.task.window
    }

    pub fn horizon(&self) -> usize {
        self.task.horizon
    }

    #[inline]
    pub fn obs(&self, s: usize, t: usize, f: usize) -> f64 {
        self.x_obs[(s * self.task.window + t) * self.f_total + f]
    }

    #[inline]
    pub fn obs_valid(&self, s: usize, t: usize) -> bool {
        self.obs_mask[s * self.task.window + t]
    }

    #[inline]
    pub fn query(&self, q: usize, t: usize, f: usize) -> f64 {
        self.x_query[(q * self.task.window + t) * (self.f_total - 2) + f]
    }

    #[inline]
    pub fn target(&self, q: usize, h: usize, c: usize) -> f64 {
        self.y_target[(q * self.task.horizon + h) * 2 + c]
    }

    #[inline]
    pub fn target_valid(&self, q: usize, h: usize) -> bool {
        self.target_mask[q * self.task.horizon + h]
    }

    pub fn n_supervised(&self) -> usize {
        self.target_mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub invariant: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.invariant, self.detail)
    }
}

/// Every violated sample invariant; empty when the sample is well-formed.
pub fn validate_sample(sample: &TrafficSample, layout: &FeatureLayout) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |invariant: &'static str, detail: String| out.push(Violation { invariant, detail });
    let (w, h) = (sample.task.window, sample.task.horizon);
    if w == 0 || h == 0 {
        push("W, H >= 1", format!("W = {w}, H = {h}"));
    }
    if sample.task.mode == Mode::Reconstruct && h > w {
        push("H <= W", format!("H = {h} > W = {w} in reconstruct mode"));
    }
    if sample.f_total != layout.f_total() {
        push(
            "feature count",
            format!("sample has {} features, layout {}", sample.f_total, layout.f_total()),
        );
    }
    let (ns, nq) = (sample.n_obs(), sample.n_query());
    let f = sample.f_total;
    let checks = [
        ("x_obs shape", sample.x_obs.len(), ns * w * f),
        ("obs_mask shape", sample.obs_mask.len(), ns * w),
        ("x_query shape (no traffic features)", sample.x_query.len(), nq * w * f.saturating_sub(2)),
        ("y_target shape", sample.y_target.len(), nq * h * 2),
        ("target_mask shape", sample.target_mask.len(), nq * h),
        ("global_context length", sample.global_context.len(), GLOBAL_CONTEXT_LEN),
        ("obs_index length", sample.obs_index.len(), ns),
        ("query_index length", sample.query_index.len(), nq),
    ];
    for (name, got, want) in checks {
        if got != want {
            push(name, format!("expected {want}, found {got}"));
        }
    }
    let obs_ids: HashSet<&str> = sample.sensor_ids_obs.iter().map(String::as_str).collect();
    if obs_ids.len() != ns {
        push("unique observation ids", "duplicate observation sensor id".into());
    }
    let mut seen_q = HashSet::new();
    for id in &sample.sensor_ids_query {
        if obs_ids.contains(id.as_str()) {
            push("disjointness", format!("sensor `{id}` is both observation and query"));
        }
        if !seen_q.insert(id.as_str()) {
            push("unique query ids", format!("duplicate query id `{id}`"));
        }
    }
    let tensors: [(&str, &[f64]); 4] = [
        ("x_obs", &sample.x_obs),
        ("x_query", &sample.x_query),
        ("y_target", &sample.y_target),
        ("global_context", &sample.global_context),
    ];
    for (name, data) in tensors {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            push("finite values", format!("{name}[{i}] is not finite"));
        }
    }
    out
}

/// `[sin(2πm/1440), cos(2πm/1440), one-hot(day of week, Monday first)]`
/// with `m` the minute of day.
pub fn encode_global_context(start_time: DateTime<Utc>) -> Vec<f64> {
    let minutes = start_time.hour() as f64 * 60.0 + start_time.minute() as f64;
    let phase = 2.0 * PI * minutes / 1440.0;
    let mut v = vec![0.0; GLOBAL_CONTEXT_LEN];
    v[0] = phase.sin();
    v[1] = phase.cos();
    v[2 + start_time.weekday().num_days_from_monday() as usize] = 1.0;
    v
}

/// Contents of the dataset `metadata.json` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub dataset_version: String,
    pub layout: FeatureLayout,
    pub window: usize,
    pub horizon: usize,
    pub interval_minutes: u32,
    pub start_time: DateTime<Utc>,
    pub n_timestamps: usize,
    pub n_sensors: usize,
    pub normalizer: Option<Normalizer>,
}

impl DatasetMetadata {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    pub(crate) fn toy_sample(mode: Mode, w: usize, h: usize) -> TrafficSample {
        let layout = FeatureLayout::standard();
        let f = layout.f_total();
        let start = Utc.with_ymd_and_hms(2022, 11, 14, 0, 0, 0).unwrap();
        TrafficSample {
            window_id: 0,
            start_time: start,
            task: TaskMode::new(mode, w, h),
            f_total: f,
            x_obs: vec![0.5; 2 * w * f],
            obs_mask: vec![true; 2 * w],
            x_query: vec![0.1; w * (f - 2)],
            y_target: vec![1.0; h * 2],
            target_mask: vec![true; h],
            global_context: encode_global_context(start),
            sensor_ids_obs: vec!["s1".into(), "s2".into()],
            sensor_ids_query: vec!["s3".into()],
            obs_index: vec![0, 1],
            query_index: vec![2],
        }
    }

    #[test]
    fn well_formed_forecast_sample_has_no_violations() {
        let s = toy_sample(Mode::Forecast, 12, 12);
        assert_eq!(validate_sample(&s, &FeatureLayout::standard()), vec![]);
    }

    #[test]
    fn overlapping_ids_are_reported() {
        let mut s = toy_sample(Mode::Forecast, 12, 12);
        s.sensor_ids_query = vec!["s7".into()];
        s.sensor_ids_obs = vec!["s1".into(), "s7".into()];
        let v = validate_sample(&s, &FeatureLayout::standard());
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].invariant, "disjointness");
        assert!(v[0].detail.contains("s7"));
    }

    #[test]
    fn reconstruct_horizon_longer_than_window_is_reported() {
        let s = toy_sample(Mode::Reconstruct, 12, 13);
        let v = validate_sample(&s, &FeatureLayout::standard());
        assert!(v.iter().any(|x| x.invariant == "H <= W"), "{v:?}");
    }

    #[test]
    fn query_tensor_with_traffic_columns_is_reported() {
        let mut s = toy_sample(Mode::Forecast, 4, 2);
        s.x_query = vec![0.0; 4 * s.f_total];
        let v = validate_sample(&s, &FeatureLayout::standard());
        assert!(v.iter().any(|x| x.invariant.starts_with("x_query")));
    }

    #[test]
    fn global_context_examples() {
        let monday = Utc.with_ymd_and_hms(2022, 11, 14, 0, 0, 0).unwrap();
        assert_eq!(encode_global_context(monday), vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        let six = Utc.with_ymd_and_hms(2022, 11, 16, 6, 0, 0).unwrap();
        let v = encode_global_context(six);
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);

        let sunday_evening = Utc.with_ymd_and_hms(2022, 11, 20, 18, 0, 0).unwrap();
        let v = encode_global_context(sunday_evening);
        let want = [-1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        for (a, b) in v.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{v:?}");
        }
    }

    #[test]
    fn sinusoid_pair_has_unit_norm() {
        let base = Utc.with_ymd_and_hms(2022, 11, 14, 0, 0, 0).unwrap();
        for k in 0..288 {
            let v = encode_global_context(base + chrono::Duration::minutes(5 * k + 7));
            assert!((v[0].hypot(v[1]) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layout_round_trips_through_json() {
        let layout = FeatureLayout::standard();
        assert_eq!(layout.f_total(), 2 + layout.f_static() + layout.f_dynamic());
        let text = serde_json::to_string(&layout).unwrap();
        let back: FeatureLayout = serde_json::from_str(&text).unwrap();
        assert_eq!(back, layout);
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }

    #[test]
    fn buckets_cover_generator_values_and_reject_gaps() {
        assert_eq!(speed_bucket(25.0).unwrap(), 0);
        assert_eq!(speed_bucket(40.0).unwrap(), 1);
        assert_eq!(speed_bucket(55.0).unwrap(), 2);
        assert_eq!(speed_bucket(65.0).unwrap(), 3);
        assert!(speed_bucket(32.0).is_err());
        assert_eq!(lanes_bucket(7).unwrap(), 3);
        assert!(lanes_bucket(0).is_err());
    }

    #[test]
    fn sensor_context_invariants() {
        let mut c = SensorContext {
            sensor_id: "a".into(),
            lat: 34.0,
            lon: -118.0,
            road_class: RoadClass::Freeway,
            lanes: 3,
            max_speed: 65.0,
            neighborhood_id: "n0".into(),
            freeway_id: Some("f0".into()),
        };
        assert!(c.validate().is_ok());
        c.freeway_id = None;
        assert!(c.validate().is_err());
        c.road_class = RoadClass::Arterial;
        assert!(c.validate().is_ok());
        c.lat = 91.0;
        assert!(c.validate().is_err());
    }
}
