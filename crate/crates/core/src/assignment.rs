//! Deep-state-node registry and sensor-to-node assignment weights.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::datamodel::{lanes_bucket, speed_bucket, SensorContext, LANE_BUCKETS, ROAD_CLASS_VALUES, SPEED_BUCKETS};
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DsnType {
    Spatial,
    Semantic,
    Environmental,
    Temporal,
}

impl DsnType {
    pub const ALL: [DsnType; 4] = [DsnType::Spatial, DsnType::Semantic, DsnType::Environmental, DsnType::Temporal];

    pub fn as_str(self) -> &'static str {
        match self {
            DsnType::Spatial => "spatial",
            DsnType::Semantic => "semantic",
            DsnType::Environmental => "environmental",
            DsnType::Temporal => "temporal",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighborhood {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
}

/// The fixed node taxonomy of a dataset. Rows of every assignment matrix are
/// ordered spatial (neighborhoods, then freeways), semantic, environmental,
/// temporal. A disabled family contributes no rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DsnRegistry {
    pub neighborhoods: Vec<Neighborhood>,
    pub freeways: Vec<String>,
    /// One label per semantic node, e.g. `lanes=2`.
    pub semantic: Vec<String>,
    pub n_env: usize,
    pub n_tmp: usize,
    pub sigma_km: f64,
    pub use_static: bool,
    pub use_dynamic: bool,
}

impl DsnRegistry {
    /// Neighborhood centers are centroids of member sensors; ids keep their
    /// first-appearance order.
    pub fn from_sensors(sensors: &[SensorContext], n_env: usize, n_tmp: usize, sigma_km: f64) -> Self {
        let mut neighborhoods: Vec<(String, f64, f64, usize)> = Vec::new();
        let mut freeways: Vec<String> = Vec::new();
        for s in sensors {
            match neighborhoods.iter_mut().find(|n| n.0 == s.neighborhood_id) {
                Some(n) => {
                    n.1 += s.lat;
                    n.2 += s.lon;
                    n.3 += 1;
                }
                None => neighborhoods.push((s.neighborhood_id.clone(), s.lat, s.lon, 1)),
            }
            if let Some(f) = &s.freeway_id {
                if !freeways.contains(f) {
                    freeways.push(f.clone());
                }
            }
        }
        let semantic = ROAD_CLASS_VALUES
            .iter()
            .map(|v| format!("road_class={v}"))
            .chain(LANE_BUCKETS.iter().map(|v| format!("lanes={v}")))
            .chain(SPEED_BUCKETS.iter().map(|v| format!("max_speed={v}")))
            .collect();
        Self {
            neighborhoods: neighborhoods
                .into_iter()
                .map(|(id, lat, lon, n)| Neighborhood {
                    id,
                    lat: lat / n as f64,
                    lon: lon / n as f64,
                })
                .collect(),
            freeways,
            semantic,
            n_env,
            n_tmp,
            sigma_km,
            use_static: true,
            use_dynamic: true,
        }
    }

    /// Keeps only the semantic nodes of the named property groups.
    pub fn restrict_semantic(&mut self, groups: &[&str]) {
        self.semantic.retain(|l| groups.iter().any(|g| l.split('=').next() == Some(*g)));
    }

    pub fn type_len(&self, t: DsnType) -> usize {
        match t {
            DsnType::Spatial if self.use_static => self.neighborhoods.len() + self.freeways.len(),
            DsnType::Semantic if self.use_static => self.semantic.len(),
            DsnType::Environmental if self.use_dynamic => self.n_env,
            DsnType::Temporal if self.use_dynamic => self.n_tmp,
            _ => 0,
        }
    }

    pub fn range(&self, t: DsnType) -> Range<usize> {
        let mut start = 0;
        for u in DsnType::ALL {
            let len = self.type_len(u);
            if u == t {
                return start..start + len;
            }
            start += len;
        }
        unreachable!()
    }

    pub fn n_nodes(&self) -> usize {
        DsnType::ALL.iter().map(|&t| self.type_len(t)).sum()
    }

    /// Rows covered by [`static_column`](Self::static_column).
    pub fn n_static(&self) -> usize {
        self.type_len(DsnType::Spatial) + self.type_len(DsnType::Semantic)
    }

    pub fn node_label(&self, i: usize) -> String {
        for t in DsnType::ALL {
            let r = self.range(t);
            if r.contains(&i) {
                let j = i - r.start;
                return match t {
                    DsnType::Spatial if j < self.neighborhoods.len() => format!("spatial:{}", self.neighborhoods[j].id),
                    DsnType::Spatial => format!("spatial:{}", self.freeways[j - self.neighborhoods.len()]),
                    DsnType::Semantic => format!("semantic:{}", self.semantic[j]),
                    _ => format!("{}:{j}", t.as_str()),
                };
            }
        }
        format!("node:{i}")
    }

    /// Spatial and semantic weights of one sensor.
    pub fn static_column(&self, ctx: &SensorContext) -> Result<Vec<f64>> {
        if !self.use_static {
            return Ok(Vec::new());
        }
        let mut col = assign_spatial(ctx, self);
        col.extend(assign_semantic(ctx, &self.semantic)?);
        Ok(col)
    }

    /// `n_sensors × n_static` table of static weights, one row per sensor.
    pub fn static_table(&self, sensors: &[SensorContext]) -> Result<Mat> {
        let mut data = Vec::with_capacity(sensors.len() * self.n_static());
        for s in sensors {
            data.extend(self.static_column(s)?);
        }
        Ok(Mat::from_vec(sensors.len(), self.n_static(), data))
    }
}

pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

pub fn gaussian_kernel(d_km: f64, sigma_km: f64) -> f64 {
    (-d_km * d_km / (2.0 * sigma_km * sigma_km)).exp()
}

/// Neighborhood rows use a gaussian kernel on the distance to the center;
/// freeway rows are 1 on the sensor's own freeway.
pub fn assign_spatial(ctx: &SensorContext, reg: &DsnRegistry) -> Vec<f64> {
    let mut col: Vec<f64> = reg
        .neighborhoods
        .iter()
        .map(|n| gaussian_kernel(haversine_km(ctx.lat, ctx.lon, n.lat, n.lon), reg.sigma_km))
        .collect();
    col.extend(reg.freeways.iter().map(|f| f64::from(ctx.freeway_id.as_deref() == Some(f.as_str()))));
    col
}

/// Semantic labels of one sensor, one per property group.
pub fn semantic_labels(ctx: &SensorContext) -> Result<[String; 3]> {
    Ok([
        format!("road_class={}", ctx.road_class.as_str()),
        format!("lanes={}", LANE_BUCKETS[lanes_bucket(ctx.lanes)?]),
        format!("max_speed={}", SPEED_BUCKETS[speed_bucket(ctx.max_speed)?]),
    ])
}

/// Binary membership of a sensor in each semantic node.
pub fn assign_semantic(ctx: &SensorContext, nodes: &[String]) -> Result<Vec<f64>> {
    let own = semantic_labels(ctx)?;
    Ok(nodes.iter().map(|n| f64::from(own.contains(n))).collect())
}

/// Keep-mask for a raw `N × S` assignment: entries below `tau` drop, and a
/// column left empty keeps its largest raw entry (lowest row on ties).
pub fn threshold_mask(raw: &Mat, tau: f64) -> Vec<f64> {
    let (n, s) = raw.shape();
    let mut mask: Vec<f64> = raw.data().iter().map(|&a| f64::from(a >= tau)).collect();
    for j in 0..s {
        if (0..n).all(|i| mask[i * s + j] == 0.0) && n > 0 {
            let mut best = 0;
            for i in 1..n {
                if raw[(i, j)] > raw[(best, j)] {
                    best = i;
                }
            }
            mask[best * s + j] = 1.0;
        }
    }
    mask
}

pub fn threshold_assignments(raw: &Mat, tau: f64) -> Mat {
    let mask = threshold_mask(raw, tau);
    Mat::from_vec(raw.rows(), raw.cols(), raw.data().iter().zip(&mask).map(|(a, m)| a * m).collect())
}

/// Thresholding on the tape; the kept support is constant for the step.
pub fn threshold_var(tape: &mut Tape, raw: Var, tau: f64) -> Var {
    let mask = threshold_mask(tape.value(raw), tau);
    tape.mask(raw, mask)
}

/// Checks that a summary width matches what a gate was built for.
pub fn check_gate_input(expected: usize, found: usize, which: &str) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Shape(format!("{which} gate expects {expected} input features, got {found}")))
    }
}
