//! Synthetic traffic worlds, CSV ingestion, windowing and normalization.
//!
//! The generator is built so every node family of the model has signal:
//! per-neighborhood latent congestion (spatial), road-class profiles and
//! posted speeds (semantic), rain slowdowns (environmental) and shared daily
//! shapes plus lagged freeway propagation (temporal).

pub mod ingest;
pub mod normalize;
pub mod windows;

use std::f64::consts::PI;

use chrono::{DateTime, Datelike, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{RoadClass, SensorContext};
use crate::error::{Error, Result};

pub const RAIN_SLOWDOWN: f64 = 0.8;
const ORIGIN_LAT: f64 = 34.05;
const ORIGIN_LON: f64 = -118.25;
const NEIGHBORHOOD_SPACING_KM: f64 = 6.0;
const KM_PER_DEG_LAT: f64 = 111.195;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_neighborhoods: usize,
    pub n_freeways: usize,
    pub n_sensors: usize,
    /// Minutes between readings.
    pub timestamp_interval: u32,
    /// Length in days.
    pub duration: u32,
    pub seed: u64,
    /// Probability of one outage interval per sensor-day.
    pub outage_rate: f64,
    /// Probability of rain per neighborhood-hour.
    pub rain_prob: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_neighborhoods: 6,
            n_freeways: 3,
            n_sensors: 200,
            timestamp_interval: 5,
            duration: 14,
            seed: 7,
            outage_rate: 0.05,
            rain_prob: 0.1,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_neighborhoods == 0 || self.n_freeways == 0 || self.n_sensors == 0 {
            return Err(Error::Config("world counts must all be >= 1".into()));
        }
        if self.n_sensors < self.n_neighborhoods {
            return Err(Error::Config(format!(
                "n_sensors ({}) < n_neighborhoods ({})",
                self.n_sensors, self.n_neighborhoods
            )));
        }
        if self.timestamp_interval == 0 || 1440 % self.timestamp_interval != 0 {
            return Err(Error::Config("timestamp_interval must divide a day".into()));
        }
        if self.duration == 0 {
            return Err(Error::Config("duration must be >= 1 day".into()));
        }
        for (name, p) in [("outage_rate", self.outage_rate), ("rain_prob", self.rain_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Per-sensor traffic readings, sensor-major (`[sensor][time]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ReadingTable {
    pub speed: Vec<f64>,
    pub flow: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Per-neighborhood environmental context, neighborhood-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextTable {
    pub neighborhood_ids: Vec<String>,
    pub precip: Vec<f64>,
    pub temp: Vec<f64>,
    pub aqi: Vec<f64>,
}

/// Time-aligned sensor, reading and context tables.
#[derive(Clone, Debug, PartialEq)]
pub struct Tables {
    pub sensors: Vec<SensorContext>,
    pub start: DateTime<Utc>,
    pub interval_minutes: u32,
    pub n_times: usize,
    pub readings: ReadingTable,
    pub context: ContextTable,
    /// Row of each sensor's neighborhood in the context table.
    pub sensor_neighborhood: Vec<usize>,
}

impl Tables {
    pub fn n_sensors(&self) -> usize {
        self.sensors.len()
    }

    #[inline]
    pub fn idx(&self, sensor: usize, t: usize) -> usize {
        sensor * self.n_times + t
    }

    #[inline]
    pub fn ctx_idx(&self, neighborhood: usize, t: usize) -> usize {
        neighborhood * self.n_times + t
    }

    pub fn time_at(&self, t: usize) -> DateTime<Utc> {
        self.start + Duration::minutes(t as i64 * self.interval_minutes as i64)
    }

    pub fn timestamps_per_day(&self) -> usize {
        (1440 / self.interval_minutes) as usize
    }

    pub fn sensor_position(&self, id: &str) -> Option<usize> {
        self.sensors.iter().position(|s| s.sensor_id == id)
    }

    /// Copy restricted to the first `n` sensors.
    pub fn subset_sensors(&self, n: usize) -> Tables {
        let n = n.min(self.n_sensors());
        let cut = |v: &Vec<f64>| v[..n * self.n_times].to_vec();
        Tables {
            sensors: self.sensors[..n].to_vec(),
            start: self.start,
            interval_minutes: self.interval_minutes,
            n_times: self.n_times,
            readings: ReadingTable {
                speed: cut(&self.readings.speed),
                flow: cut(&self.readings.flow),
                valid: self.readings.valid[..n * self.n_times].to_vec(),
            },
            context: self.context.clone(),
            sensor_neighborhood: self.sensor_neighborhood[..n].to_vec(),
        }
    }
}

pub fn world_start() -> DateTime<Utc> {
    // a Monday
    Utc.with_ymd_and_hms(2022, 11, 14, 0, 0, 0).unwrap()
}

fn bump(hour: f64, center: f64, width: f64) -> f64 {
    let d = hour - center;
    (-d * d / (2.0 * width * width)).exp()
}

/// Daily congestion shape in `[0, 1)` for a road class.
pub fn congestion_profile(class: RoadClass, minute_of_day: f64, weekend: bool) -> f64 {
    let h = minute_of_day / 60.0;
    let c = match class {
        RoadClass::Freeway => 0.5 * bump(h, 8.0, 1.2) + 0.6 * bump(h, 17.5, 1.5) + 0.05,
        RoadClass::Arterial => 0.35 * bump(h, 8.5, 1.5) + 0.15 * bump(h, 12.5, 1.5) + 0.45 * bump(h, 17.0, 1.8) + 0.08,
    };
    if weekend {
        0.4 * c
    } else {
        c
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn offset_deg(lat: f64, dx_km: f64, dy_km: f64) -> (f64, f64) {
    let dlat = dy_km / KM_PER_DEG_LAT;
    let dlon = dx_km / (KM_PER_DEG_LAT * (lat * PI / 180.0).cos());
    (dlat, dlon)
}

/// Generates a synthetic world; a pure function of `cfg` (including its seed).
pub fn generate_world(cfg: &WorldConfig) -> Result<Tables> {
    cfg.validate()?;
    let seed = cfg.seed;
    let n = cfg.n_sensors;
    let n_nb = cfg.n_neighborhoods;
    let per_day = (1440 / cfg.timestamp_interval) as usize;
    let n_times = per_day * cfg.duration as usize;
    let start = world_start();

    // --- layout
    let grid = (n_nb as f64).sqrt().ceil() as usize;
    // neighborhood centers on a square grid, in km east / north of the origin
    let grid_km: Vec<(f64, f64)> = (0..n_nb)
        .map(|k| ((k % grid) as f64 * NEIGHBORHOOD_SPACING_KM, (k / grid) as f64 * NEIGHBORHOOD_SPACING_KM))
        .collect();
    let to_deg = |(x, y): (f64, f64)| {
        let (dlat, dlon) = offset_deg(ORIGIN_LAT, x, y);
        (ORIGIN_LAT + dlat, ORIGIN_LON + dlon)
    };
    let n_arterial = ((n as f64 * 0.6).round() as usize).max(n_nb.min(n)).min(n);
    let n_fwy_sensors = n - n_arterial;
    let fwy_len: Vec<usize> = (0..cfg.n_freeways)
        .map(|f| (n_fwy_sensors + cfg.n_freeways - 1 - f) / cfg.n_freeways)
        .collect();
    // freeways are straight lines through the grid at evenly spread headings
    let (gx_max, gy_max) = grid_km.iter().fold((0.0f64, 0.0f64), |a, p| (a.0.max(p.0), a.1.max(p.1)));
    let mid = (gx_max / 2.0, gy_max / 2.0);
    let fwy_length = (gx_max.hypot(gy_max) + NEIGHBORHOOD_SPACING_KM).max(NEIGHBORHOOD_SPACING_KM);
    let fwy_point = |f: usize, pos: usize| {
        let theta = PI * f as f64 / cfg.n_freeways as f64;
        let (dx, dy) = (theta.cos(), theta.sin());
        let shift = (f as f64 - (cfg.n_freeways as f64 - 1.0) / 2.0) * 1.5;
        let along = fwy_length * ((pos as f64 + 0.5) / fwy_len[f].max(1) as f64 - 0.5);
        (mid.0 + along * dx - shift * dy, mid.1 + along * dy + shift * dx)
    };
    let nearest_center = |p: (f64, f64)| {
        (0..n_nb)
            .min_by(|&a, &b| {
                let da = (grid_km[a].0 - p.0).hypot(grid_km[a].1 - p.1);
                let db = (grid_km[b].0 - p.0).hypot(grid_km[b].1 - p.1);
                da.total_cmp(&db)
            })
            .expect("at least one neighborhood")
    };
    let mut rng = stream(seed, 1);
    let jitter = Normal::new(0.0, 1.0).unwrap();
    let mut sensors = Vec::with_capacity(n);
    let mut sensor_neighborhood = Vec::with_capacity(n);
    // chain position along its freeway, for freeway sensors
    let mut chain: Vec<Option<(usize, usize)>> = Vec::with_capacity(n);
    for i in 0..n {
        let (road_class, nb, chain_pos, (x, y)) = if i < n_arterial {
            let nb = i % n_nb;
            let c = grid_km[nb];
            let p = (c.0 + 1.2 * jitter.sample(&mut rng), c.1 + 1.2 * jitter.sample(&mut rng));
            (RoadClass::Arterial, nb, None, p)
        } else {
            let j = i - n_arterial;
            let f = j % cfg.n_freeways;
            let pos = j / cfg.n_freeways;
            let c = fwy_point(f, pos);
            let p = (c.0 + 0.05 * jitter.sample(&mut rng), c.1 + 0.05 * jitter.sample(&mut rng));
            (RoadClass::Freeway, nearest_center(p), Some((f, pos)), p)
        };
        let (lat, lon) = to_deg((x, y));
        let (lanes, max_speed) = match road_class {
            RoadClass::Arterial => {
                let lanes = rng.random_range(1..=3u32);
                let speeds = [25.0, 30.0, 35.0, 40.0, 45.0, 50.0, 55.0];
                (lanes, speeds[rng.random_range(0..speeds.len())])
            }
            RoadClass::Freeway => (rng.random_range(3..=5u32), 65.0),
        };
        sensors.push(SensorContext {
            sensor_id: format!("s{i:04}"),
            lat,
            lon,
            road_class,
            lanes,
            max_speed,
            neighborhood_id: format!("n{nb}"),
            freeway_id: chain_pos.map(|(f, _)| format!("f{f}")),
        });
        sensor_neighborhood.push(nb);
        chain.push(chain_pos);
    }
    let sensitivity: Vec<f64> = (0..n).map(|_| rng.random_range(0.7..1.3)).collect();
    let nb_offset: Vec<(f64, f64)> = (0..n_nb)
        .map(|_| (2.0 * jitter.sample(&mut rng), 8.0 * jitter.sample(&mut rng)))
        .collect();

    let minute = |t: usize| ((t % per_day) as f64) * cfg.timestamp_interval as f64;
    let weekend = |t: usize| {
        let wd = (start + Duration::minutes((t * cfg.timestamp_interval as usize) as i64))
            .weekday()
            .num_days_from_monday();
        wd >= 5
    };

    // --- neighborhood latent congestion, AR(1)
    let mut rng = stream(seed, 2);
    let innov = Normal::new(0.0, 0.05).unwrap();
    let mut latent = vec![0.0; n_nb * n_times];
    for k in 0..n_nb {
        let mut u = 0.0;
        for t in 0..n_times {
            u = 0.97 * u + innov.sample(&mut rng);
            latent[k * n_times + t] = u;
        }
    }

    // --- freeway congestion state, padded so chain positions can look back
    let max_chain = fwy_len.iter().copied().max().unwrap_or(0);
    let padded = n_times + max_chain;
    let mut rng = stream(seed, 3);
    let shock = Normal::new(0.0, 0.06).unwrap();
    let mut fwy_state = vec![0.0; cfg.n_freeways * padded];
    for f in 0..cfg.n_freeways {
        let mut b = 0.0;
        for p in 0..padded {
            b = 0.8 * b + shock.sample(&mut rng);
            let t = p as isize - max_chain as isize;
            let tt = t.rem_euclid(per_day as isize) as usize;
            let wk = if t >= 0 { weekend(t as usize) } else { false };
            let base = congestion_profile(RoadClass::Freeway, minute(tt), wk);
            fwy_state[f * padded + p] = (base + b).clamp(0.0, 0.9);
        }
    }

    // --- rain, temperature and air quality per neighborhood
    let mut rng = stream(seed, 4);
    let steps_per_hour = (60 / cfg.timestamp_interval.min(60)).max(1) as usize;
    let n_hours = n_times.div_ceil(steps_per_hour);
    let exp = Exp::new(0.5).unwrap();
    let mut raining = vec![false; n_nb * n_hours];
    let mut rain_amount = vec![0.0; n_nb * n_hours];
    for k in 0..n_nb {
        for hr in 0..n_hours {
            let draw: f64 = rng.random();
            let amount = 0.5 + exp.sample(&mut rng);
            if draw < cfg.rain_prob {
                raining[k * n_hours + hr] = true;
                rain_amount[k * n_hours + hr] = amount;
            }
        }
    }
    let mut rng = stream(seed, 5);
    let day_noise = Normal::new(0.0, 1.5).unwrap();
    let small = Normal::new(0.0, 2.0).unwrap();
    let mut precip = vec![0.0; n_nb * n_times];
    let mut temp = vec![0.0; n_nb * n_times];
    let mut aqi = vec![0.0; n_nb * n_times];
    for k in 0..n_nb {
        let daily: Vec<f64> = (0..cfg.duration).map(|_| day_noise.sample(&mut rng)).collect();
        for t in 0..n_times {
            let hr = t / steps_per_hour;
            let rain = raining[k * n_hours + hr];
            let h = minute(t) / 60.0;
            precip[k * n_times + t] = rain_amount[k * n_hours + hr];
            temp[k * n_times + t] = 15.0 + nb_offset[k].0 + 6.0 * (2.0 * PI * (h - 9.0) / 24.0).sin() + daily[t / per_day]
                - if rain { 2.0 } else { 0.0 };
            let traffic = congestion_profile(RoadClass::Arterial, minute(t), weekend(t));
            aqi[k * n_times + t] = (40.0 + nb_offset[k].1 + 40.0 * traffic + 10.0 * latent[k * n_times + t]
                - if rain { 8.0 } else { 0.0 }
                + small.sample(&mut rng))
            .max(0.0);
        }
    }

    // --- readings
    let mut rng = stream(seed, 6);
    let speed_noise = Normal::new(0.0, 1.5).unwrap();
    let flow_noise = Normal::new(0.0, 3.0).unwrap();
    let mut speed = vec![0.0; n * n_times];
    let mut flow = vec![0.0; n * n_times];
    for i in 0..n {
        let s = &sensors[i];
        let k = sensor_neighborhood[i];
        for t in 0..n_times {
            let hr = t / steps_per_hour;
            let rain = if raining[k * n_hours + hr] { RAIN_SLOWDOWN } else { 1.0 };
            let (cong, demand) = match chain[i] {
                Some((f, pos)) => {
                    let c = fwy_state[f * padded + t + max_chain - pos];
                    (c, 0.3 + c)
                }
                None => {
                    let base = congestion_profile(RoadClass::Arterial, minute(t), weekend(t));
                    let c = (sensitivity[i] * base * (1.0 + 2.0 * latent[k * n_times + t])).clamp(0.0, 0.85);
                    (c, 0.25 + 1.2 * base)
                }
            };
            let per_lane = match s.road_class {
                RoadClass::Freeway => 40.0,
                RoadClass::Arterial => 15.0,
            };
            speed[i * n_times + t] = (s.max_speed * (1.0 - cong) * rain + speed_noise.sample(&mut rng)).max(0.0);
            flow[i * n_times + t] =
                (s.lanes as f64 * per_lane * demand * (1.0 - 0.5 * (cong - 0.5).max(0.0)) + flow_noise.sample(&mut rng)).max(0.0);
        }
    }

    // --- outages
    let mut rng = stream(seed, 7);
    let mut valid = vec![true; n * n_times];
    for i in 0..n {
        for d in 0..cfg.duration as usize {
            let draw: f64 = rng.random();
            let begin = rng.random_range(0..per_day);
            let len = rng.random_range(per_day / 24..=per_day / 4).max(1);
            if draw < cfg.outage_rate {
                let lo = d * per_day + begin;
                let hi = (lo + len).min(n_times);
                for t in lo..hi {
                    valid[i * n_times + t] = false;
                    speed[i * n_times + t] = 0.0;
                    flow[i * n_times + t] = 0.0;
                }
            }
        }
    }

    Ok(Tables {
        sensors,
        start,
        interval_minutes: cfg.timestamp_interval,
        n_times,
        readings: ReadingTable { speed, flow, valid },
        context: ContextTable {
            neighborhood_ids: (0..n_nb).map(|k| format!("n{k}")).collect(),
            precip,
            temp,
            aqi,
        },
        sensor_neighborhood,
    })
}

/// Whether it rains in a sensor's neighborhood at timestamp `t`.
pub fn is_raining(tables: &Tables, sensor: usize, t: usize) -> bool {
    tables.context.precip[tables.ctx_idx(tables.sensor_neighborhood[sensor], t)] > 0.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> WorldConfig {
        WorldConfig {
            n_neighborhoods: 3,
            n_freeways: 2,
            n_sensors: 20,
            duration: 2,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn zero_outage_rate_keeps_every_reading_valid() {
        let cfg = WorldConfig {
            outage_rate: 0.0,
            ..small_cfg()
        };
        let t = generate_world(&cfg).unwrap();
        assert!(t.readings.valid.iter().all(|&v| v));
    }

    #[test]
    fn outages_mark_readings_invalid() {
        let cfg = WorldConfig {
            outage_rate: 1.0,
            ..small_cfg()
        };
        let t = generate_world(&cfg).unwrap();
        let invalid = t.readings.valid.iter().filter(|&&v| !v).count();
        assert!(invalid > 0);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_world(&small_cfg()).unwrap();
        let b = generate_world(&small_cfg()).unwrap();
        assert_eq!(a, b);
        let c = generate_world(&WorldConfig { seed: 8, ..small_cfg() }).unwrap();
        assert_ne!(a.readings, c.readings);
    }

    #[test]
    fn rejects_fewer_sensors_than_neighborhoods() {
        let cfg = WorldConfig {
            n_sensors: 2,
            n_neighborhoods: 3,
            ..small_cfg()
        };
        assert!(matches!(generate_world(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn every_neighborhood_has_a_sensor_and_contexts_are_valid() {
        let cfg = WorldConfig {
            n_sensors: 5,
            n_neighborhoods: 5,
            ..small_cfg()
        };
        let t = generate_world(&cfg).unwrap();
        for k in 0..5 {
            assert!(t.sensor_neighborhood.contains(&k));
        }
        for s in &t.sensors {
            s.validate().unwrap();
        }
    }

    #[test]
    fn rain_slows_traffic_by_the_configured_factor() {
        // Rain and clear worlds share every random stream except the rain flag,
        // so the speed ratio isolates the slowdown.
        let base = WorldConfig {
            n_sensors: 40,
            duration: 3,
            outage_rate: 0.0,
            ..small_cfg()
        };
        let wet = generate_world(&WorldConfig { rain_prob: 1.0, ..base.clone() }).unwrap();
        let dry = generate_world(&WorldConfig { rain_prob: 0.0, ..base }).unwrap();
        let n = wet.readings.speed.len();
        assert!(n >= 1000);
        let mw: f64 = wet.readings.speed.iter().sum::<f64>() / n as f64;
        let md: f64 = dry.readings.speed.iter().sum::<f64>() / n as f64;
        let ratio = mw / md;
        assert!((ratio / RAIN_SLOWDOWN - 1.0).abs() < 0.02, "ratio {ratio}");
    }

    fn xcorr(a: &[f64], b: &[f64], lag: isize) -> f64 {
        // corr(a[t], b[t + lag])
        let n = a.len() as isize;
        let pairs: Vec<(f64, f64)> = (0..n)
            .filter(|&t| t + lag >= 0 && t + lag < n)
            .map(|t| (a[t as usize], b[(t + lag) as usize]))
            .collect();
        let m = pairs.len() as f64;
        let (ma, mb) = pairs.iter().fold((0.0, 0.0), |(x, y), p| (x + p.0 / m, y + p.1 / m));
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (x, y) in &pairs {
            sab += (x - ma) * (y - mb);
            saa += (x - ma) * (x - ma);
            sbb += (y - mb) * (y - mb);
        }
        sab / (saa * sbb).sqrt()
    }

    #[test]
    fn freeway_propagation_peaks_at_lag_one() {
        let cfg = WorldConfig {
            n_sensors: 30,
            n_freeways: 1,
            duration: 20,
            outage_rate: 0.0,
            rain_prob: 0.0,
            ..small_cfg()
        };
        let t = generate_world(&cfg).unwrap();
        assert!(t.n_times >= 5000);
        let fwy: Vec<usize> = (0..t.n_sensors())
            .filter(|&i| t.sensors[i].freeway_id.as_deref() == Some("f0"))
            .collect();
        assert!(fwy.len() >= 3);
        for pair in fwy.windows(2) {
            let a = &t.readings.speed[t.idx(pair[0], 0)..t.idx(pair[0], t.n_times)];
            let b = &t.readings.speed[t.idx(pair[1], 0)..t.idx(pair[1], t.n_times)];
            let corr: Vec<f64> = (-3..=3).map(|lag| xcorr(a, b, lag)).collect();
            let best = corr
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                .unwrap()
                .0 as isize
                - 3;
            assert_eq!(best, 1, "{corr:?}");
        }
    }
}
