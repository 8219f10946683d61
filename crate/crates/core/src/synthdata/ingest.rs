//! Reading and writing the `sensors.csv` / `readings.csv` / `context.csv` trio.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};

use super::{ContextTable, ReadingTable, Tables};
use crate::datamodel::{RoadClass, SensorContext};
use crate::error::{Error, Result};

pub const SENSORS_HEADER: [&str; 8] = [
    "sensor_id",
    "lat",
    "lon",
    "road_class",
    "lanes",
    "max_speed",
    "neighborhood_id",
    "freeway_id",
];
pub const READINGS_HEADER: [&str; 5] = ["sensor_id", "timestamp_iso8601", "speed_mph", "flow_veh_per_interval", "valid"];
pub const CONTEXT_HEADER: [&str; 5] = ["neighborhood_id", "timestamp_iso8601", "precip_mm", "temp_c", "aqi"];

fn fmt_time(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Writes the three CSV files into `dir`. Output is a pure function of the
/// tables, so equal tables give byte-identical files.
pub fn write_csv(tables: &Tables, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let create = |name: &str| {
        let p = dir.join(name);
        File::create(&p).map(BufWriter::new).map_err(|e| Error::io(&p, e))
    };
    let io = |name: &str| {
        let p = dir.join(name);
        move |e: std::io::Error| Error::io(&p, e)
    };

    let mut w = create("sensors.csv")?;
    writeln!(w, "{}", SENSORS_HEADER.join(",")).map_err(io("sensors.csv"))?;
    for s in &tables.sensors {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            s.sensor_id,
            s.lat,
            s.lon,
            s.road_class.as_str(),
            s.lanes,
            s.max_speed,
            s.neighborhood_id,
            s.freeway_id.as_deref().unwrap_or("")
        )
        .map_err(io("sensors.csv"))?;
    }
    w.flush().map_err(io("sensors.csv"))?;

    let mut w = create("readings.csv")?;
    writeln!(w, "{}", READINGS_HEADER.join(",")).map_err(io("readings.csv"))?;
    for t in 0..tables.n_times {
        let ts = fmt_time(tables.time_at(t));
        for (s, ctx) in tables.sensors.iter().enumerate() {
            let i = tables.idx(s, t);
            writeln!(
                w,
                "{},{},{},{},{}",
                ctx.sensor_id,
                ts,
                tables.readings.speed[i],
                tables.readings.flow[i],
                u8::from(tables.readings.valid[i])
            )
            .map_err(io("readings.csv"))?;
        }
    }
    w.flush().map_err(io("readings.csv"))?;

    let mut w = create("context.csv")?;
    writeln!(w, "{}", CONTEXT_HEADER.join(",")).map_err(io("context.csv"))?;
    for t in 0..tables.n_times {
        let ts = fmt_time(tables.time_at(t));
        for (k, id) in tables.context.neighborhood_ids.iter().enumerate() {
            let i = tables.ctx_idx(k, t);
            writeln!(
                w,
                "{},{},{},{},{}",
                id, ts, tables.context.precip[i], tables.context.temp[i], tables.context.aqi[i]
            )
            .map_err(io("context.csv"))?;
        }
    }
    w.flush().map_err(io("context.csv"))?;
    Ok(())
}

struct Reader {
    file: String,
    rows: Vec<csv::StringRecord>,
}

impl Reader {
    fn open(path: &Path, header: &[&str]) -> Result<Self> {
        let file = path.file_name().map_or_else(|| path.display().to_string(), |f| f.to_string_lossy().into_owned());
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| Error::Parse {
                file: file.clone(),
                row: 0,
                column: String::new(),
                message: e.to_string(),
            })?;
        let got = rdr.headers().map_err(|e| Error::Parse {
            file: file.clone(),
            row: 0,
            column: String::new(),
            message: e.to_string(),
        })?;
        let got: Vec<&str> = got.iter().collect();
        if got != header {
            return Err(Error::Parse {
                file,
                row: 0,
                column: String::new(),
                message: format!("expected header `{}`, found `{}`", header.join(","), got.join(",")),
            });
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            rows.push(rec.map_err(|e| Error::Parse {
                file: file.clone(),
                row: i + 1,
                column: String::new(),
                message: e.to_string(),
            })?);
        }
        Ok(Self { file, rows })
    }

    fn err(&self, row: usize, column: &str, message: impl Into<String>) -> Error {
        Error::Parse {
            file: self.file.clone(),
            row,
            column: column.into(),
            message: message.into(),
        }
    }

    fn f64(&self, row: usize, rec: &csv::StringRecord, col: usize, name: &str) -> Result<f64> {
        rec[col]
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.err(row, name, format!("`{}` is not a finite number", &rec[col])))
    }

    fn time(&self, row: usize, rec: &csv::StringRecord, col: usize) -> Result<DateTime<Utc>> {
        DateTime::parse_from_rfc3339(rec[col].trim())
            .map(|t| t.with_timezone(&Utc))
            .map_err(|e| self.err(row, "timestamp_iso8601", format!("`{}`: {e}", &rec[col])))
    }
}

/// Parses and time-aligns the three CSV files. Missing readings are marked
/// invalid; missing context rows are an error.
pub fn ingest_csv(sensors_path: &Path, readings_path: &Path, context_path: &Path) -> Result<Tables> {
    let sr = Reader::open(sensors_path, &SENSORS_HEADER)?;
    let mut sensors = Vec::with_capacity(sr.rows.len());
    let mut sensor_pos: HashMap<String, usize> = HashMap::new();
    for (i, rec) in sr.rows.iter().enumerate() {
        let row = i + 1;
        let road_class = RoadClass::parse(rec[3].trim())
            .ok_or_else(|| sr.err(row, "road_class", format!("`{}` is not freeway|arterial", &rec[3])))?;
        let lanes = rec[4]
            .trim()
            .parse::<u32>()
            .ok()
            .filter(|&l| l >= 1)
            .ok_or_else(|| sr.err(row, "lanes", "lanes >= 1 violated"))?;
        let fwy = rec[7].trim();
        let ctx = SensorContext {
            sensor_id: rec[0].trim().to_string(),
            lat: sr.f64(row, rec, 1, "lat")?,
            lon: sr.f64(row, rec, 2, "lon")?,
            road_class,
            lanes,
            max_speed: sr.f64(row, rec, 5, "max_speed")?,
            neighborhood_id: rec[6].trim().to_string(),
            freeway_id: (!fwy.is_empty()).then(|| fwy.to_string()),
        };
        ctx.validate().map_err(|m| sr.err(row, "sensor", m))?;
        if sensor_pos.insert(ctx.sensor_id.clone(), sensors.len()).is_some() {
            return Err(sr.err(row, "sensor_id", format!("duplicate sensor id `{}`", ctx.sensor_id)));
        }
        sensors.push(ctx);
    }
    if sensors.is_empty() {
        return Err(sr.err(0, "", "no sensors"));
    }

    let rr = Reader::open(readings_path, &READINGS_HEADER)?;
    let cr = Reader::open(context_path, &CONTEXT_HEADER)?;
    let mut parsed = Vec::with_capacity(rr.rows.len());
    let mut prev: Option<DateTime<Utc>> = None;
    for (i, rec) in rr.rows.iter().enumerate() {
        let row = i + 1;
        let id = rec[0].trim();
        let s = *sensor_pos.get(id).ok_or_else(|| Error::UnknownSensor(id.to_string()))?;
        let t = rr.time(row, rec, 1)?;
        if prev.is_some_and(|p| t < p) {
            return Err(Error::NonMonotoneTime {
                file: rr.file.clone(),
                row,
            });
        }
        prev = Some(t);
        let speed = rr.f64(row, rec, 2, "speed_mph")?;
        if speed < 0.0 {
            return Err(rr.err(row, "speed_mph", "speed >= 0 violated"));
        }
        let flow = rr.f64(row, rec, 3, "flow_veh_per_interval")?;
        if flow < 0.0 {
            return Err(rr.err(row, "flow_veh_per_interval", "flow ≥ 0 violated"));
        }
        let valid = match rec[4].trim() {
            "0" => false,
            "1" => true,
            other => return Err(rr.err(row, "valid", format!("`{other}` is not 0 or 1"))),
        };
        parsed.push((s, t, speed, flow, valid));
    }
    if parsed.is_empty() {
        return Err(rr.err(0, "", "no readings"));
    }
    let start = parsed[0].1;
    let end = parsed.last().unwrap().1;
    let interval = parsed
        .windows(2)
        .map(|w| (w[1].1 - w[0].1).num_minutes())
        .filter(|&d| d > 0)
        .min()
        .unwrap_or(5);
    let n_times = ((end - start).num_minutes() / interval) as usize + 1;
    let n = sensors.len();
    let slot = |r: &Reader, row: usize, t: DateTime<Utc>| -> Result<usize> {
        let m = (t - start).num_minutes();
        if m < 0 || m % interval != 0 || (m / interval) as usize >= n_times {
            return Err(r.err(row, "timestamp_iso8601", format!("{t} is not aligned to the {interval}-minute grid")));
        }
        Ok((m / interval) as usize)
    };
    let mut readings = ReadingTable {
        speed: vec![0.0; n * n_times],
        flow: vec![0.0; n * n_times],
        valid: vec![false; n * n_times],
    };
    for (i, &(s, t, speed, flow, valid)) in parsed.iter().enumerate() {
        let k = s * n_times + slot(&rr, i + 1, t)?;
        readings.speed[k] = speed;
        readings.flow[k] = flow;
        readings.valid[k] = valid;
    }

    let mut nb_ids: Vec<String> = Vec::new();
    let mut nb_pos: HashMap<String, usize> = HashMap::new();
    for s in &sensors {
        if !nb_pos.contains_key(&s.neighborhood_id) {
            nb_pos.insert(s.neighborhood_id.clone(), nb_ids.len());
            nb_ids.push(s.neighborhood_id.clone());
        }
    }
    let n_nb = nb_ids.len();
    let mut context = ContextTable {
        neighborhood_ids: nb_ids,
        precip: vec![0.0; n_nb * n_times],
        temp: vec![0.0; n_nb * n_times],
        aqi: vec![0.0; n_nb * n_times],
    };
    let mut seen = vec![false; n_nb * n_times];
    let mut prev: Option<DateTime<Utc>> = None;
    for (i, rec) in cr.rows.iter().enumerate() {
        let row = i + 1;
        let t = cr.time(row, rec, 1)?;
        if prev.is_some_and(|p| t < p) {
            return Err(Error::NonMonotoneTime {
                file: cr.file.clone(),
                row,
            });
        }
        prev = Some(t);
        let Some(&k) = nb_pos.get(rec[0].trim()) else {
            continue;
        };
        if t < start || t > end {
            continue;
        }
        let j = k * n_times + slot(&cr, row, t)?;
        let precip = cr.f64(row, rec, 2, "precip_mm")?;
        if precip < 0.0 {
            return Err(cr.err(row, "precip_mm", "precip_mm >= 0 violated"));
        }
        context.precip[j] = precip;
        context.temp[j] = cr.f64(row, rec, 3, "temp_c")?;
        context.aqi[j] = cr.f64(row, rec, 4, "aqi")?;
        seen[j] = true;
    }
    if let Some(j) = seen.iter().position(|&s| !s) {
        return Err(cr.err(
            0,
            "neighborhood_id",
            format!(
                "missing context for neighborhood `{}` at timestep {}",
                context.neighborhood_ids[j / n_times],
                j % n_times
            ),
        ));
    }
    let sensor_neighborhood = sensors.iter().map(|s| nb_pos[&s.neighborhood_id]).collect();
    Ok(Tables {
        sensors,
        start,
        interval_minutes: interval as u32,
        n_times,
        readings,
        context,
        sensor_neighborhood,
    })
}

/// Reads the CSV trio from a dataset directory.
pub fn ingest_dir(dir: &Path) -> Result<Tables> {
    ingest_csv(&dir.join("sensors.csv"), &dir.join("readings.csv"), &dir.join("context.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_world, WorldConfig};

    fn write(dir: &Path, name: &str, body: &str) {
        std::fs::write(dir.join(name), body).unwrap();
    }

    fn fixture(dir: &Path, readings: &str) {
        write(
            dir,
            "sensors.csv",
            "sensor_id,lat,lon,road_class,lanes,max_speed,neighborhood_id,freeway_id\n\
             a,34.0,-118.2,freeway,4,65,n0,f1\n\
             b,34.01,-118.21,arterial,2,35,n0,\n\
             c,34.02,-118.22,arterial,1,25,n1,\n",
        );
        write(dir, "readings.csv", readings);
        write(
            dir,
            "context.csv",
            "neighborhood_id,timestamp_iso8601,precip_mm,temp_c,aqi\n\
             n0,2022-11-14T00:00:00Z,0,12.5,40\n\
             n1,2022-11-14T00:00:00Z,1.5,11,38\n\
             n0,2022-11-14T00:05:00Z,0,12.4,41\n\
             n1,2022-11-14T00:05:00Z,2,10.9,39\n",
        );
    }

    const GOOD: &str = "sensor_id,timestamp_iso8601,speed_mph,flow_veh_per_interval,valid\n\
        a,2022-11-14T00:00:00Z,61.5,120,1\n\
        b,2022-11-14T00:00:00Z,33,40,1\n\
        c,2022-11-14T00:00:00Z,22,10,1\n\
        a,2022-11-14T00:05:00Z,60,118,1\n\
        b,2022-11-14T00:05:00Z,31,42,1\n\
        c,2022-11-14T00:05:00Z,21.5,11,1\n";

    fn load(dir: &Path) -> Result<Tables> {
        ingest_dir(dir)
    }

    #[test]
    fn well_formed_fixture_parses_with_full_masks() {
        let d = tempfile::tempdir().unwrap();
        fixture(d.path(), GOOD);
        let t = load(d.path()).unwrap();
        assert_eq!(t.n_sensors(), 3);
        assert_eq!(t.n_times, 2);
        assert_eq!(t.interval_minutes, 5);
        assert!(t.readings.valid.iter().all(|&v| v));
        assert_eq!(t.readings.speed[t.idx(2, 1)], 21.5);
        assert_eq!(t.context.precip[t.ctx_idx(1, 1)], 2.0);
        assert_eq!(t.sensor_neighborhood, vec![0, 0, 1]);
    }

    #[test]
    fn negative_flow_is_a_parse_error() {
        let d = tempfile::tempdir().unwrap();
        fixture(d.path(), &GOOD.replace("b,2022-11-14T00:05:00Z,31,42,1", "b,2022-11-14T00:05:00Z,31,-4,1"));
        let err = load(d.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("flow ≥ 0 violated"), "{msg}");
        assert!(msg.contains("row 5"), "{msg}");
    }

    #[test]
    fn unknown_sensor_is_named() {
        let d = tempfile::tempdir().unwrap();
        fixture(d.path(), &format!("{GOOD}x9,2022-11-14T00:05:00Z,31,4,1\n"));
        let err = load(d.path()).unwrap_err();
        assert!(matches!(&err, Error::UnknownSensor(id) if id == "x9"), "{err}");
    }

    #[test]
    fn non_monotone_timestamps_are_rejected() {
        let d = tempfile::tempdir().unwrap();
        fixture(d.path(), &format!("{GOOD}a,2022-11-14T00:00:00Z,31,4,1\n"));
        assert!(matches!(load(d.path()), Err(Error::NonMonotoneTime { .. })));
    }

    #[test]
    fn generated_world_round_trips_through_csv() {
        let cfg = WorldConfig {
            n_sensors: 12,
            n_neighborhoods: 3,
            n_freeways: 2,
            duration: 1,
            ..WorldConfig::default()
        };
        let t = generate_world(&cfg).unwrap();
        let d = tempfile::tempdir().unwrap();
        write_csv(&t, d.path()).unwrap();
        let back = load(d.path()).unwrap();
        assert_eq!(back, t);
        let first = std::fs::read(d.path().join("readings.csv")).unwrap();
        write_csv(&back, d.path()).unwrap();
        assert_eq!(std::fs::read(d.path().join("readings.csv")).unwrap(), first);
    }
}
