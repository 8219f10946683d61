use std::path::{Path, PathBuf};

use deepstate::baselines::Baseline;
use deepstate::checkpoint::Checkpoint;
use deepstate::config::RunConfig;
use deepstate::datamodel::DATASET_VERSION;
use deepstate::experiments::{
    ablation_run, benchmark, dataset_summary, evaluate_model, evaluate_reference, load_tables, prepare, query_sweep,
    train_run, write_dataset, AblationRow, Prepared, SweepRow, TimingRow, Variant,
};
use deepstate::head::MetricReport;
use deepstate::synthdata::generate_world;
use deepstate::synthdata::windows::Split;
use deepstate::trainer::EpochRecord;
use serde::Serialize;

use crate::plot::{write_figure, Figure, Series};
use crate::{Cli, CliError, Command, Common};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.json";
pub const BENCHMARK_FILE: &str = "benchmark.json";
pub const ABLATION_FILE: &str = "ablation.json";

fn rt(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Config file plus command-line overrides, validated.
pub fn resolve_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(|e| CliError::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(m) = common.mode {
        cfg.task.mode = m;
    }
    if let Some(r) = &common.query_ratios {
        cfg.eval.query_ratios = r.clone();
    }
    if let Some(c) = &common.sensor_counts {
        cfg.benchmark.sensor_counts = c.clone();
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli.common)?;
    match &cli.command {
        Command::GenerateData => generate_data(&cfg),
        Command::Train => train(&cfg),
        Command::Evaluate { checkpoint, dump_window } => {
            let sweep = cli.common.query_ratios.is_some();
            evaluate(&cfg, checkpoint.as_deref(), *dump_window, sweep)
        }
        Command::Ablate => ablate(&cfg),
        Command::Benchmark => bench(&cfg),
        Command::Plot { inputs } => plot(&cfg, inputs),
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(rt)?;
    std::fs::write(path, text).map_err(|e| rt(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| rt(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| rt(format!("{}: {e}", path.display())))
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(rt)?;
    w.write_record(header).map_err(rt)?;
    for r in rows {
        w.write_record(&r).map_err(rt)?;
    }
    w.flush().map_err(rt)
}

fn out_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    cfg.echo(&cfg.out_dir)?;
    Ok(&cfg.out_dir)
}

fn prepared(cfg: &RunConfig) -> Result<Prepared, CliError> {
    let (tables, version) = load_tables(cfg)?;
    Ok(prepare(cfg, tables, version)?)
}

fn print_epoch(r: &EpochRecord) {
    eprintln!(
        "epoch {:>3}  loss {:.5}  L1 {:.5}  L2 {:.5}  val L1 {:.5}  alpha {:.3}  {:.1}s",
        r.epoch, r.train_loss, r.train_l1, r.train_l2, r.val_l1, r.alpha, r.elapsed_s
    );
}

fn generate_data(cfg: &RunConfig) -> Result<(), CliError> {
    let out = out_dir(cfg)?;
    let tables = generate_world(&cfg.world)?;
    let prep = prepare(cfg, tables, DATASET_VERSION.to_string())?;
    write_dataset(&prep, out)?;
    let summary = dataset_summary(&prep);
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "{} sensors, {} timestamps, mode {}",
        prep.tables.n_sensors(),
        prep.tables.n_times,
        prep.task.mode.as_str()
    );
    println!("{:<6} {:>8} {:>14} {:>10} {:>10}", "split", "samples", "mean sensors", "mean obs", "mean query");
    for s in &summary {
        println!(
            "{:<6} {:>8} {:>14.1} {:>10.1} {:>10.1}",
            s.split.as_str(),
            s.samples,
            s.mean_sensors,
            s.mean_observations,
            s.mean_queries
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let prep = prepared(cfg)?;
    let out = out_dir(cfg)?;
    let (model, outcome) = train_run(&prep, &cfg.model, &cfg.train, print_epoch)?;
    let ck = Checkpoint {
        model,
        epoch: outcome.best_epoch,
        normalizer: prep.normalizer.clone(),
        dataset_version: prep.dataset_version.clone(),
        optimizer: Some(outcome.optimizer.clone()),
    };
    ck.save(&out.join(CHECKPOINT_FILE))?;
    write_json(&out.join(HISTORY_FILE), &outcome.history)?;
    write_csv(
        &out.join("history.csv"),
        &["epoch", "train_loss", "train_l1", "train_l2", "val_l1", "alpha", "elapsed_s"],
        outcome.history.iter().map(|r| {
            vec![
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.train_l1.to_string(),
                r.train_l2.to_string(),
                r.val_l1.to_string(),
                r.alpha.to_string(),
                r.elapsed_s.to_string(),
            ]
        }),
    )?;
    println!(
        "best epoch {} val L1 {:.6}; checkpoint {}",
        outcome.best_epoch,
        outcome.best_val_l1,
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn print_grid(reports: &[MetricReport]) {
    println!(
        "{:<20} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "model", "speed MAE", "RMSE", "MAPE", "flow MAE", "RMSE", "MAPE"
    );
    for r in reports {
        let cell = |name: &str| r.feature(name).map_or([f64::NAN; 3], |f| [f.mae, f.rmse, f.mape]);
        let (s, f) = (cell("speed"), cell("flow"));
        println!(
            "{:<20} {:>9.3} {:>9.3} {:>9.2} {:>9.3} {:>9.3} {:>9.2}",
            r.model, s[0], s[1], s[2], f[0], f[1], f[2]
        );
    }
}

fn evaluate(cfg: &RunConfig, checkpoint: Option<&Path>, dump: Option<usize>, sweep: bool) -> Result<(), CliError> {
    let ck_path: PathBuf = checkpoint.map_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE), Path::to_path_buf);
    let ck = Checkpoint::load_for(&ck_path, &cfg.layout)?;
    if ck.model.task != cfg.task.task() {
        return Err(CliError::Usage(format!(
            "checkpoint was trained for {:?}, the configuration asks for {:?}",
            ck.model.task,
            cfg.task.task()
        )));
    }
    let mut prep = prepared(cfg)?;
    prep.normalizer = ck.normalizer.clone();
    let out = out_dir(cfg)?;
    let mode = prep.task.mode.as_str();
    let mut reports = vec![evaluate_model(&ck.model, &prep, Split::Test, None)?];
    for b in Baseline::ALL {
        reports.push(evaluate_reference(b, &prep, Split::Test, None)?);
    }
    print_grid(&reports);
    write_json(&out.join(format!("metrics_{mode}.json")), &reports)?;
    if sweep {
        let rows = query_sweep(&ck.model, &prep, Split::Test, &cfg.eval.query_ratios)?;
        println!("{:<8} {:>12} {:>14}", "ratio", "speed MAE", "nearest MAE");
        for r in &rows {
            println!("{:<8} {:>12.3} {:>14.3}", r.query_ratio, r.model.mae("speed"), r.nearest.mae("speed"));
        }
        write_json(&out.join(format!("sweep_{mode}.json")), &rows)?;
    }
    if let Some(id) = dump {
        let i = prep
            .test
            .plans
            .iter()
            .position(|p| p.window_id == id)
            .ok_or_else(|| CliError::Usage(format!("window {id} is not a test window")))?;
        let sample = prep.normalizer.apply_sample(&prep.raw_sample(&prep.test, i));
        let text = ck.model.dump_window(&sample, &prep.statics)?;
        let path = out.join(format!("window_{id}.json"));
        std::fs::write(&path, text).map_err(|e| rt(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn ablate(cfg: &RunConfig) -> Result<(), CliError> {
    let prep = prepared(cfg)?;
    let out = out_dir(cfg)?;
    let mut rows: Vec<AblationRow> = Vec::new();
    for v in Variant::ALL {
        eprintln!("training {}", v.label());
        let (_, row) = ablation_run(&prep, cfg, v, print_epoch)?;
        rows.push(row);
    }
    let reports: Vec<MetricReport> = rows.iter().map(|r| r.report.clone()).collect();
    print_grid(&reports);
    write_json(&out.join(ABLATION_FILE), &rows)?;
    write_csv(
        &out.join("ablation.csv"),
        &["variant", "speed_mae", "speed_rmse", "speed_mape", "flow_mae", "flow_rmse", "flow_mape"],
        rows.iter().map(|r| {
            let mut rec = vec![r.label.clone()];
            for name in ["speed", "flow"] {
                let f = r.report.feature(name).cloned();
                let f = f.map_or([f64::NAN; 3], |f| [f.mae, f.rmse, f.mape]);
                rec.extend(f.iter().map(|v| v.to_string()));
            }
            rec
        }),
    )?;
    Ok(())
}

fn benchmark_figure(rows: &[TimingRow]) -> Figure<'static> {
    let series = |name: &str, f: &dyn Fn(&TimingRow) -> f64| Series {
        name: name.into(),
        points: rows.iter().map(|r| (r.n_sensors as f64, f(r))).collect(),
    };
    Figure {
        title: "Training time per epoch",
        x_label: "sensors",
        y_label: "seconds per epoch",
        series: vec![
            series("deepstate", &|r| r.deepstate().0),
            series("dense attention", &|r| r.reference().0),
        ],
    }
}

fn bench(cfg: &RunConfig) -> Result<(), CliError> {
    let out = out_dir(cfg)?;
    println!(
        "{:>8} {:>6} {:>18} {:>18}",
        "sensors", "nodes", "deepstate s", "dense attention s"
    );
    let rows = benchmark(cfg, |r| {
        let (a, sa) = r.deepstate();
        let (b, sb) = r.reference();
        println!("{:>8} {:>6} {:>10.3} ± {:<6.3} {:>10.3} ± {:<6.3}", r.n_sensors, r.n_nodes, a, sa, b, sb);
    })?;
    write_json(&out.join(BENCHMARK_FILE), &rows)?;
    write_csv(
        &out.join("benchmark.csv"),
        &["n_sensors", "n_nodes", "deepstate_mean_s", "deepstate_sd_s", "reference_mean_s", "reference_sd_s"],
        rows.iter().map(|r| {
            let (a, sa) = r.deepstate();
            let (b, sb) = r.reference();
            vec![r.n_sensors.to_string(), r.n_nodes.to_string(), a.to_string(), sa.to_string(), b.to_string(), sb.to_string()]
        }),
    )?;
    write_figure(out, "benchmark_time", &benchmark_figure(&rows))?;
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        if rows.len() > 1 {
            println!(
                "t({})/t({}): deepstate {:.2}, dense attention {:.2}",
                last.n_sensors,
                first.n_sensors,
                last.deepstate().0 / first.deepstate().0,
                last.reference().0 / first.reference().0
            );
        }
    }
    Ok(())
}

/// Figure for one result file, chosen by its file name.
pub fn figure_for(path: &Path) -> Result<(String, Figure<'static>), CliError> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| CliError::Usage(format!("{}: not a file name", path.display())))?
        .to_string();
    if stem.starts_with("history") {
        let h: Vec<EpochRecord> = read_json(path)?;
        if h.is_empty() {
            return Err(rt(format!("{}: history is empty", path.display())));
        }
        let s = |name: &str, f: fn(&EpochRecord) -> f64| Series {
            name: name.into(),
            points: h.iter().map(|r| (r.epoch as f64, f(r))).collect(),
        };
        let fig = Figure {
            title: "Training curves",
            x_label: "epoch",
            y_label: "normalized loss",
            series: vec![
                s("train loss", |r| r.train_loss),
                s("train L1", |r| r.train_l1),
                s("val L1", |r| r.val_l1),
            ],
        };
        Ok((format!("{stem}_loss"), fig))
    } else if stem.starts_with("sweep") {
        let rows: Vec<SweepRow> = read_json(path)?;
        if rows.is_empty() {
            return Err(rt(format!("{}: sweep is empty", path.display())));
        }
        let s = |name: &str, f: &dyn Fn(&SweepRow) -> f64| Series {
            name: name.into(),
            points: rows.iter().map(|r| (r.query_ratio, f(r))).collect(),
        };
        let fig = Figure {
            title: "MAE against query ratio",
            x_label: "query ratio",
            y_label: "MAE",
            series: vec![
                s("deepstate speed", &|r| r.model.mae("speed")),
                s("nearest speed", &|r| r.nearest.mae("speed")),
                s("deepstate flow", &|r| r.model.mae("flow")),
                s("nearest flow", &|r| r.nearest.mae("flow")),
            ],
        };
        Ok((format!("{stem}_mae"), fig))
    } else if stem.starts_with("benchmark") {
        let rows: Vec<TimingRow> = read_json(path)?;
        if rows.is_empty() {
            return Err(rt(format!("{}: benchmark is empty", path.display())));
        }
        Ok(("benchmark_time".into(), benchmark_figure(&rows)))
    } else {
        Err(CliError::Usage(format!(
            "{}: expected a history, sweep or benchmark file",
            path.display()
        )))
    }
}

fn plot(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<(), CliError> {
    let out = &cfg.out_dir;
    let inputs: Vec<PathBuf> = if inputs.is_empty() {
        [HISTORY_FILE, "sweep_reconstruct.json", "sweep_forecast.json", BENCHMARK_FILE]
            .iter()
            .map(|f| out.join(f))
            .filter(|p| p.exists())
            .collect()
    } else {
        inputs.to_vec()
    };
    if inputs.is_empty() {
        return Err(rt(format!("no history, sweep or benchmark files in {}", out.display())));
    }
    for p in &inputs {
        let (stem, fig) = figure_for(p)?;
        let (svg, _) = write_figure(out, &stem, &fig)?;
        println!("wrote {}", svg.display());
    }
    Ok(())
}
