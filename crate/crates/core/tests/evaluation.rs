use deepstate::baselines::Baseline;
use deepstate::config::RunConfig;
use deepstate::datamodel::DATASET_VERSION;
use deepstate::experiments::{build_model, evaluate_reference, prepare, query_sweep, Prepared};
use deepstate::head::{MetricAccumulator, EPS_MAPE};
use deepstate::synthdata::generate_world;
use deepstate::synthdata::windows::Split;
use deepstate::tensor::Mat;

fn small() -> (RunConfig, Prepared) {
    let mut cfg = RunConfig::default();
    cfg.world.n_sensors = 40;
    cfg.world.n_neighborhoods = 3;
    cfg.world.n_freeways = 1;
    cfg.world.duration = 3;
    cfg.split.train = [0.0, 2.0];
    cfg.split.val = [2.0, 2.5];
    cfg.split.test = [2.5, 3.0];
    cfg.split.stride = 12;
    let tables = generate_world(&cfg.world).unwrap();
    let prep = prepare(&cfg, tables, DATASET_VERSION.into()).unwrap();
    (cfg, prep)
}

#[test]
fn mean_baseline_matches_a_direct_recomputation() {
    let (cfg, prep) = small();
    let report = evaluate_reference(Baseline::MeanObservations, &prep, Split::Test, None).unwrap();
    // recompute from the reading tables, not from materialized samples
    let t = &prep.tables;
    let (w, h_n) = (cfg.task.window, cfg.task.horizon);
    let (mut abs, mut n) = ([0.0f64; 2], 0usize);
    for plan in &prep.test.plans {
        for h in 0..h_n {
            let at = plan.start + w - h_n + h;
            let valid: Vec<usize> = plan.obs.iter().copied().filter(|&s| t.readings.valid[t.idx(s, at)]).collect();
            assert!(!valid.is_empty());
            let mean = |v: &[f64]| valid.iter().map(|&s| v[t.idx(s, at)]).sum::<f64>() / valid.len() as f64;
            let guess = [mean(&t.readings.speed), mean(&t.readings.flow)];
            for &q in &plan.query {
                if t.readings.valid[t.idx(q, at)] {
                    abs[0] += (guess[0] - t.readings.speed[t.idx(q, at)]).abs();
                    abs[1] += (guess[1] - t.readings.flow[t.idx(q, at)]).abs();
                    n += 1;
                }
            }
        }
    }
    assert!(n > 0);
    for (c, name) in ["speed", "flow"].iter().enumerate() {
        let got = report.feature(name).unwrap();
        assert_eq!(got.n, n);
        assert!((got.mae - abs[c] / n as f64).abs() < 1e-9, "{name}: {} vs {}", got.mae, abs[c] / n as f64);
    }
}

#[test]
fn perfect_predictions_score_zero() {
    let (_, prep) = small();
    let mut acc = MetricAccumulator::new(EPS_MAPE);
    for i in 0..prep.test.len() {
        let s = prep.raw_sample(&prep.test, i);
        let mut pred = Mat::zeros(s.n_query(), 2 * s.horizon());
        for q in 0..s.n_query() {
            for h in 0..s.horizon() {
                for c in 0..2 {
                    pred[(q, 2 * h + c)] = s.target(q, h, c);
                }
            }
        }
        acc.push_sample(&pred, &s);
    }
    let r = acc.finish("oracle", "test", prep.task.mode, prep.task.horizon);
    for f in &r.features {
        assert!(f.n > 0);
        assert_eq!((f.mae, f.rmse, f.mape), (0.0, 0.0, 0.0));
    }
}

#[test]
fn ratio_sweep_has_one_row_per_ratio() {
    let (cfg, prep) = small();
    let model = build_model(&prep, &cfg.model, 0).unwrap();
    let ratios = [0.2, 0.5, 0.8];
    let rows = query_sweep(&model, &prep, Split::Test, &ratios).unwrap();
    assert_eq!(rows.len(), 3);
    for (row, r) in rows.iter().zip(ratios) {
        assert_eq!(row.query_ratio, r);
        assert_eq!(row.model.query_ratio, Some(r));
        assert_eq!(row.nearest.query_ratio, Some(r));
        assert!(row.model.mae("speed").is_finite());
    }
    // more queries means more scored entries
    let n = |i: usize| rows[i].nearest.feature("speed").unwrap().n;
    assert!(n(0) < n(1) && n(1) < n(2));
}
