use deepstate::datamodel::Mode;
use deepstate::gradcheck::{gradcheck_model, tiny_config, tiny_problem, DEFAULT_H, DEFAULT_TOL};

#[test]
fn full_model_passes_in_both_modes() {
    for mode in [Mode::Reconstruct, Mode::Forecast] {
        let p = tiny_problem(mode, tiny_config(), 3).unwrap();
        assert!(p.model.n_nodes() <= 8);
        let batch: Vec<_> = p.samples.iter().take(2).collect();
        assert!(batch.iter().all(|s| s.n_obs() <= 8));
        let report = gradcheck_model(&p.model, &batch, &p.statics, 0.5, 3, DEFAULT_H, DEFAULT_TOL, None).unwrap();
        for t in &report.tensors {
            println!("{mode:?} {} rel={:.2e} checked={} skipped={}", t.name, t.max_rel_err, t.checked, t.skipped);
        }
        assert!(report.passed(), "{:?}", report.failures());
        assert_eq!(report.tensors.len(), p.model.store.len());
    }
}

#[test]
fn corrupted_tensor_is_the_only_failure() {
    let p = tiny_problem(Mode::Reconstruct, tiny_config(), 3).unwrap();
    let batch: Vec<_> = p.samples.iter().take(2).collect();
    let target = "encoder.traffic_gru.w";
    let report = gradcheck_model(&p.model, &batch, &p.statics, 0.5, 3, DEFAULT_H, DEFAULT_TOL, Some(target)).unwrap();
    let failed: Vec<_> = report.failures().iter().map(|t| t.name.clone()).collect();
    assert_eq!(failed, vec![target.to_string()]);
    assert!(report.into_result().is_err());
}
