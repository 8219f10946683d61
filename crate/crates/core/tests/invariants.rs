use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use deepstate::assignment::DsnType;
use deepstate::autodiff::Tape;
use deepstate::datamodel::{Mode, TrafficSample};
use deepstate::gradcheck::{tiny_config, tiny_problem, TinyProblem};
use deepstate::model::ForwardOptions;
use deepstate::synthdata::windows::{materialize, WindowPlan};
use deepstate::tensor::Mat;

fn problem() -> &'static TinyProblem {
    static P: std::sync::OnceLock<TinyProblem> = std::sync::OnceLock::new();
    P.get_or_init(|| tiny_problem(Mode::Reconstruct, tiny_config(), 7).unwrap())
}

fn sample_for(p: &TinyProblem, plan: &WindowPlan) -> TrafficSample {
    let raw = materialize(&p.tables, &p.model.layout, p.model.task, plan);
    p.normalizer.apply_sample(&raw)
}

fn base_plan(p: &TinyProblem, start: usize) -> WindowPlan {
    let s = &p.samples[start % p.samples.len()];
    WindowPlan {
        window_id: s.window_id,
        start: s.window_id,
        obs: s.obs_index.clone(),
        query: s.query_index.clone(),
    }
}

struct Out {
    z: Mat,
    z_post: Mat,
    a: Mat,
    pred: Mat,
    g: Mat,
}

fn run(p: &TinyProblem, s: &TrafficSample) -> Out {
    let mut t = Tape::new();
    let f = p.model.forward(&mut t, s, &p.statics, ForwardOptions::default()).unwrap();
    Out {
        z: t.value(f.z).clone(),
        z_post: t.value(f.z_post).clone(),
        a: t.value(f.a).clone(),
        pred: t.value(f.pred).clone(),
        g: t.value(f.pooled.g).clone(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sensor_permutation_leaves_states_unchanged(start in 0usize..64, seed in any::<u64>()) {
        let p = problem();
        let plan = base_plan(p, start);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut obs = plan.obs.clone();
        obs.shuffle(&mut rng);
        let mut order: Vec<usize> = (0..plan.query.len()).collect();
        order.shuffle(&mut rng);
        let query = order.iter().map(|&i| plan.query[i]).collect();
        let permuted = WindowPlan { obs: obs.clone(), query, ..plan.clone() };

        let (x, y) = (run(p, &sample_for(p, &plan)), run(p, &sample_for(p, &permuted)));
        prop_assert!(x.z.max_abs_diff(&y.z) <= 1e-5);
        prop_assert!(x.z_post.max_abs_diff(&y.z_post) <= 1e-5);
        prop_assert!(x.g.max_abs_diff(&y.g) <= 1e-5);
        prop_assert!(x.pred.gather_rows(&order).max_abs_diff(&y.pred) <= 1e-5);
        // assignment columns follow their sensors
        let col = |m: &Mat, c: usize| (0..m.rows()).map(|r| m[(r, c)]).collect::<Vec<_>>();
        for (j, s) in obs.iter().enumerate() {
            let i = plan.obs.iter().position(|o| o == s).unwrap();
            prop_assert_eq!(col(&x.a, i), col(&y.a, j));
        }
    }

    #[test]
    fn shapes_do_not_depend_on_sensor_count(start in 0usize..64, n_obs in 1usize..8, n_query in 0usize..3) {
        let p = problem();
        let plan = base_plan(p, start);
        let all: Vec<usize> = plan.obs.iter().chain(&plan.query).copied().collect();
        prop_assume!(n_obs + n_query <= all.len());
        let sub = WindowPlan {
            obs: all[..n_obs].to_vec(),
            query: all[n_obs..n_obs + n_query].to_vec(),
            ..plan
        };
        let o = run(p, &sample_for(p, &sub));
        let n = p.model.n_nodes();
        let k = p.model.config.k;
        prop_assert_eq!(o.a.shape(), (n, n_obs));
        prop_assert_eq!(o.z.shape(), (n, p.model.config.d_e));
        prop_assert_eq!(o.z_post.shape(), (n, k));
        prop_assert_eq!(o.g.shape(), (1, 2 * k));
        prop_assert_eq!(o.pred.shape(), (n_query, 2 * p.model.task.horizon));
        prop_assert!(o.z_post.is_finite() && o.pred.is_finite());
    }

    #[test]
    fn static_assignment_rows_ignore_traffic(start in 0usize..64, scale in -5.0f64..5.0, shift in -3.0f64..3.0) {
        let p = problem();
        let s = &p.samples[start % p.samples.len()];
        let mut other = s.clone();
        for (i, v) in other.x_obs.iter_mut().enumerate() {
            if i % s.f_total < 2 {
                *v = *v * scale + shift;
            }
        }
        let (x, y) = (run(p, s), run(p, &other));
        for t in [DsnType::Spatial, DsnType::Semantic] {
            for r in p.model.registry.range(t) {
                prop_assert_eq!(x.a.row(r), y.a.row(r));
            }
        }
    }
}
