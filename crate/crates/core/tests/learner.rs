use kmifqe::dataset::{generate_dataset, Dataset};
use kmifqe::envs::{BehaviorModel, EnvConfig};
use kmifqe::kernel::{relaxed_ratio, KernelConfig};
use kmifqe::learner::{
    build_resampling_table, compute_ratios, error_bound_xi, ir_update_vector, policy_value_readout, train, Algo,
    TrainConfig, TrainError, UpdateScratch,
};
use kmifqe::metric::optimal_metric;
use kmifqe::numerics::{Matrix, SymMatrix};
use kmifqe::qfunc::{Activation, QNetwork};

fn lqg() -> (EnvConfig, Dataset) {
    let env = EnvConfig::from_json(r#"{"env": "lqg"}"#).unwrap();
    let data = generate_dataset(&env, 400, 3).unwrap();
    (env, data)
}

fn small(algo: Algo) -> TrainConfig {
    TrainConfig::from_json(&format!(
        r#"{{"algo": "{algo}", "steps": 60, "hidden": [8], "batch_size": 32, "fqe_batch_size": 32,
            "target_update_interval": 20, "metric_refresh_interval": 20, "eval_interval": 20,
            "error_bound_samples": 50}}"#
    ))
    .unwrap()
}

#[test]
fn update_vector_matches_per_sample_gradients() {
    let (env, data) = lqg();
    let gamma = env.gamma();
    let net = QNetwork::<f64>::new(4, 2, &[5, 4], Activation::Softplus, 1).unwrap();
    let target = QNetwork::<f64>::new(4, 2, &[5, 4], Activation::Softplus, 2).unwrap();
    let mut transitions = data.transitions[..50].to_vec();
    transitions[7].terminal = true;
    let idx: Vec<usize> = vec![0, 7, 7, 13, 49, 21];
    let w_bar = 0.37;
    let got = ir_update_vector(&transitions, &idx, w_bar, &net, &target, gamma, &mut UpdateScratch::default()).unwrap();
    let mut want = vec![0.0; net.num_params()];
    for &i in &idx {
        let t = &transitions[i];
        let boot = if t.terminal { 0.0 } else { gamma * target.q_forward(&t.s_next, &t.a_next).unwrap() };
        let delta = t.r + boot - net.q_forward(&t.s, &t.a).unwrap();
        for (w, g) in want.iter_mut().zip(net.grad_params(&t.s, &t.a).unwrap()) {
            *w += w_bar / idx.len() as f64 * delta * g;
        }
    }
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn non_finite_td_error_names_the_transition() {
    let (env, data) = lqg();
    let net = QNetwork::<f64>::new(4, 2, &[4], Activation::Tanh, 1).unwrap();
    let mut transitions = data.transitions[..10].to_vec();
    transitions[4].r = f64::NAN;
    let err = ir_update_vector(&transitions, &[1, 4], 1.0, &net, &net, env.gamma(), &mut UpdateScratch::default());
    assert_eq!(err, Err(4));
}

#[test]
fn ratios_match_the_kernel_module() {
    let (env, data) = lqg();
    let problem = env.build().unwrap();
    let target_next: Vec<Vec<f64>> = data.transitions.iter().map(|t| problem.target.action(&t.s_next)).collect();
    let density: Vec<f64> = data.transitions.iter().map(|t| problem.behavior.density(&t.s_next, &t.a_next).unwrap()).collect();
    let kernel = KernelConfig::default();
    let h = 0.3;
    let w = compute_ratios(&data.transitions, &target_next, &density, None, &kernel, h, None).unwrap();
    let cfg = KernelConfig { bandwidth: h, ..kernel.clone() };
    for (i, t) in data.transitions.iter().enumerate() {
        let want = relaxed_ratio(&cfg, &Matrix::identity(2), &target_next[i], &t.a_next, density[i]).unwrap();
        assert_eq!(w[i], want);
    }
    let ident = vec![Matrix::identity(2); data.len()];
    let with_id = compute_ratios(&data.transitions, &target_next, &density, None, &kernel, h, Some(&ident)).unwrap();
    assert_eq!(w, with_id);
    let table = build_resampling_table(&data.transitions, &target_next, &density, None, &kernel, h, None).unwrap();
    assert_eq!(table.weights, w);
    assert_eq!(table.bandwidth, h);
}

#[test]
fn readout_of_the_exact_q_function_recovers_the_policy_value() {
    let env = EnvConfig::from_json(r#"{"env": "lqg"}"#).unwrap();
    let spec = env.lqg_spec().unwrap().unwrap();
    let (p, c) = spec.true_value().unwrap();
    let net = spec.embed_true_q(&p, c);
    let problem = env.build().unwrap();
    let mut rng = kmifqe::envs::episode_rng(17, 0);
    let initial: Vec<(Vec<f64>, Vec<f64>)> = (0..20_000)
        .map(|_| {
            let s = problem.env.reset(&mut rng);
            let a = problem.target.action(&s);
            (s, a)
        })
        .collect();
    let got = policy_value_readout(&net, &initial, env.gamma());
    let want = spec.normalized_policy_value().unwrap();
    // Monte Carlo over initial states; V is quadratic so the sd is modest
    assert!((got - want).abs() < 0.03 * want.abs(), "{got} vs {want}");
}

#[test]
fn error_bound_with_identity_is_half_h_squared_laplacian() {
    let net = QNetwork::<f64>::new(3, 2, &[6], Activation::Tanh, 4).unwrap();
    let states = vec![vec![0.1, -0.2, 0.3], vec![1.0, 0.5, -0.4], vec![-0.7, 0.0, 0.2]];
    let actions = vec![vec![0.2, 0.1], vec![-0.5, 0.3], vec![0.0, 0.9]];
    let metrics = vec![SymMatrix::identity(2); 3];
    let h = 0.2;
    let xi = error_bound_xi(&states, &actions, &net, &metrics, h, 0.9).unwrap();
    let want = states
        .iter()
        .zip(&actions)
        .map(|(s, a)| 0.5 * h * h * net.laplacian_action(s, a).unwrap().abs())
        .fold(0.0, f64::max);
    assert!((xi.xi - want).abs() < 1e-14);
    assert!((xi.bound - 0.9 * want / 0.1).abs() < 1e-12);
    let opt: Vec<SymMatrix<f64>> =
        states.iter().zip(&actions).map(|(s, a)| optimal_metric(&net.hess_action(s, a).unwrap(), 1e-6).a).collect();
    assert!(error_bound_xi(&states, &actions, &net, &opt, h, 0.9).unwrap().xi <= xi.xi + 1e-15);
    assert!(error_bound_xi(&states[..2], &actions, &net, &metrics[..2], h, 0.9).is_err());
}

#[test]
fn training_runs_for_every_algorithm() {
    let (env, data) = lqg();
    let problem = env.build().unwrap();
    for algo in Algo::ALL {
        let out = train(&problem, &data, &small(algo), Some(-1.0)).unwrap();
        let r = &out.report;
        assert_eq!(r.algo, algo);
        assert!(r.v_hat.is_finite());
        assert_eq!(r.curve.last().unwrap().value, r.v_hat);
        assert_eq!(r.identity_metric, algo != Algo::Kmifqe);
        assert_eq!(r.metric_diag_mean.is_some(), algo == Algo::Kmifqe);
        assert_eq!(r.final_bandwidth.is_some(), algo != Algo::Fqe);
        if algo != Algo::Fqe {
            let w = r.mean_weight.unwrap();
            assert!((1e-3..=2.0).contains(&w));
            assert!(!out.diagnostics.bandwidth.is_empty());
            assert!(r.error_bound.is_some());
        }
        let back = kmifqe::learner::RunReport::from_json(&r.to_json()).unwrap();
        assert_eq!(&back, r);
    }
}

#[test]
fn training_is_deterministic_and_seed_sensitive() {
    let (env, data) = lqg();
    let problem = env.build().unwrap();
    let cfg = small(Algo::Kmifqe);
    let a = train(&problem, &data, &cfg, None).unwrap();
    let b = train(&problem, &data, &cfg, None).unwrap();
    assert_eq!(a.report.to_json_without_timing(), b.report.to_json_without_timing());
    assert_eq!(a.net.params(), b.net.params());
    assert_eq!(a.diagnostics.bandwidth_csv(), b.diagnostics.bandwidth_csv());
    let c = train(&problem, &data, &TrainConfig { seed: 1, ..cfg }, None).unwrap();
    assert_ne!(a.net.params(), c.net.params());
}

#[test]
fn strict_mode_matches_cached_tables_when_nothing_changes() {
    let (env, data) = lqg();
    let problem = env.build().unwrap();
    let cfg: TrainConfig = serde_json::from_value(serde_json::json!({
        "algo": "kmifqe-nometric", "steps": 40, "hidden": [8], "batch_size": 32, "eval_interval": 20,
        "bandwidth_mode": "fixed", "kernel": {"bandwidth": 0.4, "clip_min": 1e-3, "clip_max": 2.0, "density_floor": 1e-5}
    }))
    .unwrap();
    let cached = train(&problem, &data, &cfg, None).unwrap();
    let strict = train(&problem, &data, &TrainConfig { strict: true, ..cfg }, None).unwrap();
    assert_eq!(cached.net.params(), strict.net.params());
}

#[test]
fn divergence_is_reported() {
    let (env, data) = lqg();
    let problem = env.build().unwrap();
    let cfg = TrainConfig { divergence_bound: 1e-9, ..small(Algo::KmifqeNometric) };
    match train(&problem, &data, &cfg, None) {
        Err(TrainError::Diverged { bound, .. }) => assert_eq!(bound, 1e-9),
        Err(e) => panic!("expected divergence, got {e}"),
        Ok(_) => panic!("expected divergence"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let (env, data) = lqg();
    let problem = env.build().unwrap();
    let too_big = TrainConfig { batch_size: 10_000, ..small(Algo::Kmifqe) };
    assert!(matches!(train(&problem, &data, &too_big, None), Err(TrainError::Config(_))));
    let pendulum = EnvConfig::from_json(r#"{"env": "pendulum"}"#).unwrap().build().unwrap();
    assert!(train(&pendulum, &data, &small(Algo::Fqe), None).is_err());
}
