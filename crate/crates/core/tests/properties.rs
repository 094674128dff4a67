use kmifqe::bandwidth::{closed_form_bandwidth, lomse, optimal_bandwidth, H_MAX, H_MIN};
use kmifqe::harness::aggregate;
use kmifqe::kernel::{kernel_argument, log_relaxed_ratio, relaxed_ratio, relaxed_ratio_per_dim, KernelConfig};
use kmifqe::learner::resampling::{AliasTable, ResamplingTable};
use kmifqe::learner::Algo;
use kmifqe::metric::{optimal_metric, trace_term, DEGENERACY_EPS};
use kmifqe::numerics::{cholesky, determinant, mahalanobis_quadform, Matrix, SymMatrix};
use kmifqe::qfunc::{Activation, QNetwork};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sym(d: usize, entries: &[f64]) -> SymMatrix<f64> {
    let mut m = Matrix::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        for j in i..d {
            m[(i, j)] = entries[k];
            m[(j, i)] = entries[k];
            k += 1;
        }
    }
    SymMatrix::new(m).unwrap()
}

fn spd(d: usize, entries: &[f64]) -> SymMatrix<f64> {
    // BBᵀ + I
    let b = Matrix::from_fn(d, d, |i, j| entries[i * d + j]);
    SymMatrix::symmetrize(&b.matmul(&b.transpose()).add(&Matrix::identity(d))).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ratio_is_clipped(
        t in proptest::collection::vec(-3.0f64..3.0, 3),
        a in proptest::collection::vec(-3.0f64..3.0, 3),
        h in 1e-3f64..10.0,
        density in 0.0f64..50.0,
        per_dim in proptest::collection::vec(0.0f64..5.0, 3),
    ) {
        let cfg = KernelConfig { bandwidth: h, ..KernelConfig::default() };
        let l = Matrix::identity(3);
        let w = relaxed_ratio(&cfg, &l, &t, &a, density).unwrap();
        prop_assert!(w >= cfg.clip_min && w <= cfg.clip_max);
        let w = relaxed_ratio_per_dim(&cfg, &l, &t, &a, &per_dim).unwrap();
        prop_assert!(w >= cfg.clip_min.powi(3) * (1.0 - 1e-12) && w <= cfg.clip_max.powi(3) * (1.0 + 1e-12));
    }

    #[test]
    fn log_ratio_matches_gaussian_formula(
        t in proptest::collection::vec(-2.0f64..2.0, 2),
        a in proptest::collection::vec(-2.0f64..2.0, 2),
        h in 0.05f64..3.0,
        density in 1e-3f64..10.0,
    ) {
        let cfg = KernelConfig { bandwidth: h, ..KernelConfig::default() };
        let got = log_relaxed_ratio(&cfg, &Matrix::identity(2), &t, &a, density).unwrap();
        let r2: f64 = t.iter().zip(&a).map(|(x, y)| ((x - y) / h).powi(2)).sum();
        let want = -0.5 * r2 - (2.0 * std::f64::consts::PI).ln() - 2.0 * h.ln() - density.ln();
        prop_assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn kernel_argument_is_mahalanobis(
        e in proptest::collection::vec(-1.0f64..1.0, 9),
        t in proptest::collection::vec(-2.0f64..2.0, 3),
        a in proptest::collection::vec(-2.0f64..2.0, 3),
        h in 0.1f64..2.0,
    ) {
        let m = spd(3, &e);
        let l = kmifqe::numerics::sqrt_factor(&m).unwrap();
        let z = kernel_argument(&l, &t, &a, h);
        let diff: Vec<f64> = a.iter().zip(&t).map(|(x, y)| x - y).collect();
        let lhs: f64 = z.iter().map(|v| v * v).sum::<f64>() * h * h;
        let rhs = mahalanobis_quadform(&m, &diff).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs));
    }

    #[test]
    fn metric_has_unit_determinant_and_is_spd(d in 1usize..=5, e in proptest::collection::vec(-5.0f64..5.0, 15)) {
        let h = sym(d, &e);
        let m = optimal_metric(&h, DEGENERACY_EPS);
        prop_assert!((determinant(&m.a) - 1.0).abs() < 1e-8);
        prop_assert!(cholesky(&m.a).is_ok());
        // L is the symmetric square root of A
        let back = m.l.matmul(&m.l);
        prop_assert!(back.sub(m.a.matrix()).max_abs() < 1e-9 * (1.0 + m.a.matrix().max_abs()));
    }

    #[test]
    fn metric_is_invariant_to_hessian_scale_and_sign(
        d in 2usize..=4,
        e in proptest::collection::vec(-5.0f64..5.0, 10),
        c in prop_oneof![0.01f64..100.0, -100.0f64..-0.01],
    ) {
        let h = sym(d, &e);
        let a = optimal_metric(&h, DEGENERACY_EPS).a;
        let b = optimal_metric(&h.scale(c), DEGENERACY_EPS).a;
        prop_assert!(a.matrix().sub(b.matrix()).max_abs() < 1e-7 * (1.0 + a.matrix().max_abs()));
    }

    #[test]
    fn metric_trace_beats_identity(d in 1usize..=4, e in proptest::collection::vec(-5.0f64..5.0, 10)) {
        let h = sym(d, &e);
        let a = optimal_metric(&h, DEGENERACY_EPS).a;
        let with_a = trace_term(&a, &h).unwrap().abs();
        let with_i = h.trace().abs();
        prop_assert!(with_a <= with_i + 1e-9 * (1.0 + with_i));
    }

    #[test]
    fn bandwidth_balances_bias_and_variance(
        b in 1e-4f64..1e2,
        v in 1e-4f64..1e2,
        n in 1usize..1_000_000,
        d in 1usize..10,
    ) {
        let h = closed_form_bandwidth(b, v, n, d).unwrap();
        let bias = h.powi(4) * b;
        let var = v / (n as f64 * h.powi(d as i32));
        prop_assert!((bias / var - d as f64 / 4.0).abs() < 1e-9 * d as f64);
        prop_assert!(lomse(h, n, d, b, v) <= lomse(h * 1.01, n, d, b, v));
        prop_assert!(lomse(h, n, d, b, v) <= lomse(h / 1.01, n, d, b, v));
        let e = optimal_bandwidth(b, v, n, d, 1.0);
        prop_assert!(e.h_star >= H_MIN && e.h_star <= H_MAX);
    }

    #[test]
    fn bandwidth_shrinks_with_sample_size(b in 1e-3f64..10.0, v in 1e-3f64..10.0, n in 10usize..100_000, d in 1usize..6) {
        let h1 = closed_form_bandwidth(b, v, n, d).unwrap();
        let h2 = closed_form_bandwidth(b, v, 16 * n, d).unwrap();
        prop_assert!((h1 / h2 - 16f64.powf(1.0 / (d as f64 + 4.0))).abs() < 1e-9);
    }

    #[test]
    fn resampling_table_normalises(w in proptest::collection::vec(1e-3f64..2.0, 1..200), h in 0.01f64..5.0) {
        let n = w.len() as f64;
        let t = ResamplingTable::from_weights(w.clone(), h).unwrap();
        prop_assert!((t.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((t.mean_weight - w.iter().sum::<f64>() / n).abs() < 1e-12);
        let ess = t.effective_sample_size();
        prop_assert!(ess >= 1.0 - 1e-9 && ess <= n + 1e-9);
        for (p, wi) in t.probs.iter().zip(&w) {
            prop_assert!((p * n * t.mean_weight - wi).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_decomposition(est in proptest::collection::vec(-10.0f64..10.0, 1..30), v in -10.0f64..10.0) {
        let a = aggregate("g", Algo::Kmifqe, &est, v, &[]);
        prop_assert!((a.rmse * a.rmse - (a.bias * a.bias + a.variance)).abs() < 1e-9 * (1.0 + a.rmse * a.rmse));
        prop_assert!(a.rmse + 1e-12 >= a.bias.abs());
        prop_assert!((a.std * a.std - a.variance).abs() < 1e-9 * (1.0 + a.variance));
    }

    #[test]
    fn laplacian_is_hessian_trace(
        seed in 0u64..1000,
        s in proptest::collection::vec(-1.0f64..1.0, 3),
        a in proptest::collection::vec(-1.0f64..1.0, 2),
        act in prop_oneof![Just(Activation::Tanh), Just(Activation::Softplus), Just(Activation::Square)],
    ) {
        let net = QNetwork::<f64>::new(3, 2, &[6, 5], act, seed).unwrap();
        let lap = net.laplacian_action(&s, &a).unwrap();
        let tr = net.hess_action(&s, &a).unwrap().trace();
        prop_assert!((lap - tr).abs() < 1e-10 * (1.0 + tr.abs()));
        let (q, g) = net.value_and_grad_params(&s, &a).unwrap();
        prop_assert_eq!(q, net.q_forward(&s, &a).unwrap());
        prop_assert_eq!(g, net.grad_params(&s, &a).unwrap());
    }
}

#[test]
fn alias_sampling_matches_weights() {
    // chi-square goodness of fit, 19 degrees of freedom
    let weights: Vec<f64> = (0..20).map(|i| ((i * 7919) % 13) as f64 + 0.5).collect();
    let total: f64 = weights.iter().sum();
    let table = AliasTable::new(&weights).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let draws = 200_000;
    let mut counts = vec![0usize; weights.len()];
    for _ in 0..draws {
        counts[table.sample(&mut rng)] += 1;
    }
    let chi2: f64 = counts
        .iter()
        .zip(&weights)
        .map(|(&c, w)| {
            let e = draws as f64 * w / total;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    // 0.999 quantile of chi-square(19) is 43.8
    assert!(chi2 < 43.8, "chi2 {chi2}");
}

#[test]
fn alias_rejects_bad_weights() {
    assert!(AliasTable::new(&[]).is_err());
    assert!(AliasTable::new(&[0.0, 0.0]).is_err());
    assert!(AliasTable::new(&[1.0, f64::NAN]).is_err());
    assert!(AliasTable::new(&[1.0, -1.0]).is_err());
    let t = AliasTable::new(&[0.0, 3.0, 0.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!((0..1000).all(|_| t.sample(&mut rng) == 1));
}
