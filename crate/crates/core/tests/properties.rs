use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use etl_lqr::bayes::{MniwBelief, RegressionData};
use etl_lqr::dynamics::SystemParams;
use etl_lqr::excitation::{fit_beta, optimal_excitation_length, total_cost_model, BetaCurve, BetaSample, ImprovementModel, SampleStatus};
use etl_lqr::linalg::{self, Mat};
use etl_lqr::lqr::{self, CostWeights, Gain};
use etl_lqr::trigger::{bounds_from_systems, chernoff_bounds, quantile, BoundsConfig, Percentile};

fn gauss(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn pd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> Mat {
    let l = gauss(rng, n, n, 1.0);
    &l * l.transpose() / n as f64 + Mat::identity(n, n) * floor
}

fn belief(rng: &mut ChaCha8Rng, d_x: usize, d_u: usize) -> MniwBelief {
    let p = d_x + d_u;
    MniwBelief::new(gauss(rng, p, d_x, 1.0), pd(rng, p, 0.1), pd(rng, d_x, 0.1), d_x as f64 + 2.0 + rng.random::<f64>() * 10.0)
        .unwrap()
}

fn data(rng: &mut ChaCha8Rng, n: usize, d_x: usize, d_u: usize) -> RegressionData {
    RegressionData { x: gauss(rng, n, d_x + d_u, 1.0), y: gauss(rng, n, d_x, 1.0) }
}

fn stable_loop(rng: &mut ChaCha8Rng, d_x: usize, d_u: usize) -> (SystemParams, Gain) {
    loop {
        let a = gauss(rng, d_x, d_x, 1.0);
        let a = &a * (rng.random_range(0.2..0.95) / lqr::spectral_radius(&a).max(1e-9));
        let sys = SystemParams::new(a, gauss(rng, d_x, d_u, 0.5), pd(rng, d_x, 0.05)).unwrap();
        let k = Gain(gauss(rng, d_u, d_x, 0.1));
        if lqr::spectral_radius(&sys.closed_loop(&k)) < 0.97 {
            return (sys, k);
        }
    }
}

fn max_rel(a: &Mat, b: &Mat) -> f64 {
    (a - b).amax() / a.amax().max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn posterior_stays_positive_definite(seed in any::<u64>(), d_x in 1usize..4, d_u in 1usize..3, n in 0usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = belief(&mut rng, d_x, d_u);
        let post = prior.posterior_update(&data(&mut rng, n, d_x, d_u)).unwrap();
        prop_assert!(linalg::is_pd(&post.precision));
        prop_assert!(linalg::is_pd(&post.scale));
        prop_assert!(linalg::is_symmetric(&post.precision, 1e-9));
        prop_assert!(linalg::is_symmetric(&post.scale, 1e-9));
        prop_assert_eq!(post.dof, prior.dof + n as f64);
    }

    #[test]
    fn row_order_does_not_matter(seed in any::<u64>(), d_x in 1usize..4, d_u in 1usize..3, n in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = belief(&mut rng, d_x, d_u);
        let d = data(&mut rng, n, d_x, d_u);
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let permuted = RegressionData { x: d.x.select_rows(&order), y: d.y.select_rows(&order) };
        let a = prior.posterior_update(&d).unwrap();
        let b = prior.posterior_update(&permuted).unwrap();
        prop_assert!(max_rel(&a.mean, &b.mean) < 1e-10);
        prop_assert!(max_rel(&a.precision, &b.precision) < 1e-12);
        prop_assert!(max_rel(&a.scale, &b.scale) < 1e-10);
    }

    #[test]
    fn batch_equals_sequential(seed in any::<u64>(), d_x in 1usize..4, d_u in 1usize..3, n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = belief(&mut rng, d_x, d_u);
        let d = data(&mut rng, n, d_x, d_u);
        let batch = prior.posterior_update(&d).unwrap();
        let mut seq = prior;
        for i in 0..n {
            seq = seq.posterior_update(&d.row(i)).unwrap();
        }
        prop_assert!(max_rel(&batch.mean, &seq.mean) < 1e-9);
        prop_assert!(max_rel(&batch.precision, &seq.precision) < 1e-9);
        prop_assert!(max_rel(&batch.scale, &seq.scale) < 1e-9);
    }

    #[test]
    fn per_step_cost_ignores_window_size(seed in any::<u64>(), tau in 1usize..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (sys, k) = stable_loop(&mut rng, 2, 1);
        let w = CostWeights::new(pd(&mut rng, 2, 0.1), pd(&mut rng, 1, 0.1), 1).unwrap();
        let one = lqr::expected_cost(&sys, &k, &w);
        let many = lqr::expected_cost(&sys, &k, &w.with_tau(tau)) / tau as f64;
        prop_assert!((one - many).abs() <= 1e-12 * one);
    }

    #[test]
    fn excitation_adds_only_input_and_inflated_noise(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (sys, k) = stable_loop(&mut rng, 2, 2);
        let w = CostWeights::new(pd(&mut rng, 2, 0.1), pd(&mut rng, 2, 0.1), 50).unwrap();
        let se = pd(&mut rng, 2, 0.01);
        let inflated = sys.with_sigma(&sys.sigma + &sys.b * &se * sys.b.transpose()).unwrap();
        let expected = lqr::expected_cost(&inflated, &k, &w) + 50.0 * (&se * &w.r).trace();
        let got = lqr::excitation_cost(&sys, &k, &se, &w);
        prop_assert!((got - expected).abs() <= 1e-10 * expected);
    }

    #[test]
    fn chernoff_bounds_bracket_the_mean(seed in any::<u64>(), d_x in 1usize..4, tau in 1usize..300) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (sys, k) = stable_loop(&mut rng, d_x, 1);
        let w = CostWeights::new(pd(&mut rng, d_x, 0.1), pd(&mut rng, 1, 0.1), tau).unwrap();
        let (lo, hi) = chernoff_bounds(&sys, &k, &w, 0.002).unwrap();
        let mean = lqr::expected_cost(&sys, &k, &w);
        prop_assert!(lo >= 0.0);
        prop_assert!(lo <= mean && mean <= hi, "{} {} {}", lo, mean, hi);
    }

    #[test]
    fn quantile_ignores_input_order(seed in any::<u64>(), n in 1usize..60, q in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0).collect();
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        let a = quantile(&sorted, q);
        for i in (1..n).rev() {
            v.swap(i, rng.random_range(0..=i));
        }
        v.sort_by(f64::total_cmp);
        prop_assert_eq!(a, quantile(&v, q));
        prop_assert!(a >= sorted[0] && a <= sorted[n - 1]);
    }

    #[test]
    fn shortest_episode_is_costliest_per_step(
        g1 in 0.01f64..1.0, r1 in 1e-5f64..1e-1, r2 in 1e-5f64..1e-1,
        j0 in 0.1f64..100.0, gap in 0.0f64..1.0, exc in 1.0f64..10.0,
        delta_min in 100usize..3000, n_frac in 0.0f64..1.0, factor in 1.0f64..20.0,
    ) {
        let beta = BetaCurve::from_rates(g1, r1, r2).unwrap();
        let model = ImprovementModel { beta, j0, g0: gap * j0, j_exc: exc * j0, psi: (exc - 1.0) * j0 };
        let n = (n_frac * (delta_min - 1) as f64).floor();
        let d_min = delta_min as f64;
        let delta = d_min * factor;
        let short = total_cost_model(&model, n, d_min) / d_min;
        let long = total_cost_model(&model, n, delta) / delta;
        prop_assert!(short >= long - 1e-12 * short.abs());

        let n_star = optimal_excitation_length(&model, delta_min).unwrap() as f64;
        if total_cost_model(&model, n_star, d_min) <= d_min * j0 {
            prop_assert!(total_cost_model(&model, n_star, delta) <= delta * j0 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn fitted_curve_is_monotone_and_bounded(seed in any::<u64>(), g1 in 0.05f64..1.0, r1 in 1e-4f64..1e-2, r2 in 1e-4f64..1e-2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = BetaCurve::from_rates(g1, r1, r2).unwrap();
        let samples: Vec<BetaSample> = [250usize, 500, 1000, 2000, 4000]
            .iter()
            .flat_map(|&n| (0..5).map(move |_| n))
            .map(|n| BetaSample { n, ratio: truth.eval(n as f64) + 0.2 * rng.sample::<f64, _>(StandardNormal), status: SampleStatus::Ok })
            .collect();
        let fit = fit_beta(&samples).unwrap();
        let mut prev = fit.eval(0.0);
        prop_assert!(prev.abs() < 1e-12);
        for i in 1..=500 {
            let b = fit.eval(i as f64 * 20.0);
            prop_assert!(b >= prev - 1e-12 && b <= 1.0 + 1e-12);
            prev = b;
        }
    }
}

#[test]
fn riccati_and_lyapunov_residuals() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for i in 0..1000 {
        let d_x = 1 + i % 5;
        let d_u = 1 + i % 3;
        let (sys, k) = stable_loop(&mut rng, d_x, d_u.min(d_x));
        let acl = sys.closed_loop(&k);
        let p = lqr::dlyap(&acl, &sys.sigma).unwrap();
        let res = (&acl * &p * acl.transpose() + &sys.sigma - &p).norm() / p.norm();
        assert!(res < 1e-9, "dlyap residual {res}");

        let w = CostWeights::new(pd(&mut rng, d_x, 0.1), pd(&mut rng, d_u.min(d_x), 0.1), 1).unwrap();
        let (p, _) = lqr::dare(&sys, &w).unwrap();
        let res = lqr::dare_residual(&sys, &w, &p);
        assert!(res < 1e-8, "dare residual {res}");
    }
}

#[test]
fn bounds_ignore_draw_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (sys, k) = stable_loop(&mut rng, 2, 1);
    let w = CostWeights::new(Mat::identity(2, 2), Mat::identity(1, 1), 50).unwrap();
    let systems: Vec<SystemParams> = (0..30)
        .map(|_| {
            let a = &sys.a + gauss(&mut rng, 2, 2, 0.01);
            SystemParams::new(a, sys.b.clone(), sys.sigma.clone()).unwrap()
        })
        .collect();
    let cfg = BoundsConfig { eta: 0.002, nu: 0.05, n_mc: 30, percentile: Percentile::Tail, min_stable_fraction: 0.5 };
    let a = bounds_from_systems(&systems, &k, &w, &cfg).unwrap();
    let reversed: Vec<SystemParams> = systems.iter().rev().cloned().collect();
    let b = bounds_from_systems(&reversed, &k, &w, &cfg).unwrap();
    assert_eq!(a.bounds, b.bounds);
    assert_eq!(a.stable_fraction, b.stable_fraction);
}
