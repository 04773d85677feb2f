use etl_lqr::bayes::subsample;
use etl_lqr::config::ExperimentConfig;
use etl_lqr::dynamics::{simulate, stationary_state, SystemParams};
use etl_lqr::linalg::Mat;
use etl_lqr::lqr::{self, Gain};
use etl_lqr::rng::{stream, Purpose};
use etl_lqr::synthesis::{scenario_objective, synth, Objective, SynthOptions};

#[test]
fn empirical_covariance_matches_lyapunov() {
    let sys = SystemParams::new(
        Mat::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.7]),
        Mat::from_row_slice(2, 1, &[0.0, 0.5]),
        Mat::from_row_slice(2, 2, &[0.05, 0.01, 0.01, 0.02]),
    )
    .unwrap();
    let k = Gain(Mat::from_row_slice(1, 2, &[-0.1, -0.3]));
    let p = lqr::stationary_covariance(&sys, &k, &sys.sigma).unwrap();
    let mut rng = stream(1, Purpose::Validation, 0);
    let x0 = stationary_state(&sys, &k, &sys.sigma, &mut rng).unwrap();
    let steps = 1_000_000;
    let traj = simulate(&sys, &k, None, x0.as_slice(), steps, &mut rng).unwrap();
    let mut emp = Mat::zeros(2, 2);
    for i in 1..=steps {
        let x = traj.state(i);
        for r in 0..2 {
            for c in 0..2 {
                emp[(r, c)] += x[r] * x[c];
            }
        }
    }
    emp /= steps as f64;
    let err = (&emp - &p).norm() / p.norm();
    assert!(err < 0.03, "relative Frobenius error {err}");
}

#[test]
fn posterior_mean_contracts_on_the_oned_system() {
    let cfg = ExperimentConfig::preset("oned_example").unwrap();
    let truth = cfg.prior.mean_system().unwrap();
    let (_, k) = lqr::dare(&truth, &cfg.weights).unwrap();
    let theta = etl_lqr::bayes::stack_ab(&truth.a, &truth.b).unwrap();
    let mut rng = stream(2, Purpose::Validation, 0);
    let excited = &truth.sigma + &truth.b * &cfg.sigma_e * truth.b.transpose();
    let x0 = stationary_state(&truth, &k, &excited, &mut rng).unwrap();
    let traj = simulate(&truth, &k, Some(&cfg.sigma_e), x0.as_slice(), 2500 * cfg.stride, &mut rng).unwrap();
    let errors: Vec<f64> = [100usize, 500, 2500]
        .iter()
        .map(|&n| {
            let data = subsample(&traj.slice(0, n * cfg.stride), cfg.stride).unwrap();
            let post = cfg.prior.belief.posterior_update(&data).unwrap();
            (&post.mean - &theta).norm()
        })
        .collect();
    assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
    assert!(errors[2] < 0.05, "{errors:?}");
}

#[test]
fn synthesized_gain_is_feasible_and_objective_grows_with_scenarios() {
    let cfg = ExperimentConfig::preset("dean_benchmark").unwrap();
    let mut rng = stream(3, Purpose::Validation, 0);
    let big = cfg.prior.scenario_set(cfg.alpha, 30, &mut rng).unwrap();
    let small = &big[..10];
    let opts = SynthOptions::default();
    let k = synth(small, &cfg.weights, None, &opts).unwrap();
    for s in small {
        assert!(lqr::spectral_radius(&s.closed_loop(&k)) < 1.0);
    }
    let on_small = scenario_objective(small, &cfg.weights, &k, Objective::WorstCase);
    let on_big = scenario_objective(&big, &cfg.weights, &k, Objective::WorstCase);
    assert!(on_big >= on_small);
}

#[test]
fn scenario_spread_shrinks_with_data() {
    let cfg = ExperimentConfig::preset("oned_example").unwrap();
    let truth = cfg.prior.mean_system().unwrap();
    let (k0, _) = etl_lqr::etl::design_k0(&ExperimentConfig { robustness_mc: 1000, ..cfg.clone() }, 0).unwrap();
    let mut rng = stream(4, Purpose::Validation, 0);
    let excited = &truth.sigma + &truth.b * &cfg.sigma_e * truth.b.transpose();
    let x0 = stationary_state(&truth, &k0, &excited, &mut rng).unwrap();
    let traj = simulate(&truth, &k0, Some(&cfg.sigma_e), x0.as_slice(), 5000 * cfg.stride, &mut rng).unwrap();
    let spread: Vec<f64> = [100usize, 1000, 5000]
        .iter()
        .map(|&n| {
            let data = subsample(&traj.slice(0, n * cfg.stride), cfg.stride).unwrap();
            let post = cfg.prior.belief.posterior_update(&data).unwrap();
            let b: Vec<f64> = post.scenario_set(cfg.alpha, 200, &mut rng).unwrap().iter().map(|s| s.b[(0, 0)]).collect();
            b.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - b.iter().cloned().fold(f64::INFINITY, f64::min)
        })
        .collect();
    assert!(spread.windows(2).all(|w| w[1] < w[0]), "{spread:?}");
}
