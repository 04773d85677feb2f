//! Self-checks of the closed-form machinery against simulation.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::dynamics::{self, GaussianSampler, PlantStepper, SystemParams};
use crate::error::Result;
use crate::linalg::{self, Mat};
use crate::lqr::{self, CostWeights, Gain};
use crate::rng::{stream, Purpose};
use crate::trigger::{self, stage_cost};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct ValidateOptions {
    pub seed: u64,
    /// Replaces every check's tolerance.
    pub tolerance: Option<f64>,
    pub rollout_steps: usize,
    pub chernoff_windows: usize,
    pub conjugacy_rows: usize,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        Self { seed: 0, tolerance: None, rollout_steps: 4_000_000, chernoff_windows: 20_000, conjugacy_rows: 200 }
    }
}

/// Mean window cost over a long rollout started in stationarity.
pub fn rollout_window_cost<R: Rng + ?Sized>(
    sys: &SystemParams,
    k: &Gain,
    sigma_e: Option<&Mat>,
    weights: &CostWeights,
    steps: usize,
    rng: &mut R,
) -> Result<f64> {
    let noise = match sigma_e {
        Some(se) => &sys.sigma + &sys.b * se * sys.b.transpose(),
        None => sys.sigma.clone(),
    };
    let mut x = dynamics::stationary_state(sys, k, &noise, rng)?.as_slice().to_vec();
    let (d_x, d_u) = (sys.d_x(), sys.d_u());
    let gain = linalg::row_major(&k.0);
    let mut stepper = PlantStepper::new(sys);
    let mut exciter = sigma_e.map(GaussianSampler::new);
    let (mut u, mut e, mut next) = (vec![0.0; d_u], vec![0.0; d_u], vec![0.0; d_x]);
    let mut total = 0.0;
    for _ in 0..steps {
        linalg::matvec_into(&gain, d_x, &x, &mut u);
        if let Some(ex) = exciter.as_mut() {
            ex.sample_into(rng, &mut e);
            for (ui, ei) in u.iter_mut().zip(&e) {
                *ui += ei;
            }
        }
        total += stage_cost(&x, &u, weights);
        stepper.step(&x, &u, rng, &mut next);
        std::mem::swap(&mut x, &mut next);
    }
    Ok(total / steps as f64 * weights.tau as f64)
}

fn timed(name: &str, tolerance: f64, f: impl FnOnce() -> Result<f64>) -> Result<CheckResult> {
    let t = Instant::now();
    let error = f()?;
    Ok(CheckResult {
        name: name.to_string(),
        error,
        tolerance,
        passed: error <= tolerance,
        seconds: t.elapsed().as_secs_f64(),
    })
}

/// Runs the oracle suite on the prior mean plant under its LQR gain.
pub fn run_oracles(cfg: &ExperimentConfig, opts: &ValidateOptions) -> Result<Vec<CheckResult>> {
    let sys = cfg.prior.mean_system()?;
    let (_, k) = lqr::dare(&sys, &cfg.weights)?;
    let w = &cfg.weights;
    let tol = |default: f64| opts.tolerance.unwrap_or(default);
    let mut out = Vec::new();

    out.push(timed("lyapunov_vs_rollout", tol(0.02), || {
        let mut rng = stream(opts.seed, Purpose::Validation, 0);
        let sim = rollout_window_cost(&sys, &k, None, w, opts.rollout_steps, &mut rng)?;
        Ok((sim / lqr::expected_cost(&sys, &k, w) - 1.0).abs())
    })?);

    out.push(timed("excitation_vs_rollout", tol(0.02), || {
        let mut rng = stream(opts.seed, Purpose::Validation, 1);
        let sim = rollout_window_cost(&sys, &k, Some(&cfg.sigma_e), w, opts.rollout_steps, &mut rng)?;
        Ok((sim / lqr::excitation_cost(&sys, &k, &cfg.sigma_e, w) - 1.0).abs())
    })?);

    let eta = cfg.bounds.eta;
    let n = opts.chernoff_windows as f64;
    out.push(timed("chernoff_vs_mc_exceedance", tol(eta + 3.0 * (eta * (1.0 - eta) / n).sqrt()), || {
        let mut rng = stream(opts.seed, Purpose::Validation, 2);
        let (lo, hi) = trigger::chernoff_bounds(&sys, &k, w, eta)?;
        let x0 = dynamics::stationary_state(&sys, &k, &sys.sigma, &mut rng)?;
        let traj = dynamics::simulate(&sys, &k, None, x0.as_slice(), opts.chernoff_windows * w.tau, &mut rng)?;
        let mut outside = 0usize;
        for i in 0..opts.chernoff_windows {
            let j = trigger::window_cost(&traj.slice(i * w.tau, (i + 1) * w.tau), w)?;
            if j < lo || j > hi {
                outside += 1;
            }
        }
        Ok(outside as f64 / n)
    })?);

    out.push(timed("conjugacy_batch_vs_sequential", tol(1e-9), || {
        let mut rng = stream(opts.seed, Purpose::Validation, 3);
        let x0 = vec![0.0; sys.d_x()];
        let traj = dynamics::simulate(&sys, &k, Some(&cfg.sigma_e), &x0, opts.conjugacy_rows, &mut rng)?;
        let data = crate::bayes::subsample(&traj, 1)?;
        let batch = cfg.prior.belief.posterior_update(&data)?;
        let mut seq = cfg.prior.belief.clone();
        for i in 0..data.len() {
            seq = seq.posterior_update(&data.row(i))?;
        }
        let rel = |a: &Mat, b: &Mat| (a - b).amax() / a.amax().max(1.0);
        Ok(rel(&batch.mean, &seq.mean)
            .max(rel(&batch.precision, &seq.precision))
            .max(rel(&batch.scale, &seq.scale))
            .max((batch.dof - seq.dof).abs()))
    })?);

    Ok(out)
}
