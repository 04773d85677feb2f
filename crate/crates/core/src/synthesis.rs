//! Scenario-based robust gain synthesis.
//!
//! The credible region is represented by a finite scenario set. The search
//! runs in two phases over the entries of `K`:
//!
//! 1. stabilization: compass search on `max_i rho(A_i + B_i K)` until every
//!    scenario has spectral radius below `1 - margin`;
//! 2. performance: compass search on a log-sum-exp smoothed worst-case (or
//!    average) stationary cost, followed by a polish on the hard maximum.

use rand::Rng;

use crate::bayes::MniwBelief;
use crate::dynamics::SystemParams;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::lqr::{self, CostWeights, Gain};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    WorstCase,
    Average,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub objective: Objective,
    pub stability_margin: f64,
    pub initial_step: f64,
    pub min_step: f64,
    /// Soft-max temperature relative to the objective at the start of phase 2.
    pub temperature: f64,
    pub max_evals: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            objective: Objective::WorstCase,
            stability_margin: 1e-3,
            initial_step: 0.1,
            min_step: 1e-5,
            temperature: 1e-2,
            max_evals: 100_000,
        }
    }
}

/// Worst-case (or average) expected window cost of `k` over `scenarios`.
pub fn scenario_objective(scenarios: &[SystemParams], weights: &CostWeights, k: &Gain, objective: Objective) -> f64 {
    let costs = scenarios.iter().map(|s| lqr::expected_cost(s, k, weights));
    match objective {
        Objective::WorstCase => costs.fold(f64::NEG_INFINITY, f64::max),
        Objective::Average => costs.sum::<f64>() / scenarios.len() as f64,
    }
}

fn max_radius(scenarios: &[SystemParams], k: &Gain) -> f64 {
    scenarios
        .iter()
        .map(|s| lqr::spectral_radius(&s.closed_loop(k)))
        .fold(0.0, f64::max)
}

/// Mean of the scenario parameters.
fn mean_scenario(scenarios: &[SystemParams]) -> SystemParams {
    let n = scenarios.len() as f64;
    let first = &scenarios[0];
    let mut a = Mat::zeros(first.d_x(), first.d_x());
    let mut b = Mat::zeros(first.d_x(), first.d_u());
    let mut s = Mat::zeros(first.d_x(), first.d_x());
    for sc in scenarios {
        a += &sc.a;
        b += &sc.b;
        s += &sc.sigma;
    }
    SystemParams { a: a / n, b: b / n, sigma: s / n }
}

struct SearchResult {
    x: Vec<f64>,
    value: f64,
    evals: usize,
}

/// Compass search with step halving. Stops early once `done(value)` holds.
fn compass_search(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    initial_step: f64,
    min_step: f64,
    max_evals: usize,
    done: impl Fn(f64) -> bool,
) -> SearchResult {
    let mut x = x0.to_vec();
    let mut best = f(&x);
    let mut evals = 1;
    let mut step = initial_step;
    while step >= min_step && evals < max_evals && !done(best) {
        let mut improved = false;
        for i in 0..x.len() {
            for dir in [1.0, -1.0] {
                let old = x[i];
                x[i] = old + dir * step;
                let v = f(&x);
                evals += 1;
                if v < best {
                    best = v;
                    improved = true;
                    break;
                }
                x[i] = old;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    SearchResult { x, value: best, evals }
}

fn gain_from(x: &[f64], d_u: usize, d_x: usize) -> Gain {
    Gain(Mat::from_row_slice(d_u, d_x, x))
}

pub fn synth(scenarios: &[SystemParams], weights: &CostWeights, k_init: Option<&Gain>, opts: &SynthOptions) -> Result<Gain> {
    let first = scenarios
        .first()
        .ok_or_else(|| Error::InvalidArgument("synthesis needs at least one scenario".into()))?;
    let (d_x, d_u) = (first.d_x(), first.d_u());
    for s in scenarios {
        if s.d_x() != d_x || s.d_u() != d_u {
            return Err(Error::Dimension("scenarios have mixed dimensions".into()));
        }
    }
    let start = match k_init {
        Some(k) => {
            first.check_gain(k)?;
            k.clone()
        }
        None => lqr::dare(&mean_scenario(scenarios), weights)
            .map(|(_, k)| k)
            .unwrap_or_else(|_| Gain::zeros(d_u, d_x)),
    };
    let init_objective = scenario_objective(scenarios, weights, &start, opts.objective);
    let mut budget = opts.max_evals;

    // Phase 1: stabilize every scenario with margin.
    let target = 1.0 - opts.stability_margin;
    let mut x: Vec<f64> = crate::linalg::row_major(&start.0);
    if max_radius(scenarios, &start) >= target {
        let res = compass_search(
            |v| max_radius(scenarios, &gain_from(v, d_u, d_x)),
            &x,
            opts.initial_step,
            opts.min_step,
            budget,
            |r| r < target,
        );
        budget = budget.saturating_sub(res.evals);
        if res.value >= target {
            return Err(Error::Infeasible);
        }
        x = res.x;
    }

    // Phase 2: smoothed objective, then the hard objective.
    let objective = |v: &[f64]| scenario_objective(scenarios, weights, &gain_from(v, d_u, d_x), opts.objective);
    let reference = objective(&x);
    if !reference.is_finite() {
        return Err(Error::Infeasible);
    }
    if opts.objective == Objective::WorstCase && scenarios.len() > 1 {
        let temp = opts.temperature * reference.max(f64::MIN_POSITIVE);
        let smooth = |v: &[f64]| {
            let k = gain_from(v, d_u, d_x);
            let costs: Vec<f64> = scenarios.iter().map(|s| lqr::expected_cost(s, &k, weights)).collect();
            let top = costs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !top.is_finite() {
                return f64::INFINITY;
            }
            top + temp * costs.iter().map(|c| ((c - top) / temp).exp()).sum::<f64>().ln()
        };
        let res = compass_search(smooth, &x, opts.initial_step, opts.min_step, budget, |_| false);
        budget = budget.saturating_sub(res.evals);
        x = res.x;
    }
    let polish_step = if opts.objective == Objective::WorstCase && scenarios.len() > 1 {
        opts.initial_step * 0.1
    } else {
        opts.initial_step
    };
    let res = compass_search(objective, &x, polish_step, opts.min_step, budget.max(1), |_| false);
    let mut best = gain_from(&res.x, d_u, d_x);
    let mut best_value = res.value;

    if init_objective.is_finite() && init_objective < best_value {
        best = start;
        best_value = init_objective;
    }
    if !best_value.is_finite() || max_radius(scenarios, &best) >= 1.0 {
        return Err(Error::Infeasible);
    }
    Ok(best)
}

/// Fraction of `n_mc` belief draws stabilized by `k`, and whether it reaches `alpha`.
pub fn is_alpha_robust<R: Rng + ?Sized>(k: &Gain, belief: &MniwBelief, alpha: f64, n_mc: usize, rng: &mut R) -> Result<(bool, f64)> {
    if n_mc < 100 {
        return Err(Error::InvalidArgument(format!("robustness check needs n_mc >= 100, got {n_mc}")));
    }
    let mut stable = 0usize;
    for _ in 0..n_mc {
        let sys = belief.sample_system(rng);
        if lqr::spectral_radius(&sys.closed_loop(k)) < 1.0 {
            stable += 1;
        }
    }
    let rate = stable as f64 / n_mc as f64;
    Ok((rate >= alpha, rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn scalar(a: f64, b: f64, s: f64) -> SystemParams {
        SystemParams::new(Mat::from_element(1, 1, a), Mat::from_element(1, 1, b), Mat::from_element(1, 1, s)).unwrap()
    }

    fn w1() -> CostWeights {
        CostWeights::new(Mat::from_element(1, 1, 1.0), Mat::from_element(1, 1, 100.0), 200).unwrap()
    }

    #[test]
    fn single_scenario_recovers_lqr() {
        let sys = scalar(1.01, 0.1, 0.02);
        let k = synth(std::slice::from_ref(&sys), &w1(), Some(&Gain(Mat::from_element(1, 1, -2.0))), &SynthOptions::default()).unwrap();
        let (_, k_opt) = lqr::dare(&sys, &w1()).unwrap();
        let got = lqr::expected_cost(&sys, &k, &w1());
        let best = lqr::expected_cost(&sys, &k_opt, &w1());
        assert!((got - best) / best < 1e-4, "{got} vs {best}");
    }

    #[test]
    fn identical_scenarios_behave_like_one() {
        let sys = scalar(1.01, 0.1, 0.02);
        let k = synth(&vec![sys.clone(); 5], &w1(), None, &SynthOptions::default()).unwrap();
        let (_, k_opt) = lqr::dare(&sys, &w1()).unwrap();
        let best = lqr::expected_cost(&sys, &k_opt, &w1());
        assert!((lqr::expected_cost(&sys, &k, &w1()) - best) / best < 1e-4);
    }

    #[test]
    fn stabilizes_from_destabilizing_start() {
        let scen = vec![scalar(1.2, 0.5, 1.0), scalar(1.1, 0.8, 1.0), scalar(0.9, 0.6, 1.0)];
        let k = synth(&scen, &w1(), Some(&Gain::zeros(1, 1)), &SynthOptions::default()).unwrap();
        assert!(max_radius(&scen, &k) < 1.0);
    }

    #[test]
    fn opposite_input_signs_are_infeasible() {
        let scen = vec![scalar(1.5, 1.0, 1.0), scalar(1.5, -1.0, 1.0)];
        assert!(matches!(synth(&scen, &w1(), None, &SynthOptions::default()), Err(Error::Infeasible)));
    }

    #[test]
    fn never_worse_than_feasible_start() {
        let scen = vec![scalar(1.02, 0.1, 0.02), scalar(0.98, 0.12, 0.02), scalar(1.05, 0.08, 0.02)];
        let start = Gain(Mat::from_element(1, 1, -1.5));
        let k = synth(&scen, &w1(), Some(&start), &SynthOptions::default()).unwrap();
        assert!(
            scenario_objective(&scen, &w1(), &k, Objective::WorstCase)
                <= scenario_objective(&scen, &w1(), &start, Objective::WorstCase)
        );
    }

    #[test]
    fn alpha_robust_trivial_cases() {
        let stable = MniwBelief::point_mass(&scalar(0.5, 0.1, 0.01), 1e12).unwrap();
        let (ok, rate) = is_alpha_robust(&Gain::zeros(1, 1), &stable, 0.99, 200, &mut stream(1, Purpose::Validation, 0)).unwrap();
        assert!(ok && rate == 1.0);
        let unstable = MniwBelief::point_mass(&scalar(1.01, 0.1, 0.01), 1e12).unwrap();
        let (ok, rate) = is_alpha_robust(&Gain::zeros(1, 1), &unstable, 0.99, 200, &mut stream(1, Purpose::Validation, 1)).unwrap();
        assert!(!ok && rate == 0.0);
        assert!(is_alpha_robust(&Gain::zeros(1, 1), &stable, 0.99, 10, &mut stream(1, Purpose::Validation, 2)).is_err());
    }
}
