//! Offline experiment design: how long to excite before learning pays off.
//!
//! The improvement rate `beta(N)` is the expected fraction of the robust
//! controller's sub-optimality gap that is recovered after learning from `N`
//! sub-sampled points. It is estimated by Monte Carlo over prior draws and
//! summarized by the curve
//!
//! ```text
//! beta(N) = g1 (1 - g2^(-g3 N)) + (1 - g1) (1 - g4^(-g5 N))
//! ```
//!
//! Model costs are per-window expected costs; lengths `N` and `Delta` count
//! sub-sampled points. The total cost of an episode in steps is therefore
//! `total_cost_model * m / tau`, a constant factor that does not move the
//! optimum.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bayes::{subsample, PlantPrior};
use crate::dynamics::{simulate, stationary_state, SystemParams};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::lqr::{self, CostWeights, Gain};
use crate::rng::{stream, Purpose};
use crate::synthesis::{synth, SynthOptions};

/// Improvement curve parameters `g1..g5`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BetaCurve {
    pub gamma: [f64; 5],
}

impl BetaCurve {
    /// `g1` in `(0, 1]`, bases positive, rates non-negative.
    pub fn new(gamma: [f64; 5]) -> Result<Self> {
        let [g1, g2, g3, g4, g5] = gamma;
        if !(g1 > 0.0 && g1 <= 1.0) {
            return Err(Error::InvalidArgument(format!("gamma1 = {g1} outside (0, 1]")));
        }
        if !(g2 > 0.0 && g4 > 0.0 && g3 >= 0.0 && g5 >= 0.0 && g3.is_finite() && g5.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid curve parameters {gamma:?}")));
        }
        Ok(Self { gamma })
    }

    /// Two exponential rates with natural bases.
    pub fn from_rates(g1: f64, r1: f64, r2: f64) -> Result<Self> {
        let e = std::f64::consts::E;
        Self::new([g1, e, r1, e, r2])
    }

    /// `beta = 0` everywhere.
    pub fn zero() -> Self {
        let e = std::f64::consts::E;
        Self { gamma: [1.0, e, 0.0, e, 0.0] }
    }

    pub fn eval(&self, n: f64) -> f64 {
        let [g1, g2, g3, g4, g5] = self.gamma;
        g1 * (1.0 - g2.powf(-g3 * n)) + (1.0 - g1) * (1.0 - g4.powf(-g5 * n))
    }

    pub fn is_zero(&self) -> bool {
        self.eval(1e12) == 0.0
    }
}

/// MC estimates of the per-window cost constants under `K0`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Constants {
    pub j0: f64,
    pub g0: f64,
    pub j_exc: f64,
    pub psi: f64,
    pub se_j0: f64,
    pub se_g0: f64,
    pub se_psi: f64,
    pub excluded_fraction: f64,
    pub n_used: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImprovementModel {
    pub beta: BetaCurve,
    pub j0: f64,
    pub g0: f64,
    pub j_exc: f64,
    pub psi: f64,
}

impl ImprovementModel {
    pub fn new(beta: BetaCurve, constants: &Constants) -> Self {
        Self { beta, j0: constants.j0, g0: constants.g0, j_exc: constants.j_exc, psi: constants.psi }
    }
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Averages `J(K0)`, `G(K0)` and the excited cost over `n_mc` prior draws.
///
/// Draws that `K0` does not stabilize are excluded; more than `1 - alpha`
/// of them means `K0` is not robust for this prior.
pub fn estimate_constants<R: Rng + ?Sized>(
    prior: &PlantPrior,
    k0: &Gain,
    sigma_e: &Mat,
    weights: &CostWeights,
    alpha: f64,
    n_mc: usize,
    rng: &mut R,
) -> Result<Constants> {
    if n_mc < 10 {
        return Err(Error::InvalidArgument(format!("constants need n_mc >= 10, got {n_mc}")));
    }
    let draws: Vec<SystemParams> = (0..n_mc).map(|_| prior.sample(rng)).collect();
    let per_draw: Vec<Option<(f64, f64, f64)>> = draws
        .par_iter()
        .map(|sys| {
            let j0 = lqr::expected_cost(sys, k0, weights);
            if !j0.is_finite() {
                return None;
            }
            let g0 = lqr::gap(sys, k0, weights).ok()?;
            let j_exc = lqr::excitation_cost(sys, k0, sigma_e, weights);
            Some((j0, g0, j_exc))
        })
        .collect();
    let used: Vec<(f64, f64, f64)> = per_draw.into_iter().flatten().collect();
    let excluded = (n_mc - used.len()) as f64 / n_mc as f64;
    if used.is_empty() || excluded > 1.0 - alpha {
        return Err(Error::NotRobust { excluded, allowed: 1.0 - alpha });
    }
    let j0: Vec<f64> = used.iter().map(|c| c.0).collect();
    let g0: Vec<f64> = used.iter().map(|c| c.1).collect();
    let je: Vec<f64> = used.iter().map(|c| c.2).collect();
    let psi: Vec<f64> = used.iter().map(|c| c.2 - c.0).collect();
    let (j0_m, se_j0) = mean_se(&j0);
    let (g0_m, se_g0) = mean_se(&g0);
    let (je_m, _) = mean_se(&je);
    let (psi_m, se_psi) = mean_se(&psi);
    Ok(Constants {
        j0: j0_m,
        g0: g0_m,
        j_exc: je_m,
        psi: psi_m.max(0.0),
        se_j0,
        se_g0,
        se_psi,
        excluded_fraction: excluded,
        n_used: used.len(),
    })
}

/// Everything one improvement-rate draw needs.
#[derive(Clone, Debug)]
pub struct BetaContext {
    pub prior: PlantPrior,
    pub k0: Gain,
    pub sigma_e: Mat,
    pub weights: CostWeights,
    pub alpha: f64,
    pub stride: usize,
    pub n_scenarios: usize,
    pub synth: SynthOptions,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleStatus {
    Ok,
    /// No gain stabilizes the scenario set; recorded as ratio 0.
    Infeasible,
    /// The learned gain destabilizes the true plant; recorded as ratio 0.
    UnstableOnTruth,
    /// `K0` is already optimal on the true plant; recorded as ratio 1.
    NoGap,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaSample {
    pub n: usize,
    pub ratio: f64,
    pub status: SampleStatus,
}

const NO_GAP: f64 = 1e-9;
const DRAW_CAP: usize = 1000;

/// One improvement-rate draw after learning from `n` sub-sampled points.
pub fn sample_beta<R: Rng + ?Sized>(ctx: &BetaContext, n: usize, rng: &mut R) -> Result<BetaSample> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample_beta needs N >= 1".into()));
    }
    let mut truth = None;
    for _ in 0..DRAW_CAP {
        let sys = ctx.prior.sample(rng);
        if lqr::spectral_radius(&sys.closed_loop(&ctx.k0)) < 1.0 {
            truth = Some(sys);
            break;
        }
    }
    let truth = truth.ok_or(Error::RetryCap(DRAW_CAP))?;
    let g0 = lqr::gap(&truth, &ctx.k0, &ctx.weights)?;
    if g0 < NO_GAP {
        return Ok(BetaSample { n, ratio: 1.0, status: SampleStatus::NoGap });
    }

    let excited_noise = &truth.sigma + &truth.b * &ctx.sigma_e * truth.b.transpose();
    let x0 = stationary_state(&truth, &ctx.k0, &excited_noise, rng)?;
    let traj = simulate(&truth, &ctx.k0, Some(&ctx.sigma_e), x0.as_slice(), n * ctx.stride, rng)?;
    let data = subsample(&traj, ctx.stride)?;
    let posterior = ctx.prior.belief.posterior_update(&data)?;
    let scenarios = posterior.scenario_set(ctx.alpha, ctx.n_scenarios, rng)?;
    let k_n = match synth(&scenarios, &ctx.weights, None, &ctx.synth) {
        Ok(k) => k,
        Err(Error::Infeasible) => return Ok(BetaSample { n, ratio: 0.0, status: SampleStatus::Infeasible }),
        Err(e) => return Err(e),
    };
    let g_n = lqr::gap(&truth, &k_n, &ctx.weights)?;
    if !g_n.is_finite() {
        return Ok(BetaSample { n, ratio: 0.0, status: SampleStatus::UnstableOnTruth });
    }
    Ok(BetaSample { n, ratio: 1.0 - g_n / g0, status: SampleStatus::Ok })
}

/// `per_point` draws at every grid point, each on its own random stream.
pub fn sample_beta_grid(ctx: &BetaContext, grid: &[usize], per_point: usize, seed: u64) -> Result<Vec<BetaSample>> {
    let jobs: Vec<(usize, usize)> = grid
        .iter()
        .enumerate()
        .flat_map(|(i, &n)| (0..per_point).map(move |j| (i * per_point + j, n)))
        .collect();
    jobs.par_iter()
        .map(|&(idx, n)| sample_beta(ctx, n, &mut stream(seed, Purpose::BetaSample, idx as u64)))
        .collect()
}

/// Per-`N` mean ratio, sorted by `N`.
pub fn grid_means(samples: &[BetaSample]) -> Vec<(usize, f64)> {
    let mut ns: Vec<usize> = samples.iter().map(|s| s.n).collect();
    ns.sort_unstable();
    ns.dedup();
    ns.into_iter()
        .map(|n| {
            let v: Vec<f64> = samples.iter().filter(|s| s.n == n).map(|s| s.ratio).collect();
            (n, v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect()
}

fn sse(curve: &BetaCurve, means: &[(usize, f64)]) -> f64 {
    means.iter().map(|&(n, m)| (curve.eval(n as f64) - m).powi(2)).sum()
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Least-squares fit of the curve to the per-`N` sample means.
///
/// Fitted with natural bases, `g1` through a logit and the rates through
/// logs. Falls back to a single exponential (`g1 = 1`) when the two-term fit
/// is no better, and to `beta = 0` when no curve beats it.
pub fn fit_beta(samples: &[BetaSample]) -> Result<BetaCurve> {
    let means = grid_means(samples);
    if means.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "fit needs at least 4 distinct N values, got {}",
            means.len()
        )));
    }
    let zero = BetaCurve::zero();
    let zero_sse = sse(&zero, &means);
    if means.iter().all(|&(_, m)| m <= 0.0) {
        return Ok(zero);
    }
    let n_max = means.iter().map(|m| m.0).max().unwrap() as f64;
    let n_min = means.iter().map(|m| m.0).min().unwrap().max(1) as f64;
    // rates are searched around the scale of the sampled grid
    let lo = (1e-3 / n_max).ln();
    let hi = (50.0 / n_min).ln();

    let single = |z: &[f64]| BetaCurve::from_rates(1.0, z[0].exp(), 0.0).map(|c| sse(&c, &means)).unwrap_or(f64::INFINITY);
    let double = |z: &[f64]| {
        BetaCurve::from_rates(logistic(z[0]), z[1].exp(), z[2].exp())
            .map(|c| sse(&c, &means))
            .unwrap_or(f64::INFINITY)
    };

    let mut best_single = (f64::INFINITY, vec![0.0]);
    let mut best_double = (f64::INFINITY, vec![0.0; 3]);
    let mut rng = stream(0, Purpose::Calibration, 0);
    for _ in 0..FIT_RESTARTS {
        let r1: f64 = rng.random_range(lo..hi);
        let r2: f64 = rng.random_range(lo..hi);
        let g: f64 = rng.random_range(-3.0..3.0);
        let (v, z) = nelder_mead(&single, &[r1], 0.5);
        if v < best_single.0 {
            best_single = (v, z);
        }
        let (v, z) = nelder_mead(&double, &[g, r1, r2], 0.5);
        if v < best_double.0 {
            best_double = (v, z);
        }
    }
    let single_curve = BetaCurve::from_rates(1.0, best_single.1[0].exp(), 0.0)?;
    let double_curve = BetaCurve::from_rates(logistic(best_double.1[0]), best_double.1[1].exp(), best_double.1[2].exp())?;
    // the two-term fit has to earn its extra parameters
    let chosen = if best_double.0 < best_single.0 * (1.0 - 1e-6) && double_curve.gamma[0] < 1.0 {
        (best_double.0, double_curve)
    } else {
        (best_single.0, single_curve)
    };
    if !(chosen.0 < zero_sse) {
        return Ok(zero);
    }
    Ok(chosen.1)
}

const FIT_RESTARTS: usize = 20;

/// Unconstrained Nelder-Mead with standard coefficients.
fn nelder_mead(f: &impl Fn(&[f64]) -> f64, x0: &[f64], scale: f64) -> (f64, Vec<f64>) {
    const MAX_ITER: usize = 5000;
    const FTOL: f64 = 1e-14;
    let n = x0.len();
    let mut simplex: Vec<(f64, Vec<f64>)> = Vec::with_capacity(n + 1);
    simplex.push((f(x0), x0.to_vec()));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += scale;
        simplex.push((f(&x), x));
    }
    let centroid = |s: &[(f64, Vec<f64>)]| {
        let mut c = vec![0.0; n];
        for (_, x) in &s[..n] {
            for (ci, xi) in c.iter_mut().zip(x) {
                *ci += xi / n as f64;
            }
        }
        c
    };
    let along = |c: &[f64], x: &[f64], t: f64| -> Vec<f64> { c.iter().zip(x).map(|(ci, xi)| ci + t * (xi - ci)).collect() };
    for _ in 0..MAX_ITER {
        simplex.sort_by(|a, b| a.0.total_cmp(&b.0));
        let spread = simplex[n].0 - simplex[0].0;
        if spread.abs() <= FTOL * (simplex[0].0.abs() + FTOL) {
            break;
        }
        let c = centroid(&simplex);
        let worst = simplex[n].1.clone();
        let xr = along(&c, &worst, -1.0);
        let fr = f(&xr);
        if fr < simplex[0].0 {
            let xe = along(&c, &worst, -2.0);
            let fe = f(&xe);
            simplex[n] = if fe < fr { (fe, xe) } else { (fr, xr) };
        } else if fr < simplex[n - 1].0 {
            simplex[n] = (fr, xr);
        } else {
            let (xc, fc) = if fr < simplex[n].0 {
                let x = along(&c, &worst, -0.5);
                let v = f(&x);
                (x, v)
            } else {
                let x = along(&c, &worst, 0.5);
                let v = f(&x);
                (x, v)
            };
            if fc < simplex[n].0.min(fr) {
                simplex[n] = (fc, xc);
            } else {
                let best = simplex[0].1.clone();
                for s in simplex.iter_mut().skip(1) {
                    s.1 = along(&best, &s.1, 0.5);
                    s.0 = f(&s.1);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (v, x) = simplex.swap_remove(0);
    (v, x)
}

/// Expected cost of an episode of length `delta` with `n` points of learning.
pub fn total_cost_model(model: &ImprovementModel, n: f64, delta: f64) -> f64 {
    n * model.j_exc + (delta - n) * (model.j0 - model.beta.eval(n) * model.g0)
}

/// Integer minimizer of the model cost over `[0, delta_min)`; ties go to the smaller `N`.
pub fn optimal_excitation_length(model: &ImprovementModel, delta_min: usize) -> Result<usize> {
    if delta_min < 2 {
        return Err(Error::InvalidArgument(format!("Delta_min = {delta_min} must be at least 2")));
    }
    let d = delta_min as f64;
    let mut best = (0usize, total_cost_model(model, 0.0, d));
    for n in 1..delta_min {
        let c = total_cost_model(model, n as f64, d);
        if c < best.1 {
            best = (n, c);
        }
    }
    Ok(best.0)
}

/// `N,ratio` rows.
pub fn write_samples_csv<W: Write>(samples: &[BetaSample], mut out: W) -> Result<()> {
    writeln!(out, "# schema=1")?;
    writeln!(out, "N,ratio")?;
    for s in samples {
        writeln!(out, "{},{:?}", s.n, s.ratio)?;
    }
    Ok(())
}

/// `N,beta_fit` rows over `0..=n_max` in `points` steps.
pub fn write_curve_csv<W: Write>(curve: &BetaCurve, n_max: usize, points: usize, mut out: W) -> Result<()> {
    writeln!(out, "# schema=1")?;
    writeln!(out, "N,beta_fit")?;
    let points = points.max(2);
    for i in 0..points {
        let n = (i * n_max) as f64 / (points - 1) as f64;
        writeln!(out, "{:?},{:?}", n, curve.eval(n))?;
    }
    Ok(())
}
