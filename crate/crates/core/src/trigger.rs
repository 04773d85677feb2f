//! Change detection on the windowed LQR cost.
//!
//! For a fixed stable closed loop the window cost `J = sum_j x_j' M x_j`
//! (`M = Q + K'RK`, stationary `x_0`) is a Gaussian quadratic form, so its
//! moment-generating function is available in closed form. Chernoff's
//! inequality with risk `eta / 2` per tail then gives `(kappa-, kappa+)`.
//!
//! The log-MGF is evaluated by a backward recursion over the window,
//!
//! ```text
//! Pi_{tau-1} = s M
//! Pi_j       = s M + A' (I - 2 Pi_{j+1} S)^{-1} Pi_{j+1} A
//! c_j        = c_{j+1} - 1/2 log det(I - 2 S^{1/2} Pi_{j+1} S^{1/2})
//! log E[exp(s J)] = c_0 - 1/2 log det(I - 2 P^{1/2} Pi_0 P^{1/2})
//! ```
//!
//! which costs `O(tau d^3)` instead of an eigendecomposition of size `tau d`.
//! `s` is admissible while every `I - 2 ...` factor stays positive definite.

use rand::Rng;

use crate::bayes::MniwBelief;
use crate::dynamics::{SystemParams, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::lqr::{self, CostWeights, Gain};

/// Observed cost `sum_j x_j' Q x_j + u_j' R u_j` over a window of exactly `tau` steps.
pub fn window_cost(traj: &Trajectory, weights: &CostWeights) -> Result<f64> {
    if traj.len() != weights.tau {
        return Err(Error::InvalidArgument(format!(
            "window has {} steps, expected tau = {}",
            traj.len(),
            weights.tau
        )));
    }
    Ok((0..traj.len())
        .map(|k| stage_cost(traj.state(k), traj.input(k), weights))
        .sum())
}

/// `x' Q x + u' R u`.
pub fn stage_cost(x: &[f64], u: &[f64], weights: &CostWeights) -> f64 {
    quad(&weights.q, x) + quad(&weights.r, u)
}

fn quad(m: &Mat, v: &[f64]) -> f64 {
    let n = v.len();
    let mut acc = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += m[(i, j)] * v[j];
        }
        acc += v[i] * row;
    }
    acc
}

/// Precomputed pieces of the window-cost distribution for one closed loop.
#[derive(Clone, Debug)]
pub struct CostMgf {
    acl: Mat,
    weight: Mat,
    noise_root: Mat,
    stationary_root: Mat,
    tau: usize,
    mean: f64,
}

impl CostMgf {
    pub fn new(sys: &SystemParams, k: &Gain, weights: &CostWeights) -> Result<Self> {
        sys.check_gain(k)?;
        let acl = sys.closed_loop(k);
        let p = lqr::dlyap(&acl, &sys.sigma)?;
        let weight = weights.closed_loop_weight(k);
        let mean = weights.tau as f64 * (&weight * &p).trace();
        Ok(Self {
            noise_root: linalg::sqrt_psd(&sys.sigma),
            stationary_root: linalg::sqrt_psd(&p),
            acl,
            weight,
            tau: weights.tau,
            mean,
        })
    }

    /// `E[J]`.
    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// `log E[exp(s J)]`, or `None` where the MGF diverges.
    pub fn log_mgf(&self, s: f64) -> Option<f64> {
        let d = self.acl.nrows();
        let eye = Mat::identity(d, d);
        let at = self.acl.transpose();
        let mut pi = &self.weight * s;
        let mut c = 0.0;
        for _ in 1..self.tau {
            let spis = &self.noise_root * &pi * &self.noise_root;
            let g = linalg::symmetrize(&(&eye - spis * 2.0));
            let chol = g.cholesky()?;
            c -= chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let ps = &pi * &self.noise_root;
            let inner = &pi + &ps * chol.solve(&ps.transpose()) * 2.0;
            pi = linalg::symmetrize(&(&self.weight * s + &at * inner * &self.acl));
        }
        let g0 = linalg::symmetrize(&(&eye - &self.stationary_root * &pi * &self.stationary_root * 2.0));
        let chol = g0.cholesky()?;
        c -= chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        c.is_finite().then_some(c)
    }

    /// Supremum of the admissible `s > 0`, by doubling and bisection.
    fn s_max(&self) -> f64 {
        // lambda_max(W) <= tr(W) = E[J], so 1 / (2 E[J]) is always admissible
        let mut lo = 0.5 / self.mean.max(f64::MIN_POSITIVE);
        let mut hi = lo * 2.0;
        while self.log_mgf(hi).is_some() {
            lo = hi;
            hi *= 2.0;
            if !hi.is_finite() {
                return f64::INFINITY;
            }
        }
        for _ in 0..200 {
            if (hi - lo) <= 1e-13 * hi {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if self.log_mgf(mid).is_some() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Chernoff interval with `P(J outside) <= eta`, `eta / 2` per tail.
    pub fn bounds(&self, eta: f64) -> Result<(f64, f64)> {
        if !(eta > 0.0 && eta < 1.0) {
            return Err(Error::InvalidArgument(format!("risk eta = {eta} outside (0, 1)")));
        }
        if self.mean == 0.0 {
            return Ok((0.0, 0.0));
        }
        let level = (2.0 / eta).ln();
        let s_max = self.s_max();

        // upper: inf over s = s_max * logistic(z)
        let upper = |z: f64| {
            let s = s_max / (1.0 + (-z).exp());
            match self.log_mgf(s) {
                Some(l) => (l + level) / s,
                None => f64::INFINITY,
            }
        };
        let kappa_plus = minimize_1d(upper, -12.0, 36.0);

        // lower: sup over s = -exp(z) / E[J]
        let scale = 1.0 / self.mean;
        let lower = |z: f64| {
            let s = -z.exp() * scale;
            match self.log_mgf(s) {
                Some(l) => -(l + level) / s,
                None => f64::INFINITY,
            }
        };
        let kappa_minus = -minimize_1d(lower, -12.0, 25.0);
        if !(kappa_plus.is_finite() && kappa_minus.is_finite()) {
            return Ok((f64::NEG_INFINITY, f64::INFINITY));
        }
        Ok((kappa_minus.max(0.0), kappa_plus))
    }
}

/// Coarse grid followed by golden-section refinement; returns the minimum value.
fn minimize_1d(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    const GRID: usize = 48;
    const TOL: f64 = 1e-10;
    let h = (hi - lo) / GRID as f64;
    let values: Vec<f64> = (0..=GRID).map(|i| f(lo + i as f64 * h)).collect();
    let (best_i, best_v) = values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    if !best_v.is_finite() {
        return f64::INFINITY;
    }
    let mut a = lo + best_i.saturating_sub(1) as f64 * h;
    let mut b = lo + (best_i + 1).min(GRID) as f64 * h;
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > TOL {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    best_v.min(fc).min(fd)
}

pub fn chernoff_bounds(sys: &SystemParams, k: &Gain, weights: &CostWeights, eta: f64) -> Result<(f64, f64)> {
    CostMgf::new(sys, k, weights)?.bounds(eta)
}

/// Which percentile of the per-system bounds becomes the trigger threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Percentile {
    /// `kappa+` at the `1 - nu` quantile, `kappa-` at the `nu` quantile.
    Tail,
    /// `kappa+` at the `nu` quantile, `kappa-` at the `1 - nu` quantile.
    Confidence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriggerBounds {
    pub kappa_minus: f64,
    pub kappa_plus: f64,
    pub xi: f64,
    pub tau: usize,
    pub eta: f64,
    pub nu: f64,
}

impl TriggerBounds {
    pub fn new(kappa_minus: f64, kappa_plus: f64, xi: f64, tau: usize, eta: f64, nu: f64) -> Result<Self> {
        if !(kappa_minus < kappa_plus) {
            return Err(Error::InvalidArgument(format!("empty trigger interval ({kappa_minus}, {kappa_plus})")));
        }
        if !(xi >= 0.0) {
            return Err(Error::InvalidArgument(format!("negative margin {xi}")));
        }
        if !(eta > 0.0 && eta < 1.0 && nu > 0.0 && nu < 1.0) {
            return Err(Error::InvalidArgument("eta and nu must lie in (0, 1)".into()));
        }
        Ok(Self { kappa_minus, kappa_plus, xi, tau, eta, nu })
    }

    pub fn with_margin(mut self, xi: f64) -> Self {
        self.xi = xi;
        self
    }

    pub fn lower(&self) -> f64 {
        self.kappa_minus - self.xi
    }

    pub fn upper(&self) -> f64 {
        self.kappa_plus + self.xi
    }
}

/// Outcome of [`posterior_bounds`].
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorBounds {
    pub bounds: TriggerBounds,
    pub stable_fraction: f64,
    pub per_system: Vec<(f64, f64)>,
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundsConfig {
    pub eta: f64,
    pub nu: f64,
    pub n_mc: usize,
    pub percentile: Percentile,
    /// Minimum fraction of draws the gain must stabilize.
    pub min_stable_fraction: f64,
}

/// Trigger thresholds under parameter uncertainty: per-system Chernoff
/// bounds on `n_mc` belief draws, reduced to percentiles.
pub fn posterior_bounds<R: Rng + ?Sized>(
    belief: &MniwBelief,
    k: &Gain,
    weights: &CostWeights,
    cfg: &BoundsConfig,
    rng: &mut R,
) -> Result<PosteriorBounds> {
    if cfg.n_mc < 20 {
        return Err(Error::InvalidArgument(format!("posterior bounds need n_mc >= 20, got {}", cfg.n_mc)));
    }
    let systems: Vec<SystemParams> = (0..cfg.n_mc).map(|_| belief.sample_system(rng)).collect();
    bounds_from_systems(&systems, k, weights, cfg)
}

pub fn bounds_from_systems(systems: &[SystemParams], k: &Gain, weights: &CostWeights, cfg: &BoundsConfig) -> Result<PosteriorBounds> {
    use rayon::prelude::*;
    let per_system: Vec<(f64, f64)> = systems
        .par_iter()
        .filter_map(|sys| chernoff_bounds(sys, k, weights, cfg.eta).ok())
        .filter(|(lo, hi)| lo.is_finite() && hi.is_finite())
        .collect();
    let stable_fraction = per_system.len() as f64 / systems.len() as f64;
    if per_system.is_empty() || stable_fraction < cfg.min_stable_fraction {
        return Err(Error::InvalidArgument(format!(
            "gain stabilizes only {stable_fraction:.3} of the posterior draws"
        )));
    }
    let mut lows: Vec<f64> = per_system.iter().map(|b| b.0).collect();
    let mut highs: Vec<f64> = per_system.iter().map(|b| b.1).collect();
    lows.sort_by(f64::total_cmp);
    highs.sort_by(f64::total_cmp);
    let (q_lo, q_hi) = match cfg.percentile {
        Percentile::Tail => (cfg.nu, 1.0 - cfg.nu),
        Percentile::Confidence => (1.0 - cfg.nu, cfg.nu),
    };
    let bounds = TriggerBounds::new(quantile(&lows, q_lo), quantile(&highs, q_hi), 0.0, weights.tau, cfg.eta, cfg.nu)?;
    Ok(PosteriorBounds { bounds, stable_fraction, per_system })
}

/// True when the observed window cost leaves `(kappa- - xi, kappa+ + xi)`.
pub fn check_trigger(window_cost: f64, bounds: &TriggerBounds) -> bool {
    !(window_cost > bounds.lower() && window_cost < bounds.upper())
}

/// Bound on the trigger's false-positive rate, `1 - nu (1 - eta)`.
pub fn false_positive_bound(nu: f64, eta: f64) -> f64 {
    1.0 - nu * (1.0 - eta)
}

/// Trigger margin that lets one learning experiment amortize within the
/// shortest episode. Lengths are in trigger windows, `psi` per window.
pub fn margin_xi(n_bar: f64, psi: f64, omega: f64, delta_min: f64, lambda: f64) -> Result<f64> {
    let spent = (1.0 + lambda * delta_min) * n_bar;
    if !(delta_min > spent) {
        return Err(Error::Config(format!(
            "episode of {delta_min} windows cannot amortize learning: (1 + lambda Delta_min) N = {spent:.3} \
             (lambda = {lambda}, N = {n_bar})"
        )));
    }
    Ok((spent + omega) / (delta_min - spent) * psi)
}
