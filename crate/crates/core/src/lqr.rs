//! Exact LQR machinery for a fixed plant.
//!
//! Every cost here is an expectation over process noise with the initial
//! state drawn from the closed loop's stationary distribution, so a window of
//! `tau` steps costs exactly `tau` times the stationary per-step cost.
//! Unstable closed loops have no stationary distribution; the cost functions
//! report `f64::INFINITY` for them instead of failing, which the synthesis
//! search uses as a hard penalty.

use nalgebra::linalg::{Schur, LU};

use crate::dynamics::SystemParams;
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

/// State-feedback gain `u = K x`, shape `d_u x d_x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gain(pub Mat);

impl Gain {
    pub fn new(k: Mat) -> Result<Self> {
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("gain has non-finite entries".into()));
        }
        Ok(Self(k))
    }

    pub fn zeros(d_u: usize, d_x: usize) -> Self {
        Self(Mat::zeros(d_u, d_x))
    }

    pub fn matrix(&self) -> &Mat {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostWeights {
    pub q: Mat,
    pub r: Mat,
    /// Window length in steps.
    pub tau: usize,
}

impl CostWeights {
    pub fn new(q: Mat, r: Mat, tau: usize) -> Result<Self> {
        linalg::require_pd(&q, "Q")?;
        linalg::require_pd(&r, "R")?;
        if tau == 0 {
            return Err(Error::InvalidArgument("window length tau must be >= 1".into()));
        }
        Ok(Self { q, r, tau })
    }

    /// Same weights with a different window length.
    pub fn with_tau(&self, tau: usize) -> Self {
        Self { tau, ..self.clone() }
    }

    /// State weight of the closed loop, `Q + K' R K`.
    pub fn closed_loop_weight(&self, k: &Gain) -> Mat {
        &self.q + k.0.transpose() * &self.r * &k.0
    }
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &Mat) -> f64 {
    assert!(m.is_square(), "spectral radius of a non-square matrix");
    if m.is_empty() {
        return 0.0;
    }
    if m.nrows() == 1 {
        return m[(0, 0)].abs();
    }
    match Schur::try_new(m.clone(), f64::EPSILON, SCHUR_MAX_ITER) {
        Some(schur) => schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max),
        None => gelfand_radius(m),
    }
}

const SCHUR_MAX_ITER: usize = 10_000;

/// `lim ||M^k||^(1/k)` by repeated normalized squaring, for matrices the
/// QR iteration does not converge on.
fn gelfand_radius(m: &Mat) -> f64 {
    let mut p = m.clone();
    let mut log_scale = 0.0;
    let mut power = 1.0;
    for _ in 0..40 {
        let n = p.norm();
        if n == 0.0 {
            return 0.0;
        }
        p /= n;
        log_scale += n.ln() / power;
        p = &p * &p;
        power *= 2.0;
    }
    (log_scale + p.norm().ln() / power).exp()
}

/// Solves `P = A P A' + S` for a Schur-stable `A`.
pub fn dlyap(a: &Mat, s: &Mat) -> Result<Mat> {
    let n = a.nrows();
    linalg::check_square(a, n, "A_cl")?;
    linalg::check_square(s, n, "Sigma")?;
    let rho = spectral_radius(a);
    if rho >= 1.0 {
        return Err(Error::Unstable(rho));
    }
    dlyap_unchecked(a, s).ok_or(Error::Unstable(rho))
}

/// Kronecker-vectorised solve: `(I - A (x) A) vec(P) = vec(S)`.
fn dlyap_unchecked(a: &Mat, s: &Mat) -> Option<Mat> {
    let n = a.nrows();
    if n == 1 {
        let a2 = a[(0, 0)] * a[(0, 0)];
        return (a2 < 1.0).then(|| Mat::from_element(1, 1, s[(0, 0)] / (1.0 - a2)));
    }
    let mut lhs = -a.kronecker(a);
    for i in 0..n * n {
        lhs[(i, i)] += 1.0;
    }
    let rhs = nalgebra::DVector::from_column_slice(s.as_slice());
    let sol = LU::new(lhs).solve(&rhs)?;
    let p = Mat::from_column_slice(n, n, sol.as_slice());
    Some(linalg::symmetrize(&p))
}

/// Stationary state covariance of the closed loop `A + B K` driven by `noise`.
pub fn stationary_covariance(sys: &SystemParams, k: &Gain, noise: &Mat) -> Result<Mat> {
    dlyap(&sys.closed_loop(k), noise)
}

/// Discrete algebraic Riccati equation by Riccati recursion from `P = Q`.
///
/// Returns the cost-to-go matrix and the optimal gain
/// `K = -(R + B'PB)^{-1} B'PA`.
pub fn dare(sys: &SystemParams, weights: &CostWeights) -> Result<(Mat, Gain)> {
    const TOL: f64 = 1e-12;
    const MAX_ITER: usize = 100_000;

    let (a, b) = (&sys.a, &sys.b);
    linalg::check_square(&weights.q, sys.d_x(), "Q")?;
    linalg::check_square(&weights.r, sys.d_u(), "R")?;
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = weights.q.clone();
    let mut converged = false;
    for _ in 0..MAX_ITER {
        let btp = &bt * &p;
        let s = &weights.r + &btp * b;
        let Some(chol) = linalg::symmetrize(&s).cholesky() else {
            break;
        };
        let gain_part = chol.solve(&(&btp * a));
        let next = linalg::symmetrize(&(&weights.q + &at * &p * a - (&at * btp.transpose()) * gain_part));
        if next.iter().any(|v| !v.is_finite()) {
            break;
        }
        let delta = (&next - &p).amax();
        p = next;
        if delta <= TOL * p.amax().max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::RiccatiDivergence(MAX_ITER));
    }
    let k = riccati_gain(sys, weights, &p)?;
    let rho = spectral_radius(&sys.closed_loop(&k));
    if rho >= 1.0 {
        return Err(Error::Unstable(rho));
    }
    Ok((p, k))
}

fn riccati_gain(sys: &SystemParams, weights: &CostWeights, p: &Mat) -> Result<Gain> {
    let bt = sys.b.transpose();
    let s = &weights.r + &bt * p * &sys.b;
    let chol = linalg::symmetrize(&s).cholesky().ok_or(Error::NotPd("R + B'PB"))?;
    Ok(Gain(-chol.solve(&(&bt * p * &sys.a))))
}

/// Relative residual of the Riccati equation at `p`.
pub fn dare_residual(sys: &SystemParams, weights: &CostWeights, p: &Mat) -> f64 {
    let (a, b) = (&sys.a, &sys.b);
    let s = &weights.r + b.transpose() * p * b;
    let Some(s_inv) = s.try_inverse() else {
        return f64::INFINITY;
    };
    let rhs = &weights.q + a.transpose() * p * a
        - a.transpose() * p * b * s_inv * b.transpose() * p * a;
    (p - rhs).norm() / p.norm().max(1e-300)
}

/// Stationary expected cost per step, `tr((Q + K'RK) P)` with `P = dlyap(A+BK, noise)`.
fn per_step_cost(sys: &SystemParams, k: &Gain, weights: &CostWeights, noise: &Mat) -> f64 {
    let acl = sys.closed_loop(k);
    if spectral_radius(&acl) >= 1.0 {
        return f64::INFINITY;
    }
    match dlyap_unchecked(&acl, noise) {
        Some(p) => {
            let cost = (weights.closed_loop_weight(k) * p).trace();
            if cost.is_finite() && cost >= 0.0 {
                cost
            } else {
                f64::INFINITY
            }
        }
        None => f64::INFINITY,
    }
}

/// Expected cost of a `tau`-step window under stationarity; infinite for unstable loops.
pub fn expected_cost(sys: &SystemParams, k: &Gain, weights: &CostWeights) -> f64 {
    weights.tau as f64 * per_step_cost(sys, k, weights, &sys.sigma)
}

/// Expected window cost of the plant excited by `e ~ N(0, sigma_e)` on top of `K`.
///
/// The excitation is equivalent to extra process noise `B sigma_e B'` plus
/// the direct input cost `tr(sigma_e R)` per step.
pub fn excitation_cost(sys: &SystemParams, k: &Gain, sigma_e: &Mat, weights: &CostWeights) -> f64 {
    let inflated = &sys.sigma + &sys.b * sigma_e * sys.b.transpose();
    let state_part = per_step_cost(sys, k, weights, &inflated);
    weights.tau as f64 * (state_part + (sigma_e * &weights.r).trace())
}

/// Sub-optimality gap `J(K) - J(K_opt)` of a stabilizing gain.
pub fn gap(sys: &SystemParams, k: &Gain, weights: &CostWeights) -> Result<f64> {
    let (_, k_opt) = dare(sys, weights)?;
    let cost = expected_cost(sys, k, weights);
    if !cost.is_finite() {
        return Ok(f64::INFINITY);
    }
    Ok((cost - expected_cost(sys, &k_opt, weights)).max(0.0))
}

/// Expected cost of one `tau`-step window that starts from `x0 ~ N(0, p0)`,
/// without assuming stationarity. Finite even for unstable loops.
pub fn transient_window_cost(sys: &SystemParams, k: &Gain, weights: &CostWeights, p0: &Mat) -> f64 {
    let acl = sys.closed_loop(k);
    let m = weights.closed_loop_weight(k);
    let mut p = p0.clone();
    let mut total = 0.0;
    for _ in 0..weights.tau {
        total += (&m * &p).trace();
        p = &acl * &p * acl.transpose() + &sys.sigma;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_sys(a: f64, b: f64, s: f64) -> SystemParams {
        SystemParams::new(
            Mat::from_element(1, 1, a),
            Mat::from_element(1, 1, b),
            Mat::from_element(1, 1, s),
        )
        .unwrap()
    }

    fn scalar_weights(q: f64, r: f64, tau: usize) -> CostWeights {
        CostWeights::new(Mat::from_element(1, 1, q), Mat::from_element(1, 1, r), tau).unwrap()
    }

    #[test]
    fn gelfand_fallback_agrees() {
        let m = Mat::from_row_slice(3, 3, &[0.5, 1.0, 0.0, 0.0, 0.3, 2.0, 0.1, 0.0, -0.7]);
        assert!((gelfand_radius(&m) - spectral_radius(&m)).abs() < 1e-9);
        let jordan = Mat::from_row_slice(2, 2, &[0.9, 1.0, 0.0, 0.9]);
        assert!((gelfand_radius(&jordan) - 0.9).abs() < 1e-9);
        assert_eq!(gelfand_radius(&Mat::zeros(2, 2)), 0.0);
    }

    #[test]
    fn dlyap_memoryless_loop() {
        let s = Mat::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let p = dlyap(&Mat::zeros(2, 2), &s).unwrap();
        assert_eq!(p, s);
    }

    #[test]
    fn dlyap_scalar() {
        let p = dlyap(&Mat::from_element(1, 1, 0.5), &Mat::from_element(1, 1, 1.0)).unwrap();
        assert!((p[(0, 0)] - 4.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn dlyap_residual_small() {
        let a = Mat::from_row_slice(3, 3, &[0.5, 0.2, 0.0, -0.1, 0.7, 0.3, 0.0, 0.2, -0.4]);
        let s = Mat::from_row_slice(3, 3, &[1.0, 0.1, 0.0, 0.1, 2.0, 0.2, 0.0, 0.2, 0.5]);
        let p = dlyap(&a, &s).unwrap();
        let res = (&p - &a * &p * a.transpose() - &s).norm() / p.norm();
        assert!(res < 1e-10, "residual {res}");
    }

    #[test]
    fn dlyap_rejects_unstable() {
        assert!(matches!(
            dlyap(&Mat::from_element(1, 1, 1.0), &Mat::identity(1, 1)),
            Err(Error::Unstable(_))
        ));
    }

    #[test]
    fn spectral_radius_examples() {
        assert!((spectral_radius(&Mat::identity(3, 3)) - 1.0).abs() < 1e-12);
        let d = Mat::from_diagonal(&nalgebra::DVector::from_vec(vec![0.3, -0.9]));
        assert!((spectral_radius(&d) - 0.9).abs() < 1e-12);
        // rotation-scaling has complex eigenvalues 0.6 +- 0.8i, modulus 1
        let rot = Mat::from_row_slice(2, 2, &[0.6, -0.8, 0.8, 0.6]);
        assert!((spectral_radius(&rot) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dare_without_control_authority() {
        let sys = scalar_sys(0.5, 0.0, 1.0);
        let w = scalar_weights(2.0, 1.0, 1);
        let (p, k) = dare(&sys, &w).unwrap();
        assert!(k.0[(0, 0)].abs() < 1e-15);
        // sum_k a^2k q = q / (1 - a^2)
        assert!((p[(0, 0)] - 2.0 / 0.75).abs() < 1e-10);
    }

    #[test]
    fn dare_unstabilizable_fails() {
        let sys = scalar_sys(1.2, 0.0, 1.0);
        assert!(dare(&sys, &scalar_weights(1.0, 1.0, 1)).is_err());
    }

    #[test]
    fn expected_cost_unit_step() {
        let sys = scalar_sys(0.0, 0.0, 1.0);
        let w = scalar_weights(1.0, 1.0, 200);
        assert!((expected_cost(&sys, &Gain::zeros(1, 1), &w) - 200.0).abs() < 1e-12);
    }

    #[test]
    fn expected_cost_unstable_is_infinite() {
        let sys = scalar_sys(1.01, 0.1, 1.0);
        let w = scalar_weights(1.0, 1.0, 10);
        assert_eq!(expected_cost(&sys, &Gain::zeros(1, 1), &w), f64::INFINITY);
    }

    #[test]
    fn excitation_cost_hand_value() {
        let sys = scalar_sys(0.0, 1.0, 0.0);
        let w = scalar_weights(1.0, 1.0, 200);
        let c = excitation_cost(&sys, &Gain::zeros(1, 1), &Mat::from_element(1, 1, 0.02), &w);
        assert!((c - 8.0).abs() < 1e-12, "{c}");
    }

    #[test]
    fn excitation_cost_without_excitation() {
        let sys = scalar_sys(0.9, 0.4, 0.3);
        let w = scalar_weights(1.0, 2.0, 50);
        let k = Gain(Mat::from_element(1, 1, -0.5));
        assert_eq!(excitation_cost(&sys, &k, &Mat::zeros(1, 1), &w), expected_cost(&sys, &k, &w));
    }

    #[test]
    fn gap_of_optimal_gain_is_zero() {
        let sys = scalar_sys(1.01, 0.1, 0.02);
        let w = scalar_weights(1.0, 100.0, 200);
        let (_, k) = dare(&sys, &w).unwrap();
        assert!(gap(&sys, &k, &w).unwrap() < 1e-8);
        let worse = Gain(&k.0 * 1.5);
        assert!(gap(&sys, &worse, &w).unwrap() > 0.0);
    }

    #[test]
    fn transient_cost_from_stationary_start_matches_expected() {
        let sys = scalar_sys(0.8, 0.5, 0.1);
        let w = scalar_weights(1.0, 1.0, 25);
        let k = Gain(Mat::from_element(1, 1, -0.4));
        let p = stationary_covariance(&sys, &k, &sys.sigma).unwrap();
        let a = transient_window_cost(&sys, &k, &w, &p);
        assert!((a - expected_cost(&sys, &k, &w)).abs() < 1e-10);
    }
}
