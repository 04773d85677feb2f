//! Conjugate matrix-normal / inverse-Wishart belief over `([A B]', Sigma)`.
//!
//! The belief is
//!
//! ```text
//! Sigma      ~ IW(V, v)
//! [A B]' | S ~ MN(M, Lambda^{-1}, S)
//! ```
//!
//! with `M` of shape `(d_x + d_u) x d_x`. Regression data `Y = X [A B]' + E`
//! updates it in closed form.

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared as ChiSquaredDist, ContinuousCDF};

use crate::dynamics::{SystemParams, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat, MatrixDoc};

#[derive(Clone, Debug, PartialEq)]
pub struct MniwBelief {
    /// Mean of `[A B]'`.
    pub mean: Mat,
    /// Row precision `Lambda`.
    pub precision: Mat,
    /// Inverse-Wishart scale `V`.
    pub scale: Mat,
    /// Degrees of freedom `v`.
    pub dof: f64,
}

/// Sub-sampled regression pairs: rows `[x' u']` and `x_next'`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionData {
    pub x: Mat,
    pub y: Mat,
}

impl RegressionData {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn empty(d_x: usize, d_u: usize) -> Self {
        Self { x: Mat::zeros(0, d_x + d_u), y: Mat::zeros(0, d_x) }
    }

    pub fn row(&self, i: usize) -> Self {
        Self { x: self.x.rows(i, 1).into_owned(), y: self.y.rows(i, 1).into_owned() }
    }
}

/// Every `m`-th transition of `traj`: row `j` is `(x_{jm}, u_{jm}) -> x_{jm+1}`.
pub fn subsample(traj: &Trajectory, m: usize) -> Result<RegressionData> {
    if m == 0 {
        return Err(Error::InvalidArgument("sub-sampling stride must be >= 1".into()));
    }
    if traj.is_empty() || traj.len() < m {
        return Err(Error::InvalidArgument(format!(
            "trajectory of {} steps is too short for stride {m}",
            traj.len()
        )));
    }
    let (d_x, d_u) = (traj.d_x(), traj.d_u());
    let n = (traj.len() - 1) / m + 1;
    let mut x = Mat::zeros(n, d_x + d_u);
    let mut y = Mat::zeros(n, d_x);
    for j in 0..n {
        let k = j * m;
        for (c, v) in traj.state(k).iter().chain(traj.input(k)).enumerate() {
            x[(j, c)] = *v;
        }
        for (c, v) in traj.state(k + 1).iter().enumerate() {
            y[(j, c)] = *v;
        }
    }
    Ok(RegressionData { x, y })
}

impl MniwBelief {
    pub fn new(mean: Mat, precision: Mat, scale: Mat, dof: f64) -> Result<Self> {
        let d_x = mean.ncols();
        let p = mean.nrows();
        if p <= d_x {
            return Err(Error::Dimension(format!("mean is {p}x{d_x}, expected (d_x + d_u) x d_x")));
        }
        linalg::check_square(&precision, p, "Lambda")?;
        linalg::check_square(&scale, d_x, "V")?;
        linalg::require_pd(&precision, "Lambda")?;
        linalg::require_pd(&scale, "V")?;
        if !(dof > d_x as f64 - 1.0) {
            return Err(Error::InvalidArgument(format!("degrees of freedom {dof} must exceed d_x - 1")));
        }
        Ok(Self { mean, precision, scale, dof })
    }

    /// Prior from the mean plant and the row covariance `Lambda^{-1}`.
    pub fn from_row_covariance(a: &Mat, b: &Mat, row_cov: &Mat, scale: Mat, dof: f64) -> Result<Self> {
        let mean = stack_ab(a, b)?;
        let precision = linalg::spd_inverse(row_cov, "row covariance")?;
        Self::new(mean, precision, scale, dof)
    }

    /// Belief concentrated on `sys`: huge row precision and a tight inverse-Wishart.
    pub fn point_mass(sys: &SystemParams, precision: f64) -> Result<Self> {
        let p = sys.d_x() + sys.d_u();
        let dof = 1e9;
        let scale = &sys.sigma * (dof - sys.d_x() as f64 - 1.0);
        Self::new(stack_ab(&sys.a, &sys.b)?, Mat::identity(p, p) * precision, scale, dof)
    }

    pub fn d_x(&self) -> usize {
        self.mean.ncols()
    }

    pub fn d_u(&self) -> usize {
        self.mean.nrows() - self.mean.ncols()
    }

    /// `E[Sigma] = V / (v - d_x - 1)`.
    pub fn mean_sigma(&self) -> Result<Mat> {
        let denom = self.dof - self.d_x() as f64 - 1.0;
        if denom <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "inverse-Wishart mean needs v > d_x + 1, got v = {}",
                self.dof
            )));
        }
        Ok(&self.scale / denom)
    }

    /// The mean plant with `E[Sigma]` as its noise.
    pub fn mean_system(&self) -> Result<SystemParams> {
        let (a, b) = split_ab(&self.mean, self.d_x());
        SystemParams::new(a, b, self.mean_sigma()?)
    }

    pub fn posterior_update(&self, data: &RegressionData) -> Result<Self> {
        if data.is_empty() {
            return Ok(self.clone());
        }
        linalg::check_shape(&data.x, data.len(), self.mean.nrows(), "X")?;
        linalg::check_shape(&data.y, data.len(), self.d_x(), "Y")?;
        let xt = data.x.transpose();
        let precision = linalg::symmetrize(&(&self.precision + &xt * &data.x));
        let chol = precision.clone().cholesky().ok_or(Error::NotPd("posterior Lambda"))?;
        let mean = chol.solve(&(&self.precision * &self.mean + &xt * &data.y));
        // V_n = V_0 + Y'Y + M_0' L_0 M_0 - M_n' L_n M_n, written as a sum of PSD terms
        let resid = &data.y - &data.x * &mean;
        let shift = &mean - &self.mean;
        let scale = linalg::symmetrize(
            &(&self.scale + resid.transpose() * &resid + shift.transpose() * &self.precision * &shift),
        );
        if !linalg::is_pd(&scale) {
            return Err(Error::NotPd("posterior V"));
        }
        Ok(Self { mean, precision, scale, dof: self.dof + data.len() as f64 })
    }

    /// `Sigma ~ IW(V, v)` by inverting a Bartlett-decomposed `Wishart(V^{-1}, v)`.
    pub fn sample_sigma<R: Rng + ?Sized>(&self, rng: &mut R) -> Mat {
        let d = self.d_x();
        let scale_inv = linalg::spd_inverse(&self.scale, "V").expect("V is PD by construction");
        let l = scale_inv.cholesky().expect("PD").l();
        let mut bartlett = Mat::zeros(d, d);
        for i in 0..d {
            let chi = ChiSquared::new(self.dof - i as f64).expect("dof > d_x - 1");
            bartlett[(i, i)] = chi.sample(rng).sqrt();
            for j in 0..i {
                bartlett[(i, j)] = rng.sample(StandardNormal);
            }
        }
        let lb = &l * &bartlett;
        let wishart = &lb * lb.transpose();
        linalg::spd_inverse(&wishart, "Wishart draw").unwrap_or_else(|_| linalg::symmetrize(&wishart.pseudo_inverse(1e-300).unwrap()))
    }

    /// `[A B]' ~ MN(M, Lambda^{-1}, sigma)`.
    pub fn sample_ab<R: Rng + ?Sized>(&self, sigma: &Mat, rng: &mut R) -> Mat {
        let p = self.mean.nrows();
        let d = self.d_x();
        let z = Mat::from_fn(p, d, |_, _| rng.sample(StandardNormal));
        let lt = self.precision.clone().cholesky().expect("Lambda is PD").l().transpose();
        let row_part = lt.solve_upper_triangular(&z).expect("triangular factor is non-singular");
        &self.mean + row_part * linalg::sqrt_psd(sigma)
    }

    pub fn sample_system<R: Rng + ?Sized>(&self, rng: &mut R) -> SystemParams {
        let sigma = self.sample_sigma(rng);
        let w = self.sample_ab(&sigma, rng);
        let (a, b) = split_ab(&w, self.d_x());
        SystemParams { a, b, sigma }
    }

    /// Squared Mahalanobis distance of `[A B]'` from the mean, using `E[Sigma]`
    /// as the column covariance: `tr(E[Sigma]^{-1} D' Lambda D)`.
    pub fn mahalanobis2(&self, sys: &SystemParams) -> Result<f64> {
        let d = stack_ab(&sys.a, &sys.b)? - &self.mean;
        let sigma_inv = linalg::spd_inverse(&self.mean_sigma()?, "E[Sigma]")?;
        Ok((sigma_inv * d.transpose() * &self.precision * d).trace())
    }

    /// Chi-square threshold of the `alpha` credible ellipsoid over `vec([A B]')`.
    pub fn credible_threshold(&self, alpha: f64) -> Result<f64> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("credibility level {alpha} outside (0, 1)")));
        }
        let dof = (self.mean.nrows() * self.d_x()) as f64;
        Ok(ChiSquaredDist::new(dof).expect("positive dof").inverse_cdf(alpha))
    }

    /// Posterior draws restricted to the `alpha` credible region, by rejection.
    pub fn scenario_set<R: Rng + ?Sized>(&self, alpha: f64, n: usize, rng: &mut R) -> Result<Vec<SystemParams>> {
        self.scenario_set_with(alpha, n, rng, |s| s)
    }

    pub(crate) fn scenario_set_with<R: Rng + ?Sized>(
        &self,
        alpha: f64,
        n: usize,
        rng: &mut R,
        mut map: impl FnMut(SystemParams) -> SystemParams,
    ) -> Result<Vec<SystemParams>> {
        if n == 0 {
            return Err(Error::InvalidArgument("scenario set must be non-empty".into()));
        }
        let threshold = self.credible_threshold(alpha)?;
        let sigma_inv = linalg::spd_inverse(&self.mean_sigma()?, "E[Sigma]")?;
        let cap = 1000 * n.max(10);
        let mut out = Vec::with_capacity(n);
        for _ in 0..cap {
            let sys = self.sample_system(rng);
            let d = stack_ab(&sys.a, &sys.b)? - &self.mean;
            let dist = (&sigma_inv * d.transpose() * &self.precision * d).trace();
            if dist <= threshold {
                out.push(map(sys));
                if out.len() == n {
                    return Ok(out);
                }
            }
        }
        Err(Error::RetryCap(cap))
    }

    pub fn to_doc(&self) -> BeliefDoc {
        BeliefDoc {
            mean: (&self.mean).into(),
            precision: (&self.precision).into(),
            scale: (&self.scale).into(),
            dof: self.dof,
        }
    }

    pub fn from_doc(doc: &BeliefDoc) -> Result<Self> {
        Self::new(doc.mean.to_matrix()?, doc.precision.to_matrix()?, doc.scale.to_matrix()?, doc.dof)
    }
}

/// Serializable form of [`MniwBelief`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeliefDoc {
    pub mean: MatrixDoc,
    pub precision: MatrixDoc,
    pub scale: MatrixDoc,
    pub dof: f64,
}

/// `[A B]'`, shape `(d_x + d_u) x d_x`.
pub fn stack_ab(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.nrows() != b.nrows() {
        return Err(Error::Dimension("A and B row counts differ".into()));
    }
    let (d_x, d_u) = (a.nrows(), b.ncols());
    let mut w = Mat::zeros(d_x + d_u, d_x);
    w.rows_mut(0, d_x).copy_from(&a.transpose());
    w.rows_mut(d_x, d_u).copy_from(&b.transpose());
    Ok(w)
}

pub fn split_ab(w: &Mat, d_x: usize) -> (Mat, Mat) {
    let d_u = w.nrows() - d_x;
    (w.rows(0, d_x).transpose(), w.rows(d_x, d_u).transpose())
}

/// Generative model of plants: the belief, optionally with a fixed process
/// noise replacing the inverse-Wishart draw in the generated plant.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantPrior {
    pub belief: MniwBelief,
    pub plant_noise: Option<Mat>,
}

impl PlantPrior {
    pub fn new(belief: MniwBelief, plant_noise: Option<Mat>) -> Result<Self> {
        if let Some(s) = &plant_noise {
            linalg::check_square(s, belief.d_x(), "plant noise")?;
            linalg::require_psd(s, "plant noise")?;
        }
        Ok(Self { belief, plant_noise })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SystemParams {
        let sys = self.belief.sample_system(rng);
        self.apply_noise(sys)
    }

    fn apply_noise(&self, mut sys: SystemParams) -> SystemParams {
        if let Some(s) = &self.plant_noise {
            sys.sigma = s.clone();
        }
        sys
    }

    pub fn scenario_set<R: Rng + ?Sized>(&self, alpha: f64, n: usize, rng: &mut R) -> Result<Vec<SystemParams>> {
        self.belief.scenario_set_with(alpha, n, rng, |s| self.apply_noise(s))
    }

    pub fn mean_system(&self) -> Result<SystemParams> {
        let sys = self.belief.mean_system()?;
        Ok(self.apply_noise(sys))
    }
}
