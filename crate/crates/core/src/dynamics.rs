//! Switched linear-Gaussian plant: parameters, simulation and episode schedules.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};

use crate::bayes::PlantPrior;
use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::lqr::{self, Gain};

/// One plant `theta = (A, B, Sigma)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemParams {
    pub a: Mat,
    pub b: Mat,
    pub sigma: Mat,
}

impl SystemParams {
    pub fn new(a: Mat, b: Mat, sigma: Mat) -> Result<Self> {
        let d_x = a.nrows();
        linalg::check_square(&a, d_x, "A")?;
        if b.nrows() != d_x {
            return Err(Error::Dimension(format!("B has {} rows, A has {d_x}", b.nrows())));
        }
        linalg::check_square(&sigma, d_x, "Sigma")?;
        linalg::require_psd(&sigma, "Sigma")?;
        Ok(Self { a, b, sigma })
    }

    pub fn d_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn d_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn closed_loop(&self, k: &Gain) -> Mat {
        &self.a + &self.b * &k.0
    }

    pub fn check_gain(&self, k: &Gain) -> Result<()> {
        linalg::check_shape(&k.0, self.d_u(), self.d_x(), "K")
    }

    /// Same plant with a different process-noise covariance.
    pub fn with_sigma(&self, sigma: Mat) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), sigma)
    }
}

/// Draws `N(0, cov)` vectors through a symmetric square-root factor.
#[derive(Clone, Debug)]
pub(crate) struct GaussianSampler {
    dim: usize,
    factor: Vec<f64>,
    z: Vec<f64>,
}

impl GaussianSampler {
    pub(crate) fn new(cov: &Mat) -> Self {
        Self {
            dim: cov.nrows(),
            factor: linalg::row_major(&linalg::sqrt_psd(cov)),
            z: vec![0.0; cov.nrows()],
        }
    }

    /// Always consumes `dim` normals, even for a zero covariance.
    pub(crate) fn sample_into<R: Rng + ?Sized>(&mut self, rng: &mut R, out: &mut [f64]) {
        for z in self.z.iter_mut() {
            *z = rng.sample(StandardNormal);
        }
        linalg::matvec_into(&self.factor, self.dim, &self.z, out);
    }
}

/// Allocation-free one-step propagation `x' = A x + B u + w`.
#[derive(Clone, Debug)]
pub(crate) struct PlantStepper {
    d_x: usize,
    d_u: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    noise: GaussianSampler,
    ax: Vec<f64>,
    bu: Vec<f64>,
    w: Vec<f64>,
}

impl PlantStepper {
    pub(crate) fn new(sys: &SystemParams) -> Self {
        let d_x = sys.d_x();
        Self {
            d_x,
            d_u: sys.d_u(),
            a: linalg::row_major(&sys.a),
            b: linalg::row_major(&sys.b),
            noise: GaussianSampler::new(&sys.sigma),
            ax: vec![0.0; d_x],
            bu: vec![0.0; d_x],
            w: vec![0.0; d_x],
        }
    }

    pub(crate) fn step<R: Rng + ?Sized>(&mut self, x: &[f64], u: &[f64], noise_rng: &mut R, next: &mut [f64]) {
        linalg::matvec_into(&self.a, self.d_x, x, &mut self.ax);
        linalg::matvec_into(&self.b, self.d_u, u, &mut self.bu);
        self.noise.sample_into(noise_rng, &mut self.w);
        for i in 0..self.d_x {
            next[i] = self.ax[i] + self.bu[i] + self.w[i];
        }
    }
}

/// Logged closed-loop data. States hold one more entry than inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    d_x: usize,
    d_u: usize,
    states: Vec<f64>,
    inputs: Vec<f64>,
    excitations: Vec<f64>,
    episodes: Vec<usize>,
    /// Global step index of `x_0`.
    pub start: usize,
}

impl Trajectory {
    pub fn new(d_x: usize, d_u: usize, x0: &[f64], start: usize) -> Self {
        assert_eq!(x0.len(), d_x);
        Self {
            d_x,
            d_u,
            states: x0.to_vec(),
            inputs: Vec::new(),
            excitations: Vec::new(),
            episodes: Vec::new(),
            start,
        }
    }

    pub(crate) fn push(&mut self, u: &[f64], e: &[f64], next: &[f64], episode: usize) {
        self.inputs.extend_from_slice(u);
        self.excitations.extend_from_slice(e);
        self.states.extend_from_slice(next);
        self.episodes.push(episode);
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_u(&self) -> usize {
        self.d_u
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.d_x..(k + 1) * self.d_x]
    }

    pub fn input(&self, k: usize) -> &[f64] {
        &self.inputs[k * self.d_u..(k + 1) * self.d_u]
    }

    pub fn excitation(&self, k: usize) -> &[f64] {
        &self.excitations[k * self.d_u..(k + 1) * self.d_u]
    }

    pub fn episode(&self, k: usize) -> usize {
        self.episodes[k]
    }

    pub fn last_state(&self) -> &[f64] {
        self.state(self.len())
    }

    /// Sub-trajectory of transitions `[from, to)`.
    pub fn slice(&self, from: usize, to: usize) -> Trajectory {
        assert!(from <= to && to <= self.len());
        Trajectory {
            d_x: self.d_x,
            d_u: self.d_u,
            states: self.states[from * self.d_x..(to + 1) * self.d_x].to_vec(),
            inputs: self.inputs[from * self.d_u..to * self.d_u].to_vec(),
            excitations: self.excitations[from * self.d_u..to * self.d_u].to_vec(),
            episodes: self.episodes[from..to].to_vec(),
            start: self.start + from,
        }
    }

    /// CSV with columns `k, x[..], u[..], e[..], episode_id`. The final state
    /// has no input and gets empty input fields.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# schema=1")?;
        let mut header = vec!["k".to_string()];
        header.extend((0..self.d_x).map(|i| format!("x{i}")));
        header.extend((0..self.d_u).map(|i| format!("u{i}")));
        header.extend((0..self.d_u).map(|i| format!("e{i}")));
        header.push("episode_id".into());
        writeln!(out, "{}", header.join(","))?;
        for k in 0..=self.len() {
            let mut row = vec![(self.start + k).to_string()];
            row.extend(self.state(k).iter().map(|v| format!("{v:?}")));
            if k < self.len() {
                row.extend(self.input(k).iter().map(|v| format!("{v:?}")));
                row.extend(self.excitation(k).iter().map(|v| format!("{v:?}")));
                row.push(self.episode(k).to_string());
            } else {
                row.extend(std::iter::repeat_n(String::new(), 2 * self.d_u));
                row.push(self.episodes.last().copied().unwrap_or(0).to_string());
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Runs `x_{k+1} = A x_k + B (K x_k + e_k) + w_k` for `steps` steps.
///
/// Per step the generator yields `e_k` first (only when `excitation` is set)
/// and then `w_k`, so identical seeds give bit-identical trajectories.
pub fn simulate<R: Rng + ?Sized>(
    sys: &SystemParams,
    k: &Gain,
    excitation: Option<&Mat>,
    x0: &[f64],
    steps: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::InvalidArgument("simulate needs at least one step".into()));
    }
    sys.check_gain(k)?;
    if x0.len() != sys.d_x() {
        return Err(Error::Dimension(format!("x0 has length {}, expected {}", x0.len(), sys.d_x())));
    }
    let (d_x, d_u) = (sys.d_x(), sys.d_u());
    let mut exciter = match excitation {
        Some(cov) => {
            linalg::check_square(cov, d_u, "Sigma_e")?;
            linalg::require_psd(cov, "Sigma_e")?;
            Some(GaussianSampler::new(cov))
        }
        None => None,
    };
    let gain = linalg::row_major(&k.0);
    let mut stepper = PlantStepper::new(sys);
    let mut traj = Trajectory::new(d_x, d_u, x0, 0);
    traj.states.reserve(steps * d_x);
    let mut x = x0.to_vec();
    let mut u = vec![0.0; d_u];
    let mut e = vec![0.0; d_u];
    let mut next = vec![0.0; d_x];
    for _ in 0..steps {
        linalg::matvec_into(&gain, d_x, &x, &mut u);
        if let Some(ex) = exciter.as_mut() {
            ex.sample_into(rng, &mut e);
            for (ui, ei) in u.iter_mut().zip(&e) {
                *ui += ei;
            }
        }
        stepper.step(&x, &u, rng, &mut next);
        traj.push(&u, &e, &next, 0);
        std::mem::swap(&mut x, &mut next);
    }
    Ok(traj)
}

/// Draws `x ~ N(0, P)` with `P` the stationary covariance of `A + B K`
/// under process noise `noise`.
pub fn stationary_state<R: Rng + ?Sized>(sys: &SystemParams, k: &Gain, noise: &Mat, rng: &mut R) -> Result<Vector> {
    let p = lqr::stationary_covariance(sys, k, noise)?;
    let mut out = vec![0.0; sys.d_x()];
    GaussianSampler::new(&p).sample_into(rng, &mut out);
    Ok(Vector::from_vec(out))
}

/// Distribution of episode lengths (in steps).
#[derive(Clone, Debug, PartialEq)]
pub enum DwellSampler {
    Constant(usize),
    /// `delta_min + G * unit` with `G ~ Geometric(p)` counting failures.
    Geometric { p: f64, unit: usize },
}

impl DwellSampler {
    pub fn validate(&self, delta_min: usize) -> Result<()> {
        match *self {
            DwellSampler::Constant(d) if d < delta_min => Err(Error::InvalidArgument(format!(
                "constant dwell {d} is below the minimum dwell {delta_min}"
            ))),
            DwellSampler::Geometric { p, .. } if !(p > 0.0 && p <= 1.0) => {
                Err(Error::InvalidArgument(format!("geometric dwell parameter {p} outside (0, 1]")))
            }
            _ => Ok(()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, delta_min: usize, rng: &mut R) -> usize {
        match *self {
            DwellSampler::Constant(d) => d,
            DwellSampler::Geometric { p, unit } => {
                let extra = Geometric::new(p).expect("validated").sample(rng) as usize;
                delta_min + extra * unit
            }
        }
    }
}

/// Change times and per-episode plants; `change_times[0] == 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSchedule {
    pub change_times: Vec<usize>,
    pub dwell: Vec<usize>,
    pub params: Vec<SystemParams>,
}

impl EpisodeSchedule {
    pub fn new(dwell: Vec<usize>, params: Vec<SystemParams>) -> Result<Self> {
        if dwell.is_empty() || dwell.len() != params.len() {
            return Err(Error::InvalidArgument("schedule needs one dwell per episode".into()));
        }
        if dwell.contains(&0) {
            return Err(Error::InvalidArgument("zero-length episode".into()));
        }
        let mut change_times = Vec::with_capacity(dwell.len());
        let mut t = 0;
        for d in &dwell {
            change_times.push(t);
            t += d;
        }
        Ok(Self { change_times, dwell, params })
    }

    /// Single stationary episode.
    pub fn stationary(params: SystemParams, steps: usize) -> Result<Self> {
        Self::new(vec![steps], vec![params])
    }

    pub fn horizon(&self) -> usize {
        self.change_times.last().unwrap() + self.dwell.last().unwrap()
    }

    pub fn n_episodes(&self) -> usize {
        self.params.len()
    }

    /// Episode index active at step `k`.
    pub fn episode_at(&self, k: usize) -> usize {
        self.change_times.partition_point(|&t| t <= k) - 1
    }
}

pub fn sample_schedule<R: Rng + ?Sized>(
    prior: &PlantPrior,
    delta_min: usize,
    n_episodes: usize,
    dwell: &DwellSampler,
    rng: &mut R,
) -> Result<EpisodeSchedule> {
    if delta_min == 0 {
        return Err(Error::InvalidArgument("minimum dwell must be >= 1".into()));
    }
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one episode".into()));
    }
    dwell.validate(delta_min)?;
    let mut dwells = Vec::with_capacity(n_episodes);
    let mut params = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        params.push(prior.sample(rng));
        dwells.push(dwell.sample(delta_min, rng));
    }
    EpisodeSchedule::new(dwells, params)
}
