//! Event-triggered learning loop.
//!
//! Offline, [`OfflinePlan`] designs the robust fallback gain `K0`, estimates
//! the cost constants and the improvement curve, picks the excitation length
//! and calibrates the trigger margin. Online, [`run`] cycles through
//!
//! 1. excite under `K0` for `N * m` steps,
//! 2. update the prior with the sub-sampled data and synthesize a gain,
//! 3. estimate trigger bounds on the posterior under that gain,
//! 4. operate the learned gain, testing every window of `tau` steps,
//! 5. on a trigger reset to the prior and go back to 1.
//!
//! Phase changes happen on window boundaries. Process noise, excitation and
//! the initial state come from separate streams, so [`run_baseline`] sees the
//! same disturbance sequence as [`run`].

use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::bayes::{subsample, MniwBelief};
use crate::config::ExperimentConfig;
use crate::dynamics::{EpisodeSchedule, GaussianSampler, PlantStepper, SystemParams, Trajectory};
use crate::error::{Error, Result};
use crate::excitation::{
    estimate_constants, fit_beta, optimal_excitation_length, sample_beta_grid, BetaContext, BetaCurve, BetaSample,
    Constants, ImprovementModel,
};
use crate::linalg;
use crate::lqr::{self, Gain};
use crate::rng::{stream, Purpose, SimRng};
use crate::synthesis::{is_alpha_robust, synth};
use crate::trigger::{self, check_trigger, margin_xi, posterior_bounds, stage_cost, TriggerBounds};

/// Robust gain for the prior: synthesized on `k0_scenarios` credible
/// scenarios and checked on `robustness_mc` fresh prior draws.
pub fn design_k0(cfg: &ExperimentConfig, seed: u64) -> Result<(Gain, f64)> {
    let scenarios = cfg
        .prior
        .scenario_set(cfg.alpha, cfg.k0_scenarios, &mut stream(seed, Purpose::RobustGain, 0))?;
    let k0 = synth(&scenarios, &cfg.weights, None, &cfg.synth)?;
    let (robust, rate) = is_alpha_robust(
        &k0,
        &cfg.prior.belief,
        cfg.alpha,
        cfg.robustness_mc,
        &mut stream(seed, Purpose::Robustness, 0),
    )?;
    if !robust {
        return Err(Error::NotRobust { excluded: 1.0 - rate, allowed: 1.0 - cfg.alpha });
    }
    Ok((k0, rate))
}

/// Outcome of one learning step on collected data.
#[derive(Clone, Debug)]
pub struct Learned {
    pub gain: Gain,
    pub posterior: MniwBelief,
    /// False when synthesis failed and `K0` was kept.
    pub feasible: bool,
    pub bounds: TriggerBounds,
    pub stable_fraction: f64,
}

/// Posterior update, synthesis and trigger bounds for `data`.
///
/// Infeasible synthesis keeps `K0`, with bounds for `K0` on the posterior or,
/// failing that, on the prior.
pub fn learn<R: Rng + ?Sized>(cfg: &ExperimentConfig, k0: &Gain, data: &Trajectory, rng: &mut R) -> Result<Learned> {
    let regression = subsample(data, cfg.stride)?;
    let posterior = cfg.prior.belief.posterior_update(&regression)?;
    let scenarios = posterior.scenario_set(cfg.alpha, cfg.scenarios, rng)?;
    let candidate = match synth(&scenarios, &cfg.weights, None, &cfg.synth) {
        Ok(k) => Some(k),
        Err(Error::Infeasible) => None,
        Err(e) => return Err(e),
    };
    if let Some(k) = &candidate {
        if let Ok(pb) = posterior_bounds(&posterior, k, &cfg.weights, &cfg.bounds, rng) {
            return Ok(Learned {
                gain: k.clone(),
                posterior,
                feasible: true,
                bounds: pb.bounds,
                stable_fraction: pb.stable_fraction,
            });
        }
    }
    let pb = match posterior_bounds(&posterior, k0, &cfg.weights, &cfg.bounds, rng) {
        Ok(pb) => pb,
        Err(_) => posterior_bounds(&cfg.prior.belief, k0, &cfg.weights, &cfg.bounds, rng)?,
    };
    Ok(Learned { gain: k0.clone(), posterior, feasible: false, bounds: pb.bounds, stable_fraction: pb.stable_fraction })
}

/// Offline quantities computed once before the loop.
#[derive(Clone, Debug)]
pub struct OfflinePlan {
    pub k0: Gain,
    pub robust_rate: f64,
    pub constants: Constants,
    pub samples: Vec<BetaSample>,
    pub model: ImprovementModel,
    /// Optimal excitation length in sub-sampled points.
    pub n_bar: usize,
    pub calibration: Calibration,
    /// Trigger margin, or why none exists.
    pub xi: std::result::Result<f64, String>,
}

/// Trigger statistics of the learned controller, estimated on prior draws.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Calibration {
    pub runs: usize,
    /// Mean upper threshold `E[kappa+]`.
    pub kappa_plus_mean: f64,
    /// False-positive rate per window.
    pub lambda: f64,
    /// Theoretical bound `1 - nu (1 - eta)` on the false-positive rate.
    pub lambda_bound: f64,
    /// 99th percentile of the first-window cost after a change.
    pub omega: f64,
    pub windows: usize,
    pub fires: usize,
}

const CALIBRATION_WINDOWS: usize = 200;
const OMEGA_DRAWS: usize = 16;
const DRAW_CAP: usize = 1000;

impl OfflinePlan {
    pub fn build(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let (k0, robust_rate) = design_k0(cfg, seed)?;
        let constants = estimate_constants(
            &cfg.prior,
            &k0,
            &cfg.sigma_e,
            &cfg.weights,
            cfg.alpha,
            cfg.constants_mc,
            &mut stream(seed, Purpose::Constants, 0),
        )?;
        let samples = if cfg.beta_samples == 0 {
            Vec::new()
        } else {
            sample_beta_grid(&beta_context(cfg, &k0), &cfg.beta_grid, cfg.beta_samples, seed)?
        };
        let beta = if samples.is_empty() { BetaCurve::zero() } else { fit_beta(&samples)? };
        Self::with_model(cfg, seed, k0, robust_rate, constants, samples, beta)
    }

    /// Completes a plan from given constants and improvement curve.
    pub fn with_model(
        cfg: &ExperimentConfig,
        seed: u64,
        k0: Gain,
        robust_rate: f64,
        constants: Constants,
        samples: Vec<BetaSample>,
        beta: BetaCurve,
    ) -> Result<Self> {
        let model = ImprovementModel::new(beta, &constants);
        let n_bar = optimal_excitation_length(&model, cfg.delta_min)?;
        let calibration = calibrate(cfg, &k0, n_bar, seed)?;
        let xi = if n_bar == 0 {
            Ok(0.0)
        } else {
            let per_point = cfg.windows_per_point();
            let omega_units = if constants.psi > 0.0 { calibration.omega / constants.psi } else { 0.0 };
            margin_xi(
                n_bar as f64 * per_point,
                constants.psi,
                omega_units,
                cfg.delta_min as f64 * per_point,
                calibration.lambda,
            )
            .map_err(|e| e.to_string())
        };
        Ok(Self { k0, robust_rate, constants, samples, model, n_bar, calibration, xi })
    }

    /// `E[kappa+] + xi <= J0`.
    pub fn applicable(&self) -> bool {
        match self.xi {
            Ok(xi) => self.n_bar == 0 || self.calibration.kappa_plus_mean + xi <= self.constants.j0,
            Err(_) => false,
        }
    }
}

pub fn beta_context(cfg: &ExperimentConfig, k0: &Gain) -> BetaContext {
    BetaContext {
        prior: cfg.prior.clone(),
        k0: k0.clone(),
        sigma_e: cfg.sigma_e.clone(),
        weights: cfg.weights.clone(),
        alpha: cfg.alpha,
        stride: cfg.stride,
        n_scenarios: cfg.scenarios,
        synth: cfg.synth.clone(),
    }
}

fn stable_draw<R: Rng + ?Sized>(cfg: &ExperimentConfig, k: &Gain, rng: &mut R) -> Result<SystemParams> {
    for _ in 0..DRAW_CAP {
        let sys = cfg.prior.sample(rng);
        if lqr::spectral_radius(&sys.closed_loop(k)) < 1.0 {
            return Ok(sys);
        }
    }
    Err(Error::RetryCap(DRAW_CAP))
}

/// Runs the learning step on prior draws and measures the trigger on the
/// unchanged plant (`lambda`) and right after a change (`omega`).
fn calibrate(cfg: &ExperimentConfig, k0: &Gain, n_bar: usize, seed: u64) -> Result<Calibration> {
    let lambda_bound = trigger::false_positive_bound(cfg.bounds.nu, cfg.bounds.eta);
    if n_bar == 0 || cfg.calibration_runs == 0 {
        return Ok(Calibration {
            lambda: cfg.lambda.unwrap_or(0.0),
            omega: cfg.omega.unwrap_or(0.0),
            lambda_bound,
            ..Calibration::default()
        });
    }
    let tau = cfg.weights.tau;
    let mut kappas = Vec::new();
    let mut omegas = Vec::new();
    let (mut windows, mut fires) = (0usize, 0usize);
    for r in 0..cfg.calibration_runs {
        let mut rng = stream(seed, Purpose::Calibration, r as u64);
        let truth = stable_draw(cfg, k0, &mut rng)?;
        let excited = &truth.sigma + &truth.b * &cfg.sigma_e * truth.b.transpose();
        let x0 = crate::dynamics::stationary_state(&truth, k0, &excited, &mut rng)?;
        let data = crate::dynamics::simulate(&truth, k0, Some(&cfg.sigma_e), x0.as_slice(), n_bar * cfg.stride, &mut rng)?;
        let learned = learn(cfg, k0, &data, &mut rng)?;
        kappas.push(learned.bounds.kappa_plus);

        let p = match lqr::stationary_covariance(&truth, &learned.gain, &truth.sigma) {
            Ok(p) => p,
            Err(_) => {
                // an unstable learned loop fires on every window
                windows += CALIBRATION_WINDOWS;
                fires += CALIBRATION_WINDOWS;
                continue;
            }
        };
        let x0 = crate::dynamics::stationary_state(&truth, &learned.gain, &truth.sigma, &mut rng)?;
        let traj = crate::dynamics::simulate(&truth, &learned.gain, None, x0.as_slice(), CALIBRATION_WINDOWS * tau, &mut rng)?;
        for w in 0..CALIBRATION_WINDOWS {
            let j = trigger::window_cost(&traj.slice(w * tau, (w + 1) * tau), &cfg.weights)?;
            windows += 1;
            if check_trigger(j, &learned.bounds) {
                fires += 1;
            }
        }
        for _ in 0..OMEGA_DRAWS {
            let next = cfg.prior.sample(&mut rng);
            omegas.push(lqr::transient_window_cost(&next, &learned.gain, &cfg.weights, &p));
        }
    }
    omegas.sort_by(f64::total_cmp);
    let omega = match cfg.omega {
        Some(o) => o,
        None if omegas.is_empty() => 0.0,
        None => trigger::quantile(&omegas, 0.99),
    };
    let lambda = cfg.lambda.unwrap_or((fires + 1) as f64 / (windows + 1) as f64);
    Ok(Calibration {
        runs: cfg.calibration_runs,
        kappa_plus_mean: kappas.iter().sum::<f64>() / kappas.len() as f64,
        lambda,
        lambda_bound,
        omega,
        windows,
        fires,
    })
}

/// Inputs of one online run.
#[derive(Clone, Debug)]
pub struct EtlConfig {
    pub exp: ExperimentConfig,
    pub k0: Gain,
    /// Excitation length in sub-sampled points; 0 never learns.
    pub n_bar: usize,
    pub xi: f64,
    pub seed: u64,
}

impl EtlConfig {
    pub fn new(exp: &ExperimentConfig, plan: &OfflinePlan, seed: u64) -> Result<Self> {
        let xi = plan.xi.clone().map_err(Error::Config)?;
        Ok(Self { exp: exp.clone(), k0: plan.k0.clone(), n_bar: plan.n_bar, xi, seed })
    }

    /// Steps of one excitation phase, rounded up to whole windows.
    pub fn excitation_windows(&self) -> usize {
        (self.n_bar * self.exp.stride).div_ceil(self.exp.weights.tau)
    }
}

/// Episode schedule for a run: plants from the prior that `K0` stabilizes.
pub fn sample_run_schedule(exp: &ExperimentConfig, k0: &Gain, seed: u64) -> Result<EpisodeSchedule> {
    let mut rng = stream(seed, Purpose::Schedule, 0);
    let delta_min = exp.delta_min_steps();
    exp.dwell.validate(delta_min)?;
    let mut dwell = Vec::with_capacity(exp.episodes);
    let mut params = Vec::with_capacity(exp.episodes);
    for _ in 0..exp.episodes {
        params.push(stable_draw(exp, k0, &mut rng)?);
        dwell.push(exp.dwell.sample(delta_min, &mut rng));
    }
    EpisodeSchedule::new(dwell, params)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Fallback,
    Exciting,
    Learned,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Fallback => "fallback",
            Phase::Exciting => "exciting",
            Phase::Learned => "learned",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowRecord {
    /// Step index of the first step in the window.
    pub start: usize,
    pub phase: Phase,
    pub controller: usize,
    pub cost: f64,
    pub bounds: Option<TriggerBounds>,
    pub fired: bool,
    /// True episode at the end of the window.
    pub episode: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LearningRecord {
    pub window: usize,
    pub controller: usize,
    pub feasible: bool,
    pub stable_fraction: f64,
    pub kappa_minus: f64,
    pub kappa_plus: f64,
    /// Expected window cost of the installed gain on the true plant, for analysis.
    pub true_expected_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeRecord {
    pub index: usize,
    pub start: usize,
    pub dwell: usize,
    /// Expected window costs of `K0` and of the optimal gain on the true plant.
    pub k0_expected_cost: f64,
    pub optimal_expected_cost: f64,
    pub realized_cost: f64,
    /// Windows from the change to the first trigger; `None` when missed.
    pub detection_delay: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub tau: usize,
    pub windows: Vec<WindowRecord>,
    pub episodes: Vec<EpisodeRecord>,
    pub learning: Vec<LearningRecord>,
    /// Realized cost per phase, in [`Phase`] order.
    pub phase_costs: [f64; 3],
    pub triggers: usize,
    pub false_positives: usize,
}

impl RunLog {
    pub fn total_cost(&self) -> f64 {
        self.phase_costs.iter().sum()
    }

    pub fn steps(&self) -> usize {
        self.windows.len() * self.tau
    }

    /// `k,J_hat,kappa_minus,kappa_plus,xi,fired,phase,controller,episode`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# schema=1")?;
        writeln!(out, "k,J_hat,kappa_minus,kappa_plus,xi,fired,phase,controller,episode")?;
        for w in &self.windows {
            let (lo, hi, xi) = match &w.bounds {
                Some(b) => (format!("{:?}", b.kappa_minus), format!("{:?}", b.kappa_plus), format!("{:?}", b.xi)),
                None => (String::new(), String::new(), String::new()),
            };
            writeln!(
                out,
                "{},{:?},{},{},{},{},{},{},{}",
                w.start,
                w.cost,
                lo,
                hi,
                xi,
                u8::from(w.fired),
                w.phase.as_str(),
                w.controller,
                w.episode
            )?;
        }
        Ok(())
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            total_cost: self.total_cost(),
            fallback_cost: self.phase_costs[0],
            exciting_cost: self.phase_costs[1],
            learned_cost: self.phase_costs[2],
            windows: self.windows.len(),
            steps: self.steps(),
            triggers: self.triggers,
            false_positives: self.false_positives,
            learning_phases: self.learning.len(),
            infeasible: self.learning.iter().filter(|l| !l.feasible).count(),
            detection_delays: self.episodes.iter().skip(1).map(|e| e.detection_delay).collect(),
            episodes: self.episodes.clone(),
            learning: self.learning.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub total_cost: f64,
    pub fallback_cost: f64,
    pub exciting_cost: f64,
    pub learned_cost: f64,
    pub windows: usize,
    pub steps: usize,
    pub triggers: usize,
    pub false_positives: usize,
    pub learning_phases: usize,
    pub infeasible: usize,
    pub detection_delays: Vec<Option<usize>>,
    pub episodes: Vec<EpisodeRecord>,
    pub learning: Vec<LearningRecord>,
}

/// The switched plant with its own noise streams.
struct World<'a> {
    schedule: &'a EpisodeSchedule,
    episode: usize,
    stepper: PlantStepper,
    exciter: GaussianSampler,
    noise_rng: SimRng,
    exc_rng: SimRng,
    x: Vec<f64>,
    next: Vec<f64>,
    u: Vec<f64>,
    e: Vec<f64>,
    k: usize,
    episode_costs: Vec<f64>,
}

impl<'a> World<'a> {
    fn new(cfg: &EtlConfig, schedule: &'a EpisodeSchedule) -> Result<Self> {
        let first = &schedule.params[0];
        let d_x = first.d_x();
        let d_u = first.d_u();
        if cfg.exp.prior.belief.d_x() != d_x || cfg.exp.prior.belief.d_u() != d_u {
            return Err(Error::Dimension("schedule plants do not match the prior".into()));
        }
        let mut init_rng = stream(cfg.seed, Purpose::InitialState, 0);
        let x = match crate::dynamics::stationary_state(first, &cfg.k0, &first.sigma, &mut init_rng) {
            Ok(x) => x.as_slice().to_vec(),
            Err(_) => vec![0.0; d_x],
        };
        Ok(Self {
            schedule,
            episode: 0,
            stepper: PlantStepper::new(first),
            exciter: GaussianSampler::new(&cfg.exp.sigma_e),
            noise_rng: stream(cfg.seed, Purpose::ProcessNoise, 0),
            exc_rng: stream(cfg.seed, Purpose::Excitation, 0),
            x,
            next: vec![0.0; d_x],
            u: vec![0.0; d_u],
            e: vec![0.0; d_u],
            k: 0,
            episode_costs: vec![0.0; schedule.n_episodes()],
        })
    }

    /// Advances one window under `gain` (row-major); returns its cost.
    fn window(&mut self, gain: &[f64], excite: bool, cfg: &EtlConfig, mut log: Option<&mut Trajectory>) -> f64 {
        let d_x = self.x.len();
        let mut total = 0.0;
        for _ in 0..cfg.exp.weights.tau {
            let ep = self.schedule.episode_at(self.k);
            if ep != self.episode {
                self.episode = ep;
                self.stepper = PlantStepper::new(&self.schedule.params[ep]);
            }
            linalg::matvec_into(gain, d_x, &self.x, &mut self.u);
            if excite {
                self.exciter.sample_into(&mut self.exc_rng, &mut self.e);
                for (ui, ei) in self.u.iter_mut().zip(&self.e) {
                    *ui += ei;
                }
            }
            let c = stage_cost(&self.x, &self.u, &cfg.exp.weights);
            total += c;
            self.episode_costs[ep] += c;
            self.stepper.step(&self.x, &self.u, &mut self.noise_rng, &mut self.next);
            if let Some(t) = log.as_deref_mut() {
                t.push(&self.u, &self.e, &self.next, ep);
            }
            std::mem::swap(&mut self.x, &mut self.next);
            self.k += 1;
        }
        total
    }
}

enum Mode {
    Fallback { bounds: Option<TriggerBounds> },
    Exciting { remaining: usize, data: Trajectory },
    Learned { bounds: TriggerBounds },
}

fn episode_records(cfg: &EtlConfig, schedule: &EpisodeSchedule, windows: &[WindowRecord], costs: &[f64]) -> Vec<EpisodeRecord> {
    let tau = cfg.exp.weights.tau;
    let w = &cfg.exp.weights;
    (0..schedule.n_episodes())
        .map(|i| {
            let sys = &schedule.params[i];
            let start = schedule.change_times[i];
            let end = start + schedule.dwell[i];
            let detection_delay = if i == 0 {
                None
            } else {
                let first_full = start.div_ceil(tau);
                windows
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| r.fired && r.start + tau > start && r.start < end)
                    .map(|(idx, _)| idx + 1 - first_full.min(idx + 1))
                    .next()
            };
            EpisodeRecord {
                index: i,
                start,
                dwell: schedule.dwell[i],
                k0_expected_cost: lqr::expected_cost(sys, &cfg.k0, w),
                optimal_expected_cost: lqr::dare(sys, w).map(|(_, k)| lqr::expected_cost(sys, &k, w)).unwrap_or(f64::NAN),
                realized_cost: costs[i],
                detection_delay,
            }
        })
        .collect()
}

fn finish(cfg: &EtlConfig, schedule: &EpisodeSchedule, world: World<'_>, windows: Vec<WindowRecord>, learning: Vec<LearningRecord>) -> RunLog {
    let mut phase_costs = [0.0; 3];
    for w in &windows {
        phase_costs[w.phase.index()] += w.cost;
    }
    let tau = cfg.exp.weights.tau;
    let triggers = windows.iter().filter(|w| w.fired).count();
    // a trigger is false when no change happened since the gain was learned
    let mut false_positives = 0;
    let mut learned_on = 0usize;
    for (i, w) in windows.iter().enumerate() {
        if i > 0 && windows[i - 1].phase == Phase::Exciting && w.phase != Phase::Exciting {
            learned_on = windows[i - 1].episode;
        }
        if w.fired && schedule.episode_at(w.start + tau - 1) == learned_on {
            false_positives += 1;
        }
    }
    let episodes = episode_records(cfg, schedule, &windows, &world.episode_costs);
    RunLog { tau, windows, episodes, learning, phase_costs, triggers, false_positives }
}

fn windows_in(schedule: &EpisodeSchedule, tau: usize) -> Result<usize> {
    let n = schedule.horizon() / tau;
    if n == 0 {
        return Err(Error::InvalidArgument(format!("horizon {} is shorter than one window", schedule.horizon())));
    }
    Ok(n)
}

/// Event-triggered learning over `schedule`, truncated to whole windows.
pub fn run(cfg: &EtlConfig, schedule: &EpisodeSchedule) -> Result<RunLog> {
    let n_windows = windows_in(schedule, cfg.exp.weights.tau)?;
    let mut world = World::new(cfg, schedule)?;
    let k0_row = linalg::row_major(&cfg.k0.0);
    let mut gain_row = k0_row.clone();
    let mut controller = 0usize;
    let mut windows = Vec::with_capacity(n_windows);
    let mut learning = Vec::new();
    let new_excitation = |world: &World<'_>| Mode::Exciting {
        remaining: cfg.excitation_windows(),
        data: Trajectory::new(world.x.len(), cfg.k0.0.nrows(), &world.x, world.k),
    };
    let mut mode = if cfg.n_bar == 0 { Mode::Fallback { bounds: None } } else { new_excitation(&world) };

    for w in 0..n_windows {
        let start = world.k;
        match &mut mode {
            Mode::Exciting { remaining, data } => {
                let keep = data.len() < cfg.n_bar * cfg.exp.stride;
                let cost = world.window(&k0_row, true, cfg, if keep { Some(data) } else { None });
                windows.push(WindowRecord {
                    start,
                    phase: Phase::Exciting,
                    controller,
                    cost,
                    bounds: None,
                    fired: false,
                    episode: schedule.episode_at(world.k - 1),
                });
                *remaining -= 1;
                if *remaining == 0 {
                    let data = data.slice(0, cfg.n_bar * cfg.exp.stride);
                    let mut rng = stream(cfg.seed, Purpose::Posterior, learning.len() as u64);
                    let learned = learn(&cfg.exp, &cfg.k0, &data, &mut rng)?;
                    let bounds = learned.bounds.clone().with_margin(cfg.xi);
                    let truth = &schedule.params[schedule.episode_at(world.k)];
                    controller += 1;
                    learning.push(LearningRecord {
                        window: w + 1,
                        controller,
                        feasible: learned.feasible,
                        stable_fraction: learned.stable_fraction,
                        kappa_minus: bounds.kappa_minus,
                        kappa_plus: bounds.kappa_plus,
                        true_expected_cost: lqr::expected_cost(truth, &learned.gain, &cfg.exp.weights),
                    });
                    gain_row = linalg::row_major(&learned.gain.0);
                    mode = if learned.feasible {
                        Mode::Learned { bounds }
                    } else {
                        Mode::Fallback { bounds: Some(bounds) }
                    };
                }
            }
            Mode::Learned { bounds } | Mode::Fallback { bounds: Some(bounds) } => {
                let bounds = bounds.clone();
                let phase = if matches!(mode, Mode::Learned { .. }) { Phase::Learned } else { Phase::Fallback };
                let cost = world.window(&gain_row, false, cfg, None);
                let fired = check_trigger(cost, &bounds);
                windows.push(WindowRecord {
                    start,
                    phase,
                    controller,
                    cost,
                    bounds: Some(bounds),
                    fired,
                    episode: schedule.episode_at(world.k - 1),
                });
                if fired {
                    // back to K0 and the prior
                    gain_row = k0_row.clone();
                    controller += 1;
                    mode = new_excitation(&world);
                }
            }
            Mode::Fallback { bounds: None } => {
                let cost = world.window(&k0_row, false, cfg, None);
                windows.push(WindowRecord {
                    start,
                    phase: Phase::Fallback,
                    controller,
                    cost,
                    bounds: None,
                    fired: false,
                    episode: schedule.episode_at(world.k - 1),
                });
            }
        }
    }
    Ok(finish(cfg, schedule, world, windows, learning))
}

/// `K0` throughout, on the same disturbance realization as [`run`].
pub fn run_baseline(cfg: &EtlConfig, schedule: &EpisodeSchedule) -> Result<RunLog> {
    let n_windows = windows_in(schedule, cfg.exp.weights.tau)?;
    let mut world = World::new(cfg, schedule)?;
    let k0_row = linalg::row_major(&cfg.k0.0);
    let mut windows = Vec::with_capacity(n_windows);
    for _ in 0..n_windows {
        let start = world.k;
        let cost = world.window(&k0_row, false, cfg, None);
        windows.push(WindowRecord {
            start,
            phase: Phase::Fallback,
            controller: 0,
            cost,
            bounds: None,
            fired: false,
            episode: schedule.episode_at(world.k - 1),
        });
    }
    Ok(finish(cfg, schedule, world, windows, Vec::new()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oned() -> (ExperimentConfig, Gain) {
        let mut exp = ExperimentConfig::preset("oned_example").unwrap();
        exp.robustness_mc = 1000;
        let (k0, _) = design_k0(&exp, 3).unwrap();
        (exp, k0)
    }

    fn etl(exp: &ExperimentConfig, k0: &Gain, n_bar: usize) -> EtlConfig {
        EtlConfig { exp: exp.clone(), k0: k0.clone(), n_bar, xi: 0.0, seed: 11 }
    }

    fn stationary(exp: &ExperimentConfig, windows: usize) -> EpisodeSchedule {
        let sys = exp.prior.mean_system().unwrap();
        EpisodeSchedule::stationary(sys, windows * exp.weights.tau + 17).unwrap()
    }

    #[test]
    fn never_learning_matches_baseline() {
        let (exp, k0) = oned();
        let cfg = etl(&exp, &k0, 0);
        let schedule = stationary(&exp, 30);
        let a = run(&cfg, &schedule).unwrap();
        let b = run_baseline(&cfg, &schedule).unwrap();
        assert_eq!(a.windows.len(), 30);
        assert_eq!(a, b);
        assert!(a.learning.is_empty());
        assert!(a.windows.iter().all(|w| w.phase == Phase::Fallback && w.controller == 0));
    }

    #[test]
    fn never_learning_cost_near_expected() {
        let (exp, k0) = oned();
        let cfg = etl(&exp, &k0, 0);
        let schedule = stationary(&exp, 500);
        let log = run(&cfg, &schedule).unwrap();
        let expected = lqr::expected_cost(&schedule.params[0], &k0, &exp.weights) * 500.0;
        assert!((log.total_cost() / expected - 1.0).abs() < 0.05, "{} vs {expected}", log.total_cost());
    }

    #[test]
    fn stationary_world_learns_once() {
        let (exp, k0) = oned();
        let cfg = etl(&exp, &k0, 100);
        assert_eq!(cfg.excitation_windows(), 10);
        let schedule = stationary(&exp, 60);
        let log = run(&cfg, &schedule).unwrap();
        assert_eq!(log.learning.len(), 1 + log.triggers);
        assert!(log.triggers <= 3, "{} triggers", log.triggers);
        assert_eq!(log.false_positives, log.triggers);
        let phases: Vec<Phase> = log.windows.iter().map(|w| w.phase).collect();
        assert!(phases[..10].iter().all(|&p| p == Phase::Exciting));
        assert!(log.windows[10].bounds.is_some());
    }

    #[test]
    fn accounting_identity_and_csv_rows() {
        let (exp, k0) = oned();
        let cfg = etl(&exp, &k0, 100);
        let schedule = stationary(&exp, 25);
        let log = run(&cfg, &schedule).unwrap();
        let sum: f64 = log.windows.iter().map(|w| w.cost).sum();
        let by_phase: f64 = log.phase_costs.iter().sum();
        assert!((sum - by_phase).abs() <= 1e-9 * sum);
        assert_eq!(log.steps(), 25 * exp.weights.tau);
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# schema=1\nk,J_hat,"));
        assert_eq!(text.lines().count(), 2 + 25);
        let exciting = text.lines().nth(2).unwrap();
        assert!(exciting.contains(",,,"), "{exciting}");
    }

    #[test]
    fn trigger_returns_to_fallback_within_one_window() {
        let (exp, k0) = oned();
        let mut cfg = etl(&exp, &k0, 100);
        // an absurd margin of opposite sign makes every window fire
        cfg.xi = -1e9;
        let schedule = stationary(&exp, 30);
        let log = run(&cfg, &schedule).unwrap();
        assert!(log.triggers > 0);
        for pair in log.windows.windows(2) {
            if pair[0].fired {
                assert_eq!(pair[1].phase, Phase::Exciting);
                assert_ne!(pair[1].controller, pair[0].controller);
            }
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let (exp, k0) = oned();
        let cfg = etl(&exp, &k0, 100);
        let schedule = stationary(&exp, 12);
        let a = run(&cfg, &schedule).unwrap();
        let b = run(&cfg, &schedule).unwrap();
        assert_eq!(a, b);
    }
}
