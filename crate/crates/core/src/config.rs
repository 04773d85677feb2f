//! Experiment configuration files and the built-in presets.

use serde::{Deserialize, Serialize};

use crate::bayes::{MniwBelief, PlantPrior};
use crate::dynamics::DwellSampler;
use crate::error::{Error, Result};
use crate::linalg::{self, Mat, MatrixDoc};
use crate::lqr::CostWeights;
use crate::synthesis::{Objective, SynthOptions};
use crate::trigger::{BoundsConfig, Percentile};

const PRESETS: [(&str, &str); 2] = [
    ("oned_example", include_str!("../presets/oned_example.toml")),
    ("dean_benchmark", include_str!("../presets/dean_benchmark.toml")),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|p| p.0)
}

/// Checked-in text of a preset.
pub fn preset_text(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|p| p.0 == name)
        .map(|p| p.1)
        .ok_or_else(|| {
            let known: Vec<_> = preset_names().collect();
            Error::Config(format!("unknown preset {name:?}; known: {}", known.join(", ")))
        })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDoc {
    pub name: String,
    pub plant: PlantDoc,
    pub prior: PriorDoc,
    pub cost: CostDoc,
    pub learning: LearningDoc,
    pub trigger: TriggerDoc,
    pub design: DesignDoc,
    pub schedule: ScheduleDoc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantDoc {
    pub a_bar: MatrixDoc,
    pub b_bar: MatrixDoc,
    /// Process noise of generated plants.
    pub sigma: MatrixDoc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorDoc {
    pub row_covariance: MatrixDoc,
    pub dof: f64,
    pub scale: MatrixDoc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostDoc {
    pub q: MatrixDoc,
    pub r: MatrixDoc,
    pub tau: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningDoc {
    pub alpha: f64,
    pub sigma_e: MatrixDoc,
    pub delta_min: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PercentileDoc {
    Tail,
    Confidence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerDoc {
    pub eta: f64,
    pub nu: f64,
    pub n_mc: usize,
    pub percentile: PercentileDoc,
    pub min_stable_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveDoc {
    WorstCase,
    Average,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignDoc {
    pub k0_scenarios: usize,
    pub scenarios: usize,
    pub objective: ObjectiveDoc,
    pub beta_grid: Vec<usize>,
    pub beta_samples: usize,
    pub constants_mc: usize,
    pub robustness_mc: usize,
    pub calibration_runs: usize,
    /// Post-change window cost bound; estimated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    /// Trigger false-positive rate; estimated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DwellDoc {
    Constant { steps: usize },
    Geometric { p: f64, unit: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleDoc {
    pub episodes: usize,
    pub dwell: DwellDoc,
}

/// Validated experiment settings.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub name: String,
    pub prior: PlantPrior,
    pub weights: CostWeights,
    pub alpha: f64,
    pub sigma_e: Mat,
    /// Minimum dwell in sub-sampled points.
    pub delta_min: usize,
    pub stride: usize,
    pub bounds: BoundsConfig,
    pub k0_scenarios: usize,
    pub scenarios: usize,
    pub synth: SynthOptions,
    pub beta_grid: Vec<usize>,
    pub beta_samples: usize,
    pub constants_mc: usize,
    pub robustness_mc: usize,
    pub calibration_runs: usize,
    pub omega: Option<f64>,
    pub lambda: Option<f64>,
    pub episodes: usize,
    pub dwell: DwellSampler,
}

fn cfg_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: ConfigDoc = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_doc(&doc)
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::from_toml(preset_text(name)?)
    }

    pub fn from_doc(doc: &ConfigDoc) -> Result<Self> {
        Self::build(doc).map_err(cfg_err)
    }

    fn build(doc: &ConfigDoc) -> Result<Self> {
        let a = doc.plant.a_bar.to_matrix()?;
        let b = doc.plant.b_bar.to_matrix()?;
        let d_x = a.nrows();
        linalg::check_square(&a, d_x, "a_bar")?;
        linalg::check_shape(&b, d_x, b.ncols(), "b_bar")?;
        let belief = MniwBelief::from_row_covariance(
            &a,
            &b,
            &doc.prior.row_covariance.to_matrix()?,
            doc.prior.scale.to_matrix()?,
            doc.prior.dof,
        )?;
        let prior = PlantPrior::new(belief, Some(doc.plant.sigma.to_matrix()?))?;
        let weights = CostWeights::new(doc.cost.q.to_matrix()?, doc.cost.r.to_matrix()?, doc.cost.tau)?;
        linalg::check_square(&weights.q, d_x, "q")?;
        linalg::check_square(&weights.r, b.ncols(), "r")?;

        let l = &doc.learning;
        if !(l.alpha > 0.0 && l.alpha < 1.0) {
            return Err(Error::Config(format!("alpha = {} outside (0, 1)", l.alpha)));
        }
        let sigma_e = l.sigma_e.to_matrix()?;
        linalg::check_square(&sigma_e, b.ncols(), "sigma_e")?;
        linalg::require_psd(&sigma_e, "sigma_e")?;
        if l.stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        // Delta_min >> m: at least 100 strides
        if l.delta_min < 100 {
            return Err(Error::Config(format!("delta_min = {} points must be >= 100", l.delta_min)));
        }

        let t = &doc.trigger;
        if !(t.eta > 0.0 && t.eta < 1.0 && t.nu > 0.0 && t.nu < 1.0) {
            return Err(Error::Config("eta and nu must lie in (0, 1)".into()));
        }
        if t.n_mc < 20 {
            return Err(Error::Config(format!("trigger n_mc = {} must be >= 20", t.n_mc)));
        }
        if !(0.0..=1.0).contains(&t.min_stable_fraction) {
            return Err(Error::Config("min_stable_fraction outside [0, 1]".into()));
        }
        let bounds = BoundsConfig {
            eta: t.eta,
            nu: t.nu,
            n_mc: t.n_mc,
            percentile: match t.percentile {
                PercentileDoc::Tail => Percentile::Tail,
                PercentileDoc::Confidence => Percentile::Confidence,
            },
            min_stable_fraction: t.min_stable_fraction,
        };

        let d = &doc.design;
        if d.k0_scenarios == 0 || d.scenarios == 0 {
            return Err(Error::Config("scenario counts must be >= 1".into()));
        }
        if d.beta_grid.iter().any(|&n| n == 0) {
            return Err(Error::Config("beta grid points must be >= 1".into()));
        }
        if d.constants_mc < 10 || d.robustness_mc < 100 {
            return Err(Error::Config("constants_mc >= 10 and robustness_mc >= 100 required".into()));
        }
        if let Some(o) = d.omega {
            if !(o >= 0.0) {
                return Err(Error::Config(format!("omega = {o} must be >= 0")));
            }
        }
        if let Some(lam) = d.lambda {
            if !(0.0..1.0).contains(&lam) {
                return Err(Error::Config(format!("lambda = {lam} outside [0, 1)")));
            }
        }
        let synth = SynthOptions {
            objective: match d.objective {
                ObjectiveDoc::WorstCase => Objective::WorstCase,
                ObjectiveDoc::Average => Objective::Average,
            },
            ..SynthOptions::default()
        };

        let s = &doc.schedule;
        if s.episodes == 0 {
            return Err(Error::Config("schedule needs at least one episode".into()));
        }
        let dwell = match s.dwell {
            DwellDoc::Constant { steps } => {
                if steps < l.delta_min * l.stride {
                    return Err(Error::Config(format!("constant dwell {steps} below delta_min * stride")));
                }
                DwellSampler::Constant(steps)
            }
            DwellDoc::Geometric { p, unit } => {
                if !(p > 0.0 && p <= 1.0) {
                    return Err(Error::Config(format!("geometric dwell p = {p} outside (0, 1]")));
                }
                DwellSampler::Geometric { p, unit }
            }
        };

        Ok(Self {
            name: doc.name.clone(),
            prior,
            weights,
            alpha: l.alpha,
            sigma_e,
            delta_min: l.delta_min,
            stride: l.stride,
            bounds,
            k0_scenarios: d.k0_scenarios,
            scenarios: d.scenarios,
            synth,
            beta_grid: d.beta_grid.clone(),
            beta_samples: d.beta_samples,
            constants_mc: d.constants_mc,
            robustness_mc: d.robustness_mc,
            calibration_runs: d.calibration_runs,
            omega: d.omega,
            lambda: d.lambda,
            episodes: s.episodes,
            dwell,
        })
    }

    /// Minimum dwell in simulation steps.
    pub fn delta_min_steps(&self) -> usize {
        self.delta_min * self.stride
    }

    /// Windows per sub-sampled point.
    pub fn windows_per_point(&self) -> f64 {
        self.stride as f64 / self.weights.tau as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse() {
        for name in preset_names() {
            let cfg = ExperimentConfig::preset(name).unwrap();
            assert_eq!(cfg.name, name);
        }
        assert!(matches!(ExperimentConfig::preset("nope"), Err(Error::Config(_))));
    }

    #[test]
    fn round_trip_through_doc() {
        let doc: ConfigDoc = toml::from_str(preset_text("dean_benchmark").unwrap()).unwrap();
        let again: ConfigDoc = toml::from_str(&toml::to_string(&doc).unwrap()).unwrap();
        assert_eq!(doc, again);
    }

    #[test]
    fn rejects_bad_values() {
        let text = preset_text("oned_example").unwrap();
        for (from, to) in [
            ("alpha = 0.99", "alpha = 1.5"),
            ("data = [1.01]", "data = [1.01, 2.0]"),
            ("stride = 20", "stride = 0"),
            ("eta = 0.002", "eta = 0.0"),
            ("n_mc = 50", "n_mc = 5"),
            ("name = \"oned_example\"", "name = \"x\"\nbogus = 1"),
        ] {
            let bad = text.replacen(from, to, 1);
            assert!(matches!(ExperimentConfig::from_toml(&bad), Err(Error::Config(_))), "{to}");
        }
    }
}
