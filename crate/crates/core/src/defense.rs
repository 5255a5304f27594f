//! Test-time recalibration: noisy projected sign-gradient ascent on a
//! self-supervised objective inside an L∞ ball around the input, plus the
//! random-noise and no-op baselines.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attack::project;
use crate::error::{Error, Result};
use crate::nn::{predict, Network};
use crate::objectives::{
    equivariance_loss, invariance_loss, value_and_input_grad, ConstraintSample,
};
use crate::seed;
use crate::tensor::{Graph, Tensor};
use crate::transform::{default_transform_set, TransformSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseObjective {
    Equivariance,
    Invariance,
    RandomNoise,
    None,
}

impl DefenseObjective {
    pub fn name(self) -> &'static str {
        match self {
            DefenseObjective::Equivariance => "equivariance",
            DefenseObjective::Invariance => "invariance",
            DefenseObjective::RandomNoise => "random",
            DefenseObjective::None => "none",
        }
    }
}

/// How the objective gradient is scaled before the annealed noise is added.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradNormalization {
    /// Divide by the global L2 norm of the gradient tensor.
    #[default]
    L2,
    /// Divide by the root-mean-square entry, so entries are O(1) like the noise.
    Rms,
}

impl GradNormalization {
    pub fn apply(self, grad: &mut [f64]) {
        let sq: f64 = grad.iter().map(|v| v * v).sum();
        let norm = match self {
            GradNormalization::L2 => sq.sqrt(),
            GradNormalization::Rms => (sq / grad.len().max(1) as f64).sqrt(),
        };
        if norm > 0.0 {
            grad.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub objective: DefenseObjective,
    pub epsilon_v: f64,
    pub steps: usize,
    pub step_size: f64,
    /// Transform set; the default set derived from `seed` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub specs: Option<Vec<TransformSpec>>,
    #[serde(default)]
    pub sample: ConstraintSample,
    #[serde(default)]
    pub normalization: GradNormalization,
    #[serde(default)]
    pub seed: u64,
}

impl DefenseConfig {
    /// `T = 20`, `η = 2ε_v`, `ε_v = 1.5ε` for an attack budget `ε`.
    pub fn for_attack_budget(objective: DefenseObjective, epsilon: f64, seed: u64) -> Self {
        Self::new(objective, 1.5 * epsilon, seed)
    }

    /// 20 steps with `η = 2ε_v`.
    pub fn new(objective: DefenseObjective, epsilon_v: f64, seed: u64) -> Self {
        Self {
            objective,
            epsilon_v,
            steps: 20,
            step_size: 2.0 * epsilon_v,
            specs: None,
            sample: ConstraintSample::full(),
            normalization: GradNormalization::L2,
            seed,
        }
    }

    pub fn none() -> Self {
        Self::new(DefenseObjective::None, 0.0, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_v >= 0.0) {
            return Err(Error::config(format!(
                "epsilon_v must be >= 0, got {}",
                self.epsilon_v
            )));
        }
        let iterative = matches!(
            self.objective,
            DefenseObjective::Equivariance | DefenseObjective::Invariance
        );
        if iterative && self.steps > 0 && self.epsilon_v > 0.0 && !(self.step_size > 0.0) {
            return Err(Error::config("step_size must be > 0 when steps > 0 and epsilon_v > 0"));
        }
        if let Some(specs) = &self.specs {
            if specs.is_empty() {
                return Err(Error::Empty("defense transforms"));
            }
            specs.iter().try_for_each(TransformSpec::validate)?;
        }
        self.sample.validate()
    }

    pub fn transforms(&self) -> Vec<TransformSpec> {
        self.specs
            .clone()
            .unwrap_or_else(|| default_transform_set(self.seed))
    }

    /// True when `defend` returns its input unchanged.
    pub fn is_identity(&self) -> bool {
        self.objective == DefenseObjective::None || self.epsilon_v == 0.0
    }

    /// Same configuration with the noise stream keyed to image `index`.
    pub fn for_image(&self, index: usize) -> Self {
        let mut c = self.clone();
        c.seed = seed::derive(self.seed, "defense.image", index as u64);
        c.specs = Some(self.transforms());
        c
    }

    pub fn label(&self) -> String {
        match self.objective {
            DefenseObjective::None => "none".into(),
            o => format!("{}(eps_v={:.5})", o.name(), self.epsilon_v),
        }
    }
}

/// Noise standard deviation at step `t` of `steps` (0-based): `(T−1−t)/T`.
pub fn noise_std(t: usize, steps: usize) -> f64 {
    if steps == 0 {
        return 0.0;
    }
    ((steps as f64 - 1.0 - t as f64) / steps as f64).max(0.0)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DefenseTrace {
    /// `max|x'_t − x_in|` after each step's projection.
    pub max_deviation: Vec<f64>,
    pub gradient_evals: usize,
    /// Objective value at each iterate before its update.
    pub objective: Vec<f64>,
}

fn objective_grad(
    net: &dyn Network,
    x: &Tensor,
    cfg: &DefenseConfig,
    specs: &[TransformSpec],
) -> Result<(f64, Tensor)> {
    value_and_input_grad(x, |g, xv| match cfg.objective {
        DefenseObjective::Equivariance => {
            Ok(equivariance_loss(net, g, xv, specs, &cfg.sample)?.loss)
        }
        DefenseObjective::Invariance => invariance_loss(net, g, xv, specs),
        _ => unreachable!("non-iterative objective"),
    })
}

/// Value of the configured objective at `x` (0 for non-iterative modes).
pub fn objective_value(net: &dyn Network, x: &Tensor, cfg: &DefenseConfig) -> Result<f64> {
    let specs = cfg.transforms();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let v = match cfg.objective {
        DefenseObjective::Equivariance => {
            equivariance_loss(net, &mut g, xv, &specs, &cfg.sample)?.loss
        }
        DefenseObjective::Invariance => invariance_loss(net, &mut g, xv, &specs)?,
        _ => return Ok(0.0),
    };
    Ok(g.value(v).item())
}

pub fn defend(net: &dyn Network, x_in: &Tensor, cfg: &DefenseConfig) -> Result<Tensor> {
    defend_traced(net, x_in, cfg).map(|(x, _)| x)
}

/// Run the defense and record per-step diagnostics.
pub fn defend_traced(
    net: &dyn Network,
    x_in: &Tensor,
    cfg: &DefenseConfig,
) -> Result<(Tensor, DefenseTrace)> {
    cfg.validate()?;
    let mut trace = DefenseTrace::default();
    if cfg.is_identity() {
        return Ok((x_in.clone(), trace));
    }
    let mut rng = seed::child_rng(cfg.seed, "defense.noise", 0);
    match cfg.objective {
        DefenseObjective::RandomNoise => {
            let mut x = x_in.map(|v| v + rng.random_range(-cfg.epsilon_v..=cfg.epsilon_v));
            project(&mut x, x_in, cfg.epsilon_v);
            trace.max_deviation.push(x.max_abs_diff(x_in));
            Ok((x, trace))
        }
        DefenseObjective::Equivariance | DefenseObjective::Invariance => {
            if cfg.steps == 0 {
                log::warn!("defense with 0 steps returns its input");
                return Ok((x_in.clone(), trace));
            }
            let specs = cfg.transforms();
            let mut x = x_in.clone();
            for t in 0..cfg.steps {
                let (value, grad) = objective_grad(net, &x, cfg, &specs)?;
                trace.gradient_evals += 1;
                trace.objective.push(value);
                let mut dir = grad.into_data();
                cfg.normalization.apply(&mut dir);
                let sigma = noise_std(t, cfg.steps);
                for (v, d) in x.data_mut().iter_mut().zip(&dir) {
                    let noise: f64 = if sigma > 0.0 {
                        sigma * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        0.0
                    };
                    let s = d + noise;
                    if s > 0.0 {
                        *v += cfg.step_size;
                    } else if s < 0.0 {
                        *v -= cfg.step_size;
                    }
                }
                project(&mut x, x_in, cfg.epsilon_v);
                trace.max_deviation.push(x.max_abs_diff(x_in));
            }
            Ok((x, trace))
        }
        DefenseObjective::None => unreachable!(),
    }
}

/// Argmax prediction on the defended input (ties toward the lower class).
pub fn predict_with_defense(
    net: &dyn Network,
    x_in: &Tensor,
    cfg: &DefenseConfig,
) -> Result<Vec<usize>> {
    predict(net, &defend(net, x_in, cfg)?)
}

/// Defend every image independently (in parallel when enabled).
pub fn defend_all(
    net: &dyn Network,
    images: &[Tensor],
    cfg: &DefenseConfig,
) -> Result<Vec<(Tensor, DefenseTrace)>> {
    crate::parallel::try_map_indexed(images.len(), |i| {
        defend_traced(net, &images[i], &cfg.for_image(i))
    })
}

/// One row of the ε_v trade-off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub epsilon_v: f64,
    pub clean_metric: f64,
    pub robust_metric: f64,
}

/// Clean and robust metric of the defense at each `ε_v`. The step size keeps
/// the ratio `η / ε_v` of `cfg`.
pub fn sweep_epsilon_v(
    net: &dyn Network,
    clean: &crate::data::Dataset,
    attacked: &[Tensor],
    epsilons: &[f64],
    cfg: &DefenseConfig,
) -> Result<Vec<TradeoffPoint>> {
    if attacked.len() != clean.len() {
        return Err(Error::shape(
            "sweep_epsilon_v",
            format!(
                "{} attacked for {} clean images",
                attacked.len(),
                clean.len()
            ),
        ));
    }
    let ratio = if cfg.epsilon_v > 0.0 {
        cfg.step_size / cfg.epsilon_v
    } else {
        2.0
    };
    epsilons
        .iter()
        .map(|&eps| {
            let mut c = cfg.clone();
            c.epsilon_v = eps;
            c.step_size = ratio * eps;
            let clean_preds = defended_predictions(net, &clean.images, &c)?;
            let robust_preds = defended_predictions(net, attacked, &c)?;
            Ok(TradeoffPoint {
                epsilon_v: eps,
                clean_metric: clean.metric(&clean_preds)?,
                robust_metric: clean.metric(&robust_preds)?,
            })
        })
        .collect()
}

pub fn defended_predictions(
    net: &dyn Network,
    images: &[Tensor],
    cfg: &DefenseConfig,
) -> Result<Vec<Vec<usize>>> {
    crate::parallel::try_map_indexed(images.len(), |i| {
        predict_with_defense(net, &images[i], &cfg.for_image(i))
    })
}
