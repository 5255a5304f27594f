//! L∞-bounded gradient attacks: FGSM, I-FGSM, PGD, MIM, the adaptive
//! equivariance-aware objective and BPDA against the test-time defense.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::defense::{defend_traced, DefenseConfig};
use crate::error::{Error, Result};
use crate::nn::{task_loss, Network};
use crate::objectives::{adaptive_objective, value_and_input_grad};
use crate::seed;
use crate::tensor::{Graph, Tensor};
use crate::transform::{default_transform_set, TransformSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Fgsm,
    Ifgsm,
    Pgd,
    Mim,
    Adaptive,
    Bpda,
}

impl AttackMethod {
    pub fn name(self) -> &'static str {
        match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Ifgsm => "ifgsm",
            AttackMethod::Pgd => "pgd",
            AttackMethod::Mim => "mim",
            AttackMethod::Adaptive => "adaptive",
            AttackMethod::Bpda => "bpda",
        }
    }
}

/// Momentum decay for MIM.
pub const MIM_DECAY: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    /// Equivariance weight for the adaptive objective.
    #[serde(default)]
    pub lambda_e: f64,
    /// Target labels; switches the attack to descending the target loss.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<usize>>,
    /// Start from a uniform draw in the ε-ball. Defaults on for PGD-style
    /// methods only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_start: Option<bool>,
    /// Transform set for the adaptive objective; the default set derived
    /// from `seed` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transforms: Option<Vec<TransformSpec>>,
    #[serde(default)]
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(
        method: AttackMethod,
        epsilon: f64,
        steps: usize,
        step_size: f64,
        seed: u64,
    ) -> Self {
        Self {
            method,
            epsilon,
            steps,
            step_size,
            lambda_e: 0.0,
            target: None,
            random_start: None,
            transforms: None,
            seed,
        }
    }

    /// PGD with step size ε/4.
    pub fn pgd(epsilon: f64, steps: usize, seed: u64) -> Self {
        Self::new(AttackMethod::Pgd, epsilon, steps, epsilon / 4.0, seed)
    }

    pub fn fgsm(epsilon: f64) -> Self {
        Self::new(AttackMethod::Fgsm, epsilon, 1, epsilon, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0)
            || self.steps == 0
            || !(self.step_size > 0.0)
            || !(self.lambda_e >= 0.0)
        {
            return Err(Error::config(format!(
                "attack needs epsilon > 0, steps >= 1, step_size > 0, lambda_e >= 0 (got {}, {}, {}, {})",
                self.epsilon, self.steps, self.step_size, self.lambda_e
            )));
        }
        if self.target.is_some()
            && matches!(self.method, AttackMethod::Adaptive | AttackMethod::Bpda)
        {
            return Err(Error::config(format!(
                "{} is an untargeted attack",
                self.method.name()
            )));
        }
        Ok(())
    }

    fn uses_random_start(&self) -> bool {
        self.random_start.unwrap_or(matches!(
            self.method,
            AttackMethod::Pgd | AttackMethod::Adaptive | AttackMethod::Bpda
        ))
    }

    pub fn label(&self) -> String {
        let mut s = self.method.name().to_string();
        if self.method == AttackMethod::Adaptive {
            s.push_str(&format!("(λ={})", self.lambda_e));
        }
        if self.target.is_some() {
            s.push_str("-targeted");
        }
        s
    }
}

/// Per-attack accounting.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    /// Gradient evaluations of the attack objective.
    pub attack_backward_steps: usize,
    /// Backward passes spent inside the defense while computing BPDA steps.
    pub defense_backward_steps: usize,
    /// Defense backward passes spent scoring the final iterate.
    pub evaluation_backward_steps: usize,
    pub final_loss: f64,
}

/// Project onto the ε-ball around `x`, then onto `[0, 1]`.
pub fn project(x_adv: &mut Tensor, x: &Tensor, epsilon: f64) {
    for (a, &c) in x_adv.data_mut().iter_mut().zip(x.data()) {
        *a = a.clamp(c - epsilon, c + epsilon).clamp(0.0, 1.0);
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn random_start(x: &Tensor, epsilon: f64, seed: u64) -> Tensor {
    let mut rng = seed::child_rng(seed, "attack.start", 0);
    let mut out = x.map(|v| v + rng.random_range(-epsilon..=epsilon));
    project(&mut out, x, epsilon);
    out
}

/// Shared sign-gradient loop. `objective` returns the value to ascend and its
/// gradient at a point; the best iterate seen (including the start and the
/// final point, scored by `score`) is returned.
fn sign_gradient_loop(
    x: &Tensor,
    cfg: &AttackConfig,
    ascend: bool,
    mut objective: impl FnMut(&Tensor) -> Result<(f64, Tensor)>,
    mut score: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<(Tensor, f64)> {
    let mut current = if cfg.uses_random_start() {
        random_start(x, cfg.epsilon, cfg.seed)
    } else {
        x.clone()
    };
    let dir = if ascend { 1.0 } else { -1.0 };
    let better = |a: f64, b: f64| if ascend { a > b } else { a < b };
    let mut momentum = (cfg.method == AttackMethod::Mim).then(|| vec![0.0; x.numel()]);
    let mut best: Option<(Tensor, f64)> = None;
    for _ in 0..cfg.steps {
        let (value, grad) = objective(&current)?;
        if best.as_ref().is_none_or(|(_, b)| better(value, *b)) {
            best = Some((current.clone(), value));
        }
        let direction: Vec<f64> = match momentum.as_mut() {
            Some(acc) => {
                let l1: f64 = grad.data().iter().map(|v| v.abs()).sum::<f64>().max(1e-12);
                for (a, g) in acc.iter_mut().zip(grad.data()) {
                    *a = MIM_DECAY * *a + g / l1;
                }
                acc.clone()
            }
            None => grad.into_data(),
        };
        for (v, d) in current.data_mut().iter_mut().zip(&direction) {
            *v += dir * cfg.step_size * sign(*d);
        }
        project(&mut current, x, cfg.epsilon);
    }
    let last = score(&current)?;
    if best.as_ref().is_none_or(|(_, b)| !better(*b, last)) {
        best = Some((current, last));
    }
    Ok(best.expect("at least one iterate"))
}

fn task_value_and_grad(net: &dyn Network, x: &Tensor, y: &[usize]) -> Result<(f64, Tensor)> {
    value_and_input_grad(x, |g, xv| task_loss(net, g, xv, y))
}

pub(crate) fn task_value(net: &dyn Network, x: &Tensor, y: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let l = task_loss(net, &mut g, xv, y)?;
    Ok(g.value(l).item())
}

/// Untargeted (or, with `cfg.target`, targeted) attack within the ε-ball.
///
/// `x` may be a batch; the loss is the batch mean.
pub fn attack(net: &dyn Network, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    attack_traced(net, x, y, cfg).map(|(x, _)| x)
}

pub fn attack_traced(
    net: &dyn Network,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<(Tensor, AttackTrace)> {
    cfg.validate()?;
    let mut trace = AttackTrace::default();
    let (x_adv, final_loss) = match (&cfg.target, cfg.method) {
        (_, AttackMethod::Bpda) => {
            return Err(Error::config("bpda needs a defense; use bpda_attack"));
        }
        (Some(target), _) => sign_gradient_loop(
            x,
            cfg,
            false,
            |xa| {
                trace.attack_backward_steps += 1;
                task_value_and_grad(net, xa, target)
            },
            |xa| task_value(net, xa, target),
        )?,
        (None, AttackMethod::Adaptive) => {
            let specs = cfg
                .transforms
                .clone()
                .unwrap_or_else(|| default_transform_set(cfg.seed));
            sign_gradient_loop(
                x,
                cfg,
                true,
                |xa| {
                    trace.attack_backward_steps += 1;
                    value_and_input_grad(xa, |g, xv| {
                        adaptive_objective(net, g, xv, y, &specs, cfg.lambda_e)
                    })
                },
                |xa| {
                    let mut g = Graph::new();
                    let xv = g.constant(xa.clone());
                    let v = adaptive_objective(net, &mut g, xv, y, &specs, cfg.lambda_e)?;
                    Ok(g.value(v).item())
                },
            )?
        }
        (None, _) => sign_gradient_loop(
            x,
            cfg,
            true,
            |xa| {
                trace.attack_backward_steps += 1;
                task_value_and_grad(net, xa, y)
            },
            |xa| task_value(net, xa, y),
        )?,
    };
    trace.final_loss = final_loss;
    Ok((x_adv, trace))
}

/// Targeted attack: descend the loss toward `target` within the ε-ball.
pub fn targeted_attack(
    net: &dyn Network,
    x: &Tensor,
    ground_truth: &[usize],
    target: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor> {
    if target.len() != ground_truth.len() {
        return Err(Error::shape(
            "targeted_attack",
            format!("{} targets for {} labels", target.len(), ground_truth.len()),
        ));
    }
    if target == ground_truth {
        return Err(Error::config("target equals ground truth everywhere"));
    }
    let mut cfg = cfg.clone();
    cfg.target = Some(target.to_vec());
    attack(net, x, ground_truth, &cfg)
}

/// BPDA: the defense runs in the forward pass and is treated as the
/// identity in the backward pass.
///
/// With a defense that leaves its input unchanged this is PGD bit-for-bit.
pub fn bpda_attack(
    net: &dyn Network,
    defense: &DefenseConfig,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<(Tensor, AttackTrace)> {
    let mut cfg = cfg.clone();
    cfg.method = AttackMethod::Bpda;
    cfg.validate()?;
    if defense.is_identity() {
        log::info!("bpda against a no-op defense reduces to pgd");
    }
    let mut trace = AttackTrace::default();
    let (x_adv, final_loss) = sign_gradient_loop(
        x,
        &cfg,
        true,
        |xa| {
            let (x_def, dtrace) = defend_traced(net, xa, defense)?;
            trace.defense_backward_steps += dtrace.gradient_evals;
            trace.attack_backward_steps += 1;
            task_value_and_grad(net, &x_def, y)
        },
        |xa| {
            let (x_def, dtrace) = defend_traced(net, xa, defense)?;
            trace.evaluation_backward_steps += dtrace.gradient_evals;
            task_value(net, &x_def, y)
        },
    )?;
    trace.final_loss = final_loss;
    Ok((x_adv, trace))
}
