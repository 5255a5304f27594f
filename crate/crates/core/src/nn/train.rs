use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::{ModelCheckpoint, TrainMetadata};
use super::model::{round_f32, Model};
use crate::attack::{attack, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::parallel;
use crate::seed;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialTraining {
    pub epsilon: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f64,
    /// Rescale the minibatch gradient to at most this global L2 norm.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub adversarial: Option<AdversarialTraining>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to 0 over all steps.
    Cosine,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Heavy-ball momentum SGD (`momentum` field).
    #[default]
    Sgd,
    /// Adam with β = (0.9, 0.999), ε = 1e-8.
    Adam,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_batch() -> usize {
    8
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.05,
            momentum: default_momentum(),
            batch_size: default_batch(),
            weight_decay: 0.0,
            grad_clip: None,
            schedule: LrSchedule::Constant,
            optimizer: Optimizer::Sgd,
            adversarial: None,
            seed: 0,
        }
    }
}

struct SampleGrad {
    loss: f64,
    correct: usize,
    total: usize,
    grads: Vec<Option<(Tensor, Tensor)>>,
}

fn sample_grad(model: &Model, x: &Tensor, y: &[usize]) -> Result<SampleGrad> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (logits, bound) = model.forward_trainable(&mut g, xv)?;
    let pred = g.value(logits).argmax_channel();
    let correct = pred.iter().zip(y).filter(|(p, t)| p == t).count();
    let loss = g.cross_entropy(logits, y)?;
    let loss_value = g.value(loss).item();
    g.backward(loss)?;
    let grads = bound
        .iter()
        .map(|b| b.map(|(w, b)| (g.grad(w).unwrap().clone(), g.grad(b).unwrap().clone())))
        .collect();
    Ok(SampleGrad {
        loss: loss_value,
        correct,
        total: y.len(),
        grads,
    })
}

/// Minibatch SGD with momentum on mean cross-entropy.
///
/// Per-sample gradients are computed independently (in parallel when
/// enabled) and summed in index order, so runs are reproducible. In
/// adversarial mode every minibatch image is replaced by a PGD perturbation
/// against the current parameters before the update.
pub fn train(mut model: Model, data: &Dataset, cfg: &TrainConfig) -> Result<ModelCheckpoint> {
    if data.is_empty() {
        return Err(Error::Empty("train"));
    }
    if cfg.batch_size == 0 || cfg.lr <= 0.0 {
        return Err(Error::config("batch_size and lr must be positive"));
    }
    let mut velocity: Vec<Option<(Vec<f64>, Vec<f64>)>> = model
        .layer_params()
        .iter()
        .map(|p| {
            p.as_ref()
                .map(|p| (vec![0.0; p.weight.numel()], vec![0.0; p.bias.numel()]))
        })
        .collect();
    let mut second = velocity.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch).max(1);
    let mut last_accuracy = None;
    for epoch in 0..cfg.epochs {
        let mut rng = seed::child_rng(cfg.seed, "train.shuffle", epoch as u64);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut total) = (0.0, 0usize, 0usize);
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let step_id = (epoch * steps_per_epoch + bi) as u64;
            let results = parallel::try_map_indexed(batch.len(), |k| {
                let i = batch[k];
                let x = match &cfg.adversarial {
                    Some(adv) => {
                        let acfg = AttackConfig::pgd(
                            adv.epsilon,
                            adv.steps,
                            seed::derive(cfg.seed, "train.pgd", step_id * 4096 + k as u64),
                        );
                        attack(&model, &data.images[i], &data.labels[i], &acfg)?
                    }
                    None => data.images[i].clone(),
                };
                sample_grad(&model, &x, &data.labels[i])
            })?;
            let scale = 1.0 / batch.len() as f64;
            let mut sum: Vec<Option<(Vec<f64>, Vec<f64>)>> = velocity
                .iter()
                .map(|v| {
                    v.as_ref()
                        .map(|(w, b)| (vec![0.0; w.len()], vec![0.0; b.len()]))
                })
                .collect();
            for r in &results {
                loss_sum += r.loss;
                correct += r.correct;
                total += r.total;
                for (s, gr) in sum.iter_mut().zip(&r.grads) {
                    if let (Some((sw, sb)), Some((gw, gb))) = (s.as_mut(), gr) {
                        sw.iter_mut()
                            .zip(gw.data())
                            .for_each(|(a, b)| *a += b * scale);
                        sb.iter_mut()
                            .zip(gb.data())
                            .for_each(|(a, b)| *a += b * scale);
                    }
                }
            }
            if let Some(max_norm) = cfg.grad_clip {
                let norm = sum
                    .iter()
                    .flatten()
                    .flat_map(|(w, b)| w.iter().chain(b))
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > max_norm {
                    let k = max_norm / norm;
                    sum.iter_mut()
                        .flatten()
                        .for_each(|(w, b)| w.iter_mut().chain(b.iter_mut()).for_each(|v| *v *= k));
                }
            }
            let lr = match cfg.schedule {
                LrSchedule::Constant => cfg.lr,
                LrSchedule::Cosine => {
                    0.5 * cfg.lr
                        * (1.0 + (std::f64::consts::PI * step_id as f64 / total_steps as f64).cos())
                }
            };
            for (((p, v), s), gsum) in model
                .layer_params_mut()
                .iter_mut()
                .zip(velocity.iter_mut())
                .zip(second.iter_mut())
                .zip(&sum)
            {
                let (Some(p), Some((vw, vb)), Some((sw, sb)), Some((gw, gb))) =
                    (p.as_mut(), v.as_mut(), s.as_mut(), gsum)
                else {
                    continue;
                };
                match cfg.optimizer {
                    Optimizer::Sgd => {
                        sgd_update(p.weight.data_mut(), vw, gw, lr, cfg);
                        sgd_update(p.bias.data_mut(), vb, gb, lr, cfg);
                    }
                    Optimizer::Adam => {
                        let t = step_id as i32 + 1;
                        adam_update(p.weight.data_mut(), vw, sw, gw, lr, t, cfg);
                        adam_update(p.bias.data_mut(), vb, sb, gb, lr, t, cfg);
                    }
                }
            }
        }
        let mean_loss = loss_sum / data.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: mean_loss,
            });
        }
        log::debug!(
            "epoch {epoch}: loss {mean_loss:.4}, acc {:.3}",
            correct as f64 / total as f64
        );
        epoch_losses.push(mean_loss);
        last_accuracy = Some(correct as f64 / total as f64);
    }
    Ok(ModelCheckpoint {
        model,
        metadata: TrainMetadata {
            epochs: cfg.epochs,
            seed: cfg.seed,
            adversarial_epsilon: cfg.adversarial.as_ref().map(|a| a.epsilon),
            final_train_accuracy: last_accuracy,
            epoch_losses,
        },
    })
}

fn adam_update(
    p: &mut [f64],
    m: &mut [f64],
    v: &mut [f64],
    g: &[f64],
    lr: f64,
    t: i32,
    cfg: &TrainConfig,
) {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    let (c1, c2) = (1.0 - B1.powi(t), 1.0 - B2.powi(t));
    for (((p, m), v), g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
        let g = g + cfg.weight_decay * *p;
        *m = B1 * *m + (1.0 - B1) * g;
        *v = B2 * *v + (1.0 - B2) * g * g;
        *p = round_f32(*p - lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8));
    }
}

fn sgd_update(p: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, cfg: &TrainConfig) {
    for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
        *p = round_f32(*p - lr * *v);
    }
}
