//! Output-equivariance anomaly score, calibration, AUROC, the error
//! estimator and the detect-then-defend router.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::defense::{defend, DefenseConfig};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{forward, predict, Network};
use crate::seed;
use crate::tensor::{Graph, Tensor};
use crate::transform::{self, TransformSpec};

fn softmax_output(net: &dyn Network, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let logits = net.forward(&mut g, xv)?;
    if g.value(logits).shape().len() == 2 {
        let s = g.value(logits).shape().to_vec();
        let l4 = g.reshape(logits, &[s[0], s[1], 1, 1])?;
        let p = g.softmax_channel(l4)?;
        return Ok(g.value(p).clone().reshape(&s)?);
    }
    let p = g.softmax_channel(logits)?;
    Ok(g.value(p).clone())
}

/// `Σ_i mean_valid ||g_i⁻¹ softmax(C∘F(g_i x)) − softmax(C∘F(x))||²`.
///
/// Classification outputs have no spatial extent, so the inverse warp is the
/// identity on them.
pub fn detection_score(net: &dyn Network, x: &Tensor, specs: &[TransformSpec]) -> Result<f64> {
    if specs.is_empty() {
        return Err(Error::Empty("detection_score transforms"));
    }
    let reference = softmax_output(net, x)?;
    let (_, _, img_h, img_w) = x.dims4("detection_score")?;
    let mut total = 0.0;
    let mut any_valid = false;
    for spec in specs {
        let warped = transform::apply(spec, x)?;
        let out = softmax_output(net, &warped.output)?;
        if out.shape().len() == 2 {
            total += out.zip_map(&reference, |a, b| (a - b) * (a - b))?.sum();
            any_valid = true;
            continue;
        }
        let (_, c, oh, ow) = reference.dims4("detection_score output")?;
        let back = transform::apply_inverse_to_features(spec, &out, oh, ow)?;
        let mask = spec
            .overlap_mask(img_h, img_w, oh, ow)?
            .zip_map(&back.validity_mask.batch_item(0), |a, b| a * b)?;
        let valid = mask.sum();
        if valid == 0.0 {
            log::warn!(
                "transform {} has an empty overlap region in detection",
                spec.label()
            );
            continue;
        }
        any_valid = true;
        let plane = oh * ow;
        let mut acc = 0.0;
        for p in 0..plane {
            if mask.data()[p] == 0.0 {
                continue;
            }
            for k in 0..c {
                let d = back.output.data()[k * plane + p] - reference.data()[k * plane + p];
                acc += d * d;
            }
        }
        total += acc / valid;
    }
    if !any_valid {
        return Err(Error::Empty("detection_score valid region"));
    }
    Ok(total)
}

/// `√(2/π) · mean(√(σ² + B²))`.
pub fn error_estimate(sigmas: &[f64], b: f64) -> Result<f64> {
    if sigmas.is_empty() {
        return Err(Error::Empty("error_estimate"));
    }
    if b < 0.0 || sigmas.iter().any(|&s| !(s >= 0.0)) {
        return Err(Error::config("error_estimate needs sigma >= 0 and B >= 0"));
    }
    let mean = sigmas.iter().map(|s| (s * s + b * b).sqrt()).sum::<f64>() / sigmas.len() as f64;
    Ok((2.0 / std::f64::consts::PI).sqrt() * mean)
}

/// Twice the Mann–Whitney U of `pos` over `neg` (ties count half).
fn twice_u(pos: &[f64], neg: &[f64]) -> u128 {
    let mut n = neg.to_vec();
    n.sort_by(f64::total_cmp);
    pos.iter()
        .map(|&p| {
            let below = n.partition_point(|&v| v < p) as u128;
            let upto = n.partition_point(|&v| v <= p) as u128;
            2 * below + (upto - below)
        })
        .sum()
}

/// Probability that a positive outscores a negative, ties counted half.
/// `auroc(a, b) + auroc(b, a) == 1` holds exactly.
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Empty("auroc"));
    }
    let total = 2 * pos.len() as u128 * neg.len() as u128;
    let a = twice_u(pos, neg);
    let b = total - a;
    Ok(if a <= b {
        a as f64 / total as f64
    } else {
        1.0 - b as f64 / total as f64
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub quantile: f64,
    #[serde(rename = "B")]
    pub b: f64,
    pub clean_score_summary: ScoreSummary,
}

pub const DEFAULT_QUANTILE: f64 = 95.0;

impl Calibration {
    /// Threshold at the given percentile of held-out clean scores.
    pub fn fit(clean_scores: &[f64], quantile: f64, b: f64) -> Result<Self> {
        let threshold = metrics::percentile(clean_scores, quantile)?;
        Ok(Self {
            threshold,
            quantile,
            b,
            clean_score_summary: ScoreSummary {
                count: clean_scores.len(),
                mean: metrics::mean(clean_scores),
                min: clean_scores.iter().copied().fold(f64::INFINITY, f64::min),
                median: metrics::percentile(clean_scores, 50.0)?,
                max: clean_scores
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max),
            },
        })
    }

    /// Fixed threshold, e.g. `±∞` to force one route.
    pub fn fixed(threshold: f64) -> Self {
        Self {
            threshold,
            quantile: f64::NAN,
            b: 0.0,
            clean_score_summary: ScoreSummary {
                count: 0,
                mean: f64::NAN,
                min: f64::NAN,
                median: f64::NAN,
                max: f64::NAN,
            },
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub inference_s: f64,
    pub detection_s: f64,
    pub defense_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Routed {
    pub labels: Vec<usize>,
    pub score: f64,
    pub defended: bool,
    pub timing: StageTiming,
}

/// Score `x`; defend only when the score exceeds the threshold.
pub fn detect_then_defend(
    net: &dyn Network,
    x: &Tensor,
    calibration: &Calibration,
    specs: &[TransformSpec],
    defense: &DefenseConfig,
) -> Result<Routed> {
    let mut timing = StageTiming::default();
    let t = Instant::now();
    let score = detection_score(net, x, specs)?;
    timing.detection_s = t.elapsed().as_secs_f64();
    let defended = score > calibration.threshold;
    let input = if defended {
        let t = Instant::now();
        let xd = defend(net, x, defense)?;
        timing.defense_s = t.elapsed().as_secs_f64();
        xd
    } else {
        x.clone()
    };
    let t = Instant::now();
    let labels = predict(net, &input)?;
    timing.inference_s = t.elapsed().as_secs_f64();
    log::debug!(
        "routing: score {score:.5} vs threshold {:.5} -> defended={defended}",
        calibration.threshold
    );
    Ok(Routed {
        labels,
        score,
        defended,
        timing,
    })
}

/// Vanilla forward timing, used as the baseline stage in timing tables.
pub fn time_inference(net: &dyn Network, x: &Tensor) -> Result<f64> {
    let t = Instant::now();
    forward(net, x)?;
    Ok(t.elapsed().as_secs_f64())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Corruption {
    Gaussian {
        std: f64,
    },
    /// Poisson photon noise with the given photon count at intensity 1.
    Shot {
        photons: f64,
    },
    /// Box blur with the given radius.
    Blur {
        radius: usize,
    },
    /// Scale deviation from the image mean by `factor`.
    Contrast {
        factor: f64,
    },
    /// Uniform rounding to `levels` intensity levels.
    Quantize {
        levels: usize,
    },
}

impl Corruption {
    pub fn name(&self) -> &'static str {
        match self {
            Corruption::Gaussian { .. } => "gaussian",
            Corruption::Shot { .. } => "shot",
            Corruption::Blur { .. } => "blur",
            Corruption::Contrast { .. } => "contrast",
            Corruption::Quantize { .. } => "quantize",
        }
    }

    pub fn suite() -> Vec<Corruption> {
        vec![
            Corruption::Gaussian { std: 0.08 },
            Corruption::Shot { photons: 60.0 },
            Corruption::Blur { radius: 1 },
            Corruption::Contrast { factor: 0.4 },
            Corruption::Quantize { levels: 16 },
        ]
    }

    pub fn apply(&self, x: &Tensor, seed: u64) -> Result<Tensor> {
        let mut rng = seed::child_rng(seed, "corruption", 0);
        let out = match *self {
            Corruption::Gaussian { std } => {
                x.map(|v| v + std * rng.sample::<f64, _>(StandardNormal))
            }
            Corruption::Shot { photons } => x.map(|v| {
                let lambda = (v * photons).max(1e-9);
                let k: f64 = Poisson::new(lambda).map(|d| rng.sample(d)).unwrap_or(0.0);
                k / photons
            }),
            Corruption::Blur { radius } => {
                let (n, c, h, w) = x.dims4("blur")?;
                let r = radius as isize;
                let mut out = Tensor::zeros(x.shape());
                for plane in 0..n * c {
                    let src = &x.data()[plane * h * w..(plane + 1) * h * w];
                    for y in 0..h as isize {
                        for xx in 0..w as isize {
                            let (mut s, mut cnt) = (0.0, 0.0);
                            for dy in -r..=r {
                                for dx in -r..=r {
                                    let (yy, xs) = (y + dy, xx + dx);
                                    if yy >= 0 && yy < h as isize && xs >= 0 && xs < w as isize {
                                        s += src[yy as usize * w + xs as usize];
                                        cnt += 1.0;
                                    }
                                }
                            }
                            out.data_mut()[plane * h * w + y as usize * w + xx as usize] = s / cnt;
                        }
                    }
                }
                out
            }
            Corruption::Contrast { factor } => {
                let m = x.sum() / x.numel() as f64;
                x.map(|v| m + factor * (v - m))
            }
            Corruption::Quantize { levels } => {
                if levels < 2 {
                    return Err(Error::config("quantize needs at least 2 levels"));
                }
                let q = (levels - 1) as f64;
                x.map(|v| (v * q).round() / q)
            }
        };
        Ok(out.map(|v| v.clamp(0.0, 1.0)))
    }
}

/// One draw of the estimator experiment under the appendix assumptions:
/// per pixel `μ ~ U(0.2, 0.8)`, `σ ~ U(0, σ_max)`, prediction `μ + σ·N(0,1)`,
/// truth `μ + B·N(0,1)`. Errors are clipped to `[0, 1]`. Returns
/// `(mean |error|, √(2/π)·mean σ_B)`.
pub fn simulate_error_estimate(n: usize, sigma_max: f64, b: f64, seed: u64) -> Result<(f64, f64)> {
    let mut rng = seed::child_rng(seed, "detector.theorem", 0);
    let mut sigmas = Vec::with_capacity(n);
    let mut err = 0.0;
    for _ in 0..n {
        let mu: f64 = rng.random_range(0.2..0.8);
        let sigma: f64 = rng.random_range(0.0..sigma_max);
        let z0 = mu + sigma * rng.sample::<f64, _>(StandardNormal);
        let y = mu + b * rng.sample::<f64, _>(StandardNormal);
        err += (z0 - y).abs().min(1.0);
        sigmas.push(sigma);
    }
    Ok((err / n as f64, error_estimate(&sigmas, b)?))
}
