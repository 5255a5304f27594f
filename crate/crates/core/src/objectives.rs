//! Self-supervised objectives evaluated at test time.
//!
//! * equivariance: per-position cosine between `g⁻¹(F(g(x)))` and `F(x)`,
//!   averaged over the overlap region, summed over transforms;
//! * invariance: cosine between globally pooled `F(g(x))` and `F(x)`;
//! * adaptive: task loss plus a weighted equivariance term.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{task_loss, Network};
use crate::seed;
use crate::tensor::{Graph, Tensor, Var};
use crate::transform::TransformSpec;

/// Optional random subsampling of the dense constraint map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSample {
    /// Fraction of valid positions kept, in `(0, 1]`; `None` keeps all.
    #[serde(default)]
    pub fraction: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl ConstraintSample {
    pub fn full() -> Self {
        Self::default()
    }

    pub fn fraction(fraction: f64, seed: u64) -> Self {
        Self {
            fraction: Some(fraction),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.fraction {
            Some(f) if !(f > 0.0 && f <= 1.0) => {
                Err(Error::config(format!("sample fraction {f} outside (0, 1]")))
            }
            _ => Ok(()),
        }
    }

    /// Restrict `mask` to a uniform random subset of its valid positions.
    fn select(&self, mask: &Tensor, stream: u64) -> Tensor {
        let Some(fraction) = self.fraction.filter(|&f| f < 1.0) else {
            return mask.clone();
        };
        let valid: Vec<usize> = mask
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &m)| m > 0.5)
            .map(|(i, _)| i)
            .collect();
        if valid.is_empty() {
            return mask.clone();
        }
        let keep = ((valid.len() as f64 * fraction).round() as usize).clamp(1, valid.len());
        let mut rng = seed::child_rng(self.seed, "constraints", stream);
        let mut out = Tensor::zeros(mask.shape());
        for k in sample(&mut rng, valid.len(), keep) {
            out.data_mut()[valid[k]] = 1.0;
        }
        out
    }

    /// Number of constraints kept out of `valid` available positions.
    pub fn kept(&self, valid: usize) -> usize {
        match self.fraction.filter(|&f| f < 1.0) {
            Some(f) if valid > 0 => ((valid as f64 * f).round() as usize).clamp(1, valid),
            _ => valid,
        }
    }
}

/// Equivariance loss recorded on a graph.
#[derive(Clone, Debug)]
pub struct EquivarianceTerm {
    pub loss: Var,
    /// Per-transform mean cosine, `0.0` for skipped transforms.
    pub per_transform: Vec<f64>,
    /// Number of constraints (positions) used per transform.
    pub constraints: Vec<usize>,
    /// Transforms skipped because their overlap region was empty.
    pub skipped: Vec<usize>,
}

fn repeat_mask(mask: &Tensor, n: usize) -> Tensor {
    if n == 1 {
        return mask.clone();
    }
    let mut shape = mask.shape().to_vec();
    shape[0] = n;
    let per = mask.numel();
    Tensor::from_fn(&shape, |k| mask.data()[k % per])
}

/// `Σ_i mean_valid cos(g_i⁻¹ ∘ F ∘ g_i(x), F(x))`.
pub fn equivariance_loss(
    net: &dyn Network,
    g: &mut Graph,
    x: Var,
    specs: &[TransformSpec],
    sample: &ConstraintSample,
) -> Result<EquivarianceTerm> {
    if specs.is_empty() {
        return Err(Error::Empty("equivariance_loss transforms"));
    }
    sample.validate()?;
    let (n, _, img_h, img_w) = g.value(x).dims4("equivariance_loss")?;
    let reference = net.features(g, x)?;
    let (_, _, fh, fw) = g.value(reference).dims4("equivariance_loss features")?;
    let mut total: Option<Var> = None;
    let mut per_transform = Vec::with_capacity(specs.len());
    let mut constraints = Vec::with_capacity(specs.len());
    let mut skipped = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        let warped = spec.apply(g, x)?;
        let feat = net.features(g, warped.output)?;
        let back = spec.apply_inverse_to_features(g, feat, fh, fw)?;
        let overlap = spec.overlap_mask(img_h, img_w, fh, fw)?;
        let both = overlap.zip_map(&back.validity_mask.batch_item(0), |a, b| a * b)?;
        let selected = repeat_mask(&sample.select(&both, i as u64), n);
        let count = selected.sum();
        if count == 0.0 {
            log::warn!(
                "transform {} has an empty overlap region; it contributes 0",
                spec.label()
            );
            skipped.push(i);
            per_transform.push(0.0);
            constraints.push(0);
            continue;
        }
        let cos = g.cosine_similarity(back.output, reference)?;
        let masked = g.mul_const(cos, &selected)?;
        let s = g.sum(masked)?;
        let term = g.mul_scalar(s, 1.0 / count)?;
        per_transform.push(g.value(term).item());
        constraints.push(count as usize);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    let loss = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    Ok(EquivarianceTerm {
        loss,
        per_transform,
        constraints,
        skipped,
    })
}

/// `Σ_i cos(gap(F(g_i(x))), gap(F(x)))`, averaged over the batch.
pub fn invariance_loss(
    net: &dyn Network,
    g: &mut Graph,
    x: Var,
    specs: &[TransformSpec],
) -> Result<Var> {
    if specs.is_empty() {
        return Err(Error::Empty("invariance_loss transforms"));
    }
    let reference = net.features(g, x)?;
    let pooled_ref = g.avg_pool_global(reference)?;
    let mut total: Option<Var> = None;
    for spec in specs {
        let warped = spec.apply(g, x)?;
        let feat = net.features(g, warped.output)?;
        let pooled = g.avg_pool_global(feat)?;
        let cos = g.cosine_similarity(pooled, pooled_ref)?;
        let term = g.mean(cos)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total.expect("non-empty transform list"))
}

/// `L_t(x, y) + λ_e · L_equi(x)`.
pub fn adaptive_objective(
    net: &dyn Network,
    g: &mut Graph,
    x: Var,
    y: &[usize],
    specs: &[TransformSpec],
    lambda_e: f64,
) -> Result<Var> {
    if !(lambda_e >= 0.0) {
        return Err(Error::config(format!(
            "lambda_e must be >= 0, got {lambda_e}"
        )));
    }
    let task = task_loss(net, g, x, y)?;
    if lambda_e == 0.0 {
        return Ok(task);
    }
    let equi = equivariance_loss(net, g, x, specs, &ConstraintSample::full())?;
    let weighted = g.mul_scalar(equi.loss, lambda_e)?;
    g.add(task, weighted)
}

/// Value of the equivariance loss on a plain tensor.
pub fn equivariance_value(
    net: &dyn Network,
    x: &Tensor,
    specs: &[TransformSpec],
    sample: &ConstraintSample,
) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let t = equivariance_loss(net, &mut g, xv, specs, sample)?;
    Ok(g.value(t.loss).item())
}

pub fn invariance_value(net: &dyn Network, x: &Tensor, specs: &[TransformSpec]) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let v = invariance_loss(net, &mut g, xv, specs)?;
    Ok(g.value(v).item())
}

/// Equivariance score normalized by the number of transforms, in `[-1, 1]`.
pub fn normalized_equivariance(
    net: &dyn Network,
    x: &Tensor,
    specs: &[TransformSpec],
) -> Result<f64> {
    Ok(equivariance_value(net, x, specs, &ConstraintSample::full())? / specs.len() as f64)
}

/// Mean normalized equivariance score over a set of images.
pub fn measure_equivariance(
    net: &dyn Network,
    images: &[Tensor],
    specs: &[TransformSpec],
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Empty("measure_equivariance"));
    }
    let scores = crate::parallel::try_map_indexed(images.len(), |i| {
        normalized_equivariance(net, &images[i], specs)
    })?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Objective value and its gradient with respect to the input.
pub fn value_and_input_grad(
    x: &Tensor,
    build: impl FnOnce(&mut Graph, Var) -> Result<Var>,
) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let loss = build(&mut g, xv)?;
    let value = g.value(loss).item();
    if !g.requires_grad(loss) {
        return Ok((value, Tensor::zeros(x.shape())));
    }
    g.backward(loss)?;
    Ok((value, g.grad(xv).expect("input grad").clone()))
}


#[cfg(test)]
mod tests {
    use super::test_nets::*;
    use super::*;
    use crate::transform::default_transform_set;

    fn image(seed: u64) -> Tensor {
        Tensor::from_fn(&[1, 3, 16, 16], |k| {
            0.5 + 0.4 * ((k as f64 * 0.37 + seed as f64).sin())
        })
    }

    #[test]
    fn pointwise_net_is_exactly_flip_equivariant() {
        let net = Pointwise::new(3, 5, 2);
        let v = equivariance_value(
            &net,
            &image(1),
            &[TransformSpec::Hflip],
            &ConstraintSample::full(),
        )
        .unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn identity_transforms_give_k() {
        let net = Pointwise::new(3, 5, 2);
        let id = TransformSpec::Rotate { degrees: 0.0 };
        let specs = vec![id.clone(), id.clone(), id];
        let v = equivariance_value(&net, &image(2), &specs, &ConstraintSample::full()).unwrap();
        assert!((v - 3.0).abs() < 1e-12);
    }

    #[test]
    fn invariance_cases() {
        let net = Pointwise::new(3, 5, 2);
        let x = image(3);
        assert!(
            (invariance_value(&net, &x, &[TransformSpec::Rotate { degrees: 0.0 }]).unwrap() - 1.0)
                .abs()
                < 1e-12
        );
        assert!((invariance_value(&net, &x, &[TransformSpec::Hflip]).unwrap() - 1.0).abs() < 1e-12);
        let specs = default_transform_set(5);
        let v = invariance_value(&ConstantFeatures, &x, &specs).unwrap();
        assert!((v - specs.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn loss_is_bounded_by_transform_count() {
        let model = crate::nn::build_model(&crate::nn::ModelDescriptor::toy_seg(4, 4), 1).unwrap();
        let specs = default_transform_set(9);
        let v = equivariance_value(&model, &image(4), &specs, &ConstraintSample::full()).unwrap();
        assert!(v.abs() <= specs.len() as f64 + 1e-12);
    }

    #[test]
    fn order_of_transforms_does_not_matter() {
        let model = crate::nn::build_model(&crate::nn::ModelDescriptor::toy_seg(4, 4), 2).unwrap();
        let specs = default_transform_set(1);
        let mut rev = specs.clone();
        rev.reverse();
        let a = equivariance_value(&model, &image(5), &specs, &ConstraintSample::full()).unwrap();
        let b = equivariance_value(&model, &image(5), &rev, &ConstraintSample::full()).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn adaptive_with_zero_weight_is_task_loss() {
        let model = crate::nn::build_model(&crate::nn::ModelDescriptor::toy_seg(4, 4), 3).unwrap();
        let x = image(6);
        let y: Vec<usize> = (0..256).map(|i| i % 4).collect();
        let specs = default_transform_set(2);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let a = adaptive_objective(&model, &mut g, xv, &y, &specs, 0.0).unwrap();
        let t = task_loss(&model, &mut g, xv, &y).unwrap();
        assert_eq!(g.value(a).item().to_bits(), g.value(t).item().to_bits());

        let e = equivariance_loss(&model, &mut g, xv, &specs, &ConstraintSample::full()).unwrap();
        let big = adaptive_objective(&model, &mut g, xv, &y, &specs, 1000.0).unwrap();
        let expected = g.value(t).item() + 1000.0 * g.value(e.loss).item();
        assert!((g.value(big).item() - expected).abs() < 1e-9 * expected.abs().max(1.0));
        assert!(adaptive_objective(&model, &mut g, xv, &y, &specs, -1.0).is_err());
    }

    #[test]
    fn subsampling_keeps_requested_fraction() {
        let s = ConstraintSample::fraction(0.1, 4);
        let mask = Tensor::ones(&[1, 1, 10, 10]);
        let sel = s.select(&mask, 0);
        assert_eq!(sel.sum(), 10.0);
        assert_eq!(s.kept(100), 10);
        assert!(ConstraintSample::fraction(0.0, 0).validate().is_err());
        assert!(ConstraintSample::fraction(1.5, 0).validate().is_err());
    }

    #[test]
    fn measure_rejects_empty_and_is_duplicate_stable() {
        let net = Pointwise::new(3, 4, 2);
        let specs = default_transform_set(0);
        assert!(measure_equivariance(&net, &[], &specs).is_err());
        let x = image(8);
        let one = measure_equivariance(&net, &[x.clone()], &specs).unwrap();
        let two = measure_equivariance(&net, &[x.clone(), x], &specs).unwrap();
        assert!((one - two).abs() < 1e-12);
    }
}
