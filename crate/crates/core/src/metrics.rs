//! Segmentation/classification metrics and the small statistics used by the
//! harness (ranks, sign test, percentiles).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `num_classes × num_classes` confusion counts, rows = ground truth.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(
                "confusion",
                format!("{} predictions for {} labels", pred.len(), gt.len()),
            ));
        }
        let n = self.num_classes;
        for (&p, &t) in pred.iter().zip(gt) {
            for label in [p, t] {
                if label >= n {
                    return Err(Error::LabelOutOfRange { label, classes: n });
                }
            }
            self.counts[t * n + p] += 1;
        }
        Ok(())
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    /// Per-class IoU; `None` for classes absent from both prediction and truth.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        let n = self.num_classes;
        (0..n)
            .map(|c| {
                let tp = self.get(c, c);
                let gt: u64 = (0..n).map(|p| self.get(c, p)).sum();
                let pr: u64 = (0..n).map(|t| self.get(t, c)).sum();
                let union = gt + pr - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes present in truth or prediction, in `[0, 1]`.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return 0.0;
        }
        ious.iter().sum::<f64>() / ious.len() as f64
    }

    pub fn accuracy(&self) -> f64 {
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        (0..self.num_classes).map(|c| self.get(c, c)).sum::<u64>() as f64 / total as f64
    }
}

/// mIoU of a single label map.
pub fn miou(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(pred, gt)?;
    Ok(cm.miou())
}

pub fn accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape(
            "accuracy",
            format!("{} predictions for {} labels", pred.len(), gt.len()),
        ));
    }
    Ok(pred.iter().zip(gt).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64)
}

/// Average ranks (1-based), ties share their mean rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::shape(
            "spearman",
            format!("lengths {} and {}", x.len(), y.len()),
        ));
    }
    Ok(pearson(&ranks(x), &ranks(y)))
}

fn ln_choose(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    (0..k)
        .map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln())
        .sum()
}

/// One-sided sign test for `H1: median(diff) > 0`; zero differences are
/// dropped. Returns `P(Bin(n, 1/2) ≥ #positive)`.
pub fn sign_test(diffs: &[f64]) -> f64 {
    let pos = diffs.iter().filter(|&&d| d > 0.0).count() as u64;
    let n = pos + diffs.iter().filter(|&&d| d < 0.0).count() as u64;
    if n == 0 {
        return 1.0;
    }
    let ln_half_n = n as f64 * 0.5f64.ln();
    (pos..=n)
        .map(|k| (ln_choose(n, k) + ln_half_n).exp())
        .sum::<f64>()
        .min(1.0)
}

/// Linear-interpolation percentile, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("percentile"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q.clamp(0.0, 100.0) / 100.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}
