//! Training losses and their gradients with respect to network outputs.
//!
//! * semantic: negative expected log-likelihood of the true class under
//!   Dir(α), ψ(Σα) − ψ(α_Y), averaged over labeled pixels;
//! * KL variant: KL(Dir(α̃) ‖ Dir(1)) with the true-class entry of α set to 1;
//! * center: mean squared error against the Gaussian center heatmap;
//! * prototype: cross-entropy of the softmax over association scores;
//! * discriminative: variance / distance / regularization hinge terms.

mod gradcheck;
mod objective;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::Prototype;
use crate::special::{digamma_unchecked, lgamma_unchecked, trigamma_unchecked};

pub use gradcheck::{check_gradients, GradCheck};
pub use objective::{frozen_cross_inputs, image_objective, total_loss_and_gradients, LossReport, OutputGradNorms, TrainItem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_sem: f64,
    pub lambda_center: f64,
    pub lambda_proto: f64,
    pub lambda_disc: f64,
    pub lambda_var: f64,
    pub lambda_dist: f64,
    pub lambda_reg: f64,
    pub delta_v: f64,
    pub delta_d: f64,
    /// Weight of the Dirichlet KL regularizer; 0 disables it.
    pub lambda_kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_sem: 1.0,
            lambda_center: 200.0,
            lambda_proto: 1.0,
            lambda_disc: 1.0,
            lambda_var: 1.0,
            lambda_dist: 1.0,
            lambda_reg: 0.001,
            delta_v: 0.5,
            delta_d: 1.5,
            lambda_kl: 0.0,
        }
    }
}

impl LossWeights {
    /// Constant KL weight used when the regularizer is switched on.
    pub const KL_VARIANT_WEIGHT: f64 = 0.1;

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_sem,
            self.lambda_center,
            self.lambda_proto,
            self.lambda_disc,
            self.lambda_var,
            self.lambda_dist,
            self.lambda_reg,
            self.lambda_kl,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if !(self.delta_v > 0.0 && self.delta_d > self.delta_v && self.delta_d.is_finite()) {
            return Err(Error::Config(format!("margins need 0 < delta_v ({}) < delta_d ({})", self.delta_v, self.delta_d)));
        }
        Ok(())
    }
}

/// Whether a ground-truth label takes part in the semantic losses.
fn labeled(class: u8, num_classes: usize) -> bool {
    (class as usize) < num_classes
}

/// A loss value over labeled pixels. `all_ignored` flags the degenerate case
/// where every pixel was ignored and the value is defined as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedMean {
    pub value: f64,
    pub count: usize,
    pub all_ignored: bool,
}

/// Mean of ψ(Σα) − ψ(α_Y) over pixels whose label is a known class.
pub fn semantic_loss(alpha: ArrayView2<f64>, gt: &[u8]) -> Result<MaskedMean> {
    Ok(semantic_loss_and_grad(alpha, gt, false)?.0)
}

/// Also returns dL/dα (same shape as `alpha`) when `with_grad` is set.
pub(crate) fn semantic_loss_and_grad(alpha: ArrayView2<f64>, gt: &[u8], with_grad: bool) -> Result<(MaskedMean, Option<Array2<f64>>)> {
    check_alpha(alpha, gt)?;
    let k = alpha.ncols();
    let count = gt.iter().filter(|&&y| labeled(y, k)).count();
    let mut sum = 0.0;
    let mut grad = with_grad.then(|| Array2::zeros(alpha.raw_dim()));
    for (i, row) in alpha.rows().into_iter().enumerate() {
        let y = gt[i];
        if !labeled(y, k) {
            continue;
        }
        let total: f64 = row.sum();
        sum += digamma_unchecked(total) - digamma_unchecked(row[y as usize]);
        if let Some(g) = grad.as_mut() {
            let scale = 1.0 / count as f64;
            let common = trigamma_unchecked(total) * scale;
            for j in 0..k {
                g[[i, j]] = common;
            }
            g[[i, y as usize]] -= trigamma_unchecked(row[y as usize]) * scale;
        }
    }
    let value = if count == 0 { 0.0 } else { sum / count as f64 };
    Ok((MaskedMean { value, count, all_ignored: count == 0 }, grad))
}

fn check_alpha(alpha: ArrayView2<f64>, gt: &[u8]) -> Result<()> {
    if alpha.nrows() != gt.len() {
        return Err(Error::Dimension(format!("{} concentration rows vs {} labels", alpha.nrows(), gt.len())));
    }
    if alpha.iter().any(|&a| !(a >= 1.0) || !a.is_finite()) {
        return Err(Error::Domain("concentrations must be finite and >= 1".into()));
    }
    Ok(())
}

/// KL(Dir(a) ‖ Dir(1, …, 1)).
pub fn dirichlet_kl_to_uniform(a: ArrayView1<f64>) -> f64 {
    let k = a.len() as f64;
    let total: f64 = a.sum();
    let psi_total = digamma_unchecked(total);
    lgamma_unchecked(total) - a.iter().map(|&x| lgamma_unchecked(x)).sum::<f64>() - lgamma_unchecked(k)
        + a.iter().map(|&x| (x - 1.0) * (digamma_unchecked(x) - psi_total)).sum::<f64>()
}

/// Mean over labeled pixels of KL(Dir(α̃) ‖ Dir(1)), where α̃ equals α with
/// the true-class entry replaced by 1.
pub fn kl_regularizer(alpha: ArrayView2<f64>, gt: &[u8]) -> Result<MaskedMean> {
    Ok(kl_and_grad(alpha, gt, false)?.0)
}

pub(crate) fn kl_and_grad(alpha: ArrayView2<f64>, gt: &[u8], with_grad: bool) -> Result<(MaskedMean, Option<Array2<f64>>)> {
    check_alpha(alpha, gt)?;
    let k = alpha.ncols();
    let count = gt.iter().filter(|&&y| labeled(y, k)).count();
    let mut sum = 0.0;
    let mut grad = with_grad.then(|| Array2::zeros(alpha.raw_dim()));
    let mut tilde = ndarray::Array1::zeros(k);
    for (i, row) in alpha.rows().into_iter().enumerate() {
        let y = gt[i];
        if !labeled(y, k) {
            continue;
        }
        tilde.assign(&row);
        tilde[y as usize] = 1.0;
        sum += dirichlet_kl_to_uniform(tilde.view());
        if let Some(g) = grad.as_mut() {
            let scale = 1.0 / count as f64;
            let total: f64 = tilde.sum();
            let shared = (total - k as f64) * trigamma_unchecked(total);
            for j in 0..k {
                if j != y as usize {
                    g[[i, j]] = ((tilde[j] - 1.0) * trigamma_unchecked(tilde[j]) - shared) * scale;
                }
            }
        }
    }
    let value = if count == 0 { 0.0 } else { sum / count as f64 };
    Ok((MaskedMean { value, count, all_ignored: count == 0 }, grad))
}

/// Mean squared error between predicted and target center heatmaps.
pub fn center_loss(center_hat: &[f64], center_gt: &[f64]) -> Result<f64> {
    if center_hat.len() != center_gt.len() {
        return Err(Error::Dimension(format!("center heatmaps differ in size: {} vs {}", center_hat.len(), center_gt.len())));
    }
    if center_hat.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = center_hat.iter().zip(center_gt).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / center_hat.len() as f64)
}

/// Relaxed association scores −‖φ − μ_ω‖² / (2σ²_ω), one per prototype.
pub fn association_scores(embed: &[f64], prototypes: &[Prototype]) -> Result<Vec<f64>> {
    if prototypes.is_empty() {
        return Err(Error::Empty("prototype set".into()));
    }
    prototypes
        .iter()
        .map(|p| {
            if !(p.var > 0.0) {
                return Err(Error::Domain(format!("prototype variance must be > 0, got {}", p.var)));
            }
            if p.mu.len() != embed.len() {
                return Err(Error::Dimension(format!("embedding has {} dims, prototype {}", embed.len(), p.mu.len())));
            }
            Ok(score(embed, &p.mu, p.var))
        })
        .collect()
}

pub(crate) fn score(embed: &[f64], mu: &[f64], var: f64) -> f64 {
    let d2: f64 = embed.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
    -d2 / (2.0 * var)
}

/// −ln softmax(scores)[label], computed stably.
pub(crate) fn cross_entropy(scores: &[f64], label: usize) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    lse - scores[label]
}

/// Mean prototype cross-entropy over pixels with a pseudo-label.
/// `labels[i]` indexes into `prototypes`; `None` skips the pixel.
pub fn prototype_loss(embed: ArrayView2<f64>, prototypes: &[Prototype], labels: &[Option<usize>]) -> Result<f64> {
    if prototypes.is_empty() {
        return Err(Error::Empty("prototype set".into()));
    }
    if embed.nrows() != labels.len() {
        return Err(Error::Dimension(format!("{} embeddings vs {} labels", embed.nrows(), labels.len())));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (row, label) in embed.rows().into_iter().zip(labels) {
        let Some(label) = *label else { continue };
        let phi = row.to_vec();
        let scores = association_scores(&phi, prototypes)?;
        sum += cross_entropy(&scores, label);
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Discriminative loss terms. `total` is already weighted.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DiscriminativeLoss {
    pub total: f64,
    pub variance: f64,
    pub distance: f64,
    pub regularization: f64,
    /// Number of empty groups that were skipped.
    pub skipped_groups: usize,
}

/// Discriminative loss over groups of embedding rows (instances and stuff
/// classes). Empty groups are skipped and counted.
pub fn discriminative_loss(embed: ArrayView2<f64>, groups: &[Vec<usize>], weights: &LossWeights) -> DiscriminativeLoss {
    discriminative_loss_and_grad(embed, groups, weights, false).0
}

pub(crate) fn discriminative_loss_and_grad(
    embed: ArrayView2<f64>,
    groups: &[Vec<usize>],
    weights: &LossWeights,
    with_grad: bool,
) -> (DiscriminativeLoss, Option<Array2<f64>>) {
    let f = embed.ncols();
    let live: Vec<&Vec<usize>> = groups.iter().filter(|g| !g.is_empty()).collect();
    let skipped_groups = groups.len() - live.len();
    let mut grad = with_grad.then(|| Array2::zeros(embed.raw_dim()));
    let n = live.len();
    if n == 0 {
        return (DiscriminativeLoss { skipped_groups, ..Default::default() }, grad);
    }
    let means: Vec<Vec<f64>> = live
        .iter()
        .map(|g| {
            let mut m = vec![0.0; f];
            for &i in g.iter() {
                m.iter_mut().zip(embed.row(i)).for_each(|(a, b)| *a += b);
            }
            m.iter_mut().for_each(|a| *a /= g.len() as f64);
            m
        })
        .collect();
    // Gradient with respect to each group mean, pushed to members at the end.
    let mut dmeans = vec![vec![0.0; f]; n];
    let (lv, ld, lr) = (weights.lambda_var, weights.lambda_dist, weights.lambda_reg);

    let mut variance = 0.0;
    for (gi, g) in live.iter().enumerate() {
        let mut group_sum = 0.0;
        let scale = 1.0 / (n as f64 * g.len() as f64);
        for &i in g.iter() {
            let diff: Vec<f64> = means[gi].iter().zip(embed.row(i)).map(|(m, p)| m - p).collect();
            let dist = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
            let hinge = dist - weights.delta_v;
            if hinge <= 0.0 {
                continue;
            }
            group_sum += hinge * hinge;
            if let Some(gr) = grad.as_mut() {
                let coef = lv * scale * 2.0 * hinge / dist;
                for (j, d) in diff.iter().enumerate() {
                    gr[[i, j]] -= coef * d;
                    dmeans[gi][j] += coef * d;
                }
            }
        }
        variance += group_sum / g.len() as f64;
    }
    variance /= n as f64;

    let mut distance = 0.0;
    if n > 1 {
        let pairs = (n * (n - 1)) as f64;
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                let diff: Vec<f64> = means[a].iter().zip(&means[b]).map(|(x, y)| x - y).collect();
                let dist = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
                let hinge = 2.0 * weights.delta_d - dist;
                if hinge <= 0.0 {
                    continue;
                }
                distance += hinge * hinge;
                if with_grad && dist > 0.0 {
                    let coef = ld * 2.0 * hinge / (dist * pairs);
                    for j in 0..f {
                        dmeans[a][j] -= coef * diff[j];
                        dmeans[b][j] += coef * diff[j];
                    }
                }
            }
        }
        distance /= pairs;
    }

    let mut regularization = 0.0;
    for (gi, m) in means.iter().enumerate() {
        let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        regularization += norm;
        if with_grad && norm > 0.0 {
            for j in 0..f {
                dmeans[gi][j] += lr * m[j] / (norm * n as f64);
            }
        }
    }
    regularization /= n as f64;

    if let Some(gr) = grad.as_mut() {
        for (gi, g) in live.iter().enumerate() {
            let share = 1.0 / g.len() as f64;
            for &i in g.iter() {
                for j in 0..f {
                    gr[[i, j]] += dmeans[gi][j] * share;
                }
            }
        }
    }
    let total = lv * variance + ld * distance + lr * regularization;
    (DiscriminativeLoss { total, variance, distance, regularization, skipped_groups }, grad)
}
