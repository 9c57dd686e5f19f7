//! The combined training objective over a batch of images, with gradients
//! backpropagated through the network.

use std::collections::BTreeMap;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cross_entropy, discriminative_loss_and_grad, kl_and_grad, semantic_loss_and_grad, LossWeights};
use crate::error::{Error, Result};
use crate::model::{backward, extract_features, forward_batch, Activations, CrossInputs, ModelParams, OutputGrads, MIN_PROTO_VAR};
use crate::scene::Sample;
use crate::special::{sigmoid, softplus};

/// One training image and the pixels the losses are evaluated on.
#[derive(Debug, Clone)]
pub struct TrainItem<'a> {
    pub sample: &'a Sample,
    /// Ground-truth center heatmap over the whole image.
    pub heatmap: &'a [f64],
    /// Sorted flat pixel indices. Ground-truth center pixels must be present
    /// for their instance to get a prototype.
    pub pixels: Vec<usize>,
}

impl<'a> TrainItem<'a> {
    pub fn full(sample: &'a Sample, heatmap: &'a [f64]) -> Self {
        Self { sample, heatmap, pixels: (0..sample.num_pixels()).collect() }
    }
}

/// Norms of each term's gradient with respect to the network outputs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OutputGradNorms {
    pub semantic: f64,
    pub center: f64,
    pub prototype: f64,
    pub discriminative: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(rename = "L_s")]
    pub l_s: f64,
    #[serde(rename = "L_o")]
    pub l_o: f64,
    #[serde(rename = "L_p")]
    pub l_p: f64,
    #[serde(rename = "L_d")]
    pub l_d: f64,
    #[serde(rename = "L_va")]
    pub l_va: f64,
    #[serde(rename = "L_di")]
    pub l_di: f64,
    #[serde(rename = "L_re")]
    pub l_re: f64,
    #[serde(rename = "L_kl")]
    pub l_kl: f64,
    pub total: f64,
    pub grad_norms: OutputGradNorms,
    /// Images in which every pixel was ignored by the semantic loss.
    pub all_ignored_images: usize,
    pub skipped_groups: usize,
}

impl LossReport {
    fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.lambda_sem * self.l_s
            + w.lambda_center * self.l_o
            + w.lambda_proto * self.l_p
            + w.lambda_disc * self.l_d
            + w.lambda_kl * self.l_kl
    }

    fn check_finite(&self) -> Result<()> {
        let terms =
            [("L_s", self.l_s), ("L_o", self.l_o), ("L_p", self.l_p), ("L_d", self.l_d), ("L_kl", self.l_kl), ("total", self.total)];
        match terms.iter().find(|(_, v)| !v.is_finite()) {
            Some((name, _)) => Err(Error::NonFiniteLoss(name)),
            None => Ok(()),
        }
    }

    /// Mean of reports, summed in the given order.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut out = LossReport::default();
        for r in reports {
            out.l_s += r.l_s;
            out.l_o += r.l_o;
            out.l_p += r.l_p;
            out.l_d += r.l_d;
            out.l_va += r.l_va;
            out.l_di += r.l_di;
            out.l_re += r.l_re;
            out.l_kl += r.l_kl;
            out.total += r.total;
            out.grad_norms.semantic += r.grad_norms.semantic;
            out.grad_norms.center += r.grad_norms.center;
            out.grad_norms.prototype += r.grad_norms.prototype;
            out.grad_norms.discriminative += r.grad_norms.discriminative;
            out.grad_norms.kl += r.grad_norms.kl;
            out.all_ignored_images += r.all_ignored_images;
            out.skipped_groups += r.skipped_groups;
        }
        for v in [
            &mut out.l_s,
            &mut out.l_o,
            &mut out.l_p,
            &mut out.l_d,
            &mut out.l_va,
            &mut out.l_di,
            &mut out.l_re,
            &mut out.l_kl,
            &mut out.total,
            &mut out.grad_norms.semantic,
            &mut out.grad_norms.center,
            &mut out.grad_norms.prototype,
            &mut out.grad_norms.discriminative,
            &mut out.grad_norms.kl,
        ] {
            *v /= n;
        }
        out
    }
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum GroupKey {
    Instance(u16),
    Stuff(u8),
}

/// Ground-truth structure of the evaluated rows.
struct RowLabels {
    /// Semantic label per row; unknown classes are mapped to the ignore value.
    semantic: Vec<u8>,
    /// Member rows per group, instances in center order, then stuff by id.
    groups: Vec<Vec<usize>>,
    keys: Vec<GroupKey>,
    /// Group index per row, if the row belongs to one.
    group_of: Vec<Option<usize>>,
    /// Row holding each instance group's center pixel.
    center_row: BTreeMap<u16, usize>,
}

fn row_labels(item: &TrainItem<'_>, num_classes: usize, num_stuff: usize) -> RowLabels {
    let s = item.sample;
    let semantic: Vec<u8> = item
        .pixels
        .iter()
        .map(|&p| {
            let c = s.semantic_map[p];
            if (c as usize) < num_classes {
                c
            } else {
                crate::scene::IGNORE_LABEL
            }
        })
        .collect();
    let mut keys: Vec<GroupKey> =
        s.centers.iter().filter(|c| (c.class_id as usize) < num_classes).map(|c| GroupKey::Instance(c.instance_id)).collect();
    let mut stuff_present: Vec<u8> = semantic.iter().copied().filter(|&c| (c as usize) < num_stuff).collect();
    stuff_present.sort_unstable();
    stuff_present.dedup();
    keys.extend(stuff_present.into_iter().map(GroupKey::Stuff));
    let index: BTreeMap<GroupKey, usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();

    let mut groups = vec![Vec::new(); keys.len()];
    let mut group_of = vec![None; item.pixels.len()];
    for (row, &p) in item.pixels.iter().enumerate() {
        let c = semantic[row];
        if c as usize >= num_classes {
            continue;
        }
        let key = if (c as usize) < num_stuff { GroupKey::Stuff(c) } else { GroupKey::Instance(s.instance_map[p]) };
        if let Some(&g) = index.get(&key) {
            groups[g].push(row);
            group_of[row] = Some(g);
        }
    }
    let mut center_row = BTreeMap::new();
    for c in &s.centers {
        let p = c.row as usize * s.width + c.col as usize;
        if let Ok(row) = item.pixels.binary_search(&p) {
            center_row.insert(c.instance_id, row);
        }
    }
    RowLabels { semantic, groups, keys, group_of, center_row }
}

/// Prototype built from the network outputs, remembering where it came from
/// so gradients can be routed back.
struct TrainPrototype {
    mu: Vec<f64>,
    var: f64,
    /// Rows whose prototype-head outputs are averaged into this prototype.
    sources: Vec<usize>,
}

fn clamped_var(pre: f64) -> (f64, f64) {
    let v = softplus(pre);
    if v > MIN_PROTO_VAR {
        (v, sigmoid(pre))
    } else {
        (MIN_PROTO_VAR, 0.0)
    }
}

/// Prototype-loss value; accumulates its gradient into `up` when asked.
fn prototype_term(acts: &Activations, labels: &RowLabels, up: Option<&mut OutputGrads>) -> f64 {
    let f = acts.embed.ncols();
    // Prototype per group, when it can be formed.
    let mut protos: Vec<TrainPrototype> = Vec::new();
    let mut proto_of_group: Vec<Option<usize>> = vec![None; labels.groups.len()];
    for (g, key) in labels.keys.iter().enumerate() {
        let sources = match key {
            GroupKey::Instance(id) => match labels.center_row.get(id) {
                Some(&row) => vec![row],
                None => continue,
            },
            GroupKey::Stuff(_) => labels.groups[g].clone(),
        };
        if sources.is_empty() {
            continue;
        }
        let n = sources.len() as f64;
        let mut mu = vec![0.0; f];
        let mut var = 0.0;
        for &r in &sources {
            mu.iter_mut().zip(acts.proto_mu.row(r)).for_each(|(a, b)| *a += b);
            var += clamped_var(acts.proto_var_pre[[r, 0]]).0;
        }
        mu.iter_mut().for_each(|a| *a /= n);
        proto_of_group[g] = Some(protos.len());
        protos.push(TrainPrototype { mu, var: var / n, sources });
    }

    let labeled: Vec<(usize, usize)> =
        labels.group_of.iter().enumerate().filter_map(|(row, g)| g.and_then(|g| proto_of_group[g]).map(|p| (row, p))).collect();
    if labeled.is_empty() || protos.is_empty() {
        return 0.0;
    }
    let m = labeled.len() as f64;
    let mut dmu = vec![vec![0.0; f]; protos.len()];
    let mut dvar = vec![0.0; protos.len()];
    let mut sum = 0.0;
    let mut up = up;
    let mut scores = vec![0.0; protos.len()];
    let mut d2 = vec![0.0; protos.len()];
    for &(row, label) in &labeled {
        let phi = acts.embed.row(row);
        for (k, p) in protos.iter().enumerate() {
            d2[k] = phi.iter().zip(&p.mu).map(|(a, b)| (a - b) * (a - b)).sum();
            scores[k] = -d2[k] / (2.0 * p.var);
        }
        sum += cross_entropy(&scores, label);
        if let Some(up) = up.as_deref_mut() {
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for (k, p) in protos.iter().enumerate() {
                let ds = (((scores[k] - max).exp() / z) - f64::from(u8::from(k == label))) / m;
                if ds == 0.0 {
                    continue;
                }
                for j in 0..f {
                    let diff = phi[j] - p.mu[j];
                    up.embed[[row, j]] -= ds * diff / p.var;
                    dmu[k][j] += ds * diff / p.var;
                }
                dvar[k] += ds * d2[k] / (2.0 * p.var * p.var);
            }
        }
    }
    if let Some(up) = up {
        for (k, p) in protos.iter().enumerate() {
            let share = 1.0 / p.sources.len() as f64;
            for &r in &p.sources {
                for (j, d) in dmu[k].iter().enumerate() {
                    up.proto_mu[[r, j]] += d * share;
                }
                up.proto_var_pre[[r, 0]] += dvar[k] * share * clamped_var(acts.proto_var_pre[[r, 0]]).1;
            }
        }
    }
    sum / m
}

/// Cross-branch inputs of an item at the given parameters, for evaluating the
/// objective with the concatenated branch outputs held fixed.
pub fn frozen_cross_inputs(params: &ModelParams, item: &TrainItem<'_>) -> CrossInputs {
    let x = extract_features(item.sample.image_ref(), &item.pixels, &params.arch.features);
    forward_batch(params, x, None).cross_inputs()
}

/// Loss report for one image, plus the parameter gradient when `with_grad`.
pub fn image_objective(
    params: &ModelParams,
    item: &TrainItem<'_>,
    weights: &LossWeights,
    frozen: Option<&CrossInputs>,
    with_grad: bool,
) -> Result<(LossReport, Option<ModelParams>)> {
    let arch = &params.arch;
    let n = item.pixels.len();
    if n == 0 {
        return Err(Error::Empty("evaluated pixel set".into()));
    }
    if item.heatmap.len() != item.sample.num_pixels() {
        return Err(Error::Dimension("center heatmap does not match the image".into()));
    }
    let x = extract_features(item.sample.image_ref(), &item.pixels, &arch.features);
    let acts = forward_batch(params, x, frozen);
    let labels = row_labels(item, arch.num_classes, arch.num_stuff);
    let act = arch.activation;
    let alpha = acts.sem_logits.mapv(|z| act.apply(z) + 1.0);

    let mut up = with_grad.then(|| OutputGrads::zeros(n, arch));
    let mut report = LossReport::default();

    let (sem, dalpha) = semantic_loss_and_grad(alpha.view(), &labels.semantic, with_grad)?;
    report.l_s = sem.value;
    report.all_ignored_images = usize::from(sem.all_ignored);
    if let (Some(up), Some(da)) = (up.as_mut(), dalpha) {
        let mut dz = da;
        dz.zip_mut_with(&acts.sem_logits, |d, &z| *d *= act.derivative(z));
        report.grad_norms.semantic = frobenius(&dz);
        up.sem_logits.scaled_add(weights.lambda_sem, &dz);
    }

    if weights.lambda_kl > 0.0 {
        let (kl, dalpha) = kl_and_grad(alpha.view(), &labels.semantic, with_grad)?;
        report.l_kl = kl.value;
        if let (Some(up), Some(da)) = (up.as_mut(), dalpha) {
            let mut dz = da;
            dz.zip_mut_with(&acts.sem_logits, |d, &z| *d *= act.derivative(z));
            report.grad_norms.kl = frobenius(&dz);
            up.sem_logits.scaled_add(weights.lambda_kl, &dz);
        }
    }

    let mut center_sq = 0.0;
    let mut dcenter = with_grad.then(|| Array2::zeros((n, 1)));
    for (row, &p) in item.pixels.iter().enumerate() {
        let c = sigmoid(acts.center_pre[[row, 0]]);
        let diff = c - item.heatmap[p];
        center_sq += diff * diff;
        if let Some(d) = dcenter.as_mut() {
            d[[row, 0]] = 2.0 * diff * c * (1.0 - c) / n as f64;
        }
    }
    report.l_o = center_sq / n as f64;
    if let (Some(up), Some(d)) = (up.as_mut(), dcenter) {
        report.grad_norms.center = frobenius(&d);
        up.center_pre.scaled_add(weights.lambda_center, &d);
    }

    if let Some(up) = up.as_mut() {
        let mut own = OutputGrads::zeros(n, arch);
        report.l_p = prototype_term(&acts, &labels, Some(&mut own));
        report.grad_norms.prototype =
            (frobenius(&own.embed).powi(2) + frobenius(&own.proto_mu).powi(2) + frobenius(&own.proto_var_pre).powi(2)).sqrt();
        up.embed.scaled_add(weights.lambda_proto, &own.embed);
        up.proto_mu.scaled_add(weights.lambda_proto, &own.proto_mu);
        up.proto_var_pre.scaled_add(weights.lambda_proto, &own.proto_var_pre);
    } else {
        report.l_p = prototype_term(&acts, &labels, None);
    }

    let (disc, dembed) = discriminative_loss_and_grad(acts.embed.view(), &labels.groups, weights, with_grad);
    report.l_d = disc.total;
    report.l_va = disc.variance;
    report.l_di = disc.distance;
    report.l_re = disc.regularization;
    report.skipped_groups = disc.skipped_groups;
    if let (Some(up), Some(d)) = (up.as_mut(), dembed) {
        report.grad_norms.discriminative = frobenius(&d);
        up.embed.scaled_add(weights.lambda_disc, &d);
    }

    report.total = report.weighted_total(weights);
    report.check_finite()?;

    let grad = up.map(|up| {
        let mut g = params.zeros_like();
        backward(params, &acts, &up, &mut g);
        g
    });
    Ok((report, grad))
}

/// Batch objective: per-image losses and gradients averaged over the batch.
/// Images run in parallel; the reduction order is fixed, so the result does
/// not depend on the worker count.
pub fn total_loss_and_gradients(params: &ModelParams, batch: &[TrainItem<'_>], weights: &LossWeights) -> Result<(LossReport, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch".into()));
    }
    let per_image: Vec<(LossReport, Option<ModelParams>)> =
        batch.par_iter().map(|item| image_objective(params, item, weights, None, true)).collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut grad = params.zeros_like();
    let mut reports = Vec::with_capacity(per_image.len());
    for (report, g) in per_image {
        grad.add_scaled(&g.expect("gradient requested"), scale);
        reports.push(report);
    }
    Ok((LossReport::mean(&reports), grad))
}
