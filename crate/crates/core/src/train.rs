//! Adam training loop with a per-epoch exponential learning-rate decay.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{total_loss_and_gradients, LossReport, LossWeights, TrainItem};
use crate::model::ModelParams;
use crate::scene::{Sample, IGNORE_LABEL};

/// Losses above this are treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub epochs: usize,
    pub lr: f64,
    /// Learning-rate multiplier applied after every epoch.
    pub decay: f64,
    pub batch_size: usize,
    /// Pixels sampled per image and step, plus the ground-truth centers;
    /// 0 uses every pixel.
    pub pixels_per_image: usize,
    /// Width of the ground-truth center Gaussians, in pixels.
    pub sigma_g: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            decay: 0.98,
            batch_size: 8,
            pixels_per_image: 1024,
            sigma_g: 4.0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.decay > 0.0
            && self.decay <= 1.0
            && self.batch_size > 0
            && self.sigma_g > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training schedule: {self:?}")))
        }
    }

    /// Learning rate during epoch `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi(epoch as i32 - 1)
    }
}

/// One line of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_s")]
    pub l_s: f64,
    #[serde(rename = "L_o")]
    pub l_o: f64,
    #[serde(rename = "L_p")]
    pub l_p: f64,
    #[serde(rename = "L_va")]
    pub l_va: f64,
    #[serde(rename = "L_di")]
    pub l_di: f64,
    #[serde(rename = "L_re")]
    pub l_re: f64,
    #[serde(rename = "L_kl")]
    pub l_kl: f64,
    pub total: f64,
    pub lr: f64,
}

impl EpochRecord {
    fn new(epoch: usize, r: &LossReport, lr: f64) -> Self {
        Self { epoch, l_s: r.l_s, l_o: r.l_o, l_p: r.l_p, l_va: r.l_va, l_di: r.l_di, l_re: r.l_re, l_kl: r.l_kl, total: r.total, lr }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final parameters, or the last finite ones if training diverged.
    pub params: ModelParams,
    pub trace: Vec<EpochRecord>,
    pub reports: Vec<LossReport>,
    pub diverged: Option<Divergence>,
}

struct Adam {
    m: ModelParams,
    v: ModelParams,
    t: i32,
}

impl Adam {
    fn new(params: &ModelParams) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    fn step(&mut self, params: &mut ModelParams, grad: &ModelParams, lr: f64, s: &Schedule) {
        self.t += 1;
        let c1 = 1.0 - s.beta1.powi(self.t);
        let c2 = 1.0 - s.beta2.powi(self.t);
        let m = self.m.blocks_mut();
        let v = self.v.blocks_mut();
        for (((p, g), m), v) in params.blocks_mut().into_iter().zip(grad.blocks()).zip(m).zip(v) {
            for i in 0..p.len() {
                m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
                v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + s.adam_eps);
            }
        }
        params.round_to_f32();
    }
}

/// Sorted pixel subset: a uniform sample plus every ground-truth center.
pub fn sample_pixels(sample: &Sample, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = sample.num_pixels();
    if count == 0 || count >= n {
        return (0..n).collect();
    }
    let mut px = index::sample(rng, n, count).into_vec();
    px.extend(sample.centers.iter().map(|c| c.row as usize * sample.width + c.col as usize));
    px.sort_unstable();
    px.dedup();
    px
}

fn check_closed_set(data: &[Sample], num_classes: usize) -> Result<()> {
    for s in data {
        if s.semantic_map.iter().any(|&c| c != IGNORE_LABEL && c as usize >= num_classes) {
            return Err(Error::Data(format!("training image {} contains classes the model does not know", s.id)));
        }
    }
    Ok(())
}

/// Trains `params` on `data`. Divergence stops training early and returns
/// the parameters from before the failing step.
pub fn train(
    mut params: ModelParams,
    data: &[Sample],
    weights: &LossWeights,
    schedule: &Schedule,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    schedule.validate()?;
    weights.validate()?;
    if schedule.epochs > 0 && data.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    check_closed_set(data, params.arch.num_classes)?;
    let heatmaps: Vec<Vec<f64>> = data.iter().map(|s| s.center_heatmap(schedule.sigma_g)).collect::<Result<_>>()?;
    let mut adam = Adam::new(&params);
    let mut trace = Vec::new();
    let mut reports = Vec::new();
    let mut step = 0usize;
    for epoch in 1..=schedule.epochs {
        let lr = schedule.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut batch_reports = Vec::new();
        for chunk in order.chunks(schedule.batch_size) {
            step += 1;
            let items: Vec<TrainItem<'_>> = chunk
                .iter()
                .map(|&i| TrainItem {
                    sample: &data[i],
                    heatmap: &heatmaps[i],
                    pixels: sample_pixels(&data[i], schedule.pixels_per_image, &mut rng),
                })
                .collect();
            let diverged = |loss: f64, reason: String| Divergence { epoch, step, loss, reason };
            let (report, grad) = match total_loss_and_gradients(&params, &items, weights) {
                Ok(v) => v,
                Err(Error::NonFiniteLoss(term)) => {
                    let d = diverged(f64::NAN, format!("non-finite {term}"));
                    return Ok(TrainOutcome { params, trace, reports, diverged: Some(d) });
                }
                Err(e) => return Err(e),
            };
            if report.total > DIVERGENCE_LIMIT {
                let d = diverged(report.total, format!("loss above {DIVERGENCE_LIMIT:e}"));
                return Ok(TrainOutcome { params, trace, reports, diverged: Some(d) });
            }
            let last_good = params.clone();
            adam.step(&mut params, &grad, lr, schedule);
            if !params.is_finite() {
                let d = diverged(report.total, "non-finite parameters after update".into());
                return Ok(TrainOutcome { params: last_good, trace, reports, diverged: Some(d) });
            }
            for _ in 0..chunk.len() {
                batch_reports.push(report);
            }
        }
        let epoch_report = LossReport::mean(&batch_reports);
        let record = EpochRecord::new(epoch, &epoch_report, lr);
        log::info!("epoch {epoch}: total {:.5} (lr {lr:.3e})", record.total);
        on_epoch(&record);
        trace.push(record);
        reports.push(epoch_report);
    }
    Ok(TrainOutcome { params, trace, reports, diverged: None })
}
