//! Holistic inference: uncertainty thresholding, center detection,
//! prototype association, majority voting, and DBSCAN over unknown pixels.

mod io;

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{dbscan, DbscanParams, NOISE};
use crate::error::{Error, Result};
use crate::losses::score;
use crate::model::{forward, DensePrediction, ImageRef, ModelParams};
use crate::scene::Sample;

pub use io::{prediction_stem, read_prediction, write_prediction, InstanceInfo, PredictionMeta, StoredPrediction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeKind {
    /// Read from the prototype fields at a detected center. `seed_class` is
    /// the best thing class at that pixel.
    Thing {
        instance_id: u16,
        seed_class: u8,
        row: u32,
        col: u32,
    },
    Stuff {
        class_id: u8,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub mu: Vec<f64>,
    pub var: f64,
    pub kind: PrototypeKind,
}

/// u = K / Σα per row.
pub fn uncertainty_map(alpha: ArrayView2<f64>) -> Vec<f64> {
    let k = alpha.ncols() as f64;
    alpha.rows().into_iter().map(|r| k / r.sum()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyStats {
    pub mean_u: f64,
    pub std_u: f64,
    pub t: f64,
    pub threshold: f64,
    pub n_pixels: u64,
}

impl UncertaintyStats {
    /// Welford's single-pass mean and population variance.
    pub fn from_values(values: impl IntoIterator<Item = f64>, t: f64) -> Result<Self> {
        if !(t >= 0.0) {
            return Err(Error::Config(format!("threshold multiplier t must be >= 0, got {t}")));
        }
        let (mut n, mut mean, mut m2) = (0u64, 0.0f64, 0.0f64);
        for x in values {
            n += 1;
            let delta = x - mean;
            mean += delta / n as f64;
            m2 += delta * (x - mean);
        }
        if n == 0 {
            return Err(Error::Empty("uncertainty sample".into()));
        }
        let std_u = (m2 / n as f64).max(0.0).sqrt();
        Ok(Self { mean_u: mean, std_u, t, threshold: mean + t * std_u, n_pixels: n })
    }

    /// Same statistics with a different multiplier.
    pub fn with_t(&self, t: f64) -> Self {
        Self { t, threshold: self.mean_u + t * self.std_u, ..*self }
    }
}

/// Uncertainty statistics over every pixel of the training images.
pub fn fit_uncertainty_stats(params: &ModelParams, train: &[Sample], t: f64) -> Result<UncertaintyStats> {
    if train.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    let maps: Vec<Vec<f64>> =
        train.par_iter().map(|s| forward(params, s.image_ref()).map(|p| uncertainty_map(p.alpha.view()))).collect::<Result<_>>()?;
    UncertaintyStats::from_values(maps.into_iter().flatten(), t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CenterParams {
    /// Half-width of the max window.
    pub window: usize,
    pub c_min: f64,
    pub top_k: usize,
}

impl Default for CenterParams {
    fn default() -> Self {
        Self { window: 3, c_min: 0.1, top_k: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectedCenter {
    pub row: u32,
    pub col: u32,
    pub confidence: f64,
}

/// Local maxima of the center heatmap. Among equal values in a window the
/// first in raster order wins, so a plateau yields one center.
pub fn detect_centers(center_hat: &[f64], width: usize, height: usize, params: &CenterParams) -> Vec<DetectedCenter> {
    let w = params.window as i64;
    let mut found = Vec::new();
    for r in 0..height as i64 {
        for c in 0..width as i64 {
            let p = (r * width as i64 + c) as usize;
            let v = center_hat[p];
            if !(v >= params.c_min) {
                continue;
            }
            let mut peak = true;
            'window: for rr in (r - w).max(0)..=(r + w).min(height as i64 - 1) {
                for cc in (c - w).max(0)..=(c + w).min(width as i64 - 1) {
                    let q = (rr * width as i64 + cc) as usize;
                    if center_hat[q] > v || (center_hat[q] == v && q < p) {
                        peak = false;
                        break 'window;
                    }
                }
            }
            if peak {
                found.push(DetectedCenter { row: r as u32, col: c as u32, confidence: v });
            }
        }
    }
    found.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then((a.row, a.col).cmp(&(b.row, b.col))));
    found.truncate(params.top_k);
    found
}

/// Where stuff prototypes take their pixels from.
#[derive(Debug, Clone, Copy)]
pub enum StuffSource<'a> {
    GroundTruth(&'a [u8]),
    /// Pixels whose semantic argmax is the stuff class.
    Predicted,
}

/// One thing prototype per center (skipping centers on excluded pixels) and
/// one stuff prototype per stuff class with at least one source pixel.
pub fn build_prototypes(
    pred: &DensePrediction,
    centers: &[DetectedCenter],
    num_stuff: usize,
    stuff: StuffSource<'_>,
    exclude: Option<&[bool]>,
) -> Vec<Prototype> {
    let f = pred.embed_dim();
    let k = pred.num_classes;
    let excluded = |p: usize| exclude.is_some_and(|m| m[p]);
    let mut out = Vec::new();
    for c in centers {
        let p = c.row as usize * pred.width + c.col as usize;
        if excluded(p) {
            continue;
        }
        out.push(Prototype {
            mu: pred.proto_mu.row(p).to_vec(),
            var: pred.proto_var[p],
            kind: PrototypeKind::Thing {
                instance_id: out.len() as u16 + 1,
                seed_class: pred.argmax_in(p, num_stuff..k) as u8,
                row: c.row,
                col: c.col,
            },
        });
    }
    let mut sums = vec![(vec![0.0; f], 0.0, 0usize); num_stuff];
    for p in 0..pred.num_pixels() {
        if excluded(p) {
            continue;
        }
        let class = match stuff {
            StuffSource::GroundTruth(gt) => gt[p] as usize,
            StuffSource::Predicted => pred.semantic_argmax(p),
        };
        if class < num_stuff {
            let s = &mut sums[class];
            s.0.iter_mut().zip(pred.proto_mu.row(p)).for_each(|(a, b)| *a += b);
            s.1 += pred.proto_var[p];
            s.2 += 1;
        }
    }
    for (class, (mu, var, n)) in sums.into_iter().enumerate() {
        if n > 0 {
            out.push(Prototype {
                mu: mu.into_iter().map(|v| v / n as f64).collect(),
                var: var / n as f64,
                kind: PrototypeKind::Stuff { class_id: class as u8 },
            });
        }
    }
    out
}

/// Index of the best-scoring prototype among `candidates`; the earliest wins ties.
fn best_prototype(embed: &[f64], protos: &[Prototype], candidates: impl Iterator<Item = usize>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for i in candidates {
        let s = score(embed, &protos[i].mu, protos[i].var);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Open,
    Closed,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Open => "open",
            Self::Closed => "closed",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open" => Ok(Self::Open),
            "closed" => Ok(Self::Closed),
            other => Err(Error::Config(format!("unknown mode {other:?}, expected open or closed"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceParams {
    pub stats: UncertaintyStats,
    pub dbscan: DbscanParams,
    pub centers: CenterParams,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HolisticOutput {
    pub width: usize,
    pub height: usize,
    pub semantic_map: Vec<u8>,
    pub instance_map: Vec<u16>,
    pub unknown_mask: Vec<bool>,
    pub uncertainty_map: Vec<f64>,
    pub instances: Vec<InstanceInfo>,
    /// No prototype could be built; the map is the plain semantic argmax.
    pub no_prototypes: bool,
    /// DBSCAN outliers whose class was a thing class but that found no thing
    /// instance to join and fell back to a stuff class.
    pub orphaned_outliers: usize,
}

/// Renumbers nonzero ids densely in raster order of first occurrence.
fn renumber(instance_map: &mut [u16]) {
    let mut map = BTreeMap::new();
    for v in instance_map.iter_mut() {
        if *v != 0 {
            let next = map.len() as u16 + 1;
            *v = *map.entry(*v).or_insert(next);
        }
    }
}

fn instance_table(semantic: &[u8], instance: &[u16], unknown_id: u8) -> Vec<InstanceInfo> {
    let mut table: BTreeMap<u16, InstanceInfo> = BTreeMap::new();
    for (&c, &id) in semantic.iter().zip(instance) {
        if id == 0 {
            continue;
        }
        table.entry(id).or_insert(InstanceInfo { id, class_id: c, is_unknown: c == unknown_id, pixel_count: 0 }).pixel_count += 1;
    }
    table.into_values().collect()
}

/// Majority vote over the best thing class of each member pixel; the lowest
/// class id wins ties.
pub(crate) fn majority_class(pred: &DensePrediction, members: &[usize], num_stuff: usize) -> u8 {
    let k = pred.num_classes;
    let mut votes = vec![0usize; k];
    for &p in members {
        votes[pred.argmax_in(p, num_stuff..k)] += 1;
    }
    let mut best = num_stuff;
    for c in num_stuff..k {
        if votes[c] > votes[best] {
            best = c;
        }
    }
    best as u8
}

/// Runs the pipeline on a prediction that has already been computed.
pub fn infer_from_prediction(pred: &DensePrediction, num_stuff: usize, params: &InferenceParams) -> Result<HolisticOutput> {
    params.dbscan.validate()?;
    let n = pred.num_pixels();
    let k = pred.num_classes;
    let unknown_id = k as u8;
    let uncertainty = uncertainty_map(pred.alpha.view());
    let mut unknown_mask: Vec<bool> = match params.mode {
        Mode::Open => uncertainty.iter().map(|&u| u >= params.stats.threshold).collect(),
        Mode::Closed => vec![false; n],
    };

    let centers = detect_centers(pred.center_hat.as_slice().expect("contiguous"), pred.width, pred.height, &params.centers);
    let protos = build_prototypes(pred, &centers, num_stuff, StuffSource::Predicted, Some(&unknown_mask));
    let thing_protos: Vec<usize> = (0..protos.len()).filter(|&i| matches!(protos[i].kind, PrototypeKind::Thing { .. })).collect();
    let stuff_protos: Vec<usize> = (0..protos.len()).filter(|&i| matches!(protos[i].kind, PrototypeKind::Stuff { .. })).collect();

    let mut semantic = vec![0u8; n];
    let mut instance = vec![0u16; n];
    let embed_row = |p: usize| pred.embed.row(p).to_vec();

    if protos.is_empty() {
        for p in 0..n {
            if !unknown_mask[p] {
                semantic[p] = pred.semantic_argmax(p) as u8;
            }
        }
    } else {
        // Association over every prototype, then instance classes by vote.
        let mut members: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
        for p in 0..n {
            if unknown_mask[p] {
                continue;
            }
            let best = best_prototype(&embed_row(p), &protos, 0..protos.len()).expect("nonempty");
            match protos[best].kind {
                PrototypeKind::Thing { instance_id, .. } => {
                    instance[p] = instance_id;
                    members.entry(instance_id).or_default().push(p);
                }
                PrototypeKind::Stuff { class_id } => semantic[p] = class_id,
            }
        }
        for px in members.values() {
            let class = majority_class(pred, px, num_stuff);
            for &p in px {
                semantic[p] = class;
            }
        }
    }

    let mut orphaned = 0;
    if params.mode == Mode::Open {
        let unknown_px: Vec<usize> = (0..n).filter(|&p| unknown_mask[p]).collect();
        let mut pts = Array2::zeros((unknown_px.len(), pred.embed_dim()));
        for (row, &p) in unknown_px.iter().enumerate() {
            pts.row_mut(row).assign(&pred.embed.row(p));
        }
        let clusters = dbscan(pts.view(), &params.dbscan)?;
        // Unknown instance ids start above every thing id; renumbered below.
        let base = protos.len() as u16 + 1;
        let class_of_instance: BTreeMap<u16, u8> = (0..n).filter(|&p| instance[p] != 0).map(|p| (instance[p], semantic[p])).collect();
        for (row, &p) in unknown_px.iter().enumerate() {
            let label = clusters.labels[row];
            if label != NOISE {
                semantic[p] = unknown_id;
                instance[p] = base + label as u16;
                continue;
            }
            unknown_mask[p] = false;
            let class = pred.semantic_argmax(p);
            if class < num_stuff {
                semantic[p] = class as u8;
                continue;
            }
            let phi = embed_row(p);
            if let Some(best) = best_prototype(&phi, &protos, thing_protos.iter().copied()) {
                let PrototypeKind::Thing { instance_id, .. } = protos[best].kind else { unreachable!() };
                // A thing prototype whose pixels were all taken by other
                // prototypes has no instance yet; its seed class stands in.
                let class = class_of_instance.get(&instance_id).copied().unwrap_or_else(|| {
                    let PrototypeKind::Thing { seed_class, .. } = protos[best].kind else { unreachable!() };
                    seed_class
                });
                semantic[p] = class;
                instance[p] = instance_id;
            } else {
                orphaned += 1;
                semantic[p] = match best_prototype(&phi, &protos, stuff_protos.iter().copied()) {
                    Some(i) => match protos[i].kind {
                        PrototypeKind::Stuff { class_id } => class_id,
                        PrototypeKind::Thing { .. } => unreachable!(),
                    },
                    None => pred.argmax_in(p, 0..num_stuff) as u8,
                };
            }
        }
    }

    renumber(&mut instance);
    let instances = instance_table(&semantic, &instance, unknown_id);
    Ok(HolisticOutput {
        width: pred.width,
        height: pred.height,
        semantic_map: semantic,
        instance_map: instance,
        unknown_mask,
        uncertainty_map: uncertainty,
        instances,
        no_prototypes: protos.is_empty(),
        orphaned_outliers: orphaned,
    })
}

/// Forward pass plus the holistic pipeline for one image.
pub fn holistic_infer(model: &ModelParams, image: ImageRef<'_>, params: &InferenceParams) -> Result<HolisticOutput> {
    let pred = forward(model, image)?;
    infer_from_prediction(&pred, model.arch.num_stuff, params)
}
