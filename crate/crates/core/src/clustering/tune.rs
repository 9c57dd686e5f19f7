//! Grid search for DBSCAN parameters on images with known classes only.
//! Thing instances are formed by clustering the embeddings of thing-class
//! pixels, without center detection, and scored by known-thing PQ.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{expand, DbscanParams, PointIndex, NOISE};
use crate::error::{Error, Result};
use crate::inference::majority_class;
use crate::metrics::{extract_segments, pq, ClassLayout, PqGroup, PqTally};
use crate::model::{forward, DensePrediction, ModelParams};
use crate::scene::{Sample, IGNORE_LABEL};

/// Neighbor lists are cached per image up to this many entries.
const NEIGHBOR_CACHE_LIMIT: usize = 16_000_000;

pub fn default_eps_grid() -> Vec<f64> {
    vec![0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5]
}

pub fn default_min_pts_grid() -> Vec<usize> {
    vec![4, 8, 16, 32]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningCell {
    pub eps: f64,
    pub min_pts: usize,
    /// Known-thing PQ; `None` when the cell produced no segments to score.
    pub pq: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub selected: DbscanParams,
    pub table: Vec<TuningCell>,
}

/// Semantic and instance maps for one image under one parameter cell.
fn cell_maps(pred: &DensePrediction, num_stuff: usize, thing_px: &[usize], labels: &[i32], n_clusters: usize) -> (Vec<u8>, Vec<u16>) {
    let n = pred.num_pixels();
    let mut semantic: Vec<u8> = (0..n).map(|p| pred.semantic_argmax(p) as u8).collect();
    let mut instance = vec![0u16; n];
    let mut members = vec![Vec::new(); n_clusters];
    for (&p, &l) in thing_px.iter().zip(labels) {
        if l == NOISE {
            semantic[p] = IGNORE_LABEL;
        } else {
            members[l as usize].push(p);
        }
    }
    for (l, px) in members.iter().enumerate() {
        let class = majority_class(pred, px, num_stuff);
        for &p in px {
            semantic[p] = class;
            instance[p] = l as u16 + 1;
        }
    }
    (semantic, instance)
}

fn image_tallies(
    pred: &DensePrediction,
    gt: &Sample,
    layout: &ClassLayout,
    eps_grid: &[f64],
    min_pts_grid: &[usize],
) -> Result<Vec<PqTally>> {
    let gt_segments = extract_segments(&gt.semantic_map, &gt.instance_map, None, layout)?;
    if gt_segments.iter().any(|s| s.is_unknown) {
        return Err(Error::Data(format!("tuning image {} contains unknown objects", gt.id)));
    }
    let thing_px: Vec<usize> =
        (0..pred.num_pixels()).filter(|&p| (layout.num_stuff..layout.num_classes).contains(&pred.semantic_argmax(p))).collect();
    let mut pts = Array2::zeros((thing_px.len(), pred.embed_dim()));
    for (row, &p) in thing_px.iter().enumerate() {
        pts.row_mut(row).assign(&pred.embed.row(p));
    }
    let index = PointIndex::new(pts.view());
    let n = thing_px.len();
    let mut tallies = Vec::with_capacity(eps_grid.len() * min_pts_grid.len());
    let mut buf = Vec::new();
    for &eps in eps_grid {
        let counts: Vec<usize> = (0..n)
            .map(|i| {
                index.neighbors(i, eps, &mut buf);
                buf.len()
            })
            .collect();
        let cached: Option<Vec<Vec<u32>>> = (counts.iter().sum::<usize>() <= NEIGHBOR_CACHE_LIMIT).then(|| {
            (0..n)
                .map(|i| {
                    index.neighbors(i, eps, &mut buf);
                    buf.iter().map(|&j| j as u32).collect()
                })
                .collect()
        });
        for &min_pts in min_pts_grid {
            let core: Vec<bool> = counts.iter().map(|&c| c >= min_pts).collect();
            let result = match &cached {
                Some(lists) => expand(n, &core, |i, out| {
                    out.clear();
                    out.extend(lists[i].iter().map(|&j| j as usize));
                }),
                None => expand(n, &core, |i, out| index.neighbors(i, eps, out)),
            };
            let (semantic, instance) = cell_maps(pred, layout.num_stuff, &thing_px, &result.labels, result.n_clusters);
            let segments = extract_segments(&semantic, &instance, None, layout)?;
            tallies.push(pq(&segments, &gt_segments, &gt.semantic_map, layout).tally(PqGroup::KnownThings));
        }
    }
    Ok(tallies)
}

fn check_grids(eps_grid: &[f64], min_pts_grid: &[usize]) -> Result<()> {
    if eps_grid.is_empty() || min_pts_grid.is_empty() {
        return Err(Error::Config("dbscan tuning grid is empty".into()));
    }
    for &eps in eps_grid {
        for &min_pts in min_pts_grid {
            DbscanParams { eps, min_pts }.validate()?;
        }
    }
    Ok(())
}

/// Grid search over precomputed predictions paired with their ground truth.
pub fn tune_dbscan_on(
    preds: &[DensePrediction],
    gts: &[Sample],
    layout: &ClassLayout,
    eps_grid: &[f64],
    min_pts_grid: &[usize],
) -> Result<TuningResult> {
    check_grids(eps_grid, min_pts_grid)?;
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::Data("tuning needs one prediction per ground-truth image, and at least one".into()));
    }
    let per_image: Vec<Vec<PqTally>> =
        preds.par_iter().zip(gts).map(|(p, g)| image_tallies(p, g, layout, eps_grid, min_pts_grid)).collect::<Result<_>>()?;
    let mut table = Vec::new();
    let mut cell = 0;
    for &eps in eps_grid {
        for &min_pts in min_pts_grid {
            let mut t = PqTally::default();
            for tallies in &per_image {
                t.merge(&tallies[cell]);
            }
            cell += 1;
            table.push(TuningCell { eps, min_pts, pq: t.quality().map(|q| q.pq), tp: t.tp, fp: t.fp, fn_: t.fn_ });
        }
    }
    let best = table
        .iter()
        .min_by(|a, b| {
            let pa = a.pq.unwrap_or(f64::NEG_INFINITY);
            let pb = b.pq.unwrap_or(f64::NEG_INFINITY);
            pb.total_cmp(&pa).then(a.eps.total_cmp(&b.eps)).then(a.min_pts.cmp(&b.min_pts))
        })
        .expect("nonempty grid");
    Ok(TuningResult { selected: DbscanParams { eps: best.eps, min_pts: best.min_pts }, table })
}

/// Runs the model over the tuning images, then searches the grid.
pub fn tune_dbscan(model: &ModelParams, samples: &[Sample], eps_grid: &[f64], min_pts_grid: &[usize]) -> Result<TuningResult> {
    check_grids(eps_grid, min_pts_grid)?;
    let preds: Vec<DensePrediction> = samples.par_iter().map(|s| forward(model, s.image_ref())).collect::<Result<_>>()?;
    let layout = ClassLayout { num_classes: model.arch.num_classes, num_stuff: model.arch.num_stuff };
    tune_dbscan_on(&preds, samples, &layout, eps_grid, min_pts_grid)
}
