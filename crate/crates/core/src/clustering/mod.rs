//! Exact DBSCAN over embedding vectors, and its parameter grid search.
//!
//! A point is core when its closed ε-ball (itself included) holds at least
//! `min_pts` points. Clusters are grown breadth-first from core points in
//! input order, so cluster ids follow the order of each cluster's first core
//! point and a border point reachable from two clusters joins the earlier one.

mod tune;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use tune::{default_eps_grid, default_min_pts_grid, tune_dbscan, tune_dbscan_on, TuningCell, TuningResult};

pub const NOISE: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DbscanParams {
    pub eps: f64,
    pub min_pts: usize,
}

impl DbscanParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("dbscan eps must be finite and > 0, got {}", self.eps)));
        }
        if self.min_pts == 0 {
            return Err(Error::Config("dbscan min_pts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterResult {
    /// Cluster per point, `NOISE` for noise.
    pub labels: Vec<i32>,
    pub n_clusters: usize,
}

/// Range queries over a fixed point set. Points are sorted by their first
/// coordinate so a query only scans the slab |x₀ − q₀| ≤ ε.
pub(crate) struct PointIndex<'a> {
    points: ArrayView2<'a, f64>,
    order: Vec<usize>,
    keys: Vec<f64>,
}

impl<'a> PointIndex<'a> {
    pub(crate) fn new(points: ArrayView2<'a, f64>) -> Self {
        let mut order: Vec<usize> = (0..points.nrows()).collect();
        if points.ncols() > 0 {
            order.sort_by(|&a, &b| points[[a, 0]].total_cmp(&points[[b, 0]]).then(a.cmp(&b)));
        }
        let keys = order.iter().map(|&i| if points.ncols() > 0 { points[[i, 0]] } else { 0.0 }).collect();
        Self { points, order, keys }
    }

    /// Indices within distance `eps` of point `i` (inclusive), ascending.
    pub(crate) fn neighbors(&self, i: usize, eps: f64, out: &mut Vec<usize>) {
        out.clear();
        let q = self.points.row(i);
        let key = if q.is_empty() { 0.0 } else { q[0] };
        let lo = self.keys.partition_point(|&k| k < key - eps);
        let eps2 = eps * eps;
        for (&k, &j) in self.keys[lo..].iter().zip(&self.order[lo..]) {
            if k > key + eps {
                break;
            }
            let d2: f64 = q.iter().zip(self.points.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 <= eps2 {
                out.push(j);
            }
        }
        out.sort_unstable();
    }
}

/// Cluster expansion given a neighbor query and the core flags.
pub(crate) fn expand(n: usize, core: &[bool], mut neighbors: impl FnMut(usize, &mut Vec<usize>)) -> ClusterResult {
    let mut labels = vec![NOISE; n];
    let mut n_clusters = 0usize;
    let mut queue = std::collections::VecDeque::new();
    let mut buf = Vec::new();
    for seed in 0..n {
        if !core[seed] || labels[seed] != NOISE {
            continue;
        }
        let id = n_clusters as i32;
        n_clusters += 1;
        labels[seed] = id;
        queue.push_back(seed);
        while let Some(q) = queue.pop_front() {
            neighbors(q, &mut buf);
            for &r in &buf {
                if labels[r] == NOISE {
                    labels[r] = id;
                    if core[r] {
                        queue.push_back(r);
                    }
                }
            }
        }
    }
    ClusterResult { labels, n_clusters }
}

/// DBSCAN over the rows of `points`.
pub fn dbscan(points: ArrayView2<f64>, params: &DbscanParams) -> Result<ClusterResult> {
    params.validate()?;
    let n = points.nrows();
    let index = PointIndex::new(points);
    let mut buf = Vec::new();
    let core: Vec<bool> = (0..n)
        .map(|i| {
            index.neighbors(i, params.eps, &mut buf);
            buf.len() >= params.min_pts
        })
        .collect();
    Ok(expand(n, &core, |i, out| index.neighbors(i, params.eps, out)))
}
