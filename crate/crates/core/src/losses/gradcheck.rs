//! Central finite-difference check of the analytic parameter gradient.
//!
//! The cross-branch concatenations carry no gradient by construction, so the
//! numeric side evaluates the objective with those inputs frozen at their
//! values for the unperturbed parameters. At the base point this surrogate
//! and the live objective coincide.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{frozen_cross_inputs, image_objective, LossWeights, TrainItem};
use crate::error::Result;
use crate::model::ModelParams;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub index: usize,
    pub block: String,
    pub analytic: f64,
    pub numeric: f64,
    /// |a − n| / max(|a|, |n|, 1e-6)
    pub rel_error: f64,
}

/// Checks `count` parameters, cycling through the parameter blocks so every
/// layer is covered, with a uniformly drawn entry inside each block.
pub fn check_gradients(
    params: &ModelParams,
    item: &TrainItem<'_>,
    weights: &LossWeights,
    count: usize,
    step: f64,
    seed: u64,
) -> Result<Vec<GradCheck>> {
    let (_, grad) = image_objective(params, item, weights, None, true)?;
    let grad = grad.expect("gradient requested");
    let frozen = frozen_cross_inputs(params, item);
    let names = params.block_names();
    let mut offsets = Vec::new();
    let mut start = 0;
    for b in params.blocks() {
        offsets.push((start, b.len()));
        start += b.len();
    }
    let blocks: Vec<usize> = (0..offsets.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let block = if i < blocks.len() { blocks[i] } else { *blocks.choose(&mut rng).expect("nonempty") };
        let (off, len) = offsets[block];
        let index = off + rng.random_range(0..len);
        let base = params.get_flat(index);
        work.set_flat(index, base + step);
        let plus = image_objective(&work, item, weights, Some(&frozen), false)?.0.total;
        work.set_flat(index, base - step);
        let minus = image_objective(&work, item, weights, Some(&frozen), false)?.0.total;
        work.set_flat(index, base);
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = grad.get_flat(index);
        let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        out.push(GradCheck { index, block: names[block].clone(), analytic, numeric, rel_error });
    }
    Ok(out)
}
