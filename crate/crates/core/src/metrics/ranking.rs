//! Threshold-free ranking metrics for pixel-level unknown detection, with
//! pixels scored by uncertainty and unknown pixels as positives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub ap: f64,
    pub fpr95: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl UncertaintyReport {
    pub fn compute(scores: &[f64], positive: &[bool]) -> Result<Self> {
        Ok(Self {
            ap: unknown_ap(scores, positive)?,
            fpr95: fpr_at_95tpr(scores, positive)?,
            n_pos: positive.iter().filter(|&&p| p).count(),
            n_neg: positive.iter().filter(|&&p| !p).count(),
        })
    }
}

/// (tp, fp) per block of tied scores, in descending score order.
fn tie_blocks(scores: &[f64], positive: &[bool]) -> Result<Vec<(usize, usize)>> {
    if scores.len() != positive.len() {
        return Err(Error::Dimension(format!("{} scores vs {} labels", scores.len(), positive.len())));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Domain(format!("score {i} is NaN")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut blocks: Vec<(usize, usize)> = Vec::new();
    let mut last = None;
    for i in order {
        if last != Some(scores[i]) {
            blocks.push((0, 0));
            last = Some(scores[i]);
        }
        let b = blocks.last_mut().expect("pushed above");
        if positive[i] {
            b.0 += 1;
        } else {
            b.1 += 1;
        }
    }
    Ok(blocks)
}

/// Exact average precision: the mean over positives of the precision at the
/// positive's rank, where tied scores share one block-level precision.
pub fn unknown_ap(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let blocks = tie_blocks(scores, positive)?;
    let n_pos: usize = blocks.iter().map(|b| b.0).sum();
    if n_pos == 0 {
        return Err(Error::Empty("unknown pixels (positives) for AP".into()));
    }
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut sum = 0.0;
    for (bt, bf) in blocks {
        tp += bt;
        seen += bt + bf;
        sum += bt as f64 * tp as f64 / seen as f64;
    }
    Ok(sum / n_pos as f64)
}

/// False-positive rate at the first descending threshold whose true-positive
/// rate reaches 0.95.
pub fn fpr_at_95tpr(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let blocks = tie_blocks(scores, positive)?;
    let n_pos: usize = blocks.iter().map(|b| b.0).sum();
    let n_neg: usize = blocks.iter().map(|b| b.1).sum();
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Empty("FPR95 needs both unknown and known pixels".into()));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    for (bt, bf) in blocks {
        tp += bt;
        fp += bf;
        if 100 * tp >= 95 * n_pos {
            return Ok(fp as f64 / n_neg as f64);
        }
    }
    unreachable!("the last block accepts every positive")
}
