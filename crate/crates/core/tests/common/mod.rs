//! Independent reference implementations used by the integration tests.
//! They favor obviousness over speed and share no code with the library.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashSet};

use holoseg::metrics::{ClassLayout, PqGroup, Segment};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Density-based clustering by brute force: core points from an all-pairs
/// distance table, clusters as connected components of the core graph.
pub struct DbscanOracle {
    pub core: Vec<bool>,
    /// Component of every core point.
    pub component: Vec<Option<usize>>,
    /// For each non-core point, the components it is within eps of.
    pub reachable_from: Vec<BTreeSet<usize>>,
}

pub fn dbscan_oracle(points: &[Vec<f64>], eps: f64, min_pts: usize) -> DbscanOracle {
    let n = points.len();
    let near = |i: usize, j: usize| dist2(&points[i], &points[j]) <= eps * eps;
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_pts).collect();
    let mut component = vec![None; n];
    let mut next = 0;
    for s in 0..n {
        if !core[s] || component[s].is_some() {
            continue;
        }
        let mut stack = vec![s];
        component[s] = Some(next);
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if core[j] && component[j].is_none() && near(i, j) {
                    component[j] = Some(next);
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    let reachable_from = (0..n)
        .map(|i| if core[i] { BTreeSet::new() } else { (0..n).filter(|&j| core[j] && near(i, j)).map(|j| component[j].unwrap()).collect() })
        .collect();
    DbscanOracle { core, component, reachable_from }
}

/// Checks `labels` (cluster index or -1) against the oracle. Core points
/// must form exactly the oracle components; a border point must sit in one
/// of the components that reach it; unreachable points must be noise.
pub fn agrees_with_oracle(labels: &[i32], oracle: &DbscanOracle) -> Result<(), String> {
    let mut to_oracle: BTreeMap<i32, usize> = BTreeMap::new();
    let mut from_oracle: BTreeMap<usize, i32> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if let Some(c) = oracle.component[i] {
            if l < 0 {
                return Err(format!("core point {i} labeled noise"));
            }
            if *to_oracle.entry(l).or_insert(c) != c || *from_oracle.entry(c).or_insert(l) != l {
                return Err(format!("core point {i}: cluster {l} does not map one-to-one onto component {c}"));
            }
        }
    }
    for (i, &l) in labels.iter().enumerate() {
        if oracle.core[i] {
            continue;
        }
        let reach = &oracle.reachable_from[i];
        if reach.is_empty() {
            if l >= 0 {
                return Err(format!("point {i} should be noise, got {l}"));
            }
        } else {
            let ok = l >= 0 && to_oracle.get(&l).is_some_and(|c| reach.contains(c));
            if !ok {
                return Err(format!("border point {i} labeled {l}, reachable from {reach:?}"));
            }
        }
    }
    Ok(())
}

/// Random point set with a few Gaussian-ish blobs plus scattered points.
pub fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let blobs: Vec<Vec<f64>> = (0..rng.random_range(1..=4)).map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    (0..n)
        .map(|_| {
            if rng.random_bool(0.8) {
                let b = &blobs[rng.random_range(0..blobs.len())];
                b.iter().map(|x| x + rng.random_range(-0.6..0.6)).collect()
            } else {
                (0..dim).map(|_| rng.random_range(-4.0..4.0)).collect()
            }
        })
        .collect()
}

/// IoU with void removed from the prediction: ground-truth ignore pixels,
/// and ground-truth unknown pixels when the prediction is a known class.
pub fn oracle_iou(pred: &Segment, gt: &Segment, gt_semantic: &[u8], layout: &ClassLayout) -> f64 {
    let p: HashSet<u32> = pred
        .pixels
        .iter()
        .copied()
        .filter(|&x| {
            let c = gt_semantic[x as usize];
            c != 255 && (pred.is_unknown || !layout.is_unknown(c))
        })
        .collect();
    let g: HashSet<u32> = gt.pixels.iter().copied().collect();
    let inter = p.intersection(&g).count();
    let union = p.union(&g).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn same_match_class(a: &Segment, b: &Segment) -> bool {
    (a.is_unknown && b.is_unknown) || (!a.is_unknown && !b.is_unknown && a.class_id == b.class_id)
}

/// Every maximum-cardinality matching using only class-consistent pairs
/// with IoU > 0.5, found by enumerating all partial assignments.
pub fn exhaustive_matchings(pred: &[Segment], gt: &[Segment], gt_semantic: &[u8], layout: &ClassLayout) -> Vec<Vec<(usize, usize)>> {
    let eligible: Vec<Vec<bool>> =
        pred.iter().map(|p| gt.iter().map(|g| same_match_class(p, g) && oracle_iou(p, g, gt_semantic, layout) > 0.5).collect()).collect();
    let mut best: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut cur = Vec::new();
    let mut used = vec![false; gt.len()];
    fn recurse(i: usize, eligible: &[Vec<bool>], used: &mut [bool], cur: &mut Vec<(usize, usize)>, best: &mut Vec<Vec<(usize, usize)>>) {
        if i == eligible.len() {
            let len = best.first().map_or(0, Vec::len);
            if best.is_empty() || cur.len() > len {
                *best = vec![cur.clone()];
            } else if cur.len() == len {
                best.push(cur.clone());
            }
            return;
        }
        recurse(i + 1, eligible, used, cur, best);
        for j in 0..used.len() {
            if eligible[i][j] && !used[j] {
                used[j] = true;
                cur.push((i, j));
                recurse(i + 1, eligible, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    recurse(0, &eligible, &mut used, &mut cur, &mut best);
    best
}

pub fn oracle_group(seg: &Segment, layout: &ClassLayout) -> PqGroup {
    if seg.is_unknown {
        PqGroup::Unknown
    } else if layout.is_stuff(seg.class_id) {
        PqGroup::KnownStuff
    } else {
        PqGroup::KnownThings
    }
}

/// (tp, fp, fn, iou sum) per group from a given matching.
pub fn oracle_tallies(
    pred: &[Segment],
    gt: &[Segment],
    gt_semantic: &[u8],
    layout: &ClassLayout,
    matching: &[(usize, usize)],
) -> BTreeMap<PqGroup, (usize, usize, usize, f64)> {
    let mut t: BTreeMap<PqGroup, (usize, usize, usize, f64)> = BTreeMap::new();
    for g in [PqGroup::KnownThings, PqGroup::KnownStuff, PqGroup::Unknown] {
        t.insert(g, (0, 0, 0, 0.0));
    }
    for &(i, j) in matching {
        let e = t.get_mut(&oracle_group(&gt[j], layout)).unwrap();
        e.0 += 1;
        e.3 += oracle_iou(&pred[i], &gt[j], gt_semantic, layout);
    }
    for (i, p) in pred.iter().enumerate() {
        if matching.iter().any(|m| m.0 == i) {
            continue;
        }
        let void = p
            .pixels
            .iter()
            .filter(|&&x| {
                let c = gt_semantic[x as usize];
                c == 255 || (!p.is_unknown && layout.is_unknown(c))
            })
            .count();
        if 2 * void <= p.pixels.len() {
            t.get_mut(&oracle_group(p, layout)).unwrap().1 += 1;
        }
    }
    for (j, g) in gt.iter().enumerate() {
        if !matching.iter().any(|m| m.1 == j) {
            t.get_mut(&oracle_group(g, layout)).unwrap().2 += 1;
        }
    }
    t
}

/// A small random scene: ground truth from random rectangles over a stuff
/// background, and a prediction that copies it with label noise, dropped
/// or split segments, and an occasional spurious blob.
pub struct RandomScene {
    pub width: usize,
    pub height: usize,
    pub gt_sem: Vec<u8>,
    pub gt_inst: Vec<u16>,
    pub pred_sem: Vec<u8>,
    pub pred_inst: Vec<u16>,
}

/// Layout for random scenes: classes 0-1 stuff, 2-3 things, 4-5 unknown.
pub const SCENE_LAYOUT: ClassLayout = ClassLayout { num_classes: 4, num_stuff: 2 };

fn paint_rects(rng: &mut ChaCha8Rng, w: usize, h: usize, labels: &[(u8, u16)], sem: &mut [u8], inst: &mut [u16]) {
    for &(c, id) in labels {
        let (rw, rh) = (rng.random_range(2..=w / 2), rng.random_range(2..=h / 2));
        let (r0, c0) = (rng.random_range(0..=h - rh), rng.random_range(0..=w - rw));
        for r in r0..r0 + rh {
            for col in c0..c0 + rw {
                sem[r * w + col] = c;
                inst[r * w + col] = id;
            }
        }
    }
}

pub fn random_scene(rng: &mut ChaCha8Rng) -> RandomScene {
    let (w, h) = (12, 10);
    let n = w * h;
    let mut gt_sem = vec![0u8; n];
    let mut gt_inst = vec![0u16; n];
    // Background split between the two stuff classes.
    let split = rng.random_range(0..=h);
    for r in split..h {
        for c in 0..w {
            gt_sem[r * w + c] = 1;
        }
    }
    let n_obj = rng.random_range(0..=4);
    let n_spurious = if n_obj == 4 { 0 } else { rng.random_range(0..=1) };
    let objects: Vec<(u8, u16)> = (0..n_obj).map(|k| (rng.random_range(2..=5u8), k as u16 + 1)).collect();
    paint_rects(rng, w, h, &objects, &mut gt_sem, &mut gt_inst);
    for p in 0..n {
        if rng.random_bool(0.05) {
            gt_sem[p] = 255;
            gt_inst[p] = 0;
        }
    }
    let mut pred_sem = gt_sem.clone();
    let mut pred_inst = gt_inst.clone();
    for p in 0..n {
        if pred_sem[p] == 255 {
            pred_sem[p] = rng.random_range(0..2);
            pred_inst[p] = 0;
        }
    }
    // Unknown ground truth is predicted either as the unknown class (4) or as
    // a known thing.
    for id in 1..=n_obj as u16 {
        let class = objects[id as usize - 1].0;
        let new_class = if class >= 4 {
            if rng.random_bool(0.7) {
                4
            } else {
                2
            }
        } else if rng.random_bool(0.15) {
            5 - class
        } else {
            class
        };
        let offset = rng.random_range(0..3u16) * 10;
        for p in 0..n {
            if gt_inst[p] == id && pred_inst[p] == id {
                pred_sem[p] = new_class;
                pred_inst[p] = id + offset;
            }
        }
    }
    let spurious: Vec<(u8, u16)> = (0..n_spurious).map(|k| (rng.random_range(2..=4u8), 100 + k as u16)).collect();
    paint_rects(rng, w, h, &spurious, &mut pred_sem, &mut pred_inst);
    let noise = rng.random_range(0.0..0.5);
    for p in 0..n {
        if rng.random_bool(noise) {
            pred_sem[p] = rng.random_range(0..2);
            pred_inst[p] = 0;
        }
    }
    RandomScene { width: w, height: h, gt_sem, gt_inst, pred_sem, pred_inst }
}
