mod common;

use std::collections::{BTreeMap, BTreeSet};

use holoseg::clustering::{tune_dbscan_on, DbscanParams};
use holoseg::inference::{infer_from_prediction, CenterParams, HolisticOutput, InferenceParams, Mode, UncertaintyStats};
use holoseg::metrics::ClassLayout;
use holoseg::model::DensePrediction;
use holoseg::scene::{Center, Sample, Split};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::Rng;

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

struct Canvas {
    width: usize,
    height: usize,
    logits: Array2<f64>,
    center: Vec<f64>,
    embed: Array2<f64>,
    proto_mu: Array2<f64>,
    proto_var: Vec<f64>,
}

impl Canvas {
    fn new(width: usize, height: usize, k: usize, f: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            logits: Array2::zeros((n, k)),
            center: vec![0.0; n],
            embed: Array2::zeros((n, f)),
            proto_mu: Array2::zeros((n, f)),
            proto_var: vec![1.0; n],
        }
    }

    fn rect(&self, rows: std::ops::RangeInclusive<usize>, cols: std::ops::RangeInclusive<usize>) -> Vec<usize> {
        rows.flat_map(|r| cols.clone().map(move |c| r * self.width + c)).collect()
    }

    fn paint(&mut self, px: &[usize], logits: &[f64], embed: &[f64], rng: &mut impl Rng, jitter: f64) {
        for &p in px {
            for (j, &v) in logits.iter().enumerate() {
                self.logits[[p, j]] = v;
            }
            for (j, &v) in embed.iter().enumerate() {
                self.embed[[p, j]] = v + rng.random_range(-jitter..=jitter);
                self.proto_mu[[p, j]] = v;
            }
        }
    }

    fn prediction(&self) -> DensePrediction {
        let evidence = self.logits.mapv(softplus);
        DensePrediction {
            width: self.width,
            height: self.height,
            num_classes: self.logits.ncols(),
            sem_logits: self.logits.clone(),
            alpha: evidence.mapv(|e| e + 1.0),
            evidence,
            center_hat: Array1::from(self.center.clone()),
            embed: self.embed.clone(),
            proto_mu: self.proto_mu.clone(),
            proto_var: Array1::from(self.proto_var.clone()),
        }
    }
}

fn stats(threshold: f64) -> UncertaintyStats {
    UncertaintyStats { mean_u: threshold - 0.15, std_u: 0.05, t: 3.0, threshold, n_pixels: 1000 }
}

fn params(threshold: f64, mode: Mode) -> InferenceParams {
    InferenceParams { stats: stats(threshold), dbscan: DbscanParams { eps: 0.5, min_pts: 3 }, centers: CenterParams::default(), mode }
}

/// 16x12 image, classes: 0 stuff, 1-2 things. One known thing with a
/// center at (2,2), and two unknown blobs with flat logits far apart in
/// embedding space.
struct Scene {
    pred: DensePrediction,
    thing: Vec<usize>,
    blobs: [Vec<usize>; 2],
}

fn scene() -> Scene {
    let mut rng = common::rng(3);
    let mut c = Canvas::new(16, 12, 3, 2);
    let all: Vec<usize> = (0..16 * 12).collect();
    c.paint(&all, &[8.0, -8.0, -8.0], &[0.0, 0.0], &mut rng, 0.1);
    let thing = c.rect(1..=4, 1..=4);
    c.paint(&thing, &[-8.0, 8.0, -8.0], &[4.0, 0.0], &mut rng, 0.1);
    c.center[2 * 16 + 2] = 0.95;
    c.center[2 * 16 + 3] = 0.6;
    let blobs = [c.rect(7..=9, 1..=4), c.rect(7..=9, 10..=13)];
    c.paint(&blobs[0], &[0.0, 0.0, 0.0], &[0.0, 8.0], &mut rng, 0.1);
    c.paint(&blobs[1], &[0.0, 0.0, 0.0], &[-8.0, 8.0], &mut rng, 0.1);
    Scene { pred: c.prediction(), thing, blobs }
}

#[test]
fn two_unknown_blobs_become_two_instances() {
    let s = scene();
    let out = infer_from_prediction(&s.pred, 1, &params(0.45, Mode::Open)).unwrap();
    let blob_px: BTreeSet<usize> = s.blobs.iter().flatten().copied().collect();
    for p in 0..out.unknown_mask.len() {
        assert_eq!(out.unknown_mask[p], blob_px.contains(&p), "pixel {p}");
    }

    // Brute-force clustering of the masked embeddings gives the reference partition.
    let masked: Vec<usize> = (0..out.unknown_mask.len()).filter(|&p| out.unknown_mask[p]).collect();
    let points: Vec<Vec<f64>> = masked.iter().map(|&p| s.pred.embed.row(p).to_vec()).collect();
    let oracle = common::dbscan_oracle(&points, 0.5, 3);
    let mut oracle_groups: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (i, &p) in masked.iter().enumerate() {
        oracle_groups.entry(oracle.component[i].expect("every blob point is core")).or_default().insert(p);
    }
    let mut got: BTreeMap<u16, BTreeSet<usize>> = BTreeMap::new();
    for &p in &masked {
        assert_eq!(out.semantic_map[p], 3);
        got.entry(out.instance_map[p]).or_default().insert(p);
    }
    let oracle_sets: BTreeSet<_> = oracle_groups.into_values().collect();
    let got_sets: BTreeSet<_> = got.into_values().collect();
    assert_eq!(oracle_sets.len(), 2);
    assert_eq!(got_sets, oracle_sets);

    // Raster order: the known thing comes first, then the left blob.
    for &p in &s.thing {
        assert_eq!((out.semantic_map[p], out.instance_map[p]), (1, 1));
    }
    assert_eq!(out.instance_map[s.blobs[0][0]], 2);
    assert_eq!(out.instance_map[s.blobs[1][0]], 3);
    let unknown: Vec<_> = out.instances.iter().filter(|i| i.is_unknown).collect();
    assert_eq!(unknown.len(), 2);
    assert!(unknown.iter().all(|i| i.pixel_count == 12 && i.class_id == 3));
    assert_eq!(out.orphaned_outliers, 0);
}

#[test]
fn closed_mode_has_no_unknowns() {
    let s = scene();
    let out = infer_from_prediction(&s.pred, 1, &params(0.45, Mode::Closed)).unwrap();
    assert!(out.unknown_mask.iter().all(|&m| !m));
    assert!(out.semantic_map.iter().all(|&c| c < 3));
    assert_eq!(out.instances.len(), 1);
    assert_eq!(out.instances[0].pixel_count as usize, s.thing.len());
    for p in s.blobs.iter().flatten() {
        assert_eq!((out.semantic_map[*p], out.instance_map[*p]), (0, 0));
    }
}

#[test]
fn infinite_threshold_equals_closed_mode() {
    let s = scene();
    let closed = infer_from_prediction(&s.pred, 1, &params(0.45, Mode::Closed)).unwrap();
    let mut open = params(0.45, Mode::Open);
    open.stats = open.stats.with_t(1e12);
    assert_eq!(infer_from_prediction(&s.pred, 1, &open).unwrap(), closed);
}

#[test]
fn low_threshold_swallows_the_known_object() {
    // Everything is uncertain: no prototype survives, every pixel is clustered.
    let s = scene();
    let out = infer_from_prediction(&s.pred, 1, &params(0.0, Mode::Open)).unwrap();
    assert!(out.no_prototypes);
    assert!(out.unknown_mask.iter().all(|&m| m));
    check_invariants(&s.pred, &out, 0.0, 1);
}

fn check_invariants(pred: &DensePrediction, out: &HolisticOutput, threshold: f64, num_stuff: usize) {
    let k = pred.num_classes as u8;
    let mut class_of: BTreeMap<u16, u8> = BTreeMap::new();
    let mut next = 1;
    for p in 0..out.semantic_map.len() {
        let (c, id) = (out.semantic_map[p], out.instance_map[p]);
        assert!(c <= k);
        if out.unknown_mask[p] {
            assert!(out.uncertainty_map[p] >= threshold);
            assert_ne!(id, 0);
        }
        assert_eq!(out.unknown_mask[p], c == k, "pixel {p}");
        if id == 0 {
            assert!((c as usize) < num_stuff, "pixel {p} has thing class {c} without instance");
            continue;
        }
        assert!(c as usize >= num_stuff);
        let prev = *class_of.entry(id).or_insert(c);
        assert_eq!(prev, c, "instance {id} spans two classes");
        if id >= next {
            assert_eq!(id, next, "ids not dense in raster order");
            next += 1;
        }
    }
    assert_eq!(out.instances.len(), class_of.len());
}

/// Random logits, centers and embeddings on a 10x8 image with two stuff and
/// two thing classes.
fn random_prediction(seed: u64) -> DensePrediction {
    let mut rng = common::rng(seed);
    let mut c = Canvas::new(10, 8, 4, 2);
    let n = 80;
    for p in 0..n {
        for j in 0..4 {
            c.logits[[p, j]] = rng.random_range(-3.0..3.0);
        }
        for j in 0..2 {
            c.embed[[p, j]] = rng.random_range(-3.0..3.0);
            c.proto_mu[[p, j]] = rng.random_range(-3.0..3.0);
        }
        c.center[p] = rng.random_range(0.0..1.0);
        c.proto_var[p] = rng.random_range(0.2..2.0);
    }
    c.prediction()
}

fn median_uncertainty(pred: &DensePrediction) -> f64 {
    let mut u = holoseg::inference::uncertainty_map(pred.alpha.view());
    u.sort_by(f64::total_cmp);
    u[u.len() / 2]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn outputs_are_consistent(seed in any::<u64>(), eps in 0.2f64..2.0, min_pts in 1usize..5) {
        let pred = random_prediction(seed);
        let threshold = median_uncertainty(&pred);
        let mut p = params(threshold, Mode::Open);
        p.dbscan = DbscanParams { eps, min_pts };
        let out = infer_from_prediction(&pred, 2, &p).unwrap();
        check_invariants(&pred, &out, threshold, 2);
        prop_assert_eq!(infer_from_prediction(&pred, 2, &p).unwrap(), out);
        p.mode = Mode::Closed;
        let closed = infer_from_prediction(&pred, 2, &p).unwrap();
        check_invariants(&pred, &closed, threshold, 2);
    }

    #[test]
    fn scaling_scores_keeps_the_instance_map(seed in any::<u64>(), scale in 0.01f64..100.0) {
        // Every prototype variance times c divides every score by c.
        let pred = random_prediction(seed);
        let threshold = median_uncertainty(&pred);
        let base = infer_from_prediction(&pred, 2, &params(threshold, Mode::Open)).unwrap();
        let mut scaled = pred.clone();
        scaled.proto_var.mapv_inplace(|v| v * scale);
        let out = infer_from_prediction(&scaled, 2, &params(threshold, Mode::Open)).unwrap();
        prop_assert_eq!(out.instance_map, base.instance_map);
        prop_assert_eq!(out.semantic_map, base.semantic_map);
    }
}

fn tuning_case() -> (DensePrediction, Sample) {
    let mut rng = common::rng(5);
    let mut c = Canvas::new(10, 10, 2, 2);
    let all: Vec<usize> = (0..100).collect();
    c.paint(&all, &[6.0, -6.0], &[50.0, 50.0], &mut rng, 0.0);
    let a = c.rect(1..=3, 1..=3);
    let b = c.rect(6..=8, 6..=8);
    // Two objects two units apart: separate at eps 0.5, merged at eps 5.
    c.paint(&a, &[-6.0, 6.0], &[0.0, 0.0], &mut rng, 0.05);
    c.paint(&b, &[-6.0, 6.0], &[2.0, 0.0], &mut rng, 0.05);
    let mut semantic_map = vec![0u8; 100];
    let mut instance_map = vec![0u16; 100];
    for (id, px) in [(1u16, &a), (2, &b)] {
        for &p in px {
            semantic_map[p] = 1;
            instance_map[p] = id;
        }
    }
    let sample = Sample {
        id: 0,
        width: 10,
        height: 10,
        image: vec![0; 300],
        semantic_map,
        instance_map,
        centers: vec![Center { row: 2, col: 2, instance_id: 1, class_id: 1 }, Center { row: 7, col: 7, instance_id: 2, class_id: 1 }],
        split: Split::Tune,
    };
    (c.prediction(), sample)
}

#[test]
fn tuning_prefers_the_separating_radius() {
    let (pred, gt) = tuning_case();
    let layout = ClassLayout { num_classes: 2, num_stuff: 1 };
    let r = tune_dbscan_on(&[pred], &[gt], &layout, &[0.5, 5.0], &[3]).unwrap();
    assert_eq!(r.selected, DbscanParams { eps: 0.5, min_pts: 3 });
    // eps 0.5: both squares recovered exactly.
    let small = &r.table[0];
    assert_eq!((small.tp, small.fp, small.fn_), (2, 0, 0));
    assert!((small.pq.unwrap() - 1.0).abs() < 1e-12);
    // eps 5: one 18-pixel segment overlapping each square with IoU exactly 1/2,
    // which is not a match.
    let big = &r.table[1];
    assert_eq!((big.tp, big.fp, big.fn_), (0, 1, 2));
    assert_eq!(big.pq, Some(0.0));
}

#[test]
fn tuning_rejects_bad_input() {
    let (pred, gt) = tuning_case();
    let layout = ClassLayout { num_classes: 2, num_stuff: 1 };
    assert!(tune_dbscan_on(std::slice::from_ref(&pred), std::slice::from_ref(&gt), &layout, &[], &[3]).is_err());
    assert!(tune_dbscan_on(std::slice::from_ref(&pred), std::slice::from_ref(&gt), &layout, &[-1.0], &[3]).is_err());
    assert!(tune_dbscan_on(&[pred], &[], &layout, &[0.5], &[3]).is_err());
}
