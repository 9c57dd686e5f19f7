mod common;

use holoseg::model::{forward, init_params, Arch, DensePrediction, ImageRef, ModelParams};
use rand::Rng;

fn model(use_coords: bool, radius: usize) -> ModelParams {
    let mut arch = Arch::new(4, 2, 3);
    arch.trunk_widths = vec![16, 12];
    arch.features.patch_radius = radius;
    arch.features.use_coords = use_coords;
    init_params(&arch, 11).unwrap()
}

fn outputs(pred: &DensePrediction, p: usize) -> Vec<f64> {
    let mut v = pred.sem_logits.row(p).to_vec();
    v.extend(pred.embed.row(p));
    v.extend(pred.proto_mu.row(p));
    v.push(pred.center_hat[p]);
    v.push(pred.proto_var[p]);
    v
}

#[test]
fn translation_equivariance_without_coordinates() {
    let (w, h, r) = (24usize, 20usize, 2usize);
    let (dr, dc) = (3usize, 5usize);
    let mut rng = common::rng(1);
    let a: Vec<u8> = (0..w * h * 3).map(|_| rng.random()).collect();
    let mut b: Vec<u8> = (0..w * h * 3).map(|_| rng.random()).collect();
    for row in dr..h {
        for col in dc..w {
            let (dst, src) = ((row * w + col) * 3, ((row - dr) * w + col - dc) * 3);
            b[dst..dst + 3].copy_from_slice(&a[src..src + 3]);
        }
    }
    let params = model(false, r);
    let pa = forward(&params, ImageRef { width: w, height: h, rgb: &a }).unwrap();
    let pb = forward(&params, ImageRef { width: w, height: h, rgb: &b }).unwrap();
    let mut checked = 0;
    for row in r..h - r - dr {
        for col in r..w - r - dc {
            let p = row * w + col;
            let q = (row + dr) * w + col + dc;
            assert_eq!(outputs(&pa, p), outputs(&pb, q), "pixel ({row},{col})");
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn coordinates_break_translation_equivariance() {
    let (w, h) = (16usize, 16usize);
    let flat = vec![120u8; w * h * 3];
    let pred = forward(&model(true, 1), ImageRef { width: w, height: h, rgb: &flat }).unwrap();
    assert_ne!(outputs(&pred, 5 * w + 5), outputs(&pred, 9 * w + 9));
    let pred = forward(&model(false, 1), ImageRef { width: w, height: h, rgb: &flat }).unwrap();
    assert_eq!(outputs(&pred, 5 * w + 5), outputs(&pred, 9 * w + 9));
}

#[test]
fn outputs_depend_only_on_the_patch() {
    let (w, h, r) = (18usize, 14usize, 2usize);
    let mut rng = common::rng(2);
    let image: Vec<u8> = (0..w * h * 3).map(|_| rng.random()).collect();
    for use_coords in [true, false] {
        let params = model(use_coords, r);
        let base = forward(&params, ImageRef { width: w, height: h, rgb: &image }).unwrap();
        for _ in 0..20 {
            let (tr, tc) = (rng.random_range(0..h), rng.random_range(0..w));
            let mut changed = image.clone();
            let t = (tr * w + tc) * 3;
            changed[t] = changed[t].wrapping_add(97);
            changed[t + 1] = changed[t + 1].wrapping_add(31);
            let pred = forward(&params, ImageRef { width: w, height: h, rgb: &changed }).unwrap();
            for p in 0..w * h {
                let (pr, pc) = (p / w, p % w);
                // Clamped borders make edge pixels read their nearest neighbor,
                // so only pixels whose clamped patch misses the target are fixed.
                let reads = |x: usize, t: usize, n: usize| (x.saturating_sub(r)..=(x + r).min(n - 1)).contains(&t);
                if !(reads(pr, tr, h) && reads(pc, tc, w)) {
                    assert_eq!(outputs(&base, p), outputs(&pred, p));
                }
            }
            let tp = tr * w + tc;
            assert_ne!(outputs(&base, tp), outputs(&pred, tp));
        }
    }
}

#[test]
fn forward_is_pure() {
    let mut rng = common::rng(4);
    let image: Vec<u8> = (0..12 * 12 * 3).map(|_| rng.random()).collect();
    let params = model(true, 1);
    let img = ImageRef { width: 12, height: 12, rgb: &image };
    let a = forward(&params, img).unwrap();
    let b = forward(&params, img).unwrap();
    assert_eq!(a.sem_logits, b.sem_logits);
    assert_eq!(a.embed, b.embed);
    assert_eq!(a.center_hat, b.center_hat);
    assert!(forward(&params, ImageRef { width: 12, height: 11, rgb: &image }).is_err());
}
