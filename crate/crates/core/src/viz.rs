//! Color renderings of predictions: class colors, hashed instance colors,
//! an uncertainty heat ramp, and embeddings projected to RGB.

use ndarray::{Array2, ArrayView2, Axis};

use crate::scene::{ClassCatalog, IGNORE_LABEL};

const UNKNOWN_COLOR: [u8; 3] = [255, 0, 255];

fn class_color(catalog: &ClassCatalog, class: u8) -> [u8; 3] {
    if class == IGNORE_LABEL {
        return [0, 0, 0];
    }
    catalog
        .stuff
        .iter()
        .map(|s| (s.id, s.color))
        .chain(catalog.known_things.iter().map(|t| (t.id, t.color)))
        .find(|(id, _)| *id == class)
        .map(|(_, c)| c)
        .unwrap_or(UNKNOWN_COLOR)
}

pub fn colorize_semantic(semantic: &[u8], catalog: &ClassCatalog) -> Vec<u8> {
    semantic.iter().flat_map(|&c| class_color(catalog, c)).collect()
}

/// Bright color derived from a hash of the id; 0 stays black.
pub fn instance_color(id: u16) -> [u8; 3] {
    if id == 0 {
        return [0, 0, 0];
    }
    let mut z = (id as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    [64 + (z & 0xBF) as u8, 64 + ((z >> 8) & 0xBF) as u8, 64 + ((z >> 16) & 0xBF) as u8]
}

pub fn colorize_instances(instance: &[u16]) -> Vec<u8> {
    instance.iter().flat_map(|&id| instance_color(id)).collect()
}

/// Black → purple → orange → pale yellow over u ∈ [0, 1].
pub fn heat_color(u: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 4] = [[0.0, 0.0, 4.0], [120.0, 28.0, 109.0], [237.0, 105.0, 37.0], [252.0, 255.0, 164.0]];
    let x = u.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let mix = |c: usize| (STOPS[i][c] + f * (STOPS[i + 1][c] - STOPS[i][c])).round() as u8;
    [mix(0), mix(1), mix(2)]
}

pub fn colorize_uncertainty(u: &[f64]) -> Vec<u8> {
    u.iter().flat_map(|&v| heat_color(v)).collect()
}

/// Eigen-decomposition of a small symmetric matrix by cyclic Jacobi sweeps.
/// Returns eigenvalues (descending) and eigenvectors as columns.
pub fn symmetric_eigen(a: ArrayView2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut m = a.to_owned();
    let mut v = Array2::<f64>::eye(n);
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[[i, j]].powi(2)).sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * m[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[[k, p]], m[[k, q]]);
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[[p, k]], m[[q, k]]);
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].total_cmp(&m[[i, i]]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[[i, i]]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.column(src).to_owned();
        // Fix the sign: the largest-magnitude entry is positive.
        let big = col.iter().copied().fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
        if big < 0.0 {
            col.mapv_inplace(|x| -x);
        }
        vectors.column_mut(dst).assign(&col);
    }
    (values, vectors)
}

/// Projects embeddings (one row per pixel) onto their top three whitened
/// principal axes and maps ±3 standard deviations to 0..255.
pub fn project_embeddings(embed: ArrayView2<f64>) -> Vec<u8> {
    let n = embed.nrows();
    if n == 0 {
        return Vec::new();
    }
    let mean = embed.mean_axis(Axis(0)).expect("nonempty");
    let centered = &embed - &mean;
    let cov = centered.t().dot(&centered) / n as f64;
    let (values, vectors) = symmetric_eigen(cov.view());
    let comps = values.len().min(3);
    let mut out = vec![128u8; 3 * n];
    for c in 0..comps {
        let scale = 1.0 / values[c].max(1e-12).sqrt();
        let proj = centered.dot(&vectors.column(c));
        for (p, z) in proj.iter().enumerate() {
            out[3 * p + c] = ((0.5 + z * scale / 6.0).clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn eigen_of_known_matrix() {
        let (vals, vecs) = symmetric_eigen(array![[2.0, 1.0], [1.0, 2.0]].view());
        assert!((vals[0] - 3.0).abs() < 1e-12 && (vals[1] - 1.0).abs() < 1e-12);
        let s = 0.5f64.sqrt();
        assert!((vecs[[0, 0]] - s).abs() < 1e-12 && (vecs[[1, 0]] - s).abs() < 1e-12);
    }

    #[test]
    fn colors() {
        assert_eq!(instance_color(0), [0, 0, 0]);
        assert_ne!(instance_color(1), instance_color(2));
        assert_eq!(heat_color(0.0), [0, 0, 4]);
        assert_eq!(heat_color(1.0), [252, 255, 164]);
        let cat = ClassCatalog::default();
        assert_eq!(colorize_semantic(&[0, 255, 6], &cat)[3..], [0, 0, 0, 255, 0, 255]);
    }

    #[test]
    fn projection_is_deterministic_and_sized() {
        let e = Array2::from_shape_fn((50, 4), |(i, j)| ((i * 7 + j * 3) % 11) as f64 * 0.1);
        let a = project_embeddings(e.view());
        assert_eq!(a.len(), 150);
        assert_eq!(a, project_embeddings(e.view()));
    }
}
