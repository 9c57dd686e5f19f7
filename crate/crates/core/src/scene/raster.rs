use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
    Star,
    Cross,
}

/// Pixels (flat, sorted) whose centers fall inside the shape. No
/// anti-aliasing: a pixel is either fully in or fully out.
pub(crate) fn rasterize(shape: ShapeKind, cy: f64, cx: f64, radius: f64, angle: f64, width: usize, height: usize) -> Vec<usize> {
    let polygon = outline(shape, radius, angle);
    let reach = radius.ceil() as i64 + 1;
    let (r0, c0) = (cy.round() as i64, cx.round() as i64);
    let mut out = Vec::new();
    for r in (r0 - reach).max(0)..=(r0 + reach).min(height as i64 - 1) {
        for c in (c0 - reach).max(0)..=(c0 + reach).min(width as i64 - 1) {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            let inside = match shape {
                ShapeKind::Disc => dx * dx + dy * dy <= radius * radius,
                _ => point_in_polygon(dx, dy, &polygon),
            };
            if inside {
                out.push(r as usize * width + c as usize);
            }
        }
    }
    out
}

fn outline(shape: ShapeKind, radius: f64, angle: f64) -> Vec<(f64, f64)> {
    let polar = |r: f64, t: f64| (r * (t + angle).cos(), r * (t + angle).sin());
    let tau = std::f64::consts::TAU;
    match shape {
        ShapeKind::Disc => Vec::new(),
        ShapeKind::Square => (0..4).map(|i| polar(radius * 0.9, tau * (i as f64 + 0.5) / 4.0)).collect(),
        ShapeKind::Triangle => (0..3).map(|i| polar(radius, tau * i as f64 / 3.0)).collect(),
        ShapeKind::Star => (0..10)
            .map(|i| {
                let r = if i % 2 == 0 { radius } else { radius * 0.5 };
                polar(r, tau * i as f64 / 10.0)
            })
            .collect(),
        ShapeKind::Cross => {
            let a = radius;
            let b = radius / 3.0;
            [(b, a), (b, b), (a, b), (a, -b), (b, -b), (b, -a), (-b, -a), (-b, -b), (-a, -b), (-a, b), (-b, b), (-b, a)]
                .into_iter()
                .map(|(x, y)| {
                    let (s, c) = angle.sin_cos();
                    (x * c - y * s, x * s + y * c)
                })
                .collect()
        }
    }
}

/// Even-odd ray casting; `(x, y)` is the offset from the shape center.
fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disc_area_is_close_to_pi_r_squared() {
        let px = rasterize(ShapeKind::Disc, 30.0, 30.0, 10.0, 0.0, 64, 64);
        let area = std::f64::consts::PI * 100.0;
        assert!((px.len() as f64 - area).abs() < 0.05 * area);
    }

    #[test]
    fn shapes_are_nonempty_and_inside_bounds() {
        for shape in [ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Star, ShapeKind::Cross] {
            let px = rasterize(shape, 20.0, 20.0, 9.0, 0.7, 40, 40);
            assert!(px.len() > 30, "{shape:?}");
            assert!(px.windows(2).all(|w| w[0] < w[1]));
            assert!(crate::scene::is_connected(&px, 40), "{shape:?}");
        }
    }
}
