//! Synthetic "shapes world" scenes: horizontal stuff bands with hard-edged
//! thing shapes drawn on top, plus exact semantic/instance ground truth.

mod io;
mod raster;

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{decode_sample, encode_sample, read_catalog, read_manifest, sample_stem, write_catalog, write_manifest, Manifest};
pub use raster::ShapeKind;

/// Semantic value marking pixels excluded from every loss and metric.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StuffClass {
    pub id: u8,
    pub name: String,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThingClass {
    pub id: u8,
    pub shape: ShapeKind,
    pub color: [u8; 3],
}

/// Class tables. Ids are contiguous from 0: stuff first, then known things,
/// then the unknown things that only evaluation splits may contain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    pub stuff: Vec<StuffClass>,
    pub known_things: Vec<ThingClass>,
    pub unknown_things: Vec<ThingClass>,
}

impl Default for ClassCatalog {
    fn default() -> Self {
        let stuff = |id, name: &str, color| StuffClass { id, name: name.to_string(), color };
        let thing = |id, shape, color| ThingClass { id, shape, color };
        Self {
            stuff: vec![stuff(0, "road", [92, 92, 98]), stuff(1, "grass", [70, 140, 60]), stuff(2, "sky", [150, 190, 235])],
            known_things: vec![
                thing(3, ShapeKind::Disc, [215, 60, 50]),
                thing(4, ShapeKind::Square, [235, 200, 50]),
                thing(5, ShapeKind::Triangle, [40, 70, 190]),
            ],
            // Unknown colors are midpoints of a known-thing and a stuff color
            // (disc/grass, square/road): new appearances inside the range of
            // the training colors rather than far outside it.
            unknown_things: vec![thing(6, ShapeKind::Star, [142, 100, 55]), thing(7, ShapeKind::Cross, [164, 146, 74])],
        }
    }
}

impl ClassCatalog {
    /// Number of known classes (stuff + known things).
    pub fn num_known(&self) -> usize {
        self.stuff.len() + self.known_things.len()
    }

    pub fn num_stuff(&self) -> usize {
        self.stuff.len()
    }

    /// Class id reported for every unknown segment: one past the known ids.
    pub fn unknown_id(&self) -> u8 {
        self.num_known() as u8
    }

    pub fn is_stuff(&self, class: u8) -> bool {
        (class as usize) < self.num_stuff()
    }

    pub fn is_known_thing(&self, class: u8) -> bool {
        (self.num_stuff()..self.num_known()).contains(&(class as usize))
    }

    pub fn is_unknown(&self, class: u8) -> bool {
        class != IGNORE_LABEL && class as usize >= self.num_known()
    }

    pub fn is_thing(&self, class: u8) -> bool {
        self.is_known_thing(class) || self.is_unknown(class)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stuff.is_empty() || self.known_things.is_empty() {
            return Err(Error::Config("catalog needs at least one stuff and one known thing class".into()));
        }
        let ids =
            self.stuff.iter().map(|s| s.id).chain(self.known_things.iter().map(|t| t.id)).chain(self.unknown_things.iter().map(|t| t.id));
        for (expected, id) in ids.enumerate() {
            if id as usize != expected {
                return Err(Error::Config(format!(
                    "class ids must be contiguous from 0 in stuff/known/unknown order; found {id} at position {expected}"
                )));
            }
        }
        if self.num_known() + self.unknown_things.len() >= IGNORE_LABEL as usize {
            return Err(Error::Config("too many classes".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Inclusive range of objects per image.
    pub objects_per_image: (usize, usize),
    /// Inclusive range of object radii in pixels.
    pub object_radius: (usize, usize),
    pub noise_std: f64,
    pub texture_jitter: f64,
    pub include_unknowns: bool,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 96,
            height: 96,
            objects_per_image: (2, 4),
            object_radius: (7, 13),
            noise_std: 0.02,
            texture_jitter: 0.05,
            include_unknowns: false,
            seed: 7,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 32 || self.height < 32 {
            return Err(Error::Config(format!("scene must be at least 32x32, got {}x{}", self.width, self.height)));
        }
        let (rmin, rmax) = self.object_radius;
        if rmin == 0 || rmin > rmax || 2 * rmax + 1 > self.width.min(self.height) {
            return Err(Error::Config(format!("object radius range {rmin}..={rmax} does not fit the image")));
        }
        if self.objects_per_image.0 > self.objects_per_image.1 {
            return Err(Error::Config("objects_per_image range is inverted".into()));
        }
        if !(self.noise_std >= 0.0) || !(self.texture_jitter >= 0.0) {
            return Err(Error::Config("noise_std and texture_jitter must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Tune,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Tune, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Tune => "tune",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Splits that must never contain unknown categories.
    pub fn is_closed(self) -> bool {
        matches!(self, Split::Train | Split::Tune)
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL.into_iter().find(|split| split.name() == s).ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Center {
    pub row: u32,
    pub col: u32,
    pub instance_id: u16,
    pub class_id: u8,
}

/// One rendered scene with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u32,
    pub width: usize,
    pub height: usize,
    /// Row-major RGB, 3 bytes per pixel; the value in [0,1] is byte / 255.
    pub image: Vec<u8>,
    pub semantic_map: Vec<u8>,
    /// 0 marks pixels that belong to no instance.
    pub instance_map: Vec<u16>,
    pub centers: Vec<Center>,
    pub split: Split,
}

impl Sample {
    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    /// RGB at a pixel, scaled to [0,1].
    pub fn rgb(&self, row: usize, col: usize) -> [f64; 3] {
        let i = 3 * (row * self.width + col);
        [self.image[i] as f64 / 255.0, self.image[i + 1] as f64 / 255.0, self.image[i + 2] as f64 / 255.0]
    }

    pub fn center_heatmap(&self, sigma_g: f64) -> Result<Vec<f64>> {
        center_heatmap(self.width, self.height, &self.centers, sigma_g)
    }
}

/// Ground-truth center heatmap: an unnormalized Gaussian of peak 1 at every
/// center, merged by pixelwise maximum.
pub fn center_heatmap(width: usize, height: usize, centers: &[Center], sigma_g: f64) -> Result<Vec<f64>> {
    if !(sigma_g > 0.0) {
        return Err(Error::Domain(format!("sigma_g must be > 0, got {sigma_g}")));
    }
    let mut heat = vec![0.0; width * height];
    let denom = 2.0 * sigma_g * sigma_g;
    // Beyond 6 sigma the bump is below 1e-7 of its peak.
    let reach = (6.0 * sigma_g).ceil() as i64;
    for c in centers {
        let (r0, c0) = (c.row as i64, c.col as i64);
        for r in (r0 - reach).max(0)..=(r0 + reach).min(height as i64 - 1) {
            for col in (c0 - reach).max(0)..=(c0 + reach).min(width as i64 - 1) {
                let d2 = ((r - r0).pow(2) + (col - c0).pow(2)) as f64;
                let v = (-d2 / denom).exp();
                let cell = &mut heat[r as usize * width + col as usize];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
    Ok(heat)
}

/// Instances must keep at least this many visible pixels.
const MIN_VISIBLE_PIXELS: usize = 16;
/// And at least this fraction of their drawn area.
const MIN_VISIBLE_FRACTION: f64 = 0.5;
const PLACEMENT_RETRIES: usize = 64;

/// Renders `n_images` scenes. Each image draws from its own ChaCha stream of
/// `spec.seed`, so output is deterministic and independent of thread count.
pub fn generate_dataset(catalog: &ClassCatalog, spec: &SceneSpec, n_images: usize, split: Split) -> Result<Vec<Sample>> {
    catalog.validate()?;
    spec.validate()?;
    if n_images == 0 {
        return Err(Error::Config("n_images must be >= 1".into()));
    }
    if split.is_closed() && spec.include_unknowns {
        return Err(Error::Config(format!("split {} must not contain unknown categories", split.name())));
    }
    (0..n_images)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            render_scene(catalog, spec, &mut rng, i as u32, split)
        })
        .collect()
}

struct Placed {
    id: u16,
    class: u8,
    drawn: usize,
}

fn render_scene(catalog: &ClassCatalog, spec: &SceneSpec, rng: &mut ChaCha8Rng, id: u32, split: Split) -> Result<Sample> {
    let (w, h) = (spec.width, spec.height);
    let n = w * h;
    let mut color = vec![[0.0f64; 3]; n];
    let mut semantic = vec![0u8; n];
    let mut instance = vec![0u16; n];

    // Stuff: 2-4 horizontal bands, neighbouring bands differ in class.
    let n_bands = rng.random_range(2..=4usize);
    let mut cuts: Vec<usize> = (0..n_bands - 1).map(|_| rng.random_range(h / 8..h - h / 8)).collect();
    cuts.sort_unstable();
    let mut prev: Option<usize> = None;
    let mut start = 0;
    for band in 0..n_bands {
        let end = cuts.get(band).copied().unwrap_or(h);
        let mut class = rng.random_range(0..catalog.stuff.len());
        if catalog.stuff.len() > 1 {
            while Some(class) == prev {
                class = rng.random_range(0..catalog.stuff.len());
            }
        }
        prev = Some(class);
        let rgb = jitter(rng, catalog.stuff[class].color, spec.texture_jitter);
        for r in start..end.max(start) {
            for c in 0..w {
                color[r * w + c] = rgb;
                semantic[r * w + c] = catalog.stuff[class].id;
            }
        }
        start = end.max(start);
    }

    let mut candidates: Vec<&ThingClass> = catalog.known_things.iter().collect();
    if spec.include_unknowns {
        candidates.extend(&catalog.unknown_things);
    }
    let target = rng.random_range(spec.objects_per_image.0..=spec.objects_per_image.1);
    let mut placed: Vec<Placed> = Vec::new();
    for _ in 0..target {
        let thing = candidates[rng.random_range(0..candidates.len())];
        let next_id = placed.len() as u16 + 1;
        for _ in 0..PLACEMENT_RETRIES {
            let radius = rng.random_range(spec.object_radius.0..=spec.object_radius.1) as f64;
            let rr = radius.ceil() as usize;
            let cy = rng.random_range(rr..h - rr) as f64;
            let cx = rng.random_range(rr..w - rr) as f64;
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let mask = raster::rasterize(thing.shape, cy, cx, radius, angle, w, h);
            if mask.len() < MIN_VISIBLE_PIXELS || !is_connected(&mask, w) {
                continue;
            }
            let mut trial = instance.clone();
            for &p in &mask {
                trial[p] = next_id;
            }
            if !placed.iter().all(|p| survives(&trial, p, w)) {
                continue;
            }
            let rgb = jitter(rng, thing.color, spec.texture_jitter);
            for &p in &mask {
                color[p] = rgb;
                semantic[p] = thing.id;
            }
            instance = trial;
            placed.push(Placed { id: next_id, class: thing.id, drawn: mask.len() });
            break;
        }
    }

    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
    let mut image = Vec::with_capacity(3 * n);
    for px in &color {
        for &ch in px {
            let v = if spec.noise_std > 0.0 { ch + noise.sample(rng) } else { ch };
            image.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }

    let centers = placed.iter().map(|p| visible_center(&instance, p.id, p.class, w)).collect();
    Ok(Sample { id, width: w, height: h, image, semantic_map: semantic, instance_map: instance, centers, split })
}

fn jitter(rng: &mut ChaCha8Rng, base: [u8; 3], magnitude: f64) -> [f64; 3] {
    base.map(|b| {
        let offset = if magnitude > 0.0 { rng.random_range(-magnitude..=magnitude) } else { 0.0 };
        (b as f64 / 255.0 + offset).clamp(0.0, 1.0)
    })
}

/// Checks that an earlier instance stays visible and in one piece.
fn survives(instance: &[u16], placed: &Placed, width: usize) -> bool {
    let pixels: Vec<usize> = (0..instance.len()).filter(|&i| instance[i] == placed.id).collect();
    pixels.len() >= MIN_VISIBLE_PIXELS && pixels.len() as f64 >= MIN_VISIBLE_FRACTION * placed.drawn as f64 && is_connected(&pixels, width)
}

/// 4-connectivity of a pixel set given as sorted flat indices.
pub(crate) fn is_connected(pixels: &[usize], width: usize) -> bool {
    let Some(&first) = pixels.first() else { return true };
    let member = |p: usize| pixels.binary_search(&p).is_ok();
    let mut seen = std::collections::HashSet::from([first]);
    let mut queue = VecDeque::from([first]);
    while let Some(p) = queue.pop_front() {
        let (r, c) = (p / width, p % width);
        let mut visit = |q: usize| {
            if member(q) && seen.insert(q) {
                queue.push_back(q);
            }
        };
        if r > 0 {
            visit(p - width);
        }
        visit(p + width);
        if c > 0 {
            visit(p - 1);
        }
        if c + 1 < width {
            visit(p + 1);
        }
    }
    seen.len() == pixels.len()
}

/// Rounded center of mass of the visible pixels; snapped to the nearest
/// member pixel when the rounded point falls outside the instance.
fn visible_center(instance: &[u16], id: u16, class: u8, width: usize) -> Center {
    let members: Vec<(usize, usize)> = instance.iter().enumerate().filter(|(_, &v)| v == id).map(|(i, _)| (i / width, i % width)).collect();
    let count = members.len() as f64;
    let mean_r = members.iter().map(|m| m.0 as f64).sum::<f64>() / count;
    let mean_c = members.iter().map(|m| m.1 as f64).sum::<f64>() / count;
    let (mut row, mut col) = (mean_r.round() as usize, mean_c.round() as usize);
    if instance[row * width + col] != id {
        let nearest = members
            .iter()
            .min_by(|a, b| {
                let da = (a.0 as f64 - mean_r).powi(2) + (a.1 as f64 - mean_c).powi(2);
                let db = (b.0 as f64 - mean_r).powi(2) + (b.1 as f64 - mean_c).powi(2);
                da.total_cmp(&db)
            })
            .expect("instance has pixels");
        (row, col) = *nearest;
    }
    Center { row: row as u32, col: col as u32, instance_id: id, class_id: class }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> SceneSpec {
        SceneSpec { seed, ..SceneSpec::default() }
    }

    #[test]
    fn catalog_layout() {
        let cat = ClassCatalog::default();
        cat.validate().unwrap();
        assert_eq!(cat.num_known(), 6);
        assert_eq!(cat.num_stuff(), 3);
        assert_eq!(cat.unknown_id(), 6);
        assert!(cat.is_unknown(7) && !cat.is_unknown(IGNORE_LABEL));
        let mut bad = cat.clone();
        bad.unknown_things[0].id = 3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(SceneSpec { width: 16, ..SceneSpec::default() }.validate().is_err());
        assert!(SceneSpec { object_radius: (10, 60), ..SceneSpec::default() }.validate().is_err());
        assert!(SceneSpec { noise_std: -1.0, ..SceneSpec::default() }.validate().is_err());
    }

    #[test]
    fn train_split_rejects_unknowns() {
        let spec = SceneSpec { include_unknowns: true, ..SceneSpec::default() };
        let err = generate_dataset(&ClassCatalog::default(), &spec, 1, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(generate_dataset(&ClassCatalog::default(), &spec, 1, Split::Val).is_ok());
    }

    #[test]
    fn no_objects_gives_pure_stuff() {
        let spec = SceneSpec { objects_per_image: (0, 0), ..SceneSpec::default() };
        let cat = ClassCatalog::default();
        for s in generate_dataset(&cat, &spec, 4, Split::Train).unwrap() {
            assert!(s.instance_map.iter().all(|&v| v == 0));
            assert!(s.semantic_map.iter().all(|&c| cat.is_stuff(c)));
            assert!(s.centers.is_empty());
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let cat = ClassCatalog::default();
        let a = generate_dataset(&cat, &small_spec(11), 3, Split::Val).unwrap();
        let b = generate_dataset(&cat, &small_spec(11), 3, Split::Val).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&cat, &small_spec(12), 3, Split::Val).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn label_maps_are_consistent() {
        let cat = ClassCatalog::default();
        let spec = SceneSpec { include_unknowns: true, ..small_spec(5) };
        for s in generate_dataset(&cat, &spec, 8, Split::Val).unwrap() {
            for (i, (&inst, &sem)) in s.instance_map.iter().zip(&s.semantic_map).enumerate() {
                if inst == 0 {
                    assert!(cat.is_stuff(sem), "pixel {i}");
                } else {
                    assert!(cat.is_thing(sem), "pixel {i}");
                    assert_eq!(sem, s.centers[inst as usize - 1].class_id);
                }
            }
            for c in &s.centers {
                let idx = c.row as usize * s.width + c.col as usize;
                assert_eq!(s.instance_map[idx], c.instance_id);
            }
        }
    }

    #[test]
    fn heatmap_peaks_and_merges() {
        let empty = center_heatmap(40, 40, &[], 4.0).unwrap();
        assert!(empty.iter().all(|&v| v == 0.0));

        let a = Center { row: 10, col: 12, instance_id: 1, class_id: 3 };
        let b = Center { row: 10, col: 13, instance_id: 2, class_id: 3 };
        let single = center_heatmap(40, 40, &[a], 4.0).unwrap();
        assert_eq!(single[10 * 40 + 12], 1.0);

        let both = center_heatmap(40, 40, &[a, b], 4.0).unwrap();
        for r in 0..40usize {
            for c in 0..40usize {
                let g = |cr: f64, cc: f64| (-((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)) / 32.0).exp();
                let want = g(10.0, 12.0).max(g(10.0, 13.0));
                let want = if want < 1e-7 { 0.0 } else { want };
                assert!((both[r * 40 + c] - want).abs() < 1e-7, "({r},{c})");
            }
        }
        assert!(center_heatmap(4, 4, &[], 0.0).is_err());
    }
}
