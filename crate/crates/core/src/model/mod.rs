//! Per-pixel network: a shared tanh trunk over a local RGB patch (plus
//! normalized coordinates) feeding five affine heads.
//!
//! Head wiring, with `h` the last trunk activation:
//!
//! ```text
//! semantic logits  z   = A_sem(h)                      -> K
//! center           c   = A_ctr(h ++ z),  ĉ = sigmoid(c) -> 1
//! embedding        φ   = A_emb(h ++ c ++ z)              -> F
//! prototype mean   μ   = A_mu(h ++ c)                    -> F
//! prototype var    σ²  = softplus(A_var(h ++ c))          -> 1
//! ```
//!
//! The concatenated `z` and `c` are inputs only: no gradient flows back
//! through them into the semantic or center branch.

mod checkpoint;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{sigmoid, softplus};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Lower bound applied to predicted prototype variances.
pub const MIN_PROTO_VAR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvidenceActivation {
    Softplus,
    Exp,
}

impl EvidenceActivation {
    pub fn apply(self, logit: f64) -> f64 {
        match self {
            Self::Softplus => softplus(logit),
            Self::Exp => logit.exp(),
        }
    }

    /// d evidence / d logit.
    pub fn derivative(self, logit: f64) -> f64 {
        match self {
            Self::Softplus => sigmoid(logit),
            Self::Exp => logit.exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub patch_radius: usize,
    pub use_coords: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { patch_radius: 3, use_coords: true }
    }
}

impl FeatureConfig {
    pub fn input_dim(&self) -> usize {
        let side = 2 * self.patch_radius + 1;
        3 * side * side + if self.use_coords { 2 } else { 0 }
    }
}

/// Network dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub features: FeatureConfig,
    pub trunk_widths: Vec<usize>,
    pub num_classes: usize,
    pub num_stuff: usize,
    pub embed_dim: usize,
    pub activation: EvidenceActivation,
}

impl Arch {
    pub fn new(num_classes: usize, num_stuff: usize, embed_dim: usize) -> Self {
        Self {
            features: FeatureConfig::default(),
            trunk_widths: vec![64, 64],
            num_classes,
            num_stuff,
            embed_dim,
            activation: EvidenceActivation::Softplus,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trunk_widths.is_empty() || self.trunk_widths.contains(&0) {
            return Err(Error::Config(format!("trunk widths must be nonempty and positive, got {:?}", self.trunk_widths)));
        }
        if self.embed_dim < 2 {
            return Err(Error::Config(format!("embedding size must be >= 2, got {}", self.embed_dim)));
        }
        if self.num_classes < 2 || self.num_stuff == 0 || self.num_stuff >= self.num_classes {
            return Err(Error::Config(format!("need 0 < stuff classes ({}) < known classes ({})", self.num_stuff, self.num_classes)));
        }
        Ok(())
    }

    fn trunk_out(&self) -> usize {
        *self.trunk_widths.last().expect("validated")
    }
}

/// y = W x + b, with `weight` shaped (out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    fn zeros(out: usize, input: usize) -> Self {
        Self { weight: Array2::zeros((out, input)), bias: Array1::zeros(out) }
    }

    fn glorot(out: usize, input: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (input + out) as f64).sqrt();
        let weight = Array2::from_shape_fn((out, input), |_| rng.random_range(-limit..=limit) as f32 as f64);
        Self { weight, bias: Array1::zeros(out) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn apply(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }
}

/// All trainable parameters. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub trunk: Vec<Affine>,
    pub head_sem: Affine,
    pub head_center: Affine,
    pub head_embed: Affine,
    pub head_proto_mu: Affine,
    pub head_proto_var: Affine,
}

impl ModelParams {
    fn build(arch: &Arch, mut layer: impl FnMut(usize, usize) -> Affine) -> Result<Self> {
        arch.validate()?;
        let mut trunk = Vec::new();
        let mut width = arch.features.input_dim();
        for &w in &arch.trunk_widths {
            trunk.push(layer(w, width));
            width = w;
        }
        let (k, f) = (arch.num_classes, arch.embed_dim);
        Ok(Self {
            arch: arch.clone(),
            trunk,
            head_sem: layer(k, width),
            head_center: layer(1, width + k),
            head_embed: layer(f, width + 1 + k),
            head_proto_mu: layer(f, width + 1),
            head_proto_var: layer(1, width + 1),
        })
    }

    pub fn zeros(arch: &Arch) -> Result<Self> {
        Self::build(arch, Affine::zeros)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.arch).expect("architecture already validated")
    }

    fn layers(&self) -> impl Iterator<Item = &Affine> {
        self.trunk.iter().chain([&self.head_sem, &self.head_center, &self.head_embed, &self.head_proto_mu, &self.head_proto_var])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Affine> {
        self.trunk.iter_mut().chain([
            &mut self.head_sem,
            &mut self.head_center,
            &mut self.head_embed,
            &mut self.head_proto_mu,
            &mut self.head_proto_var,
        ])
    }

    /// Parameter blocks in declaration order: per layer, weights (row-major)
    /// then bias.
    pub fn blocks(&self) -> Vec<&[f64]> {
        self.layers().flat_map(|l| [l.weight.as_slice().expect("standard layout"), l.bias.as_slice().expect("standard layout")]).collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .flat_map(|l| {
                let Affine { weight, bias } = l;
                [weight.as_slice_mut().expect("standard layout"), bias.as_slice_mut().expect("standard layout")]
            })
            .collect()
    }

    /// Names of the blocks returned by [`Self::blocks`].
    pub fn block_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.trunk.len() {
            names.push(format!("trunk{i}.weight"));
            names.push(format!("trunk{i}.bias"));
        }
        for head in ["sem", "center", "embed", "proto_mu", "proto_var"] {
            names.push(format!("{head}.weight"));
            names.push(format!("{head}.bias"));
        }
        names
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn get_flat(&self, mut index: usize) -> f64 {
        for b in self.blocks() {
            if index < b.len() {
                return b[index];
            }
            index -= b.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set_flat(&mut self, mut index: usize, value: f64) {
        for b in self.blocks_mut() {
            if index < b.len() {
                b[index] = value;
                return;
            }
            index -= b.len();
        }
        panic!("parameter index out of range")
    }

    /// self += scale * other.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
    }

    pub fn norm(&self) -> f64 {
        self.blocks().iter().flat_map(|b| b.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Rounds every parameter to the nearest f32, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// Deterministic Glorot-uniform initialization with zero biases. Values are
/// representable in f32 so checkpoints round-trip exactly.
pub fn init_params(arch: &Arch, seed: u64) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelParams::build(arch, |out, input| Affine::glorot(out, input, &mut rng))
}

/// Borrowed RGB image, 3 bytes per pixel in row-major order.
#[derive(Debug, Clone, Copy)]
pub struct ImageRef<'a> {
    pub width: usize,
    pub height: usize,
    pub rgb: &'a [u8],
}

impl crate::scene::Sample {
    pub fn image_ref(&self) -> ImageRef<'_> {
        ImageRef { width: self.width, height: self.height, rgb: &self.image }
    }
}

/// Input rows for the given flat pixel indices: the clamped-border patch,
/// centered to [-0.5, 0.5], then (row/H, col/W) when enabled.
pub fn extract_features(image: ImageRef<'_>, pixels: &[usize], config: &FeatureConfig) -> Array2<f64> {
    let (w, h) = (image.width, image.height);
    let r = config.patch_radius as i64;
    let mut out = Array2::zeros((pixels.len(), config.input_dim()));
    for (row_out, &p) in out.rows_mut().into_iter().zip(pixels) {
        let row_out = row_out.into_slice().expect("contiguous rows");
        let (pr, pc) = ((p / w) as i64, (p % w) as i64);
        let mut k = 0;
        for dr in -r..=r {
            let rr = (pr + dr).clamp(0, h as i64 - 1) as usize;
            for dc in -r..=r {
                let cc = (pc + dc).clamp(0, w as i64 - 1) as usize;
                let base = 3 * (rr * w + cc);
                for ch in 0..3 {
                    row_out[k] = image.rgb[base + ch] as f64 / 255.0 - 0.5;
                    k += 1;
                }
            }
        }
        if config.use_coords {
            row_out[k] = pr as f64 / h as f64;
            row_out[k + 1] = pc as f64 / w as f64;
        }
    }
    out
}

/// Values of the cross-branch concatenations, held fixed.
#[derive(Debug, Clone)]
pub struct CrossInputs {
    pub sem_logits: Array2<f64>,
    pub center_pre: Array2<f64>,
}

/// Everything the backward pass needs from a forward pass over N pixels.
#[derive(Debug, Clone)]
pub struct Activations {
    pub input: Array2<f64>,
    /// tanh outputs of each trunk layer.
    pub trunk: Vec<Array2<f64>>,
    pub sem_logits: Array2<f64>,
    pub center_pre: Array2<f64>,
    pub embed: Array2<f64>,
    pub proto_mu: Array2<f64>,
    pub proto_var_pre: Array2<f64>,
    /// Inputs actually fed to the center, embedding and prototype heads.
    pub center_in: Array2<f64>,
    pub embed_in: Array2<f64>,
    pub proto_in: Array2<f64>,
}

impl Activations {
    pub fn len(&self) -> usize {
        self.input.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cross_inputs(&self) -> CrossInputs {
        CrossInputs { sem_logits: self.sem_logits.clone(), center_pre: self.center_pre.clone() }
    }
}

/// Batched forward pass over rows of `input`. With `frozen`, the cross-branch
/// concatenations use the given values instead of the freshly computed ones.
pub fn forward_batch(params: &ModelParams, input: Array2<f64>, frozen: Option<&CrossInputs>) -> Activations {
    let mut trunk = Vec::with_capacity(params.trunk.len());
    for layer in &params.trunk {
        let x = trunk.last().unwrap_or(&input).view();
        let mut a = layer.apply(&x);
        a.mapv_inplace(f64::tanh);
        trunk.push(a);
    }
    let h = trunk.last().expect("validated trunk").view();
    let sem_logits = params.head_sem.apply(&h);
    let cross_sem = frozen.map(|f| f.sem_logits.view()).unwrap_or(sem_logits.view());
    let center_in = concatenate![Axis(1), h, cross_sem];
    let center_pre = params.head_center.apply(&center_in.view());
    let cross_center = frozen.map(|f| f.center_pre.view()).unwrap_or(center_pre.view());
    let embed_in = concatenate![Axis(1), h, cross_center, cross_sem];
    let proto_in = concatenate![Axis(1), h, cross_center];
    let embed = params.head_embed.apply(&embed_in.view());
    let proto_mu = params.head_proto_mu.apply(&proto_in.view());
    let proto_var_pre = params.head_proto_var.apply(&proto_in.view());
    Activations { input, trunk, sem_logits, center_pre, embed, proto_mu, proto_var_pre, center_in, embed_in, proto_in }
}

/// Gradients of a scalar objective with respect to the network outputs.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub sem_logits: Array2<f64>,
    pub center_pre: Array2<f64>,
    pub embed: Array2<f64>,
    pub proto_mu: Array2<f64>,
    pub proto_var_pre: Array2<f64>,
}

impl OutputGrads {
    pub fn zeros(n: usize, arch: &Arch) -> Self {
        Self {
            sem_logits: Array2::zeros((n, arch.num_classes)),
            center_pre: Array2::zeros((n, 1)),
            embed: Array2::zeros((n, arch.embed_dim)),
            proto_mu: Array2::zeros((n, arch.embed_dim)),
            proto_var_pre: Array2::zeros((n, 1)),
        }
    }
}

fn accumulate_affine(grad: &mut Affine, upstream: &Array2<f64>, input: &Array2<f64>) {
    grad.weight += &upstream.t().dot(input);
    grad.bias += &upstream.sum_axis(Axis(0));
}

/// Backpropagates output gradients into `grad` (accumulating).
pub fn backward(params: &ModelParams, acts: &Activations, upstream: &OutputGrads, grad: &mut ModelParams) {
    let t = params.arch.trunk_out();
    let h = acts.trunk.last().expect("validated trunk");

    accumulate_affine(&mut grad.head_sem, &upstream.sem_logits, h);
    accumulate_affine(&mut grad.head_center, &upstream.center_pre, &acts.center_in);
    accumulate_affine(&mut grad.head_embed, &upstream.embed, &acts.embed_in);
    accumulate_affine(&mut grad.head_proto_mu, &upstream.proto_mu, &acts.proto_in);
    accumulate_affine(&mut grad.head_proto_var, &upstream.proto_var_pre, &acts.proto_in);

    // Only the trunk slice of each head input carries gradient.
    let mut dh = upstream.sem_logits.dot(&params.head_sem.weight);
    dh += &upstream.center_pre.dot(&params.head_center.weight.slice(s![.., ..t]));
    dh += &upstream.embed.dot(&params.head_embed.weight.slice(s![.., ..t]));
    dh += &upstream.proto_mu.dot(&params.head_proto_mu.weight.slice(s![.., ..t]));
    dh += &upstream.proto_var_pre.dot(&params.head_proto_var.weight.slice(s![.., ..t]));

    for i in (0..params.trunk.len()).rev() {
        let a = &acts.trunk[i];
        // tanh' = 1 - a²
        let mut dz = dh;
        dz.zip_mut_with(a, |d, &y| *d *= 1.0 - y * y);
        let below = if i == 0 { &acts.input } else { &acts.trunk[i - 1] };
        accumulate_affine(&mut grad.trunk[i], &dz, below);
        dh = if i > 0 { dz.dot(&params.trunk[i].weight) } else { Array2::zeros((0, 0)) };
    }
}

/// Dense per-pixel outputs for one image (rows in raster order).
#[derive(Debug, Clone)]
pub struct DensePrediction {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub sem_logits: Array2<f64>,
    pub evidence: Array2<f64>,
    pub alpha: Array2<f64>,
    pub center_hat: Array1<f64>,
    pub embed: Array2<f64>,
    pub proto_mu: Array2<f64>,
    pub proto_var: Array1<f64>,
}

impl DensePrediction {
    pub fn from_activations(acts: &Activations, activation: EvidenceActivation, width: usize, height: usize) -> Self {
        let evidence = acts.sem_logits.mapv(|z| activation.apply(z));
        let alpha = evidence.mapv(|e| e + 1.0);
        let center_hat = acts.center_pre.column(0).mapv(sigmoid);
        let proto_var = acts.proto_var_pre.column(0).mapv(|v| softplus(v).max(MIN_PROTO_VAR));
        Self {
            width,
            height,
            num_classes: acts.sem_logits.ncols(),
            sem_logits: acts.sem_logits.clone(),
            evidence,
            alpha,
            center_hat,
            embed: acts.embed.clone(),
            proto_mu: acts.proto_mu.clone(),
            proto_var,
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.ncols()
    }

    /// Argmax over evidence among the given class range; lowest id wins ties.
    pub fn argmax_in(&self, pixel: usize, classes: std::ops::Range<usize>) -> usize {
        let row = self.evidence.row(pixel);
        let mut best = classes.start;
        for k in classes {
            if row[k] > row[best] {
                best = k;
            }
        }
        best
    }

    pub fn semantic_argmax(&self, pixel: usize) -> usize {
        self.argmax_in(pixel, 0..self.num_classes)
    }

    fn check_finite(&self) -> Result<()> {
        let fields: [(&'static str, Vec<bool>); 5] = [
            ("semantic evidence", self.evidence.rows().into_iter().map(|r| r.iter().all(|v| v.is_finite())).collect()),
            ("center heatmap", self.center_hat.iter().map(|v| v.is_finite()).collect()),
            ("embedding", self.embed.rows().into_iter().map(|r| r.iter().all(|v| v.is_finite())).collect()),
            ("prototype mean", self.proto_mu.rows().into_iter().map(|r| r.iter().all(|v| v.is_finite())).collect()),
            ("prototype variance", self.proto_var.iter().map(|v| v.is_finite()).collect()),
        ];
        for (what, ok) in fields {
            if let Some(p) = ok.iter().position(|&v| !v) {
                return Err(Error::NonFinitePixel { what, row: p / self.width, col: p % self.width });
            }
        }
        Ok(())
    }
}

/// Full-image forward pass. Every pixel is processed independently from its
/// own clamped patch.
pub fn forward(params: &ModelParams, image: ImageRef<'_>) -> Result<DensePrediction> {
    if image.rgb.len() != 3 * image.width * image.height {
        return Err(Error::Dimension(format!("image buffer has {} bytes, expected {}", image.rgb.len(), 3 * image.width * image.height)));
    }
    let pixels: Vec<usize> = (0..image.width * image.height).collect();
    let input = extract_features(image, &pixels, &params.arch.features);
    let acts = forward_batch(params, input, None);
    let pred = DensePrediction::from_activations(&acts, params.arch.activation, image.width, image.height);
    pred.check_finite()?;
    Ok(pred)
}
