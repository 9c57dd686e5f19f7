//! The command-line operations as library calls. Every command reads from
//! the dataset and run directories named in the config and writes its
//! outputs there; nothing else is shared between commands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::clustering::{tune_dbscan, TuningResult};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::inference::{fit_uncertainty_stats, holistic_infer, read_prediction, write_prediction, InferenceParams, Mode, UncertaintyStats};
use crate::metrics::{extract_segments, fpr_at_95tpr, pq, unknown_ap, ClassLayout, IouTally, PqGroup, PqReport};
use crate::model::{forward, init_params, load_checkpoint, save_checkpoint, ModelParams};
use crate::png_io::write_rgb8;
use crate::scene::{
    decode_sample, encode_sample, generate_dataset, read_catalog, read_manifest, sample_stem, write_catalog, write_manifest, ClassCatalog,
    Manifest, Sample, SceneSpec, Split, IGNORE_LABEL,
};
use crate::train::{train, EpochRecord};
use crate::viz;

pub const CHECKPOINT_FILE: &str = "model.u3hs";
pub const TRACE_FILE: &str = "loss_trace.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const TUNING_FILE: &str = "dbscan_tuning.json";
pub const EVAL_FILE: &str = "eval_report.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Each split is rendered from its own seed so that splits never share scenes.
fn split_seed(seed: u64, split: Split) -> u64 {
    let index = Split::ALL.iter().position(|&s| s == split).expect("listed split") as u64;
    seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Renders every split with a nonzero count. Train and tune images hold known
/// classes only; val and test may contain unknown shapes. Ids run on across
/// splits so every image in the root has its own stem.
pub fn gen(cfg: &RunConfig) -> Result<Manifest> {
    let catalog = cfg.catalog();
    let root = &cfg.paths.dataset;
    fs::create_dir_all(root)?;
    let d = &cfg.dataset;
    let mut manifest = Manifest::default();
    let mut next_id = 0u32;
    for (split, n) in [(Split::Train, d.n_train), (Split::Tune, d.n_tune), (Split::Val, d.n_val), (Split::Test, d.n_test)] {
        if n == 0 {
            continue;
        }
        let spec = SceneSpec { include_unknowns: !split.is_closed(), seed: split_seed(d.scene.seed, split), ..d.scene.clone() };
        let mut samples = generate_dataset(&catalog, &spec, n, split)?;
        samples.par_iter_mut().try_for_each(|s| {
            s.id += next_id;
            encode_sample(s, root)
        })?;
        manifest.splits.insert(split, samples.iter().map(|s| s.id).collect());
        next_id += n as u32;
        log::info!("{}: {n} images", split.name());
    }
    write_catalog(root, &catalog)?;
    write_manifest(root, &manifest)?;
    Ok(manifest)
}

/// Catalog and decoded samples of one split.
pub fn load_split(root: &Path, split: Split) -> Result<(ClassCatalog, Vec<Sample>)> {
    if !root.exists() {
        return Err(Error::MissingPath(root.to_path_buf()));
    }
    let catalog = read_catalog(root)?;
    let manifest = read_manifest(root)?;
    let ids = manifest.ids(split);
    if ids.is_empty() {
        return Err(Error::Empty(format!("split {} of {}", split.name(), root.display())));
    }
    let samples = ids.par_iter().map(|&id| decode_sample(root, id, split)).collect::<Result<_>>()?;
    Ok((catalog, samples))
}

pub fn load_model(cfg: &RunConfig, catalog: &ClassCatalog) -> Result<ModelParams> {
    let path = cfg.paths.run.join(CHECKPOINT_FILE);
    if !path.exists() {
        return Err(Error::MissingPath(path));
    }
    let model = load_checkpoint(&path)?;
    model.expect_classes(catalog.num_known(), catalog.num_stuff())?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub trace: Vec<EpochRecord>,
    pub stats: UncertaintyStats,
}

/// Trains from the config's initialization and writes the checkpoint, the
/// per-epoch loss trace and the training-split uncertainty statistics. On
/// divergence the last finite parameters are saved and an error returned.
pub fn train_model(cfg: &RunConfig) -> Result<TrainSummary> {
    let (catalog, data) = load_split(&cfg.paths.dataset, Split::Train)?;
    let arch = cfg.model.arch(&catalog);
    let params = init_params(&arch, cfg.model.init_seed)?;
    log::info!("training {} parameters on {} images", params.num_params(), data.len());
    let outcome = train(params, &data, &cfg.loss, &cfg.train, |_| {})?;
    let run = &cfg.paths.run;
    fs::create_dir_all(run)?;
    save_checkpoint(&outcome.params, &run.join(CHECKPOINT_FILE))?;
    let mut trace = String::new();
    for r in &outcome.trace {
        trace += &serde_json::to_string(r)?;
        trace.push('\n');
    }
    fs::write(run.join(TRACE_FILE), trace)?;
    if let Some(d) = outcome.diverged {
        log::error!("diverged at epoch {} step {}: {}", d.epoch, d.step, d.reason);
        return Err(Error::Diverged { epoch: d.epoch, loss: d.loss });
    }
    let stats = fit_uncertainty_stats(&outcome.params, &data, cfg.inference.t)?;
    write_json(&run.join(STATS_FILE), &stats)?;
    Ok(TrainSummary { trace: outcome.trace, stats })
}

pub fn tune(cfg: &RunConfig) -> Result<TuningResult> {
    let (catalog, samples) = load_split(&cfg.paths.dataset, cfg.tune.split)?;
    let model = load_model(cfg, &catalog)?;
    let result = tune_dbscan(&model, &samples, &cfg.tune.eps_grid, &cfg.tune.min_pts_grid)?;
    log::info!("selected eps {} min_pts {}", result.selected.eps, result.selected.min_pts);
    fs::create_dir_all(&cfg.paths.run)?;
    write_json(&cfg.paths.run.join(TUNING_FILE), &result)?;
    Ok(result)
}

pub fn prediction_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.run.join("pred").join(format!("{}_{}", cfg.inference.split.name(), cfg.inference.mode.name()))
}

/// Stored statistics with the configured multiplier, fixed or tuned DBSCAN
/// parameters, and the configured mode.
pub fn inference_params(cfg: &RunConfig) -> Result<InferenceParams> {
    let stats: UncertaintyStats = read_json(&cfg.paths.run.join(STATS_FILE))?;
    let dbscan = match cfg.inference.dbscan {
        Some(d) => d,
        None => read_json::<TuningResult>(&cfg.paths.run.join(TUNING_FILE))?.selected,
    };
    Ok(InferenceParams { stats: stats.with_t(cfg.inference.t), dbscan, centers: cfg.inference.centers, mode: cfg.inference.mode })
}

pub fn infer(cfg: &RunConfig) -> Result<PathBuf> {
    let (catalog, samples) = load_split(&cfg.paths.dataset, cfg.inference.split)?;
    let model = load_model(cfg, &catalog)?;
    let params = inference_params(cfg)?;
    let dir = prediction_dir(cfg);
    fs::create_dir_all(&dir)?;
    samples.par_iter().try_for_each(|s| {
        let out = holistic_infer(&model, s.image_ref(), &params)?;
        if out.no_prototypes {
            log::warn!("image {}: no prototypes, labeled by semantic argmax", s.id);
        }
        if out.orphaned_outliers > 0 {
            log::info!("image {}: {} outliers fell back to stuff", s.id, out.orphaned_outliers);
        }
        write_prediction(&dir, s.id, &out, params.stats.threshold, params.mode)
    })?;
    Ok(dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupScores {
    pub pq: Option<f64>,
    pub rq: Option<f64>,
    pub sq: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub groups: BTreeMap<String, GroupScores>,
    pub miou: Option<f64>,
    /// Ranking metrics are absent when the split has no unknown pixels.
    pub unknown_ap: Option<f64>,
    pub fpr95: Option<f64>,
    pub n_images: usize,
}

impl EvalReport {
    pub fn group(&self, group: PqGroup) -> GroupScores {
        self.groups[group.name()]
    }
}

struct ImageEval {
    pq: PqReport,
    iou: IouTally,
    scores: Vec<f64>,
    positive: Vec<bool>,
}

fn evaluate_image(gt: &Sample, dir: &Path, layout: &ClassLayout, mode: Mode) -> Result<ImageEval> {
    let pred = read_prediction(dir, gt.id)?;
    if pred.meta.mode != mode {
        return Err(Error::Data(format!("prediction {} was made in {} mode", gt.id, pred.meta.mode.name())));
    }
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::Dimension(format!("prediction {} does not match its image size", gt.id)));
    }
    let pred_segments = extract_segments(&pred.semantic_map, &pred.instance_map, None, layout)?;
    let gt_segments = extract_segments(&gt.semantic_map, &gt.instance_map, None, layout)?;
    let mut iou = IouTally::new(layout.num_classes);
    iou.add(&pred.semantic_map, &gt.semantic_map)?;
    let (scores, positive) = gt
        .semantic_map
        .iter()
        .zip(&pred.uncertainty_map)
        .filter(|(&g, _)| g != IGNORE_LABEL)
        .map(|(&g, &u)| (u, layout.is_unknown(g)))
        .unzip();
    Ok(ImageEval { pq: pq(&pred_segments, &gt_segments, &gt.semantic_map, layout), iou, scores, positive })
}

/// Scores the stored predictions of the configured split and mode against
/// the ground truth. Uncertainty ranking uses the stored 16-bit values.
pub fn evaluate(cfg: &RunConfig) -> Result<EvalReport> {
    let (catalog, samples) = load_split(&cfg.paths.dataset, cfg.inference.split)?;
    let dir = prediction_dir(cfg);
    if !dir.exists() {
        return Err(Error::MissingPath(dir));
    }
    let layout = ClassLayout { num_classes: catalog.num_known(), num_stuff: catalog.num_stuff() };
    let mode = cfg.inference.mode;
    let per_image: Vec<ImageEval> = samples.par_iter().map(|s| evaluate_image(s, &dir, &layout, mode)).collect::<Result<_>>()?;
    let mut pq_total = PqReport::default();
    let mut iou = IouTally::new(layout.num_classes);
    let (mut scores, mut positive) = (Vec::new(), Vec::new());
    for e in &per_image {
        pq_total.merge(&e.pq);
        iou.merge(&e.iou);
        scores.extend_from_slice(&e.scores);
        positive.extend_from_slice(&e.positive);
    }
    let groups = PqGroup::ALL
        .iter()
        .map(|&g| {
            let t = pq_total.tally(g);
            let q = t.quality();
            let scores = GroupScores { pq: q.map(|q| q.pq), rq: q.map(|q| q.rq), sq: q.map(|q| q.sq), tp: t.tp, fp: t.fp, fn_: t.fn_ };
            (g.name().to_string(), scores)
        })
        .collect();
    let has_both = positive.iter().any(|&p| p) && positive.iter().any(|&p| !p);
    let (unknown_ap, fpr95) =
        if has_both { (Some(unknown_ap(&scores, &positive)?), Some(fpr_at_95tpr(&scores, &positive)?)) } else { (None, None) };
    let report = EvalReport { mode, groups, miou: iou.miou(), unknown_ap, fpr95, n_images: samples.len() };
    write_json(&dir.join(EVAL_FILE), &report)?;
    Ok(report)
}

pub fn viz_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.run.join("viz").join(format!("{}_{}", cfg.inference.split.name(), cfg.inference.mode.name()))
}

/// Writes, for the first images of the split: the ground-truth and
/// predicted class maps, the instance map, the uncertainty map and the
/// embedding field projected to RGB.
pub fn visualize(cfg: &RunConfig) -> Result<PathBuf> {
    let (catalog, mut samples) = load_split(&cfg.paths.dataset, cfg.inference.split)?;
    samples.truncate(cfg.viz.max_images);
    let model = load_model(cfg, &catalog)?;
    let pred_dir = prediction_dir(cfg);
    let out = viz_dir(cfg);
    fs::create_dir_all(&out)?;
    samples.par_iter().try_for_each(|s| {
        let pred = read_prediction(&pred_dir, s.id)?;
        let dense = forward(&model, s.image_ref())?;
        let (w, h) = (s.width, s.height);
        let stem = sample_stem(s.id);
        write_rgb8(&out.join(format!("{stem}_gt.png")), w, h, &viz::colorize_semantic(&s.semantic_map, &catalog))?;
        write_rgb8(&out.join(format!("{stem}_sem.png")), w, h, &viz::colorize_semantic(&pred.semantic_map, &catalog))?;
        write_rgb8(&out.join(format!("{stem}_inst.png")), w, h, &viz::colorize_instances(&pred.instance_map))?;
        write_rgb8(&out.join(format!("{stem}_unc.png")), w, h, &viz::colorize_uncertainty(&pred.uncertainty_map))?;
        write_rgb8(&out.join(format!("{stem}_embed.png")), w, h, &viz::project_embeddings(dense.embed.view()))
    })?;
    Ok(out)
}
