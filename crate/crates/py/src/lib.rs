use std::path::PathBuf;

use holoseg::clustering::{dbscan as run_dbscan, DbscanParams};
use holoseg::config::RunConfig;
use holoseg::inference::{holistic_infer, uncertainty_map, CenterParams, InferenceParams, Mode, UncertaintyStats};
use holoseg::metrics::{extract_segments, pq, ClassLayout, PqGroup};
use holoseg::model::{forward, init_params, load_checkpoint, save_checkpoint, Arch, ImageRef, ModelParams};
use holoseg::scene::{generate_dataset, ClassCatalog, Sample, SceneSpec, Split, IGNORE_LABEL};
use holoseg::{pipeline, Error};
use ndarray::Array2;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

create_exception!(holoseg, HolosegError, PyException);

fn err(e: Error) -> PyErr {
    HolosegError::new_err(format!("{}: {e}", e.kind()))
}

fn json<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| err(e.into()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn config(config: Option<PathBuf>, overrides: Vec<String>) -> PyResult<RunConfig> {
    RunConfig::load(config.as_deref(), &overrides).map_err(err)
}

/// Renders the dataset; returns image counts per split.
#[pyfunction]
#[pyo3(signature = (config_path=None, overrides=vec![]))]
fn gen(py: Python<'_>, config_path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Bound<'_, PyAny>> {
    let cfg = config(config_path, overrides)?;
    let m = py.detach(|| pipeline::gen(&cfg)).map_err(err)?;
    let counts: std::collections::BTreeMap<&str, usize> = m.splits.iter().map(|(s, ids)| (s.name(), ids.len())).collect();
    json(py, &counts)
}

/// Trains and writes the checkpoint; returns the per-epoch loss trace and
/// the fitted uncertainty statistics.
#[pyfunction]
#[pyo3(signature = (config_path=None, overrides=vec![]))]
fn train(py: Python<'_>, config_path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Bound<'_, PyAny>> {
    let cfg = config(config_path, overrides)?;
    let summary = py.detach(|| pipeline::train_model(&cfg)).map_err(err)?;
    json(py, &summary)
}

#[pyfunction]
#[pyo3(signature = (config_path=None, overrides=vec![]))]
fn tune(py: Python<'_>, config_path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Bound<'_, PyAny>> {
    let cfg = config(config_path, overrides)?;
    let result = py.detach(|| pipeline::tune(&cfg)).map_err(err)?;
    json(py, &result)
}

/// Writes predictions for the configured split; returns their directory.
#[pyfunction]
#[pyo3(signature = (config_path=None, overrides=vec![]))]
fn infer(py: Python<'_>, config_path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<PathBuf> {
    let cfg = config(config_path, overrides)?;
    py.detach(|| pipeline::infer(&cfg)).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (config_path=None, overrides=vec![]))]
fn evaluate(py: Python<'_>, config_path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Bound<'_, PyAny>> {
    let cfg = config(config_path, overrides)?;
    let report = py.detach(|| pipeline::evaluate(&cfg)).map_err(err)?;
    json(py, &report)
}

#[pyfunction]
#[pyo3(signature = (config_path=None, overrides=vec![]))]
fn visualize(py: Python<'_>, config_path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<PathBuf> {
    let cfg = config(config_path, overrides)?;
    py.detach(|| pipeline::visualize(&cfg)).map_err(err)
}

/// One synthetic scene with ground truth.
#[pyclass(name = "Sample", frozen)]
struct PySample(Sample);

#[pymethods]
impl PySample {
    #[getter]
    fn id(&self) -> u32 {
        self.0.id
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height
    }

    /// Row-major RGB bytes.
    #[getter]
    fn image<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.image)
    }

    #[getter]
    fn semantic_map(&self) -> Vec<u8> {
        self.0.semantic_map.clone()
    }

    #[getter]
    fn instance_map(&self) -> Vec<u16> {
        self.0.instance_map.clone()
    }

    /// (row, col, instance_id, class_id) per instance.
    #[getter]
    fn centers(&self) -> Vec<(u32, u32, u16, u8)> {
        self.0.centers.iter().map(|c| (c.row, c.col, c.instance_id, c.class_id)).collect()
    }

    fn __repr__(&self) -> String {
        format!("Sample(id={}, {}x{}, {} instances)", self.0.id, self.0.width, self.0.height, self.0.centers.len())
    }
}

/// Renders scenes with the default class catalog. Unknown objects appear
/// only when `include_unknowns` is set.
#[pyfunction]
#[pyo3(signature = (n, seed=7, width=96, height=96, include_unknowns=false))]
fn generate_scenes(n: usize, seed: u64, width: usize, height: usize, include_unknowns: bool) -> PyResult<Vec<PySample>> {
    let spec = SceneSpec { width, height, include_unknowns, seed, ..SceneSpec::default() };
    let split = if include_unknowns { Split::Test } else { Split::Train };
    let samples = generate_dataset(&ClassCatalog::default(), &spec, n, split).map_err(err)?;
    Ok(samples.into_iter().map(PySample).collect())
}

#[pyclass(name = "Model", frozen)]
struct PyModel(ModelParams);

impl PyModel {
    fn image<'a>(&self, rgb: &'a [u8], width: usize, height: usize) -> ImageRef<'a> {
        ImageRef { width, height, rgb }
    }
}

#[pymethods]
impl PyModel {
    /// Fresh parameters for `num_classes` known classes, the first
    /// `num_stuff` of which are stuff.
    #[staticmethod]
    #[pyo3(signature = (num_classes, num_stuff, embed_dim=8, seed=0))]
    fn init(num_classes: usize, num_stuff: usize, embed_dim: usize, seed: u64) -> PyResult<Self> {
        let arch = Arch::new(num_classes, num_stuff, embed_dim);
        init_params(&arch, seed).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_checkpoint(&path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.0, &path).map_err(err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.0.num_params()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.arch.num_classes
    }

    /// Per-pixel Dirichlet uncertainty K / sum(alpha).
    fn uncertainty(&self, py: Python<'_>, image: &[u8], width: usize, height: usize) -> PyResult<Vec<f64>> {
        let img = self.image(image, width, height);
        let pred = py.detach(|| forward(&self.0, img)).map_err(err)?;
        Ok(uncertainty_map(pred.alpha.view()))
    }

    /// Holistic segmentation of one image. Pixels with uncertainty at or
    /// above mean_u + t * std_u are unknown candidates in open mode.
    #[pyo3(signature = (image, width, height, mean_u, std_u, t=3.0, eps=0.75, min_pts=16, mode="open"))]
    #[allow(clippy::too_many_arguments)]
    fn segment<'py>(
        &self,
        py: Python<'py>,
        image: &[u8],
        width: usize,
        height: usize,
        mean_u: f64,
        std_u: f64,
        t: f64,
        eps: f64,
        min_pts: usize,
        mode: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let mode: Mode = mode.parse().map_err(err)?;
        let stats = UncertaintyStats { mean_u, std_u, t, threshold: 0.0, n_pixels: 0 }.with_t(t);
        let params = InferenceParams { stats, dbscan: DbscanParams { eps, min_pts }, centers: CenterParams::default(), mode };
        let img = self.image(image, width, height);
        let out = py.detach(|| holistic_infer(&self.0, img, &params)).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("semantic_map", out.semantic_map)?;
        d.set_item("instance_map", out.instance_map)?;
        d.set_item("unknown_mask", out.unknown_mask)?;
        d.set_item("uncertainty", out.uncertainty_map)?;
        d.set_item("instances", json(py, &out.instances)?)?;
        d.set_item("threshold", stats.threshold)?;
        Ok(d)
    }
}

/// Density-based clustering; returns a cluster index per point, -1 for noise.
#[pyfunction]
fn dbscan(points: Vec<Vec<f64>>, eps: f64, min_pts: usize) -> PyResult<Vec<i32>> {
    let dim = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != dim) {
        return Err(err(Error::Dimension("points differ in length".into())));
    }
    let arr = Array2::from_shape_vec((points.len(), dim), points.concat()).map_err(|e| err(Error::Dimension(e.to_string())))?;
    run_dbscan(arr.view(), &DbscanParams { eps, min_pts }).map(|r| r.labels).map_err(err)
}

/// Panoptic quality per group for one image. Ground-truth pixels labeled
/// 255 are ignored; class ids at or above `num_classes` are unknown.
#[pyfunction]
fn panoptic_quality<'py>(
    py: Python<'py>,
    pred_semantic: Vec<u8>,
    pred_instance: Vec<u16>,
    gt_semantic: Vec<u8>,
    gt_instance: Vec<u16>,
    num_classes: usize,
    num_stuff: usize,
) -> PyResult<Bound<'py, PyDict>> {
    if gt_semantic.len() != pred_semantic.len() {
        return Err(err(Error::Dimension("prediction and ground truth differ in size".into())));
    }
    let layout = ClassLayout { num_classes, num_stuff };
    let ignore: Vec<bool> = gt_semantic.iter().map(|&c| c == IGNORE_LABEL).collect();
    let gt = extract_segments(&gt_semantic, &gt_instance, Some(&ignore), &layout).map_err(err)?;
    let pred = extract_segments(&pred_semantic, &pred_instance, None, &layout).map_err(err)?;
    let report = pq(&pred, &gt, &gt_semantic, &layout);
    let out = PyDict::new(py);
    for g in PqGroup::ALL {
        let t = report.tally(g);
        let d = PyDict::new(py);
        let q = t.quality();
        d.set_item("pq", q.map(|q| q.pq))?;
        d.set_item("rq", q.map(|q| q.rq))?;
        d.set_item("sq", q.map(|q| q.sq))?;
        d.set_item("tp", t.tp)?;
        d.set_item("fp", t.fp)?;
        d.set_item("fn", t.fn_)?;
        out.set_item(g.name(), d)?;
    }
    Ok(out)
}

#[pyfunction]
fn unknown_ap(scores: Vec<f64>, positive: Vec<bool>) -> PyResult<f64> {
    holoseg::metrics::unknown_ap(&scores, &positive).map_err(err)
}

#[pyfunction]
fn fpr_at_95tpr(scores: Vec<f64>, positive: Vec<bool>) -> PyResult<f64> {
    holoseg::metrics::fpr_at_95tpr(&scores, &positive).map_err(err)
}

#[pymodule]
#[pyo3(name = "holoseg")]
fn holoseg_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("HolosegError", m.py().get_type::<HolosegError>())?;
    m.add_class::<PySample>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(gen, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(tune, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(visualize, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scenes, m)?)?;
    m.add_function(wrap_pyfunction!(dbscan, m)?)?;
    m.add_function(wrap_pyfunction!(panoptic_quality, m)?)?;
    m.add_function(wrap_pyfunction!(unknown_ap, m)?)?;
    m.add_function(wrap_pyfunction!(fpr_at_95tpr, m)?)?;
    Ok(())
}
