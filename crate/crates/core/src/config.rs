//! Run configuration: one TOML file plus `key=value` overrides.
//! Precedence is overrides, then file, then built-in defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::{default_eps_grid, default_min_pts_grid, DbscanParams};
use crate::error::{Error, Result};
use crate::inference::{CenterParams, Mode};
use crate::losses::LossWeights;
use crate::model::{Arch, EvidenceActivation, FeatureConfig};
use crate::scene::{ClassCatalog, SceneSpec, Split};
use crate::train::Schedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub run: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { dataset: "data".into(), run: "run".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub scene: SceneSpec,
    pub n_train: usize,
    pub n_tune: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Overrides the built-in class tables.
    pub catalog: Option<ClassCatalog>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { scene: SceneSpec::default(), n_train: 200, n_tune: 20, n_val: 50, n_test: 0, catalog: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_radius: usize,
    pub use_coords: bool,
    pub trunk_widths: Vec<usize>,
    pub embed_dim: usize,
    pub activation: EvidenceActivation,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_radius: 3,
            use_coords: true,
            trunk_widths: vec![64, 64],
            embed_dim: 8,
            activation: EvidenceActivation::Softplus,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn arch(&self, catalog: &ClassCatalog) -> Arch {
        Arch {
            features: FeatureConfig { patch_radius: self.patch_radius, use_coords: self.use_coords },
            trunk_widths: self.trunk_widths.clone(),
            num_classes: catalog.num_known(),
            num_stuff: catalog.num_stuff(),
            embed_dim: self.embed_dim,
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Unknown threshold multiplier: u >= mean + t * std.
    pub t: f64,
    pub centers: CenterParams,
    /// Fixed DBSCAN parameters; when absent the tuned ones are used.
    pub dbscan: Option<DbscanParams>,
    pub split: Split,
    pub mode: Mode,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { t: 3.0, centers: CenterParams::default(), dbscan: None, split: Split::Val, mode: Mode::Open }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub eps_grid: Vec<f64>,
    pub min_pts_grid: Vec<usize>,
    pub split: Split,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self { eps_grid: default_eps_grid(), min_pts_grid: default_min_pts_grid(), split: Split::Tune }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VizConfig {
    /// Renders the first `max_images` images of the inference split.
    pub max_images: usize,
}

impl Default for VizConfig {
    fn default() -> Self {
        Self { max_images: 8 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: Schedule,
    pub inference: InferenceConfig,
    pub tune: TuneConfig,
    pub viz: VizConfig,
}

/// Sets `path` (dotted) inside `table` to `value`, creating tables on the way.
fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key in {path:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("{path}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// Reads `path` (if given) and applies `overrides` of the form `a.b=value`.
    /// Relative paths in the result are resolved against the config file's
    /// directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(base) = path.and_then(Path::parent) {
            for p in [&mut cfg.paths.dataset, &mut cfg.paths.run] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn catalog(&self) -> ClassCatalog {
        self.dataset.catalog.clone().unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.scene.validate()?;
        self.catalog().validate()?;
        self.model.arch(&self.catalog()).validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if !(self.inference.t >= 0.0) {
            return Err(Error::Config(format!("inference.t must be >= 0, got {}", self.inference.t)));
        }
        if let Some(d) = &self.inference.dbscan {
            d.validate()?;
        }
        Ok(())
    }

    /// Pretty TOML of the effective configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
