use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Center, ClassCatalog, Sample, Split};
use crate::error::{Error, Result};
use crate::png_io;

/// File stem shared by every file of one image: the zero-padded id.
pub fn sample_stem(id: u32) -> String {
    format!("{id:06}")
}

/// Writes `NNNNNN_img.png`, `_sem.png`, `_inst.png` and `_meta.json`.
pub fn encode_sample(sample: &Sample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let stem = sample_stem(sample.id);
    let (w, h) = (sample.width, sample.height);
    png_io::write_rgb8(&dir.join(format!("{stem}_img.png")), w, h, &sample.image)?;
    png_io::write_gray8(&dir.join(format!("{stem}_sem.png")), w, h, &sample.semantic_map)?;
    png_io::write_gray16(&dir.join(format!("{stem}_inst.png")), w, h, &sample.instance_map)?;
    let meta = serde_json::to_string_pretty(&sample.centers)?;
    fs::write(dir.join(format!("{stem}_meta.json")), meta)?;
    Ok(())
}

pub fn decode_sample(dir: &Path, id: u32, split: Split) -> Result<Sample> {
    let stem = sample_stem(id);
    let image = png_io::read_rgb8(&dir.join(format!("{stem}_img.png")), "image")?;
    let sem = png_io::read_gray8(&dir.join(format!("{stem}_sem.png")), "semantic_map")?;
    let inst = png_io::read_gray16(&dir.join(format!("{stem}_inst.png")), "instance_map")?;
    for (field, w, h) in [("semantic_map", sem.width, sem.height), ("instance_map", inst.width, inst.height)] {
        if (w, h) != (image.width, image.height) {
            return Err(Error::Decode { field, reason: format!("size {w}x{h} differs from image {}x{}", image.width, image.height) });
        }
    }
    let meta_path = dir.join(format!("{stem}_meta.json"));
    let text =
        fs::read_to_string(&meta_path).map_err(|e| Error::Decode { field: "centers", reason: format!("{}: {e}", meta_path.display()) })?;
    let centers: Vec<Center> = serde_json::from_str(&text).map_err(|e| Error::Decode { field: "centers", reason: e.to_string() })?;
    Ok(Sample {
        id,
        width: image.width,
        height: image.height,
        image: image.data,
        semantic_map: sem.data,
        instance_map: inst.data,
        centers,
        split,
    })
}

/// Per-split image id lists of a dataset root.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub splits: BTreeMap<Split, Vec<u32>>,
}

impl Manifest {
    pub fn ids(&self, split: Split) -> &[u32] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }
}

pub fn write_catalog(root: &Path, catalog: &ClassCatalog) -> Result<()> {
    fs::create_dir_all(root)?;
    fs::write(root.join("catalog.json"), serde_json::to_string_pretty(catalog)?)?;
    Ok(())
}

pub fn read_catalog(root: &Path) -> Result<ClassCatalog> {
    let path = root.join("catalog.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::Decode { field: "catalog", reason: format!("{}: {e}", path.display()) })?;
    let catalog: ClassCatalog = serde_json::from_str(&text).map_err(|e| Error::Decode { field: "catalog", reason: e.to_string() })?;
    catalog.validate()?;
    Ok(catalog)
}

pub fn write_manifest(root: &Path, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(root)?;
    fs::write(root.join("manifest.json"), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::Decode { field: "manifest", reason: format!("{}: {e}", path.display()) })?;
    serde_json::from_str(&text).map_err(|e| Error::Decode { field: "manifest", reason: e.to_string() })
}
