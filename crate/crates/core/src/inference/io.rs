use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HolisticOutput, Mode};
use crate::error::{Error, Result};
use crate::png_io::{read_gray16, read_gray8, write_gray16, write_gray8};
use crate::scene::sample_stem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceInfo {
    pub id: u16,
    pub class_id: u8,
    pub is_unknown: bool,
    pub pixel_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMeta {
    pub instances: Vec<InstanceInfo>,
    pub threshold: f64,
    pub mode: Mode,
}

/// Prediction files read back from disk; uncertainty carries the 16-bit
/// fixed-point quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredPrediction {
    pub width: usize,
    pub height: usize,
    pub semantic_map: Vec<u8>,
    pub instance_map: Vec<u16>,
    pub uncertainty_map: Vec<f64>,
    pub meta: PredictionMeta,
}

pub fn prediction_stem(id: u32) -> String {
    sample_stem(id)
}

fn quantize(u: f64) -> u16 {
    (u.clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub fn write_prediction(dir: &Path, id: u32, out: &HolisticOutput, threshold: f64, mode: Mode) -> Result<()> {
    let stem = prediction_stem(id);
    let (w, h) = (out.width, out.height);
    write_gray8(&dir.join(format!("{stem}_pred_sem.png")), w, h, &out.semantic_map)?;
    write_gray16(&dir.join(format!("{stem}_pred_inst.png")), w, h, &out.instance_map)?;
    let unc: Vec<u16> = out.uncertainty_map.iter().map(|&u| quantize(u)).collect();
    write_gray16(&dir.join(format!("{stem}_unc.png")), w, h, &unc)?;
    let meta = PredictionMeta { instances: out.instances.clone(), threshold, mode };
    fs::write(dir.join(format!("{stem}_pred_meta.json")), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

pub fn read_prediction(dir: &Path, id: u32) -> Result<StoredPrediction> {
    let stem = prediction_stem(id);
    let sem = read_gray8(&dir.join(format!("{stem}_pred_sem.png")), "pred_semantic_map")?;
    let inst = read_gray16(&dir.join(format!("{stem}_pred_inst.png")), "pred_instance_map")?;
    let unc = read_gray16(&dir.join(format!("{stem}_unc.png")), "uncertainty_map")?;
    if (inst.width, inst.height) != (sem.width, sem.height) || (unc.width, unc.height) != (sem.width, sem.height) {
        return Err(Error::Decode { field: "pred_instance_map", reason: format!("prediction {stem} has mismatched sizes") });
    }
    let meta_path = dir.join(format!("{stem}_pred_meta.json"));
    let text = fs::read_to_string(&meta_path)
        .map_err(|e| Error::Decode { field: "pred_meta", reason: format!("{}: {e}", meta_path.display()) })?;
    let meta =
        serde_json::from_str(&text).map_err(|e| Error::Decode { field: "pred_meta", reason: format!("{}: {e}", meta_path.display()) })?;
    Ok(StoredPrediction {
        width: sem.width,
        height: sem.height,
        semantic_map: sem.data,
        instance_map: inst.data,
        uncertainty_map: unc.data.iter().map(|&v| v as f64 / 65535.0).collect(),
        meta,
    })
}
