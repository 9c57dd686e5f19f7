//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "U3HS"
//! version      u16
//! K, K_st, F   u16 x3
//! patch_radius u16
//! flags        u8       bit 0: coordinate features, bit 1: exp evidence
//! n_trunk      u16, then n_trunk x u32 layer widths
//! n_values     u64
//! payload      n_values x f32, blocks in `ModelParams::blocks` order
//! ```

use std::fs;
use std::path::Path;

use super::{Arch, EvidenceActivation, FeatureConfig, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"U3HS";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

fn encode(params: &ModelParams) -> Vec<u8> {
    let arch = &params.arch;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [arch.num_classes, arch.num_stuff, arch.embed_dim, arch.features.patch_radius] {
        out.extend_from_slice(&(v as u16).to_le_bytes());
    }
    let flags = u8::from(arch.features.use_coords) | (u8::from(arch.activation == EvidenceActivation::Exp) << 1);
    out.push(flags);
    out.extend_from_slice(&(arch.trunk_widths.len() as u16).to_le_bytes());
    for &w in &arch.trunk_widths {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.extend_from_slice(&(params.num_params() as u64).to_le_bytes());
    for block in params.blocks() {
        for &v in block {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }
}

fn decode(bytes: &[u8]) -> Result<ModelParams> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = cur.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let num_classes = cur.u16("K")? as usize;
    let num_stuff = cur.u16("K_st")? as usize;
    let embed_dim = cur.u16("F")? as usize;
    let patch_radius = cur.u16("patch radius")? as usize;
    let flags = cur.take(1, "flags")?[0];
    let n_trunk = cur.u16("trunk depth")? as usize;
    let mut trunk_widths = Vec::with_capacity(n_trunk);
    for _ in 0..n_trunk {
        trunk_widths.push(u32::from_le_bytes(cur.take(4, "trunk width")?.try_into().expect("4 bytes")) as usize);
    }
    let arch = Arch {
        features: FeatureConfig { patch_radius, use_coords: flags & 1 != 0 },
        trunk_widths,
        num_classes,
        num_stuff,
        embed_dim,
        activation: if flags & 2 != 0 { EvidenceActivation::Exp } else { EvidenceActivation::Softplus },
    };
    let mut params = ModelParams::zeros(&arch).map_err(|e| Error::Checkpoint(format!("invalid header: {e}")))?;
    let n_values = u64::from_le_bytes(cur.take(8, "value count")?.try_into().expect("8 bytes")) as usize;
    if n_values != params.num_params() {
        return Err(Error::Checkpoint(format!("header declares {n_values} values but the architecture needs {}", params.num_params())));
    }
    let payload = cur.take(4 * n_values, "parameters")?;
    let mut values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
    for block in params.blocks_mut() {
        for v in block.iter_mut() {
            *v = values.next().expect("length checked");
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(params)
}

impl ModelParams {
    /// Fails unless the model predicts exactly `num_classes` classes of which
    /// `num_stuff` are stuff.
    pub fn expect_classes(&self, num_classes: usize, num_stuff: usize) -> Result<()> {
        if self.arch.num_classes != num_classes || self.arch.num_stuff != num_stuff {
            return Err(Error::Dimension(format!(
                "model predicts K={} (K_st={}) but the catalog has K={num_classes} (K_st={num_stuff})",
                self.arch.num_classes, self.arch.num_stuff
            )));
        }
        Ok(())
    }
}
