//! On-disk checkpoints: `manifest.json`, a little-endian f32 blob with every
//! parameter in store order, and a packed-bit blob with every mask
//! (LSB-first, each mask starting on a byte boundary).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Spikformer};
use crate::params::{InitDist, ParamStore, PrunableParam, WeightMask};
use crate::selector::SelectorConfig;
use crate::tensor::Matrix;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.f32";
pub const MASKS_FILE: &str = "masks.bits";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset into the weight blob, in f32 elements.
    pub offset: usize,
    pub init: InitDist,
    /// Byte offset into the mask blob; absent for non-prunable tensors.
    pub mask_offset: Option<usize>,
    pub alive: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub model: ModelConfig,
    pub selector: SelectorConfig,
    pub tensors: Vec<TensorEntry>,
    pub weight_count: usize,
    pub mask_bytes: usize,
}

pub fn pack_bits(mask: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; mask.len().div_ceil(8)];
    for (i, _) in mask.iter().enumerate().filter(|(_, &b)| b) {
        out[i / 8] |= 1 << (i % 8);
    }
    out
}

pub fn unpack_bits(bytes: &[u8], len: usize) -> Vec<bool> {
    (0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

/// Writes a checkpoint directory, creating it if needed.
pub fn save(dir: &Path, model: &ModelConfig, selector: &SelectorConfig, params: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut weights = Vec::new();
    let mut masks = Vec::new();
    let mut tensors = Vec::with_capacity(params.len());
    for p in params.iter() {
        let offset = weights.len() / 4;
        for v in p.values.as_slice() {
            weights.extend_from_slice(&v.to_le_bytes());
        }
        let mask_offset = p.mask.as_ref().map(|m| {
            let at = masks.len();
            masks.extend(pack_bits(&m.0));
            at
        });
        let (rows, cols) = p.values.shape();
        tensors.push(TensorEntry { name: p.name.clone(), rows, cols, offset, init: p.init, mask_offset, alive: p.alive() });
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        model: model.clone(),
        selector: *selector,
        tensors,
        weight_count: weights.len() / 4,
        mask_bytes: masks.len(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    fs::write(dir.join(WEIGHTS_FILE), weights)?;
    fs::write(dir.join(MASKS_FILE), masks)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub manifest: Manifest,
    pub arch: Spikformer,
    pub params: ParamStore,
}

/// Reads a checkpoint and rebinds it to its architecture.
pub fn load(dir: &Path) -> Result<Loaded> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})", manifest.version)));
    }
    let weights = fs::read(dir.join(WEIGHTS_FILE))?;
    let masks = fs::read(dir.join(MASKS_FILE))?;
    if weights.len() != manifest.weight_count * 4 {
        return Err(Error::Checkpoint(format!("weight blob has {} bytes, manifest says {}", weights.len(), manifest.weight_count * 4)));
    }
    if masks.len() != manifest.mask_bytes {
        return Err(Error::Checkpoint(format!("mask blob has {} bytes, manifest says {}", masks.len(), manifest.mask_bytes)));
    }
    let mut params = ParamStore::new();
    for e in &manifest.tensors {
        let n = e.rows * e.cols;
        let bytes = weights
            .get(e.offset * 4..(e.offset + n) * 4)
            .ok_or_else(|| Error::Checkpoint(format!("{} lies outside the weight blob", e.name)))?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let mask = match e.mask_offset {
            Some(at) => {
                let packed = masks
                    .get(at..at + n.div_ceil(8))
                    .ok_or_else(|| Error::Checkpoint(format!("mask of {} lies outside the mask blob", e.name)))?;
                Some(WeightMask(unpack_bits(packed, n)))
            }
            None => None,
        };
        let p = PrunableParam { name: e.name.clone(), values: Matrix::from_vec(e.rows, e.cols, data), mask, init: e.init };
        if p.alive() != e.alive {
            return Err(Error::Checkpoint(format!("{}: {} alive weights, manifest says {}", e.name, p.alive(), e.alive)));
        }
        params.push(p);
    }
    let arch = Spikformer::bind(manifest.model.clone(), manifest.selector, &params)?;
    Ok(Loaded { manifest, arch, params })
}
