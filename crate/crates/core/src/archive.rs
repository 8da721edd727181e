//! Model archives: a directory holding `manifest.json` (block names, shapes
//! and byte offsets) and `payload.bin` (little-endian `f64`, row-major, blocks
//! back to back in manifest order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::ModelState;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "payload.bin";
pub const FORMAT_NAME: &str = "sift-archive";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f64-le";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset of the block in the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub step: usize,
    pub blocks: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn for_state(state: &ModelState) -> Self {
        let mut offset = 0u64;
        let blocks = state
            .layout()
            .into_iter()
            .map(|(name, rows, cols)| {
                let entry = ManifestEntry { name, rows, cols, offset };
                offset += (rows * cols * 8) as u64;
                entry
            })
            .collect();
        Self {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            dtype: DTYPE.into(),
            step: state.step,
            blocks,
        }
    }

    pub fn payload_len(&self) -> u64 {
        self.blocks.iter().map(|b| (b.rows * b.cols * 8) as u64).sum()
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let bad = |msg: String| Err(Error::format(path, msg));
        if self.format != FORMAT_NAME || self.version != FORMAT_VERSION || self.dtype != DTYPE {
            return bad(format!(
                "unsupported archive {} v{} ({})",
                self.format, self.version, self.dtype
            ));
        }
        if self.blocks.is_empty() {
            return bad("archive lists no blocks".into());
        }
        let mut expected = 0u64;
        for b in &self.blocks {
            if b.rows == 0 || b.cols == 0 {
                return bad(format!("block {:?} has an empty shape", b.name));
            }
            if b.offset != expected {
                return bad(format!(
                    "block {:?} starts at byte {}, expected {expected}",
                    b.name, b.offset
                ));
            }
            expected += (b.rows * b.cols * 8) as u64;
        }
        Ok(())
    }
}

/// Writes `state` into directory `dir`, creating it if needed.
pub fn write_archive(state: &ModelState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest::for_state(state);
    let mut payload = Vec::with_capacity(manifest.payload_len() as usize);
    for m in state.matrices() {
        for x in m.as_slice() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(PAYLOAD_FILE);
    fs::write(&path, payload).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    manifest.validate(&path)?;
    Ok(manifest)
}

pub fn read_archive(dir: &Path) -> Result<ModelState> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(PAYLOAD_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() as u64 != manifest.payload_len() {
        return Err(Error::format(
            &path,
            format!(
                "payload holds {} bytes but the manifest describes {}",
                bytes.len(),
                manifest.payload_len()
            ),
        ));
    }
    let mut blocks = Vec::with_capacity(manifest.blocks.len());
    for b in &manifest.blocks {
        let start = b.offset as usize;
        let data = bytes[start..start + b.rows * b.cols * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let m = Matrix::new(b.rows, b.cols, data)
            .map_err(|e| Error::format(&path, format!("block {:?}: {e}", b.name)))?;
        blocks.push((b.name.clone(), m));
    }
    let mut state =
        ModelState::new(blocks).map_err(|e| Error::format(dir.join(MANIFEST_FILE), e.to_string()))?;
    state.step = manifest.step;
    Ok(state)
}
