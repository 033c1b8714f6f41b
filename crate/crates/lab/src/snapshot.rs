//! Weight snapshots: a flat little-endian binary of 32- or 64-bit
//! floats plus a JSON name -> {offset, len, shape, dtype} index.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use mupdit_core::arch::WeightStore;
use mupdit_core::Real;

use crate::LabError;

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
pub struct SnapshotEntry {
    /// Offset in elements (not bytes) into the flat buffer.
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
pub struct SnapshotIndex {
    /// `f32` or `f64`.
    pub dtype: String,
    pub entries: BTreeMap<String, SnapshotEntry>,
}

/// Write `store` as `<stem>.bin` + `<stem>.json` under `dir`.
pub fn write_snapshot<R: Real>(
    store: &WeightStore<R>,
    dir: &Path,
    stem: &str,
    dtype: &str,
) -> Result<(), LabError> {
    fs::create_dir_all(dir)?;
    let mut bytes: Vec<u8> = Vec::new();
    let mut entries = BTreeMap::new();
    let mut offset = 0usize;
    let elem_size = match dtype {
        "f32" => 4,
        "f64" => 8,
        other => return Err(LabError::Config(format!("unknown snapshot dtype {other}"))),
    };
    for (name, tensor) in store.iter() {
        for x in &tensor.data {
            match dtype {
                "f32" => bytes.extend_from_slice(&(x.to_f64() as f32).to_le_bytes()),
                _ => bytes.extend_from_slice(&x.to_f64().to_le_bytes()),
            }
        }
        entries.insert(
            name.to_string(),
            SnapshotEntry { offset, len: tensor.numel(), shape: tensor.shape.clone() },
        );
        offset += tensor.numel();
    }
    debug_assert_eq!(bytes.len(), offset * elem_size);
    fs::write(dir.join(format!("{stem}.bin")), &bytes)?;
    let index = SnapshotIndex { dtype: dtype.to_string(), entries };
    let json = serde_json::to_string_pretty(&index)
        .map_err(|e| LabError::Runtime(format!("snapshot index serialization failed: {e}")))?;
    fs::write(dir.join(format!("{stem}.json")), json + "\n")?;
    Ok(())
}

/// Read a snapshot back as f64 values per weight name.
pub fn read_snapshot(dir: &Path, stem: &str) -> Result<BTreeMap<String, Vec<f64>>, LabError> {
    let index: SnapshotIndex = serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)
        .map_err(|e| LabError::Runtime(format!("snapshot index parse failed: {e}")))?;
    let bytes = fs::read(dir.join(format!("{stem}.bin")))?;
    let elem = match index.dtype.as_str() {
        "f32" => 4usize,
        "f64" => 8,
        other => return Err(LabError::Runtime(format!("unknown snapshot dtype {other}"))),
    };
    let mut out = BTreeMap::new();
    for (name, entry) in index.entries {
        let start = entry.offset * elem;
        let end = start + entry.len * elem;
        if end > bytes.len() {
            return Err(LabError::Runtime(format!("snapshot entry {name} out of bounds")));
        }
        let mut values = Vec::with_capacity(entry.len);
        for chunk in bytes[start..end].chunks_exact(elem) {
            let v = match index.dtype.as_str() {
                "f32" => f32::from_le_bytes(chunk.try_into().unwrap()) as f64,
                _ => f64::from_le_bytes(chunk.try_into().unwrap()),
            };
            values.push(v);
        }
        out.insert(name, values);
    }
    Ok(out)
}
