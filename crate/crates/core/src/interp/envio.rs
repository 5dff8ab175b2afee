//! Environment snapshots on disk: one little-endian binary file per
//! matrix plus a JSON manifest.
//!
//! Per-matrix layout: magic `RGT1`, then u64 rows, u64 cols, u8 role tag
//! (0 node, 1 edge, 2 compact, 3 weight), u32 types, u32 slice_rows, then
//! `rows * cols` f64 values, everything little-endian.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::{TensorValue, ValueRole};

const MAGIC: &[u8; 4] = b"RGT1";

#[derive(Debug, thiserror::Error)]
pub enum EnvIoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error("bad tensor file {0}: {1}")]
    Format(String, String),
}

fn role_tag(role: ValueRole) -> (u8, u32, u32) {
    match role {
        ValueRole::Node => (0, 0, 0),
        ValueRole::Edge => (1, 0, 0),
        ValueRole::Compact => (2, 0, 0),
        ValueRole::Weight { types, slice_rows } => (3, types as u32, slice_rows as u32),
    }
}

fn tag_role(tag: u8, types: u32, slice_rows: u32) -> Option<ValueRole> {
    match tag {
        0 => Some(ValueRole::Node),
        1 => Some(ValueRole::Edge),
        2 => Some(ValueRole::Compact),
        3 => Some(ValueRole::Weight {
            types: types as usize,
            slice_rows: slice_rows as usize,
        }),
        _ => None,
    }
}

/// Write every binding to `dir` (created if needed) plus `manifest.json`.
pub fn save_env_dir(
    dir: &Path,
    bindings: &BTreeMap<String, TensorValue>,
) -> Result<(), EnvIoError> {
    std::fs::create_dir_all(dir)?;
    let mut names: Vec<&String> = bindings.keys().collect();
    names.sort();
    let mut manifest: Vec<serde_json::Value> = Vec::new();
    for name in names {
        let t = &bindings[name];
        let file = format!("{name}.mat");
        let mut buf: Vec<u8> = Vec::with_capacity(29 + t.data().len() * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        let (tag, types, slice_rows) = role_tag(t.role());
        buf.push(tag);
        buf.extend_from_slice(&types.to_le_bytes());
        buf.extend_from_slice(&slice_rows.to_le_bytes());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(dir.join(&file))?;
        f.write_all(&buf)?;
        manifest.push(serde_json::json!({ "name": name, "file": file }));
    }
    let manifest = serde_json::json!({ "schema_version": 1, "tensors": manifest });
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("serializable") + "\n",
    )?;
    Ok(())
}

/// Load a directory written by [`save_env_dir`].
pub fn load_env_dir(dir: &Path) -> Result<BTreeMap<String, TensorValue>, EnvIoError> {
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| EnvIoError::Manifest(e.to_string()))?,
    )
    .map_err(|e| EnvIoError::Manifest(e.to_string()))?;
    let tensors = manifest["tensors"]
        .as_array()
        .ok_or_else(|| EnvIoError::Manifest("missing tensors array".into()))?;
    let mut out = BTreeMap::new();
    for entry in tensors {
        let name = entry["name"]
            .as_str()
            .ok_or_else(|| EnvIoError::Manifest("tensor without name".into()))?;
        let file = entry["file"]
            .as_str()
            .ok_or_else(|| EnvIoError::Manifest("tensor without file".into()))?;
        let mut bytes = Vec::new();
        std::fs::File::open(dir.join(file))?.read_to_end(&mut bytes)?;
        let fail = |msg: &str| EnvIoError::Format(file.to_string(), msg.to_string());
        if bytes.len() < 29 || &bytes[0..4] != MAGIC {
            return Err(fail("missing magic"));
        }
        let rows = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let tag = bytes[20];
        let types = u32::from_le_bytes(bytes[21..25].try_into().unwrap());
        let slice_rows = u32::from_le_bytes(bytes[25..29].try_into().unwrap());
        let role = tag_role(tag, types, slice_rows).ok_or_else(|| fail("unknown role tag"))?;
        let want = 29 + rows * cols * 8;
        if bytes.len() != want {
            return Err(fail(&format!("expected {want} bytes, got {}", bytes.len())));
        }
        let data: Vec<f64> = bytes[29..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.insert(
            name.to_string(),
            TensorValue::from_flat(rows, cols, data, role),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = std::env::temp_dir().join(format!("envio_test_{}", std::process::id()));
        let mut m = BTreeMap::new();
        m.insert(
            "h".to_string(),
            TensorValue::from_flat(2, 3, vec![1.0, -2.5, 3.0, 0.0, 1e-9, 7.25], ValueRole::Node),
        );
        m.insert(
            "W".to_string(),
            TensorValue::from_flat(
                4,
                2,
                (0..8).map(|x| x as f64).collect(),
                ValueRole::Weight {
                    types: 2,
                    slice_rows: 2,
                },
            ),
        );
        save_env_dir(&dir, &m).unwrap();
        let back = load_env_dir(&dir).unwrap();
        assert_eq!(m, back);
        std::fs::remove_dir_all(&dir).ok();
    }
}
