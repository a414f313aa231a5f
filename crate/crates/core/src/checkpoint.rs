//! Versioned binary checkpoints with a JSON sidecar.
//!
//! `<path>` holds a magic header, the format version, a kind tag and the parameter
//! tensors (little-endian f32). `<path>.json` echoes the configuration and training
//! metadata so a checkpoint can be inspected without loading it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{param_store_from_bytes, param_store_to_bytes, ParamStore};

pub const MAGIC: &[u8; 8] = b"ALBCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar<M> {
    pub format_version: u32,
    pub kind: String,
    pub frozen: bool,
    pub meta: M,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save<M: Serialize>(
    path: &Path,
    kind: &str,
    frozen: bool,
    store: &ParamStore<f32>,
    meta: &M,
) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(kind.len() as u32).to_le_bytes());
    bytes.extend_from_slice(kind.as_bytes());
    bytes.push(frozen as u8);
    bytes.extend_from_slice(&param_store_to_bytes(store));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;

    let sidecar = Sidecar {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        frozen,
        meta,
    };
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&sidecar).expect("serializable sidecar");
    fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn load<M: DeserializeOwned>(path: &Path, kind: &str) -> Result<(ParamStore<f32>, Sidecar<M>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 17 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let klen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let found_kind = bytes
        .get(16..16 + klen)
        .and_then(|b| std::str::from_utf8(b).ok())
        .ok_or_else(|| Error::format(path, "truncated kind tag"))?;
    if found_kind != kind {
        return Err(Error::format(
            path,
            format!("expected a `{kind}` checkpoint, found `{found_kind}`"),
        ));
    }
    let frozen = *bytes
        .get(16 + klen)
        .ok_or_else(|| Error::format(path, "truncated header"))?
        != 0;
    let body = &bytes[17 + klen..];
    let (store, used) =
        param_store_from_bytes(body).ok_or_else(|| Error::format(path, "truncated tensor data"))?;
    if used != body.len() {
        return Err(Error::format(path, "trailing bytes after tensor data"));
    }

    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar<M> =
        serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    if sidecar.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            path: side,
            expected: FORMAT_VERSION,
            found: sidecar.format_version,
        });
    }
    if sidecar.frozen != frozen || sidecar.kind != kind {
        return Err(Error::format(&side, "sidecar disagrees with checkpoint header"));
    }
    Ok((store, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn round_trip_and_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut store = ParamStore::<f32>::new();
        store.add_normal("w", &[5, 3], 5, 1.0, &mut rng_from_seed(1));
        save(&path, "toy", true, &store, &serde_json::json!({"a": 1})).unwrap();
        let (back, side) = load::<serde_json::Value>(&path, "toy").unwrap();
        assert_eq!(back.flat_values(), store.flat_values());
        assert!(side.frozen);
        assert!(matches!(
            load::<serde_json::Value>(&path, "other"),
            Err(Error::Format { .. })
        ));

        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 99;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load::<serde_json::Value>(&path, "toy"),
            Err(Error::Version { found: 99, .. })
        ));
    }
}
