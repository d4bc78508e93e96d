//! Checkpoint directories: one parameter blob per network plus
//! `manifest.json`.
//!
//! The manifest is pretty-printed JSON (two-space indent, trailing newline)
//! with keys in the field order of [`CheckpointManifest`]. Each blob entry
//! records its file name, SHA-256 and tensor count; blobs use the versioned
//! `SSNP` parameter format.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use semiseg_nn::ParamStore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io_util::{create_dir, read_file, read_json, write_json};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobEntry {
    pub name: String,
    pub file: String,
    pub sha256: String,
    pub num_tensors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// `segmentation` or `pggan`.
    pub kind: String,
    pub iteration: u64,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Kind-specific state, e.g. metric snapshots or the growth stage.
    pub state: serde_json::Value,
    pub blobs: Vec<BlobEntry>,
}

/// Write `stores` and the manifest into `dir`, replacing earlier contents.
pub fn write_checkpoint(
    dir: &Path,
    kind: &str,
    iteration: u64,
    seed: u64,
    config: serde_json::Value,
    state: serde_json::Value,
    stores: &[(&str, &ParamStore<f32>)],
) -> Result<CheckpointManifest> {
    create_dir(dir)?;
    let mut blobs = Vec::new();
    for (name, store) in stores {
        let file = format!("{name}.ssnp");
        let mut bytes = Vec::new();
        store.write_blob(&mut bytes)?;
        let path = dir.join(&file);
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))?;
        blobs.push(BlobEntry {
            name: name.to_string(),
            file,
            sha256: hex::encode(Sha256::digest(&bytes)),
            num_tensors: store.len(),
        });
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        kind: kind.to_string(),
        iteration,
        seed,
        config,
        state,
        blobs,
    };
    write_json(&dir.join(CHECKPOINT_MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Read a checkpoint, verifying every blob checksum.
pub fn read_checkpoint(dir: &Path) -> Result<(CheckpointManifest, BTreeMap<String, ParamStore<f32>>)> {
    let manifest: CheckpointManifest = read_json(&dir.join(CHECKPOINT_MANIFEST))?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {}",
            dir.display(),
            manifest.format_version
        )));
    }
    let mut stores = BTreeMap::new();
    for b in &manifest.blobs {
        let path = dir.join(&b.file);
        let bytes = read_file(&path)?;
        if hex::encode(Sha256::digest(&bytes)) != b.sha256 {
            return Err(Error::Format(format!("{}: checksum mismatch", path.display())));
        }
        let store = ParamStore::<f32>::read_blob(&mut BufReader::new(bytes.as_slice()))?;
        stores.insert(b.name.clone(), store);
    }
    Ok((manifest, stores))
}

pub fn take_store(stores: &mut BTreeMap<String, ParamStore<f32>>, name: &str) -> Result<ParamStore<f32>> {
    stores
        .remove(name)
        .ok_or_else(|| Error::Format(format!("checkpoint has no `{name}` blob")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use semiseg_nn::Tensor;

    #[test]
    fn round_trip_and_corruption() {
        let tmp = tempfile::tempdir().unwrap();
        let mut s = ParamStore::<f32>::new();
        s.add("a.weight", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5));
        let m = write_checkpoint(
            tmp.path(),
            "segmentation",
            12,
            7,
            serde_json::json!({"x": 1}),
            serde_json::json!({"best": 0.5}),
            &[("snet", &s)],
        )
        .unwrap();
        let (m2, mut stores) = read_checkpoint(tmp.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(take_store(&mut stores, "snet").unwrap(), s);
        let blob = tmp.path().join("snet.ssnp");
        let mut bytes = std::fs::read(&blob).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        std::fs::write(&blob, bytes).unwrap();
        assert!(matches!(read_checkpoint(tmp.path()), Err(Error::Format(_))));
    }
}
