//! Case-directory persistence and the dataset manifest.
//!
//! A case directory holds `volume.f32` (raw little-endian float32 in
//! `(z, h, w)` row-major order), optionally `labels.u8` (one byte per voxel,
//! same order) and `meta.json`. The sidecar is serialized with two-space
//! indentation, keys in the order of [`CaseMeta`]'s fields, floats in
//! shortest round-trip form and a single trailing newline.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CtVolume, IntensityWindow, LabelMap, CLASS_NAMES};
use crate::io_util::{read_file, to_json_bytes, write_file};
use crate::error::{Error, Result};

pub const CASE_FORMAT_VERSION: u32 = 1;
pub const VOLUME_FILE: &str = "volume.f32";
pub const LABELS_FILE: &str = "labels.u8";
pub const META_FILE: &str = "meta.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseMeta {
    pub format_version: u32,
    pub case_id: String,
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub volume_dtype: String,
    pub labels_dtype: Option<String>,
    pub normalized: bool,
    pub window: IntensityWindow,
    pub class_names: Vec<String>,
    pub seed: Option<u64>,
    pub volume_sha256: String,
    pub labels_sha256: Option<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write one case; the directory is created if needed.
pub fn write_case(
    dir: &Path,
    case_id: &str,
    vol: &CtVolume,
    labels: Option<&LabelMap>,
    window: IntensityWindow,
    seed: Option<u64>,
) -> Result<CaseMeta> {
    if let Some(l) = labels {
        if l.dims() != vol.dims() {
            return Err(Error::Shape(format!(
                "labels {:?} vs volume {:?}",
                l.dims(),
                vol.dims()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let vbytes: Vec<u8> = vol.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_file(&dir.join(VOLUME_FILE), &vbytes)?;
    let labels_sha256 = match labels {
        Some(l) => {
            write_file(&dir.join(LABELS_FILE), l.as_slice())?;
            Some(sha256_hex(l.as_slice()))
        }
        None => None,
    };
    let class_names = labels
        .map(|l| {
            (0..l.num_classes())
                .map(|c| CLASS_NAMES.get(c).map_or(format!("class_{c}"), |s| s.to_string()))
                .collect()
        })
        .unwrap_or_else(|| CLASS_NAMES.iter().map(|s| s.to_string()).collect());
    let meta = CaseMeta {
        format_version: CASE_FORMAT_VERSION,
        case_id: case_id.to_string(),
        shape: vol.dims(),
        spacing_mm: vol.spacing_mm(),
        volume_dtype: "float32-le".into(),
        labels_dtype: labels.map(|_| "uint8".into()),
        normalized: vol.is_normalized(),
        window,
        class_names,
        seed,
        volume_sha256: sha256_hex(&vbytes),
        labels_sha256,
    };
    write_file(&dir.join(META_FILE), &to_json_bytes(&meta)?)?;
    Ok(meta)
}

/// Read a case, verifying sizes and checksums against the sidecar.
pub fn read_case(dir: &Path) -> Result<(CaseMeta, CtVolume, Option<LabelMap>)> {
    let meta_path = dir.join(META_FILE);
    let meta: CaseMeta = serde_json::from_slice(&read_file(&meta_path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
    if meta.format_version != CASE_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported format_version {}",
            meta_path.display(),
            meta.format_version
        )));
    }
    let [z, h, w] = meta.shape;
    let n = z * h * w;
    let vbytes = read_file(&dir.join(VOLUME_FILE))?;
    if vbytes.len() != 4 * n {
        return Err(Error::Format(format!(
            "{}: expected {} bytes, found {}",
            dir.join(VOLUME_FILE).display(),
            4 * n,
            vbytes.len()
        )));
    }
    if sha256_hex(&vbytes) != meta.volume_sha256 {
        return Err(Error::Format(format!("{}: volume checksum mismatch", dir.display())));
    }
    let values: Vec<f32> = vbytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let data = Array3::from_shape_vec((z, h, w), values).map_err(|e| Error::Shape(e.to_string()))?;
    let vol = CtVolume::new(data, meta.spacing_mm, meta.normalized)?;
    let labels = match &meta.labels_sha256 {
        Some(digest) => {
            let lbytes = read_file(&dir.join(LABELS_FILE))?;
            if lbytes.len() != n || &sha256_hex(&lbytes) != digest {
                return Err(Error::Format(format!(
                    "{}: label size or checksum mismatch",
                    dir.display()
                )));
            }
            let arr = Array3::from_shape_vec((z, h, w), lbytes)
                .map_err(|e| Error::Shape(e.to_string()))?;
            Some(LabelMap::new(arr, meta.class_names.len())?)
        }
        None => None,
    };
    Ok((meta, vol, labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaseRole {
    Labeled,
    Unlabeled,
    UnlabeledSynthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: String,
    /// Directory relative to the manifest.
    pub path: String,
    pub seed: Option<u64>,
    pub role: CaseRole,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub class_names: Vec<String>,
    pub cases: Vec<CaseEntry>,
}

impl DatasetManifest {
    pub fn new(cases: Vec<CaseEntry>) -> Self {
        Self {
            format_version: CASE_FORMAT_VERSION,
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            cases,
        }
    }

    pub fn find(&self, id: &str) -> Option<&CaseEntry> {
        self.cases.iter().find(|c| c.id == id)
    }

    pub fn ids_where(&self, pred: impl Fn(&CaseEntry) -> bool) -> Vec<String> {
        self.cases.iter().filter(|c| pred(c)).map(|c| c.id.clone()).collect()
    }
}

/// Write `manifest.json` into `root`.
pub fn write_manifest(root: &Path, manifest: &DatasetManifest) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let path = root.join(MANIFEST_FILE);
    write_file(&path, &to_json_bytes(manifest)?)?;
    Ok(path)
}

/// Read a manifest from a dataset root or a direct path to the file.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let m: DatasetManifest = serde_json::from_slice(&read_file(&file)?)
        .map_err(|e| Error::Format(format!("{}: {e}", file.display())))?;
    if m.format_version != CASE_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported format_version {}",
            file.display(),
            m.format_version
        )));
    }
    Ok(m)
}

/// Recipe for a phantom dataset. Cases are numbered in order: training
/// cases first (the last `unlabeled_cases` of them marked unlabeled), then
/// `test_cases` test cases. Labels are written for every case so roles can
/// be reassigned later; unlabeled roles simply ignore them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_cases: usize,
    #[serde(default)]
    pub test_cases: usize,
    #[serde(default)]
    pub unlabeled_cases: usize,
    #[serde(default = "desk_grid")]
    pub grid_shape: [usize; 3],
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub window: IntensityWindow,
}

fn desk_grid() -> [usize; 3] {
    [16, 32, 32]
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: String| Error::Config {
            path: path.into(),
            message,
        };
        if self.num_cases == 0 {
            return Err(bad("num_cases", "must be >= 1".into()));
        }
        if self.test_cases > self.num_cases {
            return Err(bad(
                "test_cases",
                format!("{} exceeds num_cases {}", self.test_cases, self.num_cases),
            ));
        }
        if self.unlabeled_cases > self.num_cases - self.test_cases {
            return Err(bad(
                "unlabeled_cases",
                format!("{} exceeds the {} training cases", self.unlabeled_cases, self.num_cases - self.test_cases),
            ));
        }
        Ok(())
    }

    /// Phantom seed of case `i`.
    pub fn case_seed(&self, i: usize) -> u64 {
        crate::seeds::derive_seed(self.seed, "phantom", i as u64)
    }
}

/// Generate, normalize and write every case of `spec` under `root`, then the
/// manifest. Output is byte-identical for a fixed spec.
pub fn generate_dataset(root: &Path, spec: &DatasetSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    let n_train = spec.num_cases - spec.test_cases;
    let mut cases = Vec::with_capacity(spec.num_cases);
    for i in 0..spec.num_cases {
        let seed = spec.case_seed(i);
        let (raw, labels) = super::generate_phantom(&super::PhantomSpec::new(seed, spec.grid_shape))?;
        let vol = super::normalize_intensity(&raw, spec.window)?;
        let id = format!("case_{i:03}");
        write_case(&root.join(&id), &id, &vol, Some(&labels), spec.window, Some(seed))?;
        let (role, split) = if i >= n_train {
            (CaseRole::Labeled, Split::Test)
        } else if i >= n_train - spec.unlabeled_cases {
            (CaseRole::Unlabeled, Split::Train)
        } else {
            (CaseRole::Labeled, Split::Train)
        };
        cases.push(CaseEntry {
            path: id.clone(),
            id,
            seed: Some(seed),
            role,
            split,
        });
    }
    let manifest = DatasetManifest::new(cases);
    write_manifest(root, &manifest)?;
    Ok(manifest)
}
