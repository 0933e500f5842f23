//! On-disk model bundles.
//!
//! ```text
//! <dir>/manifest.toml
//! <dir>/scale_<s>/regions.csv
//! <dir>/scale_<s>/clusterer.ebad
//! <dir>/scale_<s>/region_<label>.ebad
//! ```
//!
//! The manifest is written last and lists a SHA-256 for every record, so a
//! half-written bundle fails to load.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::Mode;
use crate::container;
use crate::dbm::{CrDbmParams, MeanFieldConfig};
use crate::detector::{Reconstructor, ScaleModel};
use crate::error::{Error, Result};
use crate::ingest::PatchSpec;
use crate::rbm::RbmParams;
use crate::regions::{self, Clusterer, RegionMap};

const MANIFEST: &str = "manifest.toml";
const LOCK: &str = ".lock";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ClusterModel {
    Rbm(RbmParams),
    Dbm(CrDbmParams),
}

impl ClusterModel {
    pub fn as_clusterer(&self, mf: MeanFieldConfig) -> Clusterer<'_> {
        match self {
            ClusterModel::Rbm(p) => Clusterer::Rbm(p),
            ClusterModel::Dbm(p) => Clusterer::Dbm(p, mf),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleBundle {
    pub spec: PatchSpec,
    pub map: RegionMap,
    pub clusterer: ClusterModel,
    /// Empty when the clusterer DBM also reconstructs.
    pub regions: BTreeMap<u32, RbmParams>,
}

impl ScaleBundle {
    pub fn scale_model(&self, mf: MeanFieldConfig) -> Result<ScaleModel> {
        let recon = if !self.regions.is_empty() {
            Reconstructor::Regions(self.regions.clone())
        } else if let ClusterModel::Dbm(p) = &self.clusterer {
            Reconstructor::Dbm {
                params: p.clone(),
                mean_field: mf,
            }
        } else {
            return Err(Error::BundleMismatch("scale has no reconstruction model".into()));
        };
        Ok(ScaleModel {
            spec: self.spec,
            map: self.map.clone(),
            recon,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub mode: Mode,
    pub config_hash: String,
    pub seed: u64,
    pub frame_dims: (usize, usize),
    pub scales: Vec<ScaleBundle>,
}

impl Bundle {
    pub fn scale_models(&self, mf: MeanFieldConfig) -> Result<Vec<ScaleModel>> {
        self.scales.iter().map(|s| s.scale_model(mf)).collect()
    }

    /// Fail unless the bundle was trained with settings hashing to `hash`.
    pub fn check_hash(&self, hash: &str) -> Result<()> {
        if self.config_hash != hash {
            return Err(Error::BundleMismatch(format!(
                "bundle was trained with config {} but the current config hashes to {hash}",
                self.config_hash
            )));
        }
        Ok(())
    }

    /// Replace region RBMs with those of `models`, in scale order.
    pub fn set_region_models(&mut self, models: &[ScaleModel]) {
        for (s, m) in self.scales.iter_mut().zip(models) {
            if let Reconstructor::Regions(r) = &m.recon {
                s.regions = r.clone();
            }
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: u32,
    mode: Mode,
    config_hash: String,
    seed: u64,
    frame_height: usize,
    frame_width: usize,
    scales: Vec<ScaleEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScaleEntry {
    ratio: f64,
    patch_height: usize,
    patch_width: usize,
    stride_v: usize,
    stride_h: usize,
    num_regions: usize,
    records: Vec<RecordEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordEntry {
    file: String,
    role: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<u32>,
    sha256: String,
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_record(dir: &Path, file: &str, bytes: &[u8]) -> Result<String> {
    let path = dir.join(file);
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(digest(bytes))
}

fn scale_dir(s: usize) -> String {
    format!("scale_{s}")
}

/// Advisory lock on a model store, released on drop.
#[derive(Debug)]
pub struct StoreLock {
    _file: File,
}

impl StoreLock {
    fn open(dir: &Path) -> Result<File> {
        let path = dir.join(LOCK);
        File::options()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))
    }

    /// Exclusive lock, creating `dir` if needed.
    pub fn exclusive(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let file = Self::open(dir)?;
        file.lock().map_err(|e| Error::io(dir, e))?;
        Ok(StoreLock { _file: file })
    }

    pub fn shared(dir: &Path) -> Result<Self> {
        if !dir.join(MANIFEST).is_file() {
            return Err(Error::Data(format!("no model bundle at {}", dir.display())));
        }
        let file = Self::open(dir)?;
        file.lock_shared().map_err(|e| Error::io(dir, e))?;
        Ok(StoreLock { _file: file })
    }
}

/// Write `bundle` into `dir`, replacing any previous bundle there. The
/// caller holds the store lock.
pub fn save(dir: &Path, bundle: &Bundle) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join(MANIFEST);
    if manifest_path.exists() {
        std::fs::remove_file(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let stale = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("scale_"));
        if stale && path.is_dir() {
            std::fs::remove_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        }
    }
    let mut scales = Vec::with_capacity(bundle.scales.len());
    for (s, sb) in bundle.scales.iter().enumerate() {
        let rel = scale_dir(s);
        let sdir = dir.join(&rel);
        std::fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        let mut records = Vec::new();
        let mut push = |file: String, role: &str, label: Option<u32>, bytes: Vec<u8>| -> Result<()> {
            let sha256 = write_record(&sdir, &file, &bytes)?;
            records.push(RecordEntry {
                file: format!("{rel}/{file}"),
                role: role.into(),
                label,
                sha256,
            });
            Ok(())
        };
        push("regions.csv".into(), "region-map", None, sb.map.to_csv().into_bytes())?;
        let clusterer = match &sb.clusterer {
            ClusterModel::Rbm(p) => container::encode_rbm(p),
            ClusterModel::Dbm(p) => container::encode_dbm(p),
        };
        push("clusterer.ebad".into(), "clusterer", None, clusterer)?;
        for (&label, p) in &sb.regions {
            push(format!("region_{label}.ebad"), "region", Some(label), container::encode_rbm(p))?;
        }
        scales.push(ScaleEntry {
            ratio: sb.spec.scale,
            patch_height: sb.spec.h,
            patch_width: sb.spec.w,
            stride_v: sb.spec.stride_v,
            stride_h: sb.spec.stride_h,
            num_regions: sb.map.num_regions(),
            records,
        });
    }
    let manifest = Manifest {
        format: FORMAT,
        mode: bundle.mode,
        config_hash: bundle.config_hash.clone(),
        seed: bundle.seed,
        frame_height: bundle.frame_dims.0,
        frame_width: bundle.frame_dims.1,
        scales,
    };
    let text = toml::to_string(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))
}

fn read_record(dir: &Path, r: &RecordEntry) -> Result<Vec<u8>> {
    let path: PathBuf = dir.join(&r.file);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if digest(&bytes) != r.sha256 {
        return Err(Error::Container(format!("{} does not match its checksum", r.file)));
    }
    Ok(bytes)
}

pub fn load(dir: &Path) -> Result<Bundle> {
    let manifest_path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let m: Manifest =
        toml::from_str(&text).map_err(|e| Error::Container(format!("manifest: {e}")))?;
    if m.format != FORMAT {
        return Err(Error::Container(format!("unsupported bundle format {}", m.format)));
    }
    let mut scales = Vec::with_capacity(m.scales.len());
    for e in &m.scales {
        let spec = PatchSpec::new(e.patch_height, e.patch_width, e.stride_v, e.stride_h, e.ratio)
            .map_err(|err| Error::Container(err.to_string()))?;
        let (mut map, mut clusterer, mut regions) = (None, None, BTreeMap::new());
        for r in &e.records {
            let bytes = read_record(dir, r)?;
            match (r.role.as_str(), r.label) {
                ("region-map", _) => {
                    let text = String::from_utf8(bytes)
                        .map_err(|_| Error::Container(format!("{} is not UTF-8", r.file)))?;
                    map = Some(RegionMap::from_csv(&text)?);
                }
                ("clusterer", _) => {
                    clusterer = Some(match container::decode(&bytes)? {
                        container::Record::Rbm(p) => ClusterModel::Rbm(p),
                        container::Record::Dbm(p) => ClusterModel::Dbm(p),
                    })
                }
                ("region", Some(label)) => {
                    regions.insert(label, container::decode_rbm(&bytes)?);
                }
                (role, _) => return Err(Error::Container(format!("unknown record role {role:?}"))),
            }
        }
        let map = map.ok_or_else(|| Error::Container("scale without region map".into()))?;
        let clusterer = clusterer.ok_or_else(|| Error::Container("scale without clusterer".into()))?;
        scales.push(ScaleBundle {
            spec,
            map,
            clusterer,
            regions,
        });
    }
    Ok(Bundle {
        mode: m.mode,
        config_hash: m.config_hash,
        seed: m.seed,
        frame_dims: (m.frame_height, m.frame_width),
        scales,
    })
}

/// Cluster-map image for one scale, one block per grid cell.
pub fn cluster_map_image(sb: &ScaleBundle) -> Result<regions::IndexedImage> {
    regions::emit_cluster_map(&sb.map, None, (sb.spec.stride_v, sb.spec.stride_h))
}
