//! Slider-space manifests: a JSON document that references binary sidecar
//! files (directions and per-slider adapter weights) by relative path and
//! checksum.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::{deserialize_slider, Slider};
use crate::composer::SliderLibrary;
use crate::encoder::EncoderDescriptor;
use crate::error::{Error, Result};
use crate::pca::PrincipalDirections;
use crate::tensor_file::{sha256_hex, TensorFile};
use crate::trainer::ObjectiveMode;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRef {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliderEntry {
    pub adapter_id: String,
    pub pc_index: usize,
    pub explained_variance_share: f64,
    pub weights: FileRef,
    pub label: Option<String>,
    pub label_source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub objective_mode: ObjectiveMode,
    pub sampling_seeds: Vec<u64>,
    pub training_seed: u64,
    pub timestep_subset: Vec<usize>,
    pub prompts: Vec<String>,
    pub backend_checksum: String,
    /// RFC 3339 timestamps; excluded from the manifest hash.
    pub created_at: String,
    pub updated_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliderSpaceManifest {
    pub manifest_version: u32,
    pub prompt: String,
    pub backend_id: String,
    pub encoder: EncoderDescriptor,
    pub n: usize,
    pub sliders: Vec<SliderEntry>,
    pub provenance: Provenance,
    pub directions: FileRef,
}

impl SliderSpaceManifest {
    pub fn encoder_id(&self) -> &str {
        &self.encoder.encoder_id
    }

    /// Digest over the manifest content with timestamps removed.
    pub fn hash(&self) -> String {
        let mut copy = self.clone();
        copy.provenance.created_at.clear();
        copy.provenance.updated_at.clear();
        let bytes = serde_json::to_vec(&copy).expect("manifest serializes");
        sha256_hex(&bytes)[..16].to_string()
    }

    pub fn slider(&self, id: &str) -> Result<&SliderEntry> {
        self.sliders
            .iter()
            .find(|s| s.adapter_id == id)
            .ok_or_else(|| Error::NotFound(format!("unknown slider '{id}'")))
    }

    /// Structural checks that need no file access.
    pub fn validate(&self, components: Option<usize>) -> Result<()> {
        if self.sliders.len() != self.n {
            return Err(Error::Validation(format!(
                "manifest declares n = {} but lists {} sliders",
                self.n,
                self.sliders.len()
            )));
        }
        let mut seen = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for s in &self.sliders {
            if !seen.insert(s.pc_index) {
                return Err(Error::Validation(format!("pc_index {} appears twice", s.pc_index)));
            }
            if !ids.insert(&s.adapter_id) {
                return Err(Error::Validation(format!("slider id '{}' appears twice", s.adapter_id)));
            }
            if let Some(c) = components {
                if s.pc_index >= c {
                    return Err(Error::Validation(format!(
                        "pc_index {} exceeds the {c} fitted components",
                        s.pc_index
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn now_rfc3339() -> String {
    humantime::format_rfc3339_seconds(std::time::SystemTime::now()).to_string()
}

pub fn save_manifest(dir: &Path, manifest: &SliderSpaceManifest) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(MANIFEST_FILE);
    let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(&tmp, text)?;
    fs::rename(&tmp, &path)?;
    Ok(path)
}

/// Writes a sidecar file and returns its reference.
pub fn write_sidecar(dir: &Path, relative: &str, bytes: &[u8]) -> Result<FileRef> {
    let path = dir.join(relative);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, bytes)?;
    Ok(FileRef {
        path: relative.to_string(),
        sha256: sha256_hex(bytes),
    })
}

fn read_verified(dir: &Path, r: &FileRef) -> Result<Vec<u8>> {
    let path = dir.join(&r.path);
    let bytes = fs::read(&path).map_err(|e| Error::Integrity {
        path: path.clone(),
        reason: format!("cannot read referenced file: {e}"),
    })?;
    let actual = sha256_hex(&bytes);
    if actual != r.sha256 {
        return Err(Error::Integrity {
            path,
            reason: format!("checksum mismatch (expected {}, found {actual})", r.sha256),
        });
    }
    Ok(bytes)
}

/// Parses a manifest document, rejecting unknown versions before anything else.
pub fn parse_manifest(text: &str) -> Result<SliderSpaceManifest> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("manifest: {e}")))?;
    let version = value
        .get("manifest_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Parse("manifest has no manifest_version".into()))?;
    if version != MANIFEST_VERSION as u64 {
        return Err(Error::Version {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            supported: MANIFEST_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| Error::Parse(format!("manifest: {e}")))
}

/// A manifest with its sidecars loaded and verified.
#[derive(Debug, Clone)]
pub struct SliderSpace {
    pub root: PathBuf,
    pub manifest: SliderSpaceManifest,
    pub directions: PrincipalDirections,
    pub sliders: Vec<Slider>,
}

impl SliderSpace {
    pub fn library(&self) -> SliderLibrary {
        SliderLibrary::new(self.manifest.prompt.clone(), self.sliders.clone())
    }
}

/// Loads `dir/manifest.json` and every file it references, verifying checksums.
pub fn load_manifest(dir: &Path) -> Result<SliderSpace> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?;
    let manifest = parse_manifest(&text)?;
    let dir_bytes = read_verified(dir, &manifest.directions)?;
    let directions = PrincipalDirections::from_tensor_file(&TensorFile::from_bytes(&dir_bytes)?)?;
    manifest.validate(Some(directions.n()))?;
    let mut sliders = Vec::with_capacity(manifest.n);
    for entry in &manifest.sliders {
        let bytes = read_verified(dir, &entry.weights)?;
        let slider = deserialize_slider(&bytes)?;
        if slider.id != entry.adapter_id {
            return Err(Error::Integrity {
                path: dir.join(&entry.weights.path),
                reason: format!("file holds slider '{}', manifest expects '{}'", slider.id, entry.adapter_id),
            });
        }
        sliders.push(slider);
    }
    Ok(SliderSpace {
        root: dir.to_path_buf(),
        manifest,
        directions,
        sliders,
    })
}

/// Copies a verified slider space into `target`.
pub fn export_space(space: &SliderSpace, target: &Path) -> Result<PathBuf> {
    let mut refs = vec![space.manifest.directions.clone()];
    refs.extend(space.manifest.sliders.iter().map(|s| s.weights.clone()));
    for r in refs {
        let bytes = read_verified(&space.root, &r)?;
        write_sidecar(target, &r.path, &bytes)?;
    }
    save_manifest(target, &space.manifest)
}
