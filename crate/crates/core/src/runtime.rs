//! Backend and slider-space loading for front ends.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::backend::{DiffusionBackend, ToyBackend};
use crate::error::{Error, Result};
use crate::manifest::{load_manifest, SliderSpace, MANIFEST_FILE};
use crate::workspace::PipelineConfig;

/// Process-level settings, usually taken from flags or the environment.
#[derive(Debug, Clone)]
pub struct RuntimeSettings {
    pub cache_dir: PathBuf,
    pub device: String,
}

impl Default for RuntimeSettings {
    fn default() -> Self {
        Self {
            cache_dir: std::env::temp_dir().join("sliderspace-cache"),
            device: "cpu".into(),
        }
    }
}

pub fn load_backend(cfg: &PipelineConfig, settings: &RuntimeSettings) -> Result<Arc<dyn DiffusionBackend>> {
    if !settings.device.eq_ignore_ascii_case("cpu") {
        return Err(Error::Backend(format!(
            "device '{}' is not available; this build runs on the CPU only",
            settings.device
        )));
    }
    let backend = ToyBackend::load_or_train(cfg.backend.clone(), &settings.cache_dir)?;
    Ok(Arc::new(backend))
}

/// Pipeline configuration: an explicit file wins over the workspace's saved copy,
/// which wins over the defaults.
pub fn resolve_config(explicit: Option<&Path>, workspace: Option<&Path>) -> Result<PipelineConfig> {
    if let Some(path) = explicit {
        return PipelineConfig::load(path);
    }
    if let Some(ws) = workspace {
        let saved = ws.join("config.json");
        if saved.exists() {
            return PipelineConfig::load(&saved);
        }
    }
    Ok(PipelineConfig::default())
}

/// Loads a slider space and a backend whose weights match its provenance.
pub fn open_space(
    space_dir: &Path,
    cfg: &PipelineConfig,
    settings: &RuntimeSettings,
) -> Result<(SliderSpace, Arc<dyn DiffusionBackend>)> {
    let space = load_manifest(space_dir)?;
    let backend = load_backend(cfg, settings)?;
    check_backend(&space, backend.as_ref())?;
    Ok((space, backend))
}

pub fn check_backend(space: &SliderSpace, backend: &dyn DiffusionBackend) -> Result<()> {
    let expected = &space.manifest.provenance.backend_checksum;
    if backend.descriptor().backend_id != space.manifest.backend_id || &backend.weights_checksum() != expected {
        return Err(Error::Integrity {
            path: space.root.join(MANIFEST_FILE),
            reason: format!(
                "slider space was trained on backend '{}' ({expected}), loaded '{}' ({})",
                space.manifest.backend_id,
                backend.descriptor().backend_id,
                backend.weights_checksum()
            ),
        });
    }
    Ok(())
}
