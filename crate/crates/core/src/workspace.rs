//! Discovery workspaces: the on-disk pipeline `sample -> decompose -> train`
//! with one marker file per completed stage.
//!
//! Layout under the workspace root:
//!
//! ```text
//! config.json            pipeline configuration of the last run
//! records/               sample record store
//! stages/<stage>.json    completion markers
//! space/                 manifest, directions bundle, slider weights
//! training_report.json
//! evaluation.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::serialize_slider;
use crate::backend::DiffusionBackend;
use crate::encoder::{EncoderRegistry, SemanticEncoder, PIXEL_SPACE_ID, TOY_SEMANTIC_ID};
use crate::error::{config, Error, Result};
use crate::manifest::{
    load_manifest, now_rfc3339, save_manifest, write_sidecar, Provenance, SliderEntry, SliderSpace,
    SliderSpaceManifest, MANIFEST_VERSION,
};
use crate::pca::{fit_pca_with, PcaSolver, PrincipalDirections};
use crate::sampler::{expand_prompts, sample_to_store, RecordStore, SampleSet, SamplingPlan, TemplateExpander};
use crate::tensor_file::{sha256_hex, TensorFile};
use crate::trainer::{train_sliderspace, ObjectiveMode, TrainingConfig, TrainingCorpus, TrainingReport};
use crate::backend::toy::ToyBackendConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub prompt: String,
    pub backend: ToyBackendConfig,
    pub encoder_id: String,
    pub num_samples: usize,
    /// Harvest timesteps; `None` picks the backend's default middle subset.
    pub timestep_subset: Option<Vec<usize>>,
    /// Sampler steps; `None` uses every schedule step.
    pub num_inference_steps: Option<usize>,
    /// Extra prompt variations from the template expander.
    pub expansions: usize,
    pub num_directions: usize,
    pub pca_solver: PcaSolver,
    pub training: TrainingConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            prompt: "a shape".into(),
            backend: ToyBackendConfig::default(),
            encoder_id: TOY_SEMANTIC_ID.into(),
            num_samples: 256,
            timestep_subset: None,
            num_inference_steps: None,
            expansions: 0,
            num_directions: 4,
            pca_solver: PcaSolver::Auto,
            training: TrainingConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("pipeline config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt.trim().is_empty() {
            return Err(config("prompt is empty"));
        }
        if self.num_samples < 2 {
            return Err(config("num_samples must be at least 2"));
        }
        if self.num_directions == 0 {
            return Err(config("num_directions must be positive"));
        }
        // JSON has no infinity, so a non-finite threshold would not survive the saved config.
        if !(self.backend.validation_threshold.is_finite() && self.backend.validation_threshold > 0.0) {
            return Err(config("backend.validation_threshold must be a positive finite number"));
        }
        self.training.validate()
    }

    pub fn hash(&self) -> String {
        digest(self)
    }

    /// Encoder used for sampling, decomposition and training. The output-space
    /// objective works on raw pixels regardless of `encoder_id`.
    pub fn effective_encoder_id(&self) -> &str {
        match self.training.objective_mode {
            ObjectiveMode::OutputSpace => PIXEL_SPACE_ID,
            _ => &self.encoder_id,
        }
    }

    pub fn sampling_plan(&self, backend: &dyn DiffusionBackend) -> Result<SamplingPlan> {
        let mut plan = SamplingPlan::new(&self.prompt, self.num_samples, backend);
        if let Some(ts) = &self.timestep_subset {
            plan.timestep_subset = ts.clone();
        }
        if let Some(steps) = self.num_inference_steps {
            plan.num_inference_steps = steps;
        }
        if self.expansions > 0 {
            let expander = TemplateExpander::default();
            plan.prompts = expand_prompts(&self.prompt, self.expansions + 1, &expander)?;
            plan.prompt_expander_id = Some(crate::sampler::PromptExpander::expander_id(&expander).to_string());
        }
        Ok(plan)
    }
}

fn digest<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("value serializes"))[..16].to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Sampled,
    Decomposed,
    Trained,
    Evaluated,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Sampled, Stage::Decomposed, Stage::Trained, Stage::Evaluated];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sampled => "sampled",
            Self::Decomposed => "decomposed",
            Self::Trained => "trained",
            Self::Evaluated => "evaluated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMarker {
    pub stage: Stage,
    /// Digest of everything the stage's output depends on.
    pub input_digest: String,
    pub completed_at: String,
}

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("stages"))?;
        let ws = Self { root };
        ws.check_monotone()?;
        Ok(ws)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn space_dir(&self) -> PathBuf {
        self.root.join("space")
    }

    pub fn record_store(&self) -> RecordStore {
        RecordStore::new(self.root.join("records"))
    }

    pub fn marker_path(&self, stage: Stage) -> PathBuf {
        self.root.join("stages").join(format!("{}.json", stage.as_str()))
    }

    pub fn marker(&self, stage: Stage) -> Result<Option<StageMarker>> {
        let path = self.marker_path(stage);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::Integrity {
                path,
                reason: format!("unreadable stage marker: {e}"),
            })
    }

    pub fn completed(&self) -> Result<Vec<Stage>> {
        let mut out = Vec::new();
        for s in Stage::ALL {
            if self.marker(s)?.is_some() {
                out.push(s);
            }
        }
        Ok(out)
    }

    /// A marker without all earlier markers means the workspace was edited by hand
    /// or a run was interrupted between stages; later markers are dropped.
    fn check_monotone(&self) -> Result<()> {
        let mut gap = false;
        for s in Stage::ALL {
            let present = self.marker_path(s).exists();
            if gap && present {
                log::warn!("stage '{}' is marked without its predecessors; discarding", s.as_str());
                fs::remove_file(self.marker_path(s))?;
            }
            gap |= !present;
        }
        Ok(())
    }

    fn is_current(&self, stage: Stage, input_digest: &str) -> Result<bool> {
        Ok(self.marker(stage)?.is_some_and(|m| m.input_digest == input_digest))
    }

    fn mark(&self, stage: Stage, input_digest: &str) -> Result<()> {
        let marker = StageMarker {
            stage,
            input_digest: input_digest.to_string(),
            completed_at: now_rfc3339(),
        };
        let path = self.marker_path(stage);
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&marker)?)?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    /// Removes the marker of `stage` and every later one.
    pub fn invalidate_from(&self, stage: Stage) -> Result<()> {
        for s in Stage::ALL.into_iter().filter(|s| *s >= stage).rev() {
            let p = self.marker_path(s);
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
        Ok(())
    }

    pub fn load_space(&self) -> Result<SliderSpace> {
        load_manifest(&self.space_dir())
    }

    pub fn training_report(&self) -> Result<TrainingReport> {
        let path = self.root.join("training_report.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.root.join(name);
        fs::write(&path, serde_json::to_string_pretty(value)? + "\n")?;
        Ok(path)
    }
}

/// Digests of each stage's inputs; a changed digest reruns the stage and everything after it.
struct StageDigests {
    sampled: String,
    decomposed: String,
    trained: String,
}

fn stage_digests(cfg: &PipelineConfig, plan: &SamplingPlan, encoder: &dyn SemanticEncoder, backend: &dyn DiffusionBackend) -> StageDigests {
    let sampled = digest(&(plan.digest(), &encoder.descriptor().encoder_id, backend.weights_checksum()));
    let decomposed = digest(&(&sampled, cfg.num_directions, cfg.pca_solver));
    let trained = digest(&(&decomposed, &cfg.training));
    StageDigests {
        sampled,
        decomposed,
        trained,
    }
}

const DIRECTIONS_FILE: &str = "directions.sst";

/// Runs the pipeline into `root`, skipping stages whose markers match the
/// current inputs. A failing stage leaves earlier stages untouched.
pub fn discover(
    root: &Path,
    cfg: &PipelineConfig,
    backend: &dyn DiffusionBackend,
    encoders: &EncoderRegistry,
) -> Result<Workspace> {
    cfg.validate()?;
    let ws = Workspace::open(root)?;
    let encoder = encoders.get(cfg.effective_encoder_id())?;
    let plan = cfg.sampling_plan(backend)?;
    let digests = stage_digests(cfg, &plan, encoder.as_ref(), backend);
    ws.write_json("config.json", cfg)?;

    if !ws.is_current(Stage::Sampled, &digests.sampled)? {
        ws.invalidate_from(Stage::Sampled)?;
        log::info!("sampling {} records", plan.expected_records());
        sample_to_store(&plan, backend, encoder.as_ref(), &ws.record_store())?;
        ws.mark(Stage::Sampled, &digests.sampled)?;
    }
    let samples = ws.record_store().load(&plan, backend.descriptor().latent_shape)?;

    let space_dir = ws.space_dir();
    if !ws.is_current(Stage::Decomposed, &digests.decomposed)? {
        ws.invalidate_from(Stage::Decomposed)?;
        let dirs = fit_pca_with(&samples.embedding_matrix()?, cfg.num_directions, cfg.pca_solver)?;
        let bytes = dirs.to_tensor_file(&encoder.descriptor().encoder_id).to_bytes()?;
        write_sidecar(&space_dir, DIRECTIONS_FILE, &bytes)?;
        ws.mark(Stage::Decomposed, &digests.decomposed)?;
    }

    if !ws.is_current(Stage::Trained, &digests.trained)? {
        ws.invalidate_from(Stage::Trained)?;
        let dir_bytes = fs::read(space_dir.join(DIRECTIONS_FILE))?;
        let directions = PrincipalDirections::from_tensor_file(&TensorFile::from_bytes(&dir_bytes)?)?;
        let corpus = training_corpus(cfg, &samples, backend)?;
        let checkpoints = cfg.training.checkpoint_every.map(|_| ws.root().join("checkpoints"));
        let (sliders, report) = train_sliderspace(
            &directions,
            &corpus,
            backend,
            encoder.as_ref(),
            &cfg.training,
            checkpoints.as_deref(),
        )?;
        let total: f64 = directions.total_variance;
        let mut entries = Vec::with_capacity(sliders.len());
        for (i, slider) in sliders.iter().enumerate() {
            let weights = write_sidecar(
                &space_dir,
                &format!("sliders/{}.sstr", slider.id),
                &serialize_slider(slider)?,
            )?;
            entries.push(SliderEntry {
                adapter_id: slider.id.clone(),
                pc_index: i,
                explained_variance_share: if total > 0.0 {
                    directions.explained_variance[i] / total
                } else {
                    0.0
                },
                weights,
                label: None,
                label_source: None,
            });
        }
        let previous = load_manifest(&space_dir).ok();
        let created_at = previous
            .map(|p| p.manifest.provenance.created_at)
            .unwrap_or_else(now_rfc3339);
        let manifest = SliderSpaceManifest {
            manifest_version: MANIFEST_VERSION,
            prompt: cfg.prompt.clone(),
            backend_id: backend.descriptor().backend_id.clone(),
            encoder: encoder.descriptor().clone(),
            n: sliders.len(),
            sliders: entries,
            provenance: Provenance {
                config_hash: cfg.hash(),
                objective_mode: cfg.training.objective_mode,
                sampling_seeds: plan.seed_list.clone(),
                training_seed: cfg.training.seed,
                timestep_subset: plan.timestep_subset.clone(),
                prompts: plan.prompts.clone(),
                backend_checksum: backend.weights_checksum(),
                created_at,
                updated_at: now_rfc3339(),
            },
            directions: crate::manifest::FileRef {
                path: DIRECTIONS_FILE.into(),
                sha256: sha256_hex(&dir_bytes),
            },
        };
        manifest.validate(Some(directions.n()))?;
        save_manifest(&space_dir, &manifest)?;
        ws.write_json("training_report.json", &report)?;
        ws.mark(Stage::Trained, &digests.trained)?;
    }
    Ok(ws)
}

/// Clean final samples of the concept prompt, re-noised at the harvest timesteps.
pub fn training_corpus(
    cfg: &PipelineConfig,
    samples: &SampleSet,
    backend: &dyn DiffusionBackend,
) -> Result<TrainingCorpus> {
    Ok(TrainingCorpus {
        ctx: backend.encode_text(&cfg.prompt),
        clean: samples.finals_tensor(backend.device())?,
        timesteps: samples.plan.timestep_subset.clone(),
    })
}

/// Records an evaluation result and marks the workspace evaluated.
pub fn record_evaluation<T: Serialize>(ws: &Workspace, value: &T) -> Result<()> {
    let trained = ws
        .marker(Stage::Trained)?
        .ok_or_else(|| Error::Validation("workspace has no trained slider space".into()))?;
    ws.write_json("evaluation.json", value)?;
    ws.mark(Stage::Evaluated, &trained.input_digest)
}
