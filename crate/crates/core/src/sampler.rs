//! Distribution sampling: seeded base-model generations of a prompt, with the
//! extrapolated final image harvested at a subset of timesteps and embedded.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backend::{initial_noise, run_trajectory, DiffusionBackend};
use crate::encoder::{SemanticEmbedding, SemanticEncoder};
use crate::error::{config, Error, Result};
use crate::pca::SampleMatrix;
use crate::schedule::LatentImage;
use crate::tensor_file::sha256_hex;

/// Seeds per sampler batch. Fixed so results never depend on how a run was
/// split across resumptions.
pub const CHUNK_SEEDS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    /// Prompts to sample; the first is the concept prompt, the rest expansions.
    pub prompts: Vec<String>,
    pub seed_list: Vec<u64>,
    pub timestep_subset: Vec<usize>,
    pub num_inference_steps: usize,
    pub prompt_expander_id: Option<String>,
}

impl SamplingPlan {
    /// Plan with seeds `0..m` and the default middle timestep subset.
    pub fn new(prompt: &str, num_samples: usize, backend: &dyn DiffusionBackend) -> Self {
        let schedule = backend.schedule();
        Self {
            prompts: vec![prompt.to_string()],
            seed_list: (0..num_samples as u64).collect(),
            timestep_subset: schedule.middle_subset(4),
            num_inference_steps: schedule.num_steps(),
            prompt_expander_id: None,
        }
    }

    pub fn prompt(&self) -> &str {
        &self.prompts[0]
    }

    pub fn num_samples(&self) -> usize {
        self.seed_list.len()
    }

    pub fn expected_records(&self) -> usize {
        self.prompts.len() * self.seed_list.len() * self.timestep_subset.len()
    }

    pub fn validate(&self, backend: &dyn DiffusionBackend) -> Result<Vec<usize>> {
        if self.prompts.is_empty() || self.prompts.iter().any(|p| p.trim().is_empty()) {
            return Err(config("sampling plan needs at least one non-empty prompt"));
        }
        if self.seed_list.is_empty() {
            return Err(config("sampling plan needs at least one seed"));
        }
        let mut seeds = self.seed_list.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(config("sampling plan seeds must be distinct"));
        }
        if self.timestep_subset.is_empty() {
            return Err(config("timestep subset is empty"));
        }
        let schedule = backend.schedule();
        for t in &self.timestep_subset {
            schedule.check_t(*t).map_err(|_| config(format!("timestep {t} outside [0, {})", schedule.num_steps())))?;
        }
        let steps = schedule.inference_timesteps(self.num_inference_steps)?;
        for t in &self.timestep_subset {
            if !steps.contains(t) {
                return Err(config(format!(
                    "timestep {t} is not visited by a {}-step sampler",
                    self.num_inference_steps
                )));
            }
        }
        Ok(steps)
    }

    /// Digest identifying the plan for resumption checks.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("plan serializes"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub prompt_index: usize,
    pub seed: u64,
    pub timestep: usize,
    /// Cached `x_t`, kept only when requested.
    pub latent: Option<LatentImage>,
    /// In-memory extrapolated final image; not persisted.
    pub x0_estimate: Option<LatentImage>,
    pub embedding: SemanticEmbedding,
}

/// Clean final sample of one `(prompt, seed)` trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalSample {
    pub prompt_index: usize,
    pub seed: u64,
    pub latent: LatentImage,
}

#[derive(Debug, Clone)]
pub struct SampleSet {
    pub plan: SamplingPlan,
    pub encoder_id: String,
    pub records: Vec<SampleRecord>,
    pub finals: Vec<FinalSample>,
}

impl SampleSet {
    /// All embeddings pooled over prompts, seeds and timesteps.
    pub fn embedding_matrix(&self) -> Result<SampleMatrix> {
        let rows: Vec<Vec<f32>> = self.records.iter().map(|r| r.embedding.vector.clone()).collect();
        SampleMatrix::from_rows(&rows)
    }

    /// Embeddings harvested at a single timestep.
    pub fn timestep_matrix(&self, t: usize) -> Result<SampleMatrix> {
        let rows: Vec<Vec<f32>> = self
            .records
            .iter()
            .filter(|r| r.timestep == t)
            .map(|r| r.embedding.vector.clone())
            .collect();
        SampleMatrix::from_rows(&rows)
    }

    /// `(M, C, H, W)` tensor of the clean final samples.
    pub fn finals_tensor(&self, device: &candle_core::Device) -> Result<Tensor> {
        let rows = self
            .finals
            .iter()
            .map(|f| Ok(f.latent.to_tensor(device)?.unsqueeze(0)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&rows, 0)?)
    }

    /// Re-embeds every in-memory `x0_estimate` with another encoder.
    pub fn reembed(&self, backend: &dyn DiffusionBackend, encoder: &dyn SemanticEncoder) -> Result<SampleSet> {
        let mut records = Vec::with_capacity(self.records.len());
        for chunk in self.records.chunks(64) {
            let latents = chunk
                .iter()
                .map(|r| {
                    let x0 = r
                        .x0_estimate
                        .as_ref()
                        .ok_or_else(|| Error::Validation("record has no in-memory x0 estimate".into()))?;
                    Ok(x0.to_tensor(backend.device())?.unsqueeze(0)?)
                })
                .collect::<Result<Vec<_>>>()?;
            let emb = embed_batch(backend, encoder, &Tensor::cat(&latents, 0)?)?;
            for (r, e) in chunk.iter().zip(emb) {
                records.push(SampleRecord {
                    embedding: e,
                    ..r.clone()
                });
            }
        }
        Ok(SampleSet {
            plan: self.plan.clone(),
            encoder_id: encoder.descriptor().encoder_id.clone(),
            records,
            finals: self.finals.clone(),
        })
    }
}

fn embed_batch(
    backend: &dyn DiffusionBackend,
    encoder: &dyn SemanticEncoder,
    latents: &Tensor,
) -> Result<Vec<SemanticEmbedding>> {
    let rgb = backend.decode_rgb(&latents.clamp(-1f32, 1f32)?)?.clamp(0f32, 1f32)?;
    let out = encoder.embed_rgb_batch(&rgb)?;
    let desc = encoder.descriptor();
    Ok(out
        .to_vec2::<f32>()?
        .into_iter()
        .map(|vector| SemanticEmbedding {
            vector,
            encoder_id: desc.encoder_id.clone(),
            normalized: desc.normalized,
        })
        .collect())
}

/// Work unit: one prompt and up to [`CHUNK_SEEDS`] seeds.
fn chunks(plan: &SamplingPlan) -> Vec<(usize, Vec<u64>)> {
    let mut out = Vec::new();
    for p in 0..plan.prompts.len() {
        for seeds in plan.seed_list.chunks(CHUNK_SEEDS) {
            out.push((p, seeds.to_vec()));
        }
    }
    out
}

struct ChunkOutput {
    records: Vec<SampleRecord>,
    finals: Vec<FinalSample>,
}

fn sample_chunk(
    plan: &SamplingPlan,
    steps: &[usize],
    backend: &dyn DiffusionBackend,
    encoder: &dyn SemanticEncoder,
    prompt_index: usize,
    seeds: &[u64],
    keep_latents: bool,
) -> Result<ChunkOutput> {
    let desc = backend.descriptor();
    let ctx = backend.encode_text(&plan.prompts[prompt_index]);
    let noise = seeds
        .iter()
        .map(|s| initial_noise(*s, desc.latent_shape, backend.device()))
        .collect::<Result<Vec<_>>>()?;
    let x = Tensor::cat(&noise, 0)?;
    let mut harvest = plan.timestep_subset.clone();
    harvest.sort_unstable_by(|a, b| b.cmp(a));
    let traj = run_trajectory(backend, &x, &ctx, steps, &|_| None, &harvest)?;
    // `harvested` arrives in trajectory order; regroup by seed.
    let mut per_t = Vec::with_capacity(traj.harvested.len());
    for (t, x_t, x0) in &traj.harvested {
        per_t.push((*t, x_t.clone(), x0.clone(), embed_batch(backend, encoder, x0)?));
    }
    let mut records = Vec::with_capacity(seeds.len() * per_t.len());
    let mut finals = Vec::with_capacity(seeds.len());
    for (i, seed) in seeds.iter().enumerate() {
        for (t, x_t, x0, emb) in &per_t {
            records.push(SampleRecord {
                prompt_index,
                seed: *seed,
                timestep: *t,
                latent: if keep_latents {
                    Some(LatentImage::from_tensor(&x_t.get(i)?)?)
                } else {
                    None
                },
                x0_estimate: Some(LatentImage::from_tensor(&x0.get(i)?)?),
                embedding: emb[i].clone(),
            });
        }
        finals.push(FinalSample {
            prompt_index,
            seed: *seed,
            latent: LatentImage::from_tensor(&traj.final_latent.get(i)?)?,
        });
    }
    Ok(ChunkOutput { records, finals })
}

/// Samples the whole plan in memory.
pub fn sample_distribution(
    plan: &SamplingPlan,
    backend: &dyn DiffusionBackend,
    encoder: &dyn SemanticEncoder,
) -> Result<SampleSet> {
    let steps = plan.validate(backend)?;
    let mut records = Vec::with_capacity(plan.expected_records());
    let mut finals = Vec::new();
    for (p, seeds) in chunks(plan) {
        let out = sample_chunk(plan, &steps, backend, encoder, p, &seeds, false)?;
        records.extend(out.records);
        finals.extend(out.finals);
    }
    Ok(SampleSet {
        plan: plan.clone(),
        encoder_id: encoder.descriptor().encoder_id.clone(),
        records,
        finals,
    })
}

/// On-disk record store.
///
/// * `index.tsv`: one `(prompt, seed, timestep, sha256)` row per record,
/// * `embeddings.f32`: row-major little-endian embedding matrix,
/// * `finals.f32`: clean final latents, one row per `(prompt, seed)`,
/// * `cursor.json`: plan digest and number of completed chunks.
///
/// Chunks are appended whole; the cursor is rewritten atomically afterwards,
/// so a crash leaves at most one partial chunk, which is truncated on resume.
#[derive(Debug, Clone)]
pub struct RecordStore {
    root: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Cursor {
    plan_digest: String,
    encoder_id: String,
    dimension: usize,
    latent_len: usize,
    completed_chunks: usize,
    records: usize,
    finals: usize,
}

impl RecordStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn read_cursor(&self) -> Result<Option<Cursor>> {
        let p = self.path("cursor.json");
        if !p.exists() {
            return Ok(None);
        }
        let c = serde_json::from_slice(&fs::read(&p)?).map_err(|e| Error::Parse(format!("cursor: {e}")))?;
        Ok(Some(c))
    }

    fn write_cursor(&self, c: &Cursor) -> Result<()> {
        let tmp = self.path("cursor.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(c)?)?;
        fs::rename(tmp, self.path("cursor.json"))?;
        Ok(())
    }

    pub fn is_complete(&self, plan: &SamplingPlan) -> Result<bool> {
        Ok(match self.read_cursor()? {
            Some(c) => c.plan_digest == plan.digest() && c.completed_chunks == chunks(plan).len(),
            None => false,
        })
    }

    fn truncate_to(&self, c: &Cursor) -> Result<()> {
        let emb = OpenOptions::new().write(true).create(true).truncate(false).open(self.path("embeddings.f32"))?;
        emb.set_len((c.records * c.dimension * 4) as u64)?;
        let fin = OpenOptions::new().write(true).create(true).truncate(false).open(self.path("finals.f32"))?;
        fin.set_len((c.finals * c.latent_len * 4) as u64)?;
        let index = self.path("index.tsv");
        let lines: Vec<String> = if index.exists() {
            BufReader::new(File::open(&index)?).lines().collect::<std::io::Result<_>>()?
        } else {
            Vec::new()
        };
        let mut keep: Vec<String> = lines.into_iter().take(c.records + 1).collect();
        if keep.is_empty() {
            keep.push(INDEX_HEADER.to_string());
        }
        fs::write(&index, keep.join("\n") + "\n")?;
        Ok(())
    }

    fn append(&self, out: &ChunkOutput) -> Result<()> {
        let mut index = OpenOptions::new().append(true).open(self.path("index.tsv"))?;
        let mut emb = OpenOptions::new().append(true).open(self.path("embeddings.f32"))?;
        let mut fin = OpenOptions::new().append(true).open(self.path("finals.f32"))?;
        for r in &out.records {
            let bytes: Vec<u8> = r.embedding.vector.iter().flat_map(|v| v.to_le_bytes()).collect();
            writeln!(index, "{}\t{}\t{}\t{}", r.prompt_index, r.seed, r.timestep, sha256_hex(&bytes))?;
            emb.write_all(&bytes)?;
        }
        for f in &out.finals {
            let bytes: Vec<u8> = f.latent.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            fin.write_all(&bytes)?;
        }
        index.sync_data()?;
        emb.sync_data()?;
        fin.sync_data()?;
        Ok(())
    }

    /// Loads a completed store, verifying every row checksum.
    pub fn load(&self, plan: &SamplingPlan, latent_shape: [usize; 3]) -> Result<SampleSet> {
        let c = self
            .read_cursor()?
            .ok_or_else(|| Error::NotFound(format!("no record store at {}", self.root.display())))?;
        if c.plan_digest != plan.digest() {
            return Err(Error::Validation("record store was written for a different plan".into()));
        }
        let mut emb = Vec::new();
        File::open(self.path("embeddings.f32"))?.read_to_end(&mut emb)?;
        let mut fin = Vec::new();
        File::open(self.path("finals.f32"))?.read_to_end(&mut fin)?;
        if emb.len() < c.records * c.dimension * 4 || fin.len() < c.finals * c.latent_len * 4 {
            return Err(Error::Integrity {
                path: self.root.clone(),
                reason: "record store files are shorter than the cursor claims".into(),
            });
        }
        let lines: Vec<String> = BufReader::new(File::open(self.path("index.tsv"))?)
            .lines()
            .skip(1)
            .take(c.records)
            .collect::<std::io::Result<_>>()?;
        if lines.len() != c.records {
            return Err(Error::Integrity {
                path: self.path("index.tsv"),
                reason: format!("expected {} rows, found {}", c.records, lines.len()),
            });
        }
        let row_bytes = c.dimension * 4;
        let mut records = Vec::with_capacity(c.records);
        for (i, line) in lines.iter().enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            let parse = |s: &str| -> Result<u64> {
                s.parse().map_err(|_| Error::Parse(format!("index row {i}: bad field '{s}'")))
            };
            if cols.len() != 4 {
                return Err(Error::Parse(format!("index row {i} has {} fields", cols.len())));
            }
            let bytes = &emb[i * row_bytes..(i + 1) * row_bytes];
            if sha256_hex(bytes) != cols[3] {
                return Err(Error::Integrity {
                    path: self.path("embeddings.f32"),
                    reason: format!("checksum mismatch at row {i}"),
                });
            }
            records.push(SampleRecord {
                prompt_index: parse(cols[0])? as usize,
                seed: parse(cols[1])?,
                timestep: parse(cols[2])? as usize,
                latent: None,
                x0_estimate: None,
                embedding: SemanticEmbedding {
                    vector: bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect(),
                    encoder_id: c.encoder_id.clone(),
                    normalized: false,
                },
            });
        }
        let finals_pairs: Vec<(usize, u64)> = (0..plan.prompts.len())
            .flat_map(|p| plan.seed_list.iter().map(move |s| (p, *s)))
            .collect();
        let finals = finals_pairs
            .into_iter()
            .take(c.finals)
            .enumerate()
            .map(|(i, (prompt_index, seed))| {
                let bytes = &fin[i * c.latent_len * 4..(i + 1) * c.latent_len * 4];
                let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
                Ok(FinalSample {
                    prompt_index,
                    seed,
                    latent: LatentImage::new(latent_shape, data, LatentImage::DEFAULT_RANGE)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SampleSet {
            plan: plan.clone(),
            encoder_id: c.encoder_id,
            records,
            finals,
        })
    }
}

const INDEX_HEADER: &str = "prompt\tseed\ttimestep\tsha256";

/// Samples `plan` into `store`, resuming from its cursor. On failure the
/// completed chunks stay on disk and the error is returned.
pub fn sample_to_store(
    plan: &SamplingPlan,
    backend: &dyn DiffusionBackend,
    encoder: &dyn SemanticEncoder,
    store: &RecordStore,
) -> Result<()> {
    let steps = plan.validate(backend)?;
    fs::create_dir_all(store.root())?;
    let desc = encoder.descriptor();
    let latent_len: usize = backend.descriptor().latent_shape.iter().product();
    let fresh = Cursor {
        plan_digest: plan.digest(),
        encoder_id: desc.encoder_id.clone(),
        dimension: desc.dimension,
        latent_len,
        completed_chunks: 0,
        records: 0,
        finals: 0,
    };
    let mut cursor = match store.read_cursor()? {
        Some(c) if c.plan_digest == fresh.plan_digest && c.encoder_id == fresh.encoder_id => c,
        Some(_) => {
            log::warn!("record store at {} belongs to another plan; restarting", store.root().display());
            fresh
        }
        None => fresh,
    };
    store.truncate_to(&cursor)?;
    store.write_cursor(&cursor)?;
    let all = chunks(plan);
    for (p, seeds) in all.iter().skip(cursor.completed_chunks) {
        let out = sample_chunk(plan, &steps, backend, encoder, *p, seeds, false)?;
        store.append(&out)?;
        cursor.completed_chunks += 1;
        cursor.records += out.records.len();
        cursor.finals += out.finals.len();
        store.write_cursor(&cursor)?;
    }
    Ok(())
}

/// Source of prompt variations.
pub trait PromptExpander: Send + Sync {
    fn expander_id(&self) -> &str;

    /// `k` prompts, the first of which is `base`.
    fn expand(&self, base: &str, k: usize) -> Result<Vec<String>>;
}

/// Deterministic template fills.
#[derive(Debug, Clone)]
pub struct TemplateExpander {
    templates: Vec<String>,
}

impl Default for TemplateExpander {
    fn default() -> Self {
        Self {
            templates: [
                "a picture of {}",
                "{}, centered",
                "a simple drawing of {}",
                "{} on a plain canvas",
                "an image showing {}",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }
}

impl TemplateExpander {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() || templates.iter().any(|t| !t.contains("{}")) {
            return Err(config("templates must be non-empty and contain a '{}' placeholder"));
        }
        Ok(Self { templates })
    }
}

impl PromptExpander for TemplateExpander {
    fn expander_id(&self) -> &str {
        "template"
    }

    fn expand(&self, base: &str, k: usize) -> Result<Vec<String>> {
        if base.trim().is_empty() {
            return Err(config("base prompt is empty"));
        }
        let mut out = Vec::with_capacity(k);
        if k > 0 {
            out.push(base.to_string());
        }
        for i in 0..k.saturating_sub(1) {
            let tpl = &self.templates[i % self.templates.len()];
            let mut p = tpl.replace("{}", base);
            let round = i / self.templates.len();
            if round > 0 {
                p.push_str(&format!(" (variation {round})"));
            }
            out.push(p);
        }
        Ok(out)
    }
}

/// Text-completion service used for prompt expansion.
pub trait TextClient: Send + Sync {
    /// Up to `count` prompt variations of `base`.
    fn variations(&self, base: &str, count: usize, timeout: Duration) -> Result<Vec<String>>;
}

/// Expansion through an external language model, falling back to templates on
/// failure or timeout.
pub struct ClientExpander<C: TextClient> {
    pub client: C,
    pub timeout: Duration,
    pub fallback: TemplateExpander,
}

impl<C: TextClient> ClientExpander<C> {
    pub fn new(client: C, timeout: Duration) -> Self {
        Self {
            client,
            timeout,
            fallback: TemplateExpander::default(),
        }
    }
}

impl<C: TextClient> PromptExpander for ClientExpander<C> {
    fn expander_id(&self) -> &str {
        "client"
    }

    fn expand(&self, base: &str, k: usize) -> Result<Vec<String>> {
        if k <= 1 {
            return self.fallback.expand(base, k);
        }
        match self.client.variations(base, k - 1, self.timeout) {
            Ok(list) => {
                let mut out = vec![base.to_string()];
                out.extend(list.into_iter().filter(|p| !p.trim().is_empty()).take(k - 1));
                if out.len() < k {
                    let fill = self.fallback.expand(base, k)?;
                    out.extend(fill.into_iter().skip(out.len()));
                }
                Ok(out)
            }
            Err(e) => {
                log::warn!("prompt expansion client failed ({e}); using templates");
                self.fallback.expand(base, k)
            }
        }
    }
}

pub fn expand_prompts(base: &str, k: usize, expander: &dyn PromptExpander) -> Result<Vec<String>> {
    let out = expander.expand(base, k)?;
    if out.len() != k || out.first().map(|s| s.as_str()) != Some(base) && k > 0 {
        return Err(Error::Validation(format!(
            "expander '{}' returned {} prompts for k = {k}",
            expander.expander_id(),
            out.len()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<String>);
    impl TextClient for Fixed {
        fn variations(&self, _: &str, _: usize, _: Duration) -> Result<Vec<String>> {
            Ok(self.0.clone())
        }
    }

    struct Slow;
    impl TextClient for Slow {
        fn variations(&self, _: &str, _: usize, timeout: Duration) -> Result<Vec<String>> {
            Err(Error::Timeout(format!("no answer within {timeout:?}")))
        }
    }

    #[test]
    fn template_expansion() {
        let e = TemplateExpander::default();
        assert_eq!(expand_prompts("a shape", 1, &e).unwrap(), vec!["a shape"]);
        let three = expand_prompts("a shape", 3, &e).unwrap();
        assert_eq!(three, vec!["a shape", "a picture of a shape", "a shape, centered"]);
        assert_eq!(three, expand_prompts("a shape", 3, &e).unwrap());
        let many = expand_prompts("a shape", 12, &e).unwrap();
        let mut dedup = many.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 12);
        assert!(TemplateExpander::new(vec!["no placeholder".into()]).is_err());
    }

    #[test]
    fn client_pass_through_and_fallback() {
        let fixed = ClientExpander::new(Fixed(vec!["x".into(), "y".into()]), Duration::from_millis(10));
        assert_eq!(expand_prompts("base", 3, &fixed).unwrap(), vec!["base", "x", "y"]);
        let slow = ClientExpander::new(Slow, Duration::from_millis(10));
        assert_eq!(
            expand_prompts("base", 3, &slow).unwrap(),
            TemplateExpander::default().expand("base", 3).unwrap()
        );
    }
}
