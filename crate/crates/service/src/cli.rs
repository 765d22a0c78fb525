//! The `sliderspace` command line.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sliderspace_core::composer::{generate, GenerationRequest, TimestepGate};
use sliderspace_core::encoder::{EncoderRegistry, FactorOracleEncoder, FACTOR_ORACLE_ID};
use sliderspace_core::eval::{diversity_protocol, factor_correlation, label_sliders, DiversityProtocolConfig};
use sliderspace_core::manifest::{export_space, now_rfc3339, save_manifest};
use sliderspace_core::workspace::{discover, record_evaluation, Stage, Workspace};
use sliderspace_core::{Error, Result};

use crate::api::{router, AppState, ServiceConfig};
use crate::captioner::HttpCaptionClient;
use sliderspace_core::runtime::{check_backend, load_backend, resolve_config, RuntimeSettings};

#[derive(Debug, Parser)]
#[command(name = "sliderspace", version, about = "Discover, train and explore slider spaces")]
pub struct Cli {
    /// Directory for cached backend weights.
    #[arg(long, env = "CACHE_DIR", global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Compute device.
    #[arg(long, env = "DEVICE", default_value = "cpu", global = true)]
    pub device: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct WorkspaceArgs {
    /// Workspace directory.
    #[arg(long, short = 'w')]
    pub workspace: PathBuf,
    /// Pipeline configuration (JSON); overrides the workspace's saved copy.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample, decompose and train; completed stages are skipped.
    Discover(WorkspaceArgs),
    /// Retrain the sliders of an existing workspace.
    Train(WorkspaceArgs),
    /// Render one image to a PNG file.
    Generate(GenerateArgs),
    /// Diversity protocol and factor correlations; writes evaluation.json.
    Evaluate(EvaluateArgs),
    /// Label sliders through a captioning service.
    Label(LabelArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Copy a verified slider space to another directory.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub ws: WorkspaceArgs,
    /// Prompt; defaults to the slider space's prompt.
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Slider activation `id=scale`; repeatable.
    #[arg(long = "set", value_parser = parse_activation)]
    pub activations: Vec<(String, f64)>,
    /// `full`, `precise` or `start:end` in sampler steps.
    #[arg(long)]
    pub gate: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Request document (JSON); replaces the flags above.
    #[arg(long)]
    pub request: Option<PathBuf>,
    #[arg(long, short = 'o')]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub ws: WorkspaceArgs,
    #[arg(long, default_value_t = 64)]
    pub num_images: usize,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Seeds per scale for the factor correlations.
    #[arg(long, default_value_t = 20)]
    pub correlation_seeds: usize,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[command(flatten)]
    pub ws: WorkspaceArgs,
    #[arg(long, env = "CAPTIONER_URL")]
    pub captioner_url: String,
    #[arg(long, default_value_t = 4)]
    pub pairs: usize,
    #[arg(long, default_value_t = 30)]
    pub timeout_secs: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub ws: WorkspaceArgs,
    #[arg(long, env = "BIND", default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    #[arg(long, env = "WORKERS", default_value_t = 1)]
    pub workers: usize,
    #[arg(long, env = "QUEUE_DEPTH", default_value_t = 8)]
    pub queue_depth: usize,
    #[arg(long, env = "REQUEST_DEADLINE_MS", default_value_t = 30_000)]
    pub deadline_ms: u64,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long, short = 'w')]
    pub workspace: PathBuf,
    #[arg(long, short = 'o')]
    pub out: PathBuf,
}

fn parse_activation(s: &str) -> std::result::Result<(String, f64), String> {
    let (id, scale) = s.split_once('=').ok_or_else(|| format!("expected id=scale, got '{s}'"))?;
    let scale: f64 = scale.parse().map_err(|e| format!("scale in '{s}': {e}"))?;
    if !scale.is_finite() {
        return Err(format!("scale in '{s}' must be finite"));
    }
    Ok((id.to_string(), scale))
}

pub fn parse_gate(s: &str, num_steps: usize) -> Result<TimestepGate> {
    let gate = match s {
        "full" => TimestepGate::full(num_steps),
        "precise" => TimestepGate::precise(num_steps),
        other => {
            let (a, b) = other
                .split_once(':')
                .ok_or_else(|| Error::Validation(format!("gate must be full, precise or start:end, got '{other}'")))?;
            let parse = |v: &str| v.parse::<usize>().map_err(|e| Error::Validation(format!("gate '{other}': {e}")));
            TimestepGate {
                start_step: parse(a)?,
                end_step: parse(b)?,
            }
        }
    };
    gate.validate(num_steps)?;
    Ok(gate)
}

impl Cli {
    fn settings(&self) -> RuntimeSettings {
        let mut s = RuntimeSettings {
            device: self.device.clone(),
            ..RuntimeSettings::default()
        };
        if let Some(dir) = &self.cache_dir {
            s.cache_dir = dir.clone();
        }
        s
    }
}

/// Runs one command; the caller maps errors to exit codes.
pub fn run(cli: Cli) -> Result<()> {
    let settings = cli.settings();
    match cli.command {
        Command::Discover(args) => {
            let ws = run_discover(&args, &settings, false)?;
            print_json(&json!({
                "workspace": ws.root(),
                "stages": ws.completed()?,
                "manifest_hash": ws.load_space()?.manifest.hash(),
            }))
        }
        Command::Train(args) => {
            let ws = run_discover(&args, &settings, true)?;
            let report = ws.training_report()?;
            print_json(&json!({
                "manifest_hash": ws.load_space()?.manifest.hash(),
                "mean_alignment": report.mean_alignment(),
                "mean_off_diagonal": report.mean_off_diagonal(),
            }))
        }
        Command::Generate(args) => {
            let png = render(&args, &settings)?;
            std::fs::write(&args.out, png)?;
            Ok(())
        }
        Command::Evaluate(args) => evaluate(&args, &settings),
        Command::Label(args) => label(&args, &settings),
        Command::Serve(args) => serve(&args, &settings),
        Command::Export(args) => {
            let ws = Workspace::open(&args.workspace)?;
            let space = ws.load_space()?;
            let path = export_space(&space, &args.out)?;
            print_json(&json!({ "manifest": path, "manifest_hash": space.manifest.hash() }))
        }
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run_discover(args: &WorkspaceArgs, settings: &RuntimeSettings, retrain: bool) -> Result<Workspace> {
    let cfg = resolve_config(args.config.as_deref(), Some(&args.workspace))?;
    cfg.validate()?;
    let backend = load_backend(&cfg, settings)?;
    if retrain {
        Workspace::open(&args.workspace)?.invalidate_from(Stage::Trained)?;
    }
    discover(&args.workspace, &cfg, backend.as_ref(), &EncoderRegistry::with_builtins())
}

struct Opened {
    ws: Workspace,
    space: sliderspace_core::manifest::SliderSpace,
    backend: Arc<dyn sliderspace_core::backend::DiffusionBackend>,
    cfg: sliderspace_core::workspace::PipelineConfig,
}

fn open(args: &WorkspaceArgs, settings: &RuntimeSettings) -> Result<Opened> {
    if !args.workspace.exists() {
        return Err(Error::NotFound(format!("workspace {}", args.workspace.display())));
    }
    let ws = Workspace::open(&args.workspace)?;
    let cfg = resolve_config(args.config.as_deref(), Some(&args.workspace))?;
    let space = ws.load_space()?;
    let backend = load_backend(&cfg, settings)?;
    check_backend(&space, backend.as_ref())?;
    Ok(Opened { ws, space, backend, cfg })
}

/// PNG bytes for the request described by `args`.
pub fn render(args: &GenerateArgs, settings: &RuntimeSettings) -> Result<Vec<u8>> {
    let o = open(&args.ws, settings)?;
    let req = match &args.request {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| Error::Validation(format!("request {}: {e}", path.display())))?
        }
        None => {
            let mut req = GenerationRequest::new(args.prompt.clone().unwrap_or_else(|| o.space.manifest.prompt.clone()), args.seed);
            req.num_steps = args.steps;
            for (id, scale) in &args.activations {
                req.activations.insert(id.clone(), *scale);
            }
            if let Some(g) = &args.gate {
                let steps = args.steps.unwrap_or(o.backend.schedule().num_steps());
                req.gate = Some(parse_gate(g, steps)?);
            }
            req
        }
    };
    let image = generate(&req, &o.space.library(), o.backend.as_ref())?;
    image.png()
}

fn evaluate(args: &EvaluateArgs, settings: &RuntimeSettings) -> Result<()> {
    let o = open(&args.ws, settings)?;
    let library = o.space.library();
    let registry = EncoderRegistry::with_builtins();
    let encoder = registry.get(&o.cfg.encoder_id)?;
    let diversity = diversity_protocol(
        &library,
        o.backend.as_ref(),
        encoder.as_ref(),
        &DiversityProtocolConfig {
            num_images: args.num_images,
            k: args.k.min(library.len()),
            ..DiversityProtocolConfig::default()
        },
    )?;
    let oracle = registry.get(FACTOR_ORACLE_ID)?;
    let seeds: Vec<u64> = (0..args.correlation_seeds as u64).map(|s| 10_000 + s).collect();
    let mut correlations = Vec::new();
    for id in library.ids() {
        correlations.push(factor_correlation(
            &library,
            o.backend.as_ref(),
            oracle.as_ref(),
            &FactorOracleEncoder::FACTORS,
            &id,
            &[-1.0, -0.5, 0.0, 0.5, 1.0],
            &seeds,
            None,
            None,
        )?);
    }
    let training = o.ws.training_report().ok();
    let summary = json!({
        "manifest_hash": o.space.manifest.hash(),
        "diversity_ratio": diversity.diversity_ratio(),
        "alignment_drop": diversity.alignment_drop(),
        "orthogonality_gap": training.as_ref().map(|t| t.orthogonality_gap()),
        "diversity": diversity,
        "factor_correlations": correlations,
        "evaluated_at": now_rfc3339(),
    });
    record_evaluation(&o.ws, &summary)?;
    print_json(&json!({
        "diversity_ratio": summary["diversity_ratio"],
        "alignment_drop": summary["alignment_drop"],
        "orthogonality_gap": summary["orthogonality_gap"],
        "evaluation": o.ws.root().join("evaluation.json"),
    }))
}

fn label(args: &LabelArgs, settings: &RuntimeSettings) -> Result<()> {
    let o = open(&args.ws, settings)?;
    let client = HttpCaptionClient::new(&args.captioner_url, Duration::from_secs(args.timeout_secs));
    let labels = label_sliders(&o.space.library(), o.backend.as_ref(), &client, args.pairs, 0)?;
    let mut manifest = o.space.manifest.clone();
    for entry in &mut manifest.sliders {
        if let Some(l) = labels.get(&entry.adapter_id) {
            entry.label = Some(l.label.clone());
            entry.label_source = Some(l.source.clone());
        }
    }
    manifest.provenance.updated_at = now_rfc3339();
    save_manifest(&o.space.root, &manifest)?;
    print_json(&serde_json::to_value(&labels)?)
}

fn serve(args: &ServeArgs, settings: &RuntimeSettings) -> Result<()> {
    let o = open(&args.ws, settings)?;
    let config = ServiceConfig {
        workers: args.workers,
        queue_depth: args.queue_depth,
        deadline: Duration::from_millis(args.deadline_ms),
        ..ServiceConfig::default()
    };
    let state = Arc::new(AppState::new(o.space, o.backend, config));
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::Backend(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(args.bind).await?;
        log::info!("serving slider space {} on {}", state.manifest_hash(), listener.local_addr()?);
        axum::serve(listener, router(state)).await?;
        Ok(())
    })
}
