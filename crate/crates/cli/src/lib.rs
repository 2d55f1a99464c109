//! Command-line front end: configuration resolution and the pipeline
//! subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use exatlas_core::archive::{load_archive, parse_archive, render_archive, validate_lines, Archive};
use exatlas_core::atlas::{export_graph, mine_conflicts_from, route, route_all, RoutingOutcome, DEFAULT_GAP_NEIGHBORS, DEFAULT_RELAX_FACTOR};
use exatlas_core::composer::ComposerConfig;
use exatlas_core::evaluator::{
    calibrate_from_results, lambda_grid, loo_assessments, results_from_assessments, EvalReport, LeaveOneOut, TargetAssessor,
};
use exatlas_core::generators::{
    bridge_loop, reconcile, Audited, BridgeConfig, ChatConfig, ChatProvider, ChatProviderChoice, DEFAULT_BRIDGE_MODEL, DEFAULT_MAX_ROUNDS,
    DEFAULT_RECONCILE_MODEL,
};
use exatlas_core::representation::{
    feature_matrix, EmbeddingProvider, FeatureMatrix, RemoteEmbedConfig, DEFAULT_EMBED_ENDPOINT, DEFAULT_EMBED_MODEL,
};
use exatlas_core::theory_lab::{run_sweep, SweepConfig};

/// Embedding dimension of the stub provider unless configured.
pub const DEFAULT_STUB_DIMENSION: usize = 8;
pub const DEFAULT_OUT_DIR: &str = "exatlas-out";

#[derive(Debug, Parser)]
#[command(name = "exatlas", version, about = "Compose, evaluate and map archived experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true, env = "EXATLAS_CONFIG")]
    pub config: Option<PathBuf>,
    /// Archive in line-delimited JSON.
    #[arg(long, global = true, env = "EXATLAS_ARCHIVE")]
    pub archive: Option<PathBuf>,
    /// Feature-vector file; read when present, otherwise features are embedded.
    #[arg(long, global = true, env = "EXATLAS_VECTORS")]
    pub vectors: Option<PathBuf>,
    /// Composability threshold on the normalized residual.
    #[arg(long, global = true, env = "EXATLAS_LAMBDA")]
    pub lambda: Option<f64>,
    /// Relaxation factor for conflict mining.
    #[arg(long, global = true, env = "EXATLAS_RELAX")]
    pub relax: Option<f64>,
    /// Calibration grid as start:end:step.
    #[arg(long, global = true, env = "EXATLAS_GRID")]
    pub grid: Option<String>,
    #[arg(long, global = true, env = "EXATLAS_SEED")]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, env = "EXATLAS_JOBS")]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "EXATLAS_OUT")]
    pub out: Option<PathBuf>,
    /// Embedding provider.
    #[arg(long, global = true, env = "EXATLAS_PROVIDER")]
    pub provider: Option<ProviderKind>,
    /// Embedding dimension for the stub and remote providers.
    #[arg(long, global = true, env = "EXATLAS_DIM")]
    pub dim: Option<usize>,
    /// Scripted chat transcript; replaces the remote chat service.
    #[arg(long, global = true, env = "EXATLAS_STUB_TRANSCRIPT")]
    pub stub_transcript: Option<PathBuf>,
    /// On-disk embedding cache.
    #[arg(long, global = true, env = "EXATLAS_CACHE_DIR")]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    Stub,
    VectorFile,
    Remote,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate and normalize an archive.
    Ingest {
        /// Input archive; defaults to --archive.
        input: Option<PathBuf>,
        /// Normalized archive; defaults to <out>/archive.jsonl.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write the feature matrix to the vector-file format.
    Embed,
    /// Leave-one-out evaluation and metrics table.
    Evaluate,
    /// Threshold calibration curve and chosen lambda.
    Calibrate,
    /// Route every target and export the atlas graph.
    Atlas,
    /// Propose bridge experiments for a gap target.
    Bridge {
        #[arg(long)]
        target: String,
        #[arg(long)]
        max_rounds: Option<usize>,
    },
    /// Ask for a reconciliation of a conflict target.
    Reconcile {
        #[arg(long)]
        target: String,
    },
    /// Synthetic sweep of the composition error bound.
    TheoryCheck {
        #[arg(long)]
        worlds_per_cell: Option<usize>,
        #[arg(long)]
        targets_per_world: Option<usize>,
    },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub archive: Option<PathBuf>,
    pub vectors: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub relax: Option<f64>,
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub composer: ComposerSection,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub embedding: EmbeddingSection,
    #[serde(default)]
    pub chat: ChatSection,
    #[serde(default)]
    pub bridge: BridgeSection,
    #[serde(default)]
    pub atlas: AtlasSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComposerSection {
    pub radius_factor: Option<f64>,
    pub max_candidates: Option<usize>,
    pub ridge: Option<f64>,
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    pub start: Option<f64>,
    pub end: Option<f64>,
    pub step: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSection {
    pub provider: Option<ProviderKind>,
    pub dimension: Option<usize>,
    /// Text-embedding file for the vector-file provider.
    pub path: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub batch_size: Option<usize>,
    pub max_in_flight: Option<usize>,
    pub max_retries: Option<u32>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatSection {
    pub transcript: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub bridge_model: Option<String>,
    pub reconcile_model: Option<String>,
    pub temperature: Option<f64>,
    pub max_retries: Option<u32>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeSection {
    pub max_rounds: Option<usize>,
    pub literature_size: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtlasSection {
    pub gap_neighbors: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridBounds {
    pub start: f64,
    pub end: f64,
    pub step: f64,
}

impl Default for GridBounds {
    fn default() -> Self {
        Self {
            start: 0.05,
            end: 1.50,
            step: 0.005,
        }
    }
}

pub fn parse_grid(text: &str) -> Result<GridBounds> {
    let parts: Vec<&str> = text.split(':').collect();
    let [a, b, c] = parts.as_slice() else {
        bail!("grid must be start:end:step, got {text:?}");
    };
    Ok(GridBounds {
        start: a.trim().parse().with_context(|| format!("grid start {a:?}"))?,
        end: b.trim().parse().with_context(|| format!("grid end {b:?}"))?,
        step: c.trim().parse().with_context(|| format!("grid step {c:?}"))?,
    })
}

/// Fully resolved settings: flag, then environment, then config file,
/// then built-in default.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub archive: Option<PathBuf>,
    pub vectors: Option<PathBuf>,
    pub embedding: EmbeddingProvider,
    pub transcript: Option<PathBuf>,
    pub chat: ChatSection,
    pub composer: ComposerConfig,
    pub grid: GridBounds,
    pub relax: f64,
    pub out: PathBuf,
    pub jobs: Option<usize>,
    pub seed: u64,
    pub max_rounds: usize,
    pub literature_size: usize,
    pub gap_neighbors: usize,
}

fn relative_to(base: Option<&Path>, p: PathBuf) -> PathBuf {
    match base {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p,
    }
}

pub fn load_file_config(path: &Path) -> Result<FileConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

impl RunConfig {
    pub fn resolve(args: &GlobalArgs) -> Result<Self> {
        let (file, base) = match &args.config {
            Some(path) => (load_file_config(path)?, path.parent().map(Path::to_path_buf)),
            None => (FileConfig::default(), None),
        };
        let base = base.as_deref();
        let from_file = |p: Option<PathBuf>| p.map(|p| relative_to(base, p));

        let seed = args.seed.or(file.seed).unwrap_or(0);
        let defaults = ComposerConfig::default();
        let composer = ComposerConfig {
            radius_factor: file.composer.radius_factor.unwrap_or(defaults.radius_factor),
            max_candidates: file.composer.max_candidates.unwrap_or(defaults.max_candidates),
            ridge: file.composer.ridge.unwrap_or(defaults.ridge),
            lambda: args.lambda.or(file.composer.lambda).unwrap_or(defaults.lambda),
        };
        composer.validate()?;

        let grid = match &args.grid {
            Some(text) => parse_grid(text)?,
            None => {
                let d = GridBounds::default();
                GridBounds {
                    start: file.calibration.start.unwrap_or(d.start),
                    end: file.calibration.end.unwrap_or(d.end),
                    step: file.calibration.step.unwrap_or(d.step),
                }
            }
        };

        let cache_dir = args.cache_dir.clone().or_else(|| from_file(file.cache_dir.clone()));
        let kind = args.provider.or(file.embedding.provider).unwrap_or(ProviderKind::Stub);
        let emb = &file.embedding;
        let embedding = match kind {
            ProviderKind::Stub => EmbeddingProvider::DeterministicStub {
                seed,
                dimension: args.dim.or(emb.dimension).unwrap_or(DEFAULT_STUB_DIMENSION),
            },
            ProviderKind::VectorFile => EmbeddingProvider::VectorFile {
                path: from_file(emb.path.clone()).context("the vector-file provider needs embedding.path in the config")?,
            },
            ProviderKind::Remote => {
                let d = RemoteEmbedConfig::default();
                EmbeddingProvider::RemoteService(RemoteEmbedConfig {
                    endpoint: emb.endpoint.clone().unwrap_or_else(|| DEFAULT_EMBED_ENDPOINT.to_string()),
                    model: emb.model.clone().unwrap_or_else(|| DEFAULT_EMBED_MODEL.to_string()),
                    dimension: args.dim.or(emb.dimension).unwrap_or(d.dimension),
                    batch_size: emb.batch_size.unwrap_or(d.batch_size),
                    max_in_flight: emb.max_in_flight.unwrap_or(d.max_in_flight),
                    max_retries: emb.max_retries.unwrap_or(d.max_retries),
                    backoff_ms: d.backoff_ms,
                    cache_dir,
                })
            }
        };

        let relax = args.relax.or(file.relax).unwrap_or(DEFAULT_RELAX_FACTOR);
        if !(relax.is_finite() && relax >= 1.0) {
            bail!("relax factor must be >= 1, got {relax}");
        }
        if args.jobs == Some(0) || file.jobs == Some(0) {
            bail!("jobs must be at least 1");
        }
        Ok(Self {
            archive: args.archive.clone().or_else(|| from_file(file.archive.clone())),
            vectors: args.vectors.clone().or_else(|| from_file(file.vectors.clone())),
            embedding,
            transcript: args.stub_transcript.clone().or_else(|| from_file(file.chat.transcript.clone())),
            chat: file.chat.clone(),
            composer,
            grid,
            relax,
            out: args
                .out
                .clone()
                .or_else(|| from_file(file.out.clone()))
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR)),
            jobs: args.jobs.or(file.jobs),
            seed,
            max_rounds: file.bridge.max_rounds.unwrap_or(DEFAULT_MAX_ROUNDS),
            literature_size: file.bridge.literature_size.unwrap_or(DEFAULT_GAP_NEIGHBORS),
            gap_neighbors: file.atlas.gap_neighbors.unwrap_or(DEFAULT_GAP_NEIGHBORS),
        })
    }

    fn archive_path(&self) -> Result<&Path> {
        self.archive.as_deref().context("no archive given (use --archive or set it in the config)")
    }

    pub fn load_archive(&self) -> Result<Archive> {
        let path = self.archive_path()?;
        load_archive(path).with_context(|| format!("loading archive {}", path.display()))
    }

    pub fn chat_provider(&self, model: &str) -> Result<Box<dyn ChatProvider>> {
        let choice = match &self.transcript {
            Some(path) => ChatProviderChoice::ScriptedStub { transcript: path.clone() },
            None => {
                let d = ChatConfig::default();
                ChatProviderChoice::RemoteService(ChatConfig {
                    endpoint: self.chat.endpoint.clone().unwrap_or(d.endpoint),
                    model: model.to_string(),
                    temperature: self.chat.temperature.unwrap_or(d.temperature),
                    max_retries: self.chat.max_retries.unwrap_or(d.max_retries),
                    ..d
                })
            }
        };
        Ok(choice.build()?)
    }

    fn ensure_out(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }

    /// Features from `--vectors` when that file exists, else embedded now.
    pub fn features(&self, archive: &Archive) -> Result<FeatureMatrix> {
        if let Some(path) = &self.vectors {
            if path.exists() {
                let fm = FeatureMatrix::load(path).with_context(|| format!("reading vectors {}", path.display()))?;
                if let Some(missing) = archive.ids().find(|id| fm.get(id).is_none()) {
                    bail!("vector file {} has no record for {missing:?}", path.display());
                }
                return Ok(fm);
            }
        }
        let embedder = self.embedding.build()?;
        Ok(feature_matrix(archive, embedder.as_ref())?)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

fn json_line<T: Serialize>(value: &T) -> Result<String> {
    Ok(format!("{}\n", serde_json::to_string(value)?))
}

pub fn cmd_ingest(cfg: &RunConfig, input: Option<&Path>, output: Option<&Path>, stdout: &mut dyn std::io::Write) -> Result<()> {
    let input = match input {
        Some(p) => p,
        None => cfg.archive_path()?,
    };
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let mut problems = Vec::new();
    for item in validate_lines(&text) {
        match item {
            Ok((line, id, v)) => problems.push(format!("line {line}: {id:?}: {}", v.as_str())),
            Err(e) => problems.push(e.to_string()),
        }
    }
    if !problems.is_empty() {
        for p in &problems {
            writeln!(stdout, "invalid: {p}")?;
        }
        bail!("{} problem(s) in {}: {}", problems.len(), input.display(), problems.join("; "));
    }
    let archive = parse_archive(&text)?;
    if archive.is_empty() {
        log::warn!("{} holds no experiments", input.display());
    }
    let output = match output {
        Some(p) => p.to_path_buf(),
        None => cfg.ensure_out()?.join("archive.jsonl"),
    };
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_text(&output, &render_archive(&archive))?;
    writeln!(stdout, "validated {} experiments -> {}", archive.len(), output.display())?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct EmbedSummary<'a> {
    records: usize,
    feature_length: usize,
    enriched: usize,
    raw_fallback: Vec<&'a str>,
}

pub fn cmd_embed(cfg: &RunConfig, stdout: &mut dyn std::io::Write) -> Result<()> {
    let archive = cfg.load_archive()?;
    let embedder = cfg.embedding.build()?;
    let fm = feature_matrix(&archive, embedder.as_ref())?;
    let path = match &cfg.vectors {
        Some(p) => p.clone(),
        None => cfg.ensure_out()?.join("vectors.jsonl"),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fm.save(&path, archive.ids())?;
    let summary = EmbedSummary {
        records: fm.len(),
        feature_length: fm.vectors.values().next().map_or(0, |x| x.len()),
        enriched: archive.len() - fm.raw_fallback.len(),
        raw_fallback: fm.raw_fallback.iter().map(String::as_str).collect(),
    };
    writeln!(stdout, "wrote {} feature vectors -> {}", summary.records, path.display())?;
    writeln!(stdout, "{}", serde_json::to_string(&summary)?)?;
    Ok(())
}

fn loo(cfg: &RunConfig) -> Result<(Archive, Vec<exatlas_core::composer::Assessment>)> {
    let archive = cfg.load_archive()?;
    let features = cfg.features(&archive)?;
    let assessor = LeaveOneOut::new(&archive, &features, cfg.composer)?;
    let assessments = loo_assessments(&archive, &assessor)?;
    Ok((archive, assessments))
}

pub fn cmd_evaluate(cfg: &RunConfig, stdout: &mut dyn std::io::Write) -> Result<()> {
    let (archive, assessments) = loo(cfg)?;
    let lambda = cfg.composer.lambda;
    let results = results_from_assessments(&archive, &assessments, lambda);
    let report = EvalReport::from_results(&results, lambda);
    let out = cfg.ensure_out()?;
    write_text(&out.join("target_results.jsonl"), &jsonl(&results)?)?;
    write_text(&out.join("eval_report.json"), &json_line(&report)?)?;
    write!(stdout, "{}", report.render_table("Composition"))?;
    writeln!(stdout, "{}", serde_json::to_string(&report)?)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct CurveRow {
    lambda: f64,
    coverage: f64,
    mse: Option<f64>,
    scaled_mse: f64,
    objective: f64,
}

pub fn cmd_calibrate(cfg: &RunConfig, stdout: &mut dyn std::io::Write) -> Result<()> {
    let grid = lambda_grid(cfg.grid.start, cfg.grid.end, cfg.grid.step)?;
    let (archive, assessments) = loo(cfg)?;
    let results = results_from_assessments(&archive, &assessments, f64::INFINITY);
    let curve = calibrate_from_results(&results, &grid)?;
    let out = cfg.ensure_out()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in curve.points() {
        w.serialize(CurveRow {
            lambda: p.lambda,
            coverage: p.coverage,
            mse: p.mse,
            scaled_mse: p.scaled_mse,
            objective: p.objective,
        })?;
    }
    let csv_bytes = w.into_inner().map_err(|e| anyhow::anyhow!("csv: {e}"))?;
    fs::write(out.join("calibration.csv"), csv_bytes)?;
    write_text(&out.join("calibration.json"), &json_line(&curve)?)?;
    let best = curve.grid.iter().position(|l| *l == curve.chosen_lambda).unwrap_or(0);
    writeln!(
        stdout,
        "chosen lambda {} (coverage {:.4}, objective {:.4}) over {} grid points",
        curve.chosen_lambda,
        curve.coverage_at[best],
        curve.objective_at[best],
        curve.grid.len()
    )?;
    writeln!(
        stdout,
        "{}",
        serde_json::json!({ "chosen_lambda": curve.chosen_lambda, "grid_points": curve.grid.len() })
    )?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct AtlasSummary {
    lambda: f64,
    relax_factor: f64,
    links: usize,
    conflicts: usize,
    gaps: usize,
    relaxed_conflicts: usize,
    edges: usize,
}

pub fn cmd_atlas(cfg: &RunConfig, stdout: &mut dyn std::io::Write) -> Result<()> {
    let (archive, assessments) = loo(cfg)?;
    let outcomes = route_all(&archive, &assessments, cfg.gap_neighbors)?;
    let mined = mine_conflicts_from(&archive, &assessments, cfg.composer.lambda, cfg.relax)?;
    let graph = export_graph(&archive, &outcomes)?;
    let out = cfg.ensure_out()?;
    graph.write_to(out)?;
    write_text(&out.join("routing.jsonl"), &jsonl(&outcomes)?)?;
    write_text(&out.join("conflicts.jsonl"), &jsonl(&mined)?)?;
    let count = |f: fn(&RoutingOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count();
    let summary = AtlasSummary {
        lambda: cfg.composer.lambda,
        relax_factor: cfg.relax,
        links: count(|o| matches!(o, RoutingOutcome::Link { .. })),
        conflicts: count(RoutingOutcome::is_conflict),
        gaps: count(|o| matches!(o, RoutingOutcome::Gap { .. })),
        relaxed_conflicts: mined.len(),
        edges: graph.edges.len(),
    };
    writeln!(
        stdout,
        "links {}, conflicts {}, gaps {}; {} conflicts at relax factor {}",
        summary.links, summary.conflicts, summary.gaps, summary.relaxed_conflicts, summary.relax_factor
    )?;
    for c in &mined {
        if let RoutingOutcome::Conflict { target_id, composed_effect, observed_effect, relaxed, .. } = c {
            writeln!(
                stdout,
                "  conflict {target_id}: composed {composed_effect:+.4}, observed {observed_effect:+.4}{}",
                if *relaxed { " (relaxed)" } else { "" }
            )?;
        }
    }
    writeln!(stdout, "{}", serde_json::to_string(&summary)?)?;
    Ok(())
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub fn cmd_bridge(cfg: &RunConfig, target: &str, max_rounds: Option<usize>, stdout: &mut dyn std::io::Write) -> Result<()> {
    let archive = cfg.load_archive()?;
    let features = cfg.features(&archive)?;
    let embedder = cfg.embedding.build()?;
    let out = cfg.ensure_out()?;
    let model = cfg.chat.bridge_model.clone().unwrap_or_else(|| DEFAULT_BRIDGE_MODEL.to_string());
    let provider = Audited::new(cfg.chat_provider(&model)?, out.join("audit"))?;
    let bcfg = BridgeConfig {
        composer: cfg.composer,
        max_rounds: max_rounds.unwrap_or(cfg.max_rounds),
        literature_size: cfg.literature_size,
        temperature: cfg.chat.temperature.unwrap_or(0.0),
    };
    let result = bridge_loop(target, &archive, &features, embedder.as_ref(), &provider, &bcfg)?;
    let path = out.join(format!("bridge-{}.json", file_stem(target)));
    write_text(&path, &json_line(&result)?)?;
    writeln!(
        stdout,
        "{target}: {} after {} round(s), {} proposal(s); isolated ratio {:?}",
        if result.final_composable { "composable" } else { "still a gap" },
        result.rounds_run,
        result.proposals.len(),
        result.isolated_ratio_trace
    )?;
    writeln!(stdout, "{}", serde_json::to_string(&result)?)?;
    Ok(())
}

pub fn cmd_reconcile(cfg: &RunConfig, target: &str, stdout: &mut dyn std::io::Write) -> Result<()> {
    let archive = cfg.load_archive()?;
    let features = cfg.features(&archive)?;
    let exp = archive.get(target).with_context(|| format!("unknown experiment {target:?}"))?;
    let assessor = LeaveOneOut::new(&archive, &features, cfg.composer)?;
    let assessment = assessor.assess_target(exp)?;
    let relaxed_lambda = cfg.composer.lambda * cfg.relax;
    let outcome = route(&assessment.regate(relaxed_lambda), exp.effect_size, cfg.gap_neighbors);
    let outcome = match outcome {
        RoutingOutcome::Conflict { target_id, source_weights, composed_effect, observed_effect, .. } => RoutingOutcome::Conflict {
            target_id,
            source_weights,
            composed_effect,
            observed_effect,
            relaxed: assessment.composition.normalized_residual > cfg.composer.lambda,
        },
        other => bail!("{target:?} is a {} target, not a conflict", other.status().as_str()),
    };
    let sources: Vec<_> = outcome
        .source_weights()
        .into_iter()
        .flat_map(|w| w.keys())
        .filter_map(|id| archive.get(id).cloned())
        .collect();
    let out = cfg.ensure_out()?;
    let model = cfg.chat.reconcile_model.clone().unwrap_or_else(|| DEFAULT_RECONCILE_MODEL.to_string());
    let provider = Audited::new(cfg.chat_provider(&model)?, out.join("audit"))?;
    let rec = reconcile(exp, &outcome, &sources, &provider)?;
    write_text(&out.join(format!("reconcile-{}.json", file_stem(target))), &json_line(&rec)?)?;
    writeln!(
        stdout,
        "{target}: {}",
        if rec.needed { "reconciliation proposed" } else { "no contradiction reported; reconciliation not needed" }
    )?;
    writeln!(stdout, "{}", serde_json::to_string(&rec)?)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct TheoryRow {
    seed: u64,
    #[serde(rename = "H")]
    h: f64,
    delta: f64,
    d: usize,
    realized_error: f64,
    bound: f64,
    slack: f64,
}

pub fn cmd_theory_check(
    cfg: &RunConfig,
    worlds_per_cell: Option<usize>,
    targets_per_world: Option<usize>,
    stdout: &mut dyn std::io::Write,
) -> Result<()> {
    let d = SweepConfig::default();
    let sweep = SweepConfig {
        seed: cfg.seed,
        worlds_per_cell: worlds_per_cell.unwrap_or(d.worlds_per_cell),
        targets_per_world: targets_per_world.unwrap_or(d.targets_per_world),
        ..d
    };
    let rows = run_sweep(&sweep)?;
    let out = cfg.ensure_out()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(TheoryRow {
            seed: r.seed,
            h: r.h,
            delta: r.delta,
            d: r.d,
            realized_error: r.realized_error,
            bound: r.bound,
            slack: r.slack,
        })?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("csv: {e}"))?;
    fs::write(out.join("theory_check.csv"), bytes)?;
    let violations = rows.iter().filter(|r| !r.holds).count();
    let floor_violations = rows.iter().filter(|r| !r.residual_within_floor).count();
    writeln!(
        stdout,
        "{} triples, {violations} bound violations, {floor_violations} residual-floor violations",
        rows.len()
    )?;
    writeln!(
        stdout,
        "{}",
        serde_json::json!({ "triples": rows.len(), "violations": violations, "floor_violations": floor_violations })
    )?;
    if violations + floor_violations > 0 {
        bail!("bound check failed");
    }
    Ok(())
}

pub fn run(cli: &Cli, stdout: &mut dyn std::io::Write) -> Result<()> {
    let cfg = RunConfig::resolve(&cli.global)?;
    if let Some(jobs) = cfg.jobs {
        // A pool may already exist when called more than once in a process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    match &cli.command {
        Command::Ingest { input, output } => cmd_ingest(&cfg, input.as_deref(), output.as_deref(), stdout),
        Command::Embed => cmd_embed(&cfg, stdout),
        Command::Evaluate => cmd_evaluate(&cfg, stdout),
        Command::Calibrate => cmd_calibrate(&cfg, stdout),
        Command::Atlas => cmd_atlas(&cfg, stdout),
        Command::Bridge { target, max_rounds } => cmd_bridge(&cfg, target, *max_rounds, stdout),
        Command::Reconcile { target } => cmd_reconcile(&cfg, target, stdout),
        Command::TheoryCheck { worlds_per_cell, targets_per_world } => {
            cmd_theory_check(&cfg, *worlds_per_cell, *targets_per_world, stdout)
        }
    }
}
