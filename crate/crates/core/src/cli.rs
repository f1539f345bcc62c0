//! Command implementations behind the `nsmc` binary: train, infer, benchmark
//! and inspect. Results are comma-separated tables plus a JSON run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::graph::Assignment;
use crate::models::{build_example, load_observations, Example, ModelError};
use crate::smc::{
    dc_smc, importance_sample, run_smc, Collapsed, LearnedProposal, ModelTarget, ParticleSystem, PriorProposal,
    Proposal, ResamplingKind, ResamplingScheme, ResamplingTrigger, SmcError,
};
use crate::train::{train_all, TrainArtifact, TrainConfig, TrainError, TraceRow};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "NSMC_OUT_DIR";

pub const DEFAULT_K_GRID: [usize; 7] = [5, 10, 50, 100, 500, 1000, 5000];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Smc(#[from] SmcError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("writing results: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// 0 success, 1 usage, 2 runtime failure, 3 degenerate weights.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_)
            | CliError::Model(ModelError::UnknownModel(_))
            | CliError::Model(ModelError::UnknownParameter { .. })
            | CliError::Model(ModelError::BadParameter { .. }) => 1,
            CliError::Smc(SmcError::DegenerateWeights { .. }) => 3,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalKind {
    Prior,
    Learned,
}

impl std::str::FromStr for ProposalKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "prior" => Ok(ProposalKind::Prior),
            "learned" => Ok(ProposalKind::Learned),
            other => Err(format!("unknown proposal '{other}' (expected prior or learned)")),
        }
    }
}

impl ProposalKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProposalKind::Prior => "prior",
            ProposalKind::Learned => "learned",
        }
    }
}

/// Inference engine; `Auto` picks divide-and-conquer SMC for plate
/// hierarchies with learned proposals, SMC for multi-step proposals and
/// importance sampling otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Auto,
    Is,
    Smc,
    Dc,
}

/// Options parsed from the command line.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: String,
    pub particles: usize,
    pub proposal: ProposalKind,
    pub seed: u64,
    pub artifact: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub sets: Vec<(String, String)>,
}

impl RunConfig {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            particles: 1000,
            proposal: ProposalKind::Prior,
            seed: 0,
            artifact: None,
            data: None,
            out: default_out_dir(),
            sets: Vec::new(),
        }
    }
}

pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

/// Parses `key=value`.
pub fn parse_set(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| format!("expected key=value, got '{s}'"))
}

/// Inference and benchmark settings taken from `--set`.
#[derive(Debug, Clone, Serialize)]
pub struct InferSettings {
    pub engine: Engine,
    pub scheme: ResamplingScheme,
    pub data_seed: u64,
    pub grid: Vec<usize>,
    pub seeds: u64,
    pub ancestry_particles: usize,
}

impl Default for InferSettings {
    fn default() -> Self {
        Self {
            engine: Engine::Auto,
            scheme: ResamplingScheme::default(),
            data_seed: 0,
            grid: DEFAULT_K_GRID.to_vec(),
            seeds: 10,
            ancestry_particles: 100,
        }
    }
}

struct Settings {
    train: TrainConfig,
    infer: InferSettings,
    model: BTreeMap<String, String>,
}

fn split_sets(sets: &[(String, String)], seed: u64) -> Result<Settings, CliError> {
    let mut train = TrainConfig { seed, ..TrainConfig::default() };
    let mut infer = InferSettings::default();
    let mut model = BTreeMap::new();
    let usage = |k: &str, e: String| CliError::Usage(format!("--set {k}: {e}"));
    for (k, v) in sets {
        if train.set(k, v).map_err(|e| usage(k, e))? {
            continue;
        }
        match k.as_str() {
            "engine" => {
                infer.engine = match v.as_str() {
                    "auto" => Engine::Auto,
                    "is" => Engine::Is,
                    "smc" => Engine::Smc,
                    "dc" => Engine::Dc,
                    _ => return Err(usage(k, "expected auto, is, smc or dc".into())),
                }
            }
            "resampling" => {
                infer.scheme.kind = match v.as_str() {
                    "systematic" => ResamplingKind::Systematic,
                    "multinomial" => ResamplingKind::Multinomial,
                    _ => return Err(usage(k, "expected systematic or multinomial".into())),
                }
            }
            "trigger" => {
                infer.scheme.trigger = if v == "always" {
                    ResamplingTrigger::Always
                } else {
                    let f = v.parse::<f64>().map_err(|e| usage(k, e.to_string()))?;
                    ResamplingTrigger::EssBelow(f)
                };
                infer.scheme.validate().map_err(|e| usage(k, e.to_string()))?;
            }
            "data_seed" => infer.data_seed = v.parse().map_err(|e: std::num::ParseIntError| usage(k, e.to_string()))?,
            "seeds" => infer.seeds = v.parse().map_err(|e: std::num::ParseIntError| usage(k, e.to_string()))?,
            "ancestry_particles" => {
                infer.ancestry_particles =
                    v.parse().map_err(|e: std::num::ParseIntError| usage(k, e.to_string()))?
            }
            "grid" => {
                infer.grid = v
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| usage(k, e.to_string()))?
            }
            _ => {
                model.insert(k.clone(), v.clone());
            }
        }
    }
    Ok(Settings { train, infer, model })
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Paths written by [`cmd_train`].
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub artifact: PathBuf,
    pub trace: PathBuf,
}

/// Trains every network of the model and writes the artifact and trace.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutputs, CliError> {
    let s = split_sets(&cfg.sets, cfg.seed)?;
    let ex = build_example(&cfg.model, &s.model)?;
    let out = train_all(&ex.model, &ex.inverse, &ex.plan, std::slice::from_ref(&s.train), ex.params.clone())?;
    for (key, rows) in group_trace(&out.trace) {
        for (epoch, first, last, steps) in rows {
            eprintln!("train {key} epoch {epoch}: validation {first:.6} -> {last:.6} after {steps} steps");
        }
    }
    let artifact = cfg.artifact.clone().unwrap_or_else(|| cfg.out.join("artifact.json"));
    let trace = cfg.out.join("trace.csv");
    write_file(&artifact, &out.artifact.to_json())?;
    write_csv(&trace, &out.trace)?;
    Ok(TrainOutputs { artifact, trace })
}

type EpochSummary = (usize, f64, f64, usize);

fn group_trace(trace: &[TraceRow]) -> Vec<(String, Vec<EpochSummary>)> {
    let mut out: Vec<(String, Vec<EpochSummary>)> = Vec::new();
    for r in trace {
        if out.last().map(|(k, _)| k != &r.network).unwrap_or(true) {
            out.push((r.network.clone(), Vec::new()));
        }
        let rows = &mut out.last_mut().expect("pushed").1;
        match rows.last_mut() {
            Some(e) if e.0 == r.epoch => {
                e.2 = r.validation_nll;
                e.3 = r.step;
            }
            _ => rows.push((r.epoch, r.validation_nll, r.validation_nll, 0)),
        }
    }
    out
}

pub fn load_artifact(path: &Path) -> Result<TrainArtifact, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(TrainArtifact::from_json(&text)?)
}

/// The model, artifact and observations an inference run works on.
pub struct Problem {
    pub example: Example,
    pub artifact: Option<TrainArtifact>,
    pub observed: Assignment,
}

fn prepare(cfg: &RunConfig, s: &Settings, need_artifact: bool) -> Result<Problem, CliError> {
    let artifact = match &cfg.artifact {
        Some(p) => Some(load_artifact(p)?),
        None if need_artifact => {
            return Err(CliError::Usage("the learned proposal requires --artifact".into()));
        }
        None => None,
    };
    let mut params = s.model.clone();
    if let Some(a) = &artifact {
        if a.manifest.model != cfg.model {
            return Err(CliError::Usage(format!(
                "artifact was trained for model {}, not {}",
                a.manifest.model, cfg.model
            )));
        }
        for (k, v) in &a.manifest.model_params {
            params.entry(k.clone()).or_insert_with(|| v.clone());
        }
    }
    let example = build_example(&cfg.model, &params)?;
    if let Some(a) = &artifact {
        a.check_compatible(&example.model, &example.inverse)?;
    }
    let text = match &cfg.data {
        Some(p) => Some(fs::read_to_string(p).map_err(io_err(p))?),
        None => None,
    };
    let observed = load_observations(&example, text.as_deref(), s.infer.data_seed)?;
    Ok(Problem { example, artifact, observed })
}

fn resolve_engine(ex: &Example, kind: ProposalKind, engine: Engine) -> Engine {
    match engine {
        Engine::Auto => {
            let plated = ex.inverse.factors.iter().any(|f| f.share_group.is_some());
            let hierarchical = plated && ex.inverse.factors.iter().any(|f| f.share_group.is_none());
            if kind == ProposalKind::Learned && hierarchical {
                Engine::Dc
            } else if ex.model.name() == "fhmm" {
                Engine::Smc
            } else {
                Engine::Is
            }
        }
        e => e,
    }
}

fn prior_for_smc(ex: &Example) -> PriorProposal<'_> {
    let blocks: Vec<Vec<usize>> = ex.inverse.factors.iter().map(|f| f.targets.clone()).collect();
    PriorProposal::with_blocks(&ex.model, blocks).unwrap_or_else(|_| PriorProposal::per_node(&ex.model))
}

/// Runs one inference with the chosen proposal and engine.
pub fn run_inference(
    p: &Problem,
    kind: ProposalKind,
    engine: Engine,
    scheme: &ResamplingScheme,
    k: usize,
    seed: u64,
) -> Result<ParticleSystem, CliError> {
    let ex = &p.example;
    let engine = resolve_engine(ex, kind, engine);
    let run = |prop: &dyn Proposal| -> Result<ParticleSystem, CliError> {
        let target = ModelTarget::for_proposal(&ex.model, &p.observed, prop)?;
        Ok(run_smc(&target, prop, k, scheme, seed)?)
    };
    match (kind, engine) {
        (ProposalKind::Prior, Engine::Dc) => {
            Err(CliError::Usage("divide-and-conquer SMC needs the learned proposal".into()))
        }
        (ProposalKind::Prior, Engine::Is) => {
            let prop = PriorProposal::single_block(&ex.model);
            let target = ModelTarget::for_proposal(&ex.model, &p.observed, &prop)?;
            Ok(importance_sample(&target, &prop, k, seed)?)
        }
        (ProposalKind::Prior, _) => run(&prior_for_smc(ex)),
        (ProposalKind::Learned, e) => {
            let art = p.artifact.as_ref().ok_or_else(|| CliError::Usage("the learned proposal requires --artifact".into()))?;
            let prop = LearnedProposal::from_artifact(&ex.model, &ex.inverse, art)?;
            match e {
                Engine::Dc => Ok(dc_smc(&ex.model, &p.observed, &prop, k, scheme.kind, seed)?),
                Engine::Is => {
                    let c = Collapsed(prop);
                    let target = ModelTarget::for_proposal(&ex.model, &p.observed, &c)?;
                    Ok(importance_sample(&target, &c, k, seed)?)
                }
                _ => run(&prop),
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct PosteriorRow {
    seed: u64,
    model: String,
    proposal: &'static str,
    particles: usize,
    variable: String,
    mean: f64,
    sd: f64,
}

#[derive(Debug, Clone, Serialize)]
struct DiagnosticRow {
    seed: u64,
    step: usize,
    ess: f64,
    unique_ancestries: usize,
    log_evidence: f64,
    resampled: bool,
}

#[derive(Debug, Clone, Serialize)]
struct SummaryRow {
    seed: u64,
    model: String,
    proposal: &'static str,
    engine: Engine,
    particles: usize,
    log_evidence: f64,
    final_ess: f64,
}

#[derive(Debug, Clone, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    model: &'a str,
    model_params: &'a BTreeMap<String, String>,
    proposal: &'a str,
    particles: usize,
    seed: u64,
    artifact: Option<String>,
    data: Option<String>,
    settings: &'a InferSettings,
    wall_seconds: f64,
}

/// Paths written by [`cmd_infer`].
#[derive(Debug, Clone)]
pub struct InferOutputs {
    pub posterior: PathBuf,
    pub diagnostics: PathBuf,
    pub summary: PathBuf,
    pub manifest: PathBuf,
    pub log_evidence: f64,
}

/// Runs inference and writes posterior summaries, diagnostics and a manifest.
pub fn cmd_infer(cfg: &RunConfig) -> Result<InferOutputs, CliError> {
    if cfg.particles == 0 {
        return Err(CliError::Usage("--particles must be at least 1".into()));
    }
    let s = split_sets(&cfg.sets, cfg.seed)?;
    let start = Instant::now();
    let p = prepare(cfg, &s, cfg.proposal == ProposalKind::Learned)?;
    let ex = &p.example;
    let engine = resolve_engine(ex, cfg.proposal, s.infer.engine);
    let ps = run_inference(&p, cfg.proposal, engine, &s.infer.scheme, cfg.particles, cfg.seed)?;
    let latents = ex.model.latents();
    let posterior: Vec<PosteriorRow> = latents
        .iter()
        .zip(ps.posterior_summary(&latents))
        .map(|(&v, (mean, sd))| PosteriorRow {
            seed: cfg.seed,
            model: cfg.model.clone(),
            proposal: cfg.proposal.as_str(),
            particles: cfg.particles,
            variable: ex.model.id(v).to_string(),
            mean,
            sd,
        })
        .collect();
    let diagnostics: Vec<DiagnosticRow> = ps
        .diagnostics
        .iter()
        .map(|d| DiagnosticRow {
            seed: cfg.seed,
            step: d.step,
            ess: d.ess,
            unique_ancestries: d.unique_ancestries,
            log_evidence: d.log_evidence,
            resampled: d.resampled,
        })
        .collect();
    let log_evidence = ps.log_marginal_likelihood();
    let summary = [SummaryRow {
        seed: cfg.seed,
        model: cfg.model.clone(),
        proposal: cfg.proposal.as_str(),
        engine,
        particles: cfg.particles,
        log_evidence,
        final_ess: ps.ess(),
    }];
    let out = InferOutputs {
        posterior: cfg.out.join("posterior.csv"),
        diagnostics: cfg.out.join("diagnostics.csv"),
        summary: cfg.out.join("summary.csv"),
        manifest: cfg.out.join("run.json"),
        log_evidence,
    };
    write_csv(&out.posterior, &posterior)?;
    write_csv(&out.diagnostics, &diagnostics)?;
    write_csv(&out.summary, &summary)?;
    let manifest = RunManifest {
        command: "infer",
        model: &cfg.model,
        model_params: &ex.params,
        proposal: cfg.proposal.as_str(),
        particles: cfg.particles,
        seed: cfg.seed,
        artifact: cfg.artifact.as_ref().map(|p| p.display().to_string()),
        data: cfg.data.as_ref().map(|p| p.display().to_string()),
        settings: &s.infer,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    write_file(&out.manifest, &serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    Ok(out)
}

/// One benchmark cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkRow {
    pub model: String,
    pub particles: usize,
    pub seed: u64,
    pub proposal: &'static str,
    pub log_evidence: f64,
    pub mean_ess: f64,
    pub final_unique_ancestries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkSummary {
    pub particles: usize,
    pub proposal: &'static str,
    pub mean_log_evidence: f64,
    pub sd_log_evidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AncestryRow {
    pub proposal: &'static str,
    pub seed: u64,
    pub step: usize,
    pub unique_ancestries: usize,
}

/// Paths written by [`cmd_benchmark`].
#[derive(Debug, Clone)]
pub struct BenchmarkOutputs {
    pub rows: Vec<BenchmarkRow>,
    pub cells: PathBuf,
    pub summary: PathBuf,
    pub ancestry: Option<PathBuf>,
}

/// Mean and sample standard deviation.
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

/// Sweeps particle counts and seeds for both proposals.
pub fn cmd_benchmark(cfg: &RunConfig) -> Result<BenchmarkOutputs, CliError> {
    let s = split_sets(&cfg.sets, cfg.seed)?;
    let p = prepare(cfg, &s, true)?;
    let mut grid = s.infer.grid.clone();
    grid.sort_unstable();
    grid.dedup();
    if grid.is_empty() || grid.contains(&0) {
        return Err(CliError::Usage("particle grid must hold positive counts".into()));
    }
    let mut rows = Vec::new();
    for &k in &grid {
        for seed in cfg.seed..cfg.seed + s.infer.seeds {
            for kind in [ProposalKind::Learned, ProposalKind::Prior] {
                let ps = run_inference(&p, kind, s.infer.engine, &s.infer.scheme, k, seed)?;
                let ess: Vec<f64> = ps.diagnostics.iter().map(|d| d.ess).collect();
                rows.push(BenchmarkRow {
                    model: cfg.model.clone(),
                    particles: k,
                    seed,
                    proposal: kind.as_str(),
                    log_evidence: ps.log_marginal_likelihood(),
                    mean_ess: mean_sd(&ess).0,
                    final_unique_ancestries: ps.unique_ancestries(ps.steps()),
                });
            }
        }
    }
    let mut summary = Vec::new();
    for &k in &grid {
        for kind in [ProposalKind::Learned, ProposalKind::Prior] {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.particles == k && r.proposal == kind.as_str())
                .map(|r| r.log_evidence)
                .collect();
            let (m, sd) = mean_sd(&v);
            summary.push(BenchmarkSummary {
                particles: k,
                proposal: kind.as_str(),
                mean_log_evidence: m,
                sd_log_evidence: sd,
            });
        }
    }
    let cells = cfg.out.join("benchmark.csv");
    let summary_path = cfg.out.join("benchmark_summary.csv");
    write_csv(&cells, &rows)?;
    write_csv(&summary_path, &summary)?;
    let ancestry = if p.example.name() == "fhmm" {
        let k = s.infer.ancestry_particles;
        let mut trace = Vec::new();
        for kind in [ProposalKind::Learned, ProposalKind::Prior] {
            for seed in cfg.seed..cfg.seed + s.infer.seeds {
                let ps = run_inference(&p, kind, Engine::Smc, &s.infer.scheme, k, seed)?;
                for t in 1..=ps.steps() {
                    trace.push(AncestryRow { proposal: kind.as_str(), seed, step: t, unique_ancestries: ps.unique_ancestries(t) });
                }
            }
        }
        let path = cfg.out.join("ancestry.csv");
        write_csv(&path, &trace)?;
        Some(path)
    } else {
        None
    };
    Ok(BenchmarkOutputs { rows, cells, summary: summary_path, ancestry })
}

/// Text report of the model, its inverse factorization and network shapes.
pub fn cmd_inspect(cfg: &RunConfig) -> Result<String, CliError> {
    let s = split_sets(&cfg.sets, cfg.seed)?;
    let ex = build_example(&cfg.model, &s.model)?;
    Ok(ex.report())
}
