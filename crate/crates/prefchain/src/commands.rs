//! Command implementations shared by the binary and the tests.
//!
//! Every command reads a resolved [`RunConfig`], writes its files and a
//! manifest into the output directory, and is reproducible from the
//! configuration and seed when mock providers are used.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Duration;

use prefchain_core::calibration::{IdentityLlm, LlmProvider};
use prefchain_core::embedding::{EmbeddingError, EmbeddingProvider, HashEmbedder};
use prefchain_core::graph::{BehaviorGraph, GraphBuildConfig, NodeKind};
use prefchain_core::metrics::{evaluate_populations, EvaluationReport, MetricsError};
use prefchain_core::mobility::{
    flow_kld, generate_schedule, grid_city, run_day, simulate_agent, spawn_agents, visit_kld, AgentDay, CityModel,
    DayPlan, LlmSchedule, MobilityError, ScheduleProvider, SimulationContext, TemplateSchedule, TrafficTally, TripLog,
};
use prefchain_core::pipeline::{
    sample_record, ChoicePredictor, MarginalPredictor, PipelineError, PreferenceChain, UniformPredictor,
};
use prefchain_core::retrieval::{QueryAgent, RetrievalError};
use prefchain_core::schema::{Output, TripRecord};
use prefchain_core::synth::{
    generate_profiles, generate_synthetic, split_reference_validation, SynthError, SyntheticSpec,
};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::formats::{
    read_city, read_tally, report_json, write_city, write_edge_tally, write_manifest, write_poi_tally,
    write_report_csv, write_sweep_csv, FormatError, Manifest, SweepRow, Versions,
};
use crate::ingest::{read_csv, read_reference, write_csv, IngestError};
use crate::providers::{CachedEmbedder, HttpClient, HttpEmbedder, HttpLlm};
use crate::snapshot::{read_snapshot, write_snapshot, SnapshotError};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_PROVIDER: i32 = 4;

pub const GRAPH_FILE: &str = "graph.jsonl";

/// Failures grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("provider error: {0}")]
    Provider(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Provider(_) => EXIT_PROVIDER,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

/// Unreadable inputs named by the configuration are configuration errors.
impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Io { .. } => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Io { .. } => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<SnapshotError> for CliError {
    fn from(e: SnapshotError) -> Self {
        match e {
            SnapshotError::Io(_) => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Embedding(EmbeddingError::Provider(m))
            | PipelineError::Retrieval(RetrievalError::Embedding(EmbeddingError::Provider(m))) => CliError::Provider(m),
            PipelineError::InvalidConfig(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<MobilityError> for CliError {
    fn from(e: MobilityError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::NotEnoughRecords { .. } => CliError::Data(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn write_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Config(format!("cannot write {}: {e}", path.display()))
}

/// Command-line flags that override the configuration file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub mock_llm: bool,
    pub mock_embed: bool,
    pub out: Option<PathBuf>,
}

/// File, then environment, then flags. Validated before returning.
pub fn resolve_config(o: &Overrides, env: impl Fn(&str) -> Option<String>) -> Result<RunConfig, CliError> {
    let mut config = match &o.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    config.apply_env(env);
    if let Some(seed) = o.seed {
        config.seed = seed;
    }
    if o.mock_llm {
        config.llm.mock = true;
    }
    if o.mock_embed {
        config.embedding.mock = true;
    }
    if let Some(out) = &o.out {
        config.paths.out = out.clone();
    }
    config.validate()?;
    Ok(config)
}

pub struct Providers {
    pub embedder: Box<dyn EmbeddingProvider>,
    pub llm: Box<dyn LlmProvider>,
}

impl Providers {
    pub fn mock(dimension: usize) -> Result<Self, CliError> {
        Ok(Self {
            embedder: Box::new(HashEmbedder::new(dimension).map_err(|e| CliError::Config(e.to_string()))?),
            llm: Box::new(IdentityLlm),
        })
    }
}

/// Mocks, or remote providers checked with one probe request each. An
/// unreachable embedding service degrades to the hash embedder only when
/// `fallback_to_hash` is set.
pub fn build_providers(config: &RunConfig) -> Result<Providers, CliError> {
    let mut providers = Providers::mock(config.embedding.dimension)?;
    if !config.embedding.mock {
        let e = &config.embedding;
        let url = e.url.clone().unwrap_or_default();
        let remote = CachedEmbedder::new(HttpEmbedder::new(
            HttpClient::new(url, Duration::from_secs(e.timeout_secs)),
            e.model.clone(),
        ));
        match remote.embed("probe") {
            Ok(_) => providers.embedder = Box::new(remote),
            Err(_) if e.fallback_to_hash => {}
            Err(err) => return Err(CliError::Provider(err.to_string())),
        }
    }
    if !config.llm.mock {
        let l = &config.llm;
        let remote =
            HttpLlm::new(HttpClient::new(l.url.clone().unwrap_or_default(), Duration::from_secs(l.timeout_secs)));
        remote.complete("Reply with OK.", &config.generation).map_err(|e| CliError::Provider(e.to_string()))?;
        providers.llm = Box::new(remote);
    }
    Ok(providers)
}

fn out_dir(config: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = config.paths.out.clone();
    std::fs::create_dir_all(&dir).map_err(write_err(&dir))?;
    Ok(dir)
}

fn finish(config: &RunConfig, providers: Option<&Providers>, command: &str, outputs: &[&str]) -> Result<(), CliError> {
    let manifest = Manifest {
        command: command.into(),
        seed: config.seed,
        config_hash: config.hash(),
        embedding_provider: providers.map_or("none", |p| p.embedder.id()).into(),
        llm_provider: providers.map_or("none", |p| p.llm.id()).into(),
        versions: Versions::default(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    write_manifest(&config.paths.out, &manifest)?;
    Ok(())
}

fn thread_pool(config: &RunConfig) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(config.llm.max_in_flight)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn reference_records(config: &RunConfig) -> Result<Vec<TripRecord>, CliError> {
    let path = config.paths.reference.as_ref().ok_or_else(|| CliError::Config("paths.reference is required".into()))?;
    Ok(read_reference(path)?)
}

fn validation_records(config: &RunConfig) -> Result<Vec<TripRecord>, CliError> {
    let path =
        config.paths.validation.as_ref().ok_or_else(|| CliError::Config("paths.validation is required".into()))?;
    let records = read_csv(path)?;
    if records.is_empty() {
        return Err(CliError::Data("validation data has no records".into()));
    }
    Ok(records)
}

fn build_graph(records: &[TripRecord]) -> Result<BehaviorGraph, CliError> {
    BehaviorGraph::build_from_records(records, &GraphBuildConfig::default()).map_err(|e| CliError::Data(e.to_string()))
}

/// The snapshot named in the config, or a graph built from the reference.
pub fn load_graph(config: &RunConfig) -> Result<BehaviorGraph, CliError> {
    match &config.paths.graph {
        Some(path) => {
            let file =
                File::open(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            Ok(read_snapshot(BufReader::new(file))?)
        }
        None => build_graph(&reference_records(config)?),
    }
}

fn chain<'a>(
    graph: &'a BehaviorGraph,
    providers: &'a Providers,
    config: &RunConfig,
) -> Result<PreferenceChain<'a>, CliError> {
    Ok(PreferenceChain::new(
        graph,
        providers.embedder.as_ref(),
        providers.llm.as_ref(),
        config.generation.clone(),
        config.chain.clone(),
    )?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub edges: usize,
    pub persons: usize,
    pub desires: usize,
    pub intentions: usize,
}

impl GraphStats {
    pub fn of(g: &BehaviorGraph) -> Self {
        Self {
            nodes: g.node_count(),
            edges: g.edge_count(),
            persons: g.count_kind(NodeKind::Person),
            desires: g.count_kind(NodeKind::Desire),
            intentions: g.count_kind(NodeKind::Intention),
        }
    }
}

/// Builds the reference graph and writes its snapshot.
pub fn cmd_build_graph(config: &RunConfig) -> Result<GraphStats, CliError> {
    let graph = build_graph(&reference_records(config)?)?;
    let dir = out_dir(config)?;
    let path = dir.join(GRAPH_FILE);
    let file = File::create(&path).map_err(write_err(&path))?;
    write_snapshot(&graph, std::io::BufWriter::new(file))?;
    finish(config, None, "build-graph", &[GRAPH_FILE])?;
    Ok(GraphStats::of(&graph))
}

/// Prior and posterior for one query given as JSON
/// `{"profile": {...}, "desire": {"trip_purpose", "start_time"}, "context"}`.
pub fn cmd_predict(config: &RunConfig, providers: &Providers, query_json: &str) -> Result<serde_json::Value, CliError> {
    let query: QueryAgent =
        serde_json::from_str(query_json).map_err(|e| CliError::Data(format!("invalid query: {e}")))?;
    let graph = load_graph(config)?;
    let prediction = chain(&graph, providers, config)?.predict(&query, &Output::ALL)?;
    let outputs: Vec<_> = prediction
        .outputs
        .iter()
        .map(|o| {
            json!({
                "output": o.output.name(),
                "prior": o.prior,
                "posterior": o.calibration.posterior,
                "source": o.calibration.source,
            })
        })
        .collect();
    let persons: Vec<_> = prediction.persons.iter().map(|(id, w)| json!({ "node": id, "similarity": w })).collect();
    let result = json!({ "persons": persons, "outputs": outputs });
    let dir = out_dir(config)?;
    let path = dir.join("prediction.json");
    std::fs::write(&path, format!("{result:#}\n")).map_err(write_err(&path))?;
    finish(config, Some(providers), "predict", &["prediction.json"])?;
    Ok(result)
}

/// Predicted population in parallel. Output order and draws match the
/// sequential `simulate_population`.
pub fn simulate_parallel(
    predictor: &dyn ChoicePredictor,
    records: &[TripRecord],
    seed: u64,
    pool: &rayon::ThreadPool,
) -> Result<Vec<TripRecord>, PipelineError> {
    pool.install(|| {
        records
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                let d = predictor.distributions(r, &Output::ALL)?;
                Ok(sample_record(r, &Output::ALL, &d, seed, i as u64))
            })
            .collect()
    })
}

#[allow(clippy::too_many_arguments)]
fn evaluate_with(
    graph: &BehaviorGraph,
    reference: &[TripRecord],
    validation: &[TripRecord],
    providers: &Providers,
    config: &RunConfig,
    seed: u64,
    baselines: bool,
    pool: &rayon::ThreadPool,
) -> Result<Vec<(String, EvaluationReport)>, CliError> {
    let chain = chain(graph, providers, config)?;
    let marginal = MarginalPredictor::from_records(reference);
    let mut predictors: Vec<&dyn ChoicePredictor> = vec![&chain];
    if baselines {
        predictors.push(&UniformPredictor);
        predictors.push(&marginal);
    }
    let mut reports = Vec::new();
    for p in predictors {
        let simulated = simulate_parallel(p, validation, seed, pool)?;
        let report = evaluate_populations(validation, &simulated, &Output::ALL, config.evaluation.epsilon)?;
        reports.push((p.name().to_string(), report));
    }
    Ok(reports)
}

/// KLD/MAE of the chain (and optional baselines) on the validation data.
pub fn cmd_evaluate(
    config: &RunConfig,
    providers: &Providers,
    baselines: bool,
) -> Result<Vec<(String, EvaluationReport)>, CliError> {
    let reference = reference_records(config)?;
    let graph = match config.paths.graph {
        Some(_) => load_graph(config)?,
        None => build_graph(&reference)?,
    };
    let validation = validation_records(config)?;
    let pool = thread_pool(config)?;
    let mut reports = evaluate_with(
        &graph,
        &reference,
        &validation,
        providers,
        config,
        config.seed,
        baselines || config.evaluation.baselines,
        &pool,
    )?;
    if let Some(path) = &config.paths.predictions {
        let external = read_csv(path)?;
        if external.is_empty() {
            return Err(CliError::Data(format!("{} has no records", path.display())));
        }
        let report = evaluate_populations(&validation, &external, &Output::ALL, config.evaluation.epsilon)?;
        reports.push(("external".into(), report));
    }
    let dir = out_dir(config)?;
    let csv_path = dir.join("report.csv");
    write_report_csv(&reports, File::create(&csv_path).map_err(write_err(&csv_path))?).map_err(write_err(&csv_path))?;
    let json_path = dir.join("report.json");
    std::fs::write(&json_path, report_json(&reports)).map_err(write_err(&json_path))?;
    finish(config, Some(providers), "evaluate", &["report.csv", "report.json"])?;
    Ok(reports)
}

/// For each reference size and seed: resample the reference set from the
/// reference pool, rebuild the graph and evaluate on the validation data.
pub fn cmd_sweep(config: &RunConfig, providers: &Providers) -> Result<Vec<SweepRow>, CliError> {
    let pool_records = reference_records(config)?;
    let validation = validation_records(config)?;
    let pool = thread_pool(config)?;
    let mut rows = Vec::new();
    for &size in &config.sweep.sizes {
        for s in 0..config.sweep.seeds {
            let seed = config.seed.wrapping_add(s);
            let (reference, _) = split_reference_validation(&pool_records, size, 0, seed)?;
            let graph = build_graph(&reference)?;
            let reports = evaluate_with(&graph, &reference, &validation, providers, config, seed, false, &pool)?;
            let report = &reports[0].1;
            for (metric, value) in [("mean_kld", report.mean_kld), ("mean_mae", report.mean_mae)] {
                rows.push(SweepRow { size, seed, metric: metric.into(), value });
            }
        }
    }
    let dir = out_dir(config)?;
    let path = dir.join("sweep.csv");
    write_sweep_csv(&rows, File::create(&path).map_err(write_err(&path))?).map_err(write_err(&path))?;
    finish(config, Some(providers), "sweep", &["sweep.csv"])?;
    Ok(rows)
}

fn synthetic_spec(config: &RunConfig) -> Result<SyntheticSpec, CliError> {
    let Some(path) = &config.synthetic.spec else {
        return Ok(SyntheticSpec::strong_default(config.synthetic.size, config.seed));
    };
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let spec: SyntheticSpec = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?
    } else {
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
    };
    spec.validate()?;
    Ok(spec)
}

/// Writes a synthetic population drawn from the configured spec.
pub fn cmd_gen_synth(config: &RunConfig) -> Result<Vec<TripRecord>, CliError> {
    let records = generate_synthetic(&synthetic_spec(config)?)?;
    let dir = out_dir(config)?;
    let path = dir.join("synthetic.csv");
    write_csv(&path, &records).map_err(write_err(&path))?;
    finish(config, None, "gen-synth", &["synthetic.csv"])?;
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationSummary {
    pub agents: usize,
    pub trips: usize,
    pub edge_traversals: u64,
    pub poi_visits: u64,
    pub flow_kld: Option<f64>,
    pub visit_kld: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOutput {
    pub day: AgentDay,
    pub summary: SimulationSummary,
}

fn city(config: &RunConfig) -> Result<CityModel, CliError> {
    match &config.paths.city {
        Some(path) => Ok(read_city(path)?),
        None => {
            let s = &config.simulation;
            Ok(grid_city(s.grid_size, s.grid_size, s.spacing_meters, s.pois_per_category, config.seed)?)
        }
    }
}

/// One simulated day. Agents run in parallel; their tallies merge in agent
/// order, which equals the serial result because merging commutes.
pub fn cmd_simulate(config: &RunConfig, providers: &Providers) -> Result<SimulationOutput, CliError> {
    let city = city(config)?;
    let graph = load_graph(config)?;
    let chain = chain(&graph, providers, config)?;
    let profiles = generate_profiles(config.simulation.agents, &synthetic_spec(config)?, config.seed)?;
    let mut agents = spawn_agents(&profiles, &city, config.seed);
    let llm_schedule = LlmSchedule { llm: providers.llm.as_ref(), params: config.generation.clone() };
    let scheduler: &dyn ScheduleProvider = if config.llm.mock { &TemplateSchedule } else { &llm_schedule };
    let plans: Vec<DayPlan> =
        agents.iter().map(|a| generate_schedule(&a.profile, scheduler, config.seed, a.id)).collect();
    let ctx = SimulationContext {
        city: &city,
        chain: &chain,
        llm: providers.llm.as_ref(),
        params: config.generation.clone(),
        context: config.simulation.context.clone(),
        seed: config.seed,
    };
    let pool = thread_pool(config)?;
    let days: Vec<Result<AgentDay, MobilityError>> = pool.install(|| {
        agents.par_iter_mut().zip(plans.par_iter()).map(|(agent, plan)| simulate_agent(agent, plan, &ctx)).collect()
    });
    let mut day = AgentDay { tally: TrafficTally::new(&city), trips: Vec::new() };
    for d in days {
        let d = d?;
        day.tally.merge(&d.tally)?;
        day.trips.extend(d.trips);
    }

    let s = &config.simulation;
    let reference = match (&s.reference_edges, &s.reference_pois) {
        (None, None) => None,
        (e, p) => Some(read_tally(&city, e.as_deref(), p.as_deref())?),
    };
    let eps = config.evaluation.epsilon;
    let summary = SimulationSummary {
        agents: agents.len(),
        trips: day.trips.len(),
        edge_traversals: day.tally.total_traversals(),
        poi_visits: day.tally.total_visits(),
        flow_kld: match (&reference, &s.reference_edges) {
            (Some(r), Some(_)) => Some(flow_kld(&day.tally, r, eps)?),
            _ => None,
        },
        visit_kld: match (&reference, &s.reference_pois) {
            (Some(r), Some(_)) => Some(visit_kld(&day.tally, r, eps)?),
            _ => None,
        },
    };

    let dir = out_dir(config)?;
    let edges = dir.join("edges.csv");
    write_edge_tally(&day.tally, File::create(&edges).map_err(write_err(&edges))?).map_err(write_err(&edges))?;
    let pois = dir.join("pois.csv");
    write_poi_tally(&day.tally, File::create(&pois).map_err(write_err(&pois))?).map_err(write_err(&pois))?;
    let trips = dir.join("trips.jsonl");
    std::fs::write(&trips, trips_jsonl(&day.trips)).map_err(write_err(&trips))?;
    write_city(&dir.join("city.json"), &city)?;
    let summary_path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).unwrap_or_default() + "\n";
    std::fs::write(&summary_path, text).map_err(write_err(&summary_path))?;
    finish(
        config,
        Some(providers),
        "simulate",
        &["edges.csv", "pois.csv", "trips.jsonl", "city.json", "summary.json"],
    )?;
    Ok(SimulationOutput { day, summary })
}

fn trips_jsonl(trips: &[TripLog]) -> String {
    trips.iter().filter_map(|t| serde_json::to_string(t).ok()).map(|l| l + "\n").collect()
}

/// Serial day over the same inputs as [`cmd_simulate`], without writing
/// files. Used to check that the parallel run matches.
pub fn simulate_serial(config: &RunConfig, providers: &Providers) -> Result<AgentDay, CliError> {
    let city = city(config)?;
    let graph = load_graph(config)?;
    let chain = chain(&graph, providers, config)?;
    let profiles = generate_profiles(config.simulation.agents, &synthetic_spec(config)?, config.seed)?;
    let mut agents = spawn_agents(&profiles, &city, config.seed);
    let llm_schedule = LlmSchedule { llm: providers.llm.as_ref(), params: config.generation.clone() };
    let scheduler: &dyn ScheduleProvider = if config.llm.mock { &TemplateSchedule } else { &llm_schedule };
    let plans: Vec<DayPlan> =
        agents.iter().map(|a| generate_schedule(&a.profile, scheduler, config.seed, a.id)).collect();
    let ctx = SimulationContext {
        city: &city,
        chain: &chain,
        llm: providers.llm.as_ref(),
        params: config.generation.clone(),
        context: config.simulation.context.clone(),
        seed: config.seed,
    };
    Ok(run_day(&mut agents, &plans, &ctx)?)
}
