//! Iteration driver.
//!
//! One iteration: retire stale candidates, generate (public model, plus the
//! post-trained model from iteration 1 on), dedup against the vocabulary,
//! deploy positives plus new rewrites, replay sessions, label signals, update
//! the vocabulary, build the three training sets and record stats. Outputs
//! are staged in memory and written to the working directory only after the
//! whole iteration succeeded; `state.json` is written last.
//!
//! Working directory layout:
//!
//! ```text
//! state.json                   iteration counter, endpoints used, per-iteration stats
//! vocab.jsonl                  one RewriteRecord per line
//! candidates/iter_{k}.jsonl    raw generated candidates
//! exposures/iter_{k}.jsonl     exposure events with channel provenance
//! signals/iter_{k}.jsonl       Level-1 / Level-2 labels
//! train/{task}.jsonl           latest training sets (generation, quality, relevance)
//! train/iter_{k}/{task}.jsonl  training sets as built in iteration k
//! reports/iterations.json|txt  per-iteration table
//! reports/disagreements/iter_{k}.jsonl
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    DomainError, FrequencyThresholds, Item, ItemKind, Query, RagContext, RewriteDirection, RewriteSource,
};
use crate::eval::embed::{EmbedError, HashEmbedder, MIN_DIM};
use crate::eval::{recall_at_k, relevance_rate, BenchmarkII, EvalError, DEFAULT_KS};
use crate::gateway::{
    AuxLabel, AuxLabeler, AuxPayload, CompletionParams, EndpointKind, Gateway, GatewayConfig, GatewayError,
    GatewayLabeler, ModelEndpoint,
};
use crate::jsonl::{read_jsonl, write_atomic, write_jsonl, JsonlError};
use crate::prompting::{build_generation_prompt, parse_generation_output, GenerationRequest, DEFAULT_N_REWRITES};
use crate::rules::{rule_relevance, IntentOracle, RuleOracle};
use crate::search::{load_items, simulate_session, ClickLog, ExposureEvent, Session, SimConfig, SimError};
use crate::signal::{
    carryover_filter, dedup_and_stats, label_signals, update_vocabulary, CandidateRewrite, SignalError, SignalLabel,
    SignalLevel, Vocabulary,
};
use crate::trainset::{
    agreement_filter, assign_quality_labels, build_generation_sample, build_quality_sample, build_relevance_sample,
    group_seeded, order_positives, DisagreementDropped, GenerationLabels, JudgedRelevance, LabelSource, TrainError,
    TrainingSample, TrainingTask,
};

/// Prefix of environment variables that override endpoint settings.
pub const ENV_PREFIX: &str = "QRLOOP_";
pub const LOCK_FILE: &str = ".qrloop.lock";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("path does not exist: {}", .0.display())]
    MissingPath(PathBuf),
    #[error("working directory is locked by another run: {}", .0.display())]
    Locked(PathBuf),
    #[error("iteration {0} needs a post-trained endpoint; train on the emitted files and register one")]
    AwaitingPostTraining(u32),
    #[error("query id {0:?} cannot name a replay file")]
    BadQueryId(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

impl PipelineError {
    /// Stable identifier for machine-readable error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::MissingPath(_) => "missing_path",
            Self::Locked(_) => "locked",
            Self::AwaitingPostTraining(_) => "awaiting_post_training",
            Self::BadQueryId(_) => "bad_query_id",
            Self::Io { .. } => "io",
            Self::Json { .. } => "json",
            Self::Jsonl(_) => "jsonl",
            Self::Domain(_) => "domain",
            Self::Gateway(_) => "gateway",
            Self::Signal(_) => "signal",
            Self::Sim(_) => "simulation",
            Self::Train(_) => "training_data",
            Self::Eval(_) => "eval",
            Self::Embed(_) => "embed",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endpoints {
    pub generator_public: ModelEndpoint,
    /// Post-trained generator registered for a given iteration.
    #[serde(default)]
    pub generator_posttrained: BTreeMap<u32, ModelEndpoint>,
    /// Rule oracle when absent.
    #[serde(default)]
    pub aux_labeler: Option<ModelEndpoint>,
}

fn default_n_rewrites() -> usize {
    DEFAULT_N_REWRITES
}

fn default_embed_dim() -> usize {
    64
}

fn default_ks() -> Vec<usize> {
    DEFAULT_KS.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub thresholds: FrequencyThresholds,
    #[serde(default = "default_n_rewrites")]
    pub n_rewrites: usize,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    #[serde(default)]
    pub params: CompletionParams,
    #[serde(default)]
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub seed: u64,
    /// Query files; iteration k reads entry min(k, len - 1).
    pub queries: Vec<PathBuf>,
    /// Directory of `{query_id}.jsonl` replay logs, one item per line.
    pub replay_dir: PathBuf,
    #[serde(default)]
    pub bench_i: Option<PathBuf>,
    /// Used for the recall column of the unique-rewrite snapshot.
    #[serde(default)]
    pub bench_ii: Option<PathBuf>,
    pub endpoints: Endpoints,
    /// User id to the item ids the user-to-item channel returns.
    #[serde(default)]
    pub u2i: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub query_users: BTreeMap<String, String>,
}

impl PipelineConfig {
    /// Reads a JSON config, resolves relative paths against its directory,
    /// applies `QRLOOP_*` overrides from the process environment and validates.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|source| PipelineError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.apply_env(|k| std::env::var(k).ok());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.queries.iter_mut().for_each(fix);
        fix(&mut self.replay_dir);
        self.bench_i.iter_mut().for_each(fix);
        self.bench_ii.iter_mut().for_each(fix);
        let fix_endpoint = |e: &mut ModelEndpoint| {
            if e.kind == EndpointKind::Mock && !e.base_url.is_empty() && !e.base_url.starts_with("mock:") {
                let p = Path::new(&e.base_url);
                if p.is_relative() {
                    e.base_url = base.join(p).to_string_lossy().into_owned();
                }
            }
        };
        fix_endpoint(&mut self.endpoints.generator_public);
        self.endpoints.generator_posttrained.values_mut().for_each(fix_endpoint);
        self.endpoints.aux_labeler.iter_mut().for_each(fix_endpoint);
    }

    /// Overrides: `QRLOOP_GENERATOR_PUBLIC_URL`, `QRLOOP_GENERATOR_PUBLIC_KEY`,
    /// `QRLOOP_GENERATOR_POSTTRAINED_{k}_URL`, `QRLOOP_GENERATOR_POSTTRAINED_{k}_KEY`,
    /// `QRLOOP_AUX_LABELER_URL`, `QRLOOP_AUX_LABELER_KEY`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) {
        let apply = |e: &mut ModelEndpoint, role: &str| {
            if let Some(url) = var(&format!("{ENV_PREFIX}{role}_URL")) {
                e.base_url = url;
            }
            if let Some(key) = var(&format!("{ENV_PREFIX}{role}_KEY")) {
                e.api_key = Some(key);
            }
        };
        apply(&mut self.endpoints.generator_public, "GENERATOR_PUBLIC");
        for (k, e) in self.endpoints.generator_posttrained.iter_mut() {
            apply(e, &format!("GENERATOR_POSTTRAINED_{k}"));
        }
        if let Some(e) = self.endpoints.aux_labeler.as_mut() {
            apply(e, "AUX_LABELER");
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        FrequencyThresholds::new(self.thresholds.high_min(), self.thresholds.mid_min())?;
        if self.n_rewrites == 0 {
            return Err(PipelineError::Config("n_rewrites must be positive".into()));
        }
        if self.embed_dim < MIN_DIM {
            return Err(PipelineError::Config(format!("embed_dim must be at least {MIN_DIM}")));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(PipelineError::Config("ks must be non-empty and positive".into()));
        }
        if self.queries.is_empty() {
            return Err(PipelineError::Config("at least one query file is required".into()));
        }
        let mut paths: Vec<&PathBuf> = self.queries.iter().collect();
        paths.push(&self.replay_dir);
        paths.extend(self.bench_i.iter());
        paths.extend(self.bench_ii.iter());
        for p in paths {
            if !p.exists() {
                return Err(PipelineError::MissingPath(p.clone()));
            }
        }
        Ok(())
    }

    pub fn query_file(&self, iteration: u32) -> &Path {
        let idx = (iteration as usize).min(self.queries.len() - 1);
        &self.queries[idx]
    }
}

/// One line of a query file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRow {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub observed_count: u64,
    #[serde(default)]
    pub restaurants: Vec<String>,
    #[serde(default)]
    pub cuisines: Vec<String>,
}

fn check_query_id(id: &str) -> Result<(), PipelineError> {
    if id.is_empty() || id.starts_with('.') || id.contains(['/', '\\']) {
        return Err(PipelineError::BadQueryId(id.to_string()));
    }
    Ok(())
}

pub fn load_queries(path: &Path, thresholds: &FrequencyThresholds) -> Result<Vec<Query>, PipelineError> {
    let rows: Vec<QueryRow> = read_jsonl(path)?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        check_query_id(&row.id)?;
        if !seen.insert(row.id.clone()) {
            return Err(PipelineError::Config(format!(
                "duplicate query id {:?} in {}",
                row.id,
                path.display()
            )));
        }
        let ctx = RagContext::new(row.restaurants, row.cuisines)?;
        out.push(Query::new(row.id, &row.text, row.observed_count, thresholds, ctx)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniqueEval {
    /// Queries with at least one unique rewrite.
    pub queries: usize,
    pub pairs: usize,
    pub relevance_high_rate: f64,
    /// Over Benchmark II entries whose query produced unique rewrites; empty without a benchmark.
    pub recall_at: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: u32,
    pub queries: usize,
    pub candidates_generated: usize,
    pub posttrained_candidates: usize,
    pub parse_failures: usize,
    pub unique_new: usize,
    pub duplicates: usize,
    pub self_duplicates: usize,
    pub deployed: usize,
    pub unique_portion: f64,
    pub exposures: usize,
    pub level1_labels: usize,
    pub level2_labels: usize,
    pub positives_total: usize,
    pub positives_gained: usize,
    pub retired_total: usize,
    pub samples: BTreeMap<String, usize>,
    pub relevance_disagreements: usize,
    pub unique_eval: UniqueEval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationState {
    pub iteration: u32,
    pub vocab_path: PathBuf,
    /// Endpoints used by the last completed iteration, keyed by role.
    pub endpoints: BTreeMap<String, ModelEndpoint>,
    pub stats: Vec<IterationStats>,
}

impl Default for IterationState {
    fn default() -> Self {
        Self {
            iteration: 0,
            vocab_path: PathBuf::from("vocab.jsonl"),
            endpoints: BTreeMap::new(),
            stats: Vec::new(),
        }
    }
}

pub struct Workdir {
    root: PathBuf,
}

/// Removes the lock file on drop.
pub struct WorkdirLock {
    path: PathBuf,
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn state_path(&self) -> PathBuf {
        self.root.join("state.json")
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.root.join("vocab.jsonl")
    }

    pub fn candidates_path(&self, k: u32) -> PathBuf {
        self.root.join("candidates").join(format!("iter_{k}.jsonl"))
    }

    pub fn exposures_path(&self, k: u32) -> PathBuf {
        self.root.join("exposures").join(format!("iter_{k}.jsonl"))
    }

    pub fn signals_path(&self, k: u32) -> PathBuf {
        self.root.join("signals").join(format!("iter_{k}.jsonl"))
    }

    pub fn train_path(&self, task: TrainingTask) -> PathBuf {
        self.root.join("train").join(format!("{}.jsonl", task.file_stem()))
    }

    pub fn train_iter_path(&self, k: u32, task: TrainingTask) -> PathBuf {
        self.root
            .join("train")
            .join(format!("iter_{k}"))
            .join(format!("{}.jsonl", task.file_stem()))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn lock(&self) -> Result<WorkdirLock, PipelineError> {
        fs::create_dir_all(&self.root).map_err(io_err(&self.root))?;
        let path = self.root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(WorkdirLock { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(path)),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    pub fn load_state(&self) -> Result<IterationState, PipelineError> {
        let path = self.state_path();
        if !path.exists() {
            return Ok(IterationState::default());
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|source| PipelineError::Json { path, source })
    }

    pub fn load_vocab(&self, state: &IterationState) -> Result<Vocabulary, PipelineError> {
        let path = self.root.join(&state.vocab_path);
        if !path.exists() {
            return Ok(Vocabulary::new(0));
        }
        Ok(Vocabulary::from_records(read_jsonl(&path)?, 0)?)
    }
}

/// One generator's answer for one query: rewrites, or the parse failure message.
type GeneratorReply = (RewriteSource, Result<Vec<String>, String>);

/// Exposure events plus the replayed items per query.
pub type Simulated = (Vec<ExposureEvent>, BTreeMap<String, Vec<Item>>);

/// Raw generation output for one iteration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerationBatch {
    pub candidates: Vec<CandidateRewrite>,
    pub posttrained_candidates: usize,
    pub parse_failures: Vec<(String, RewriteSource, String)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingBuild {
    pub samples: BTreeMap<TrainingTask, Vec<TrainingSample>>,
    pub dropped: Vec<DisagreementDropped>,
}

/// Everything an iteration produces, before it touches the disk.
#[derive(Debug, Clone)]
pub struct IterationOutputs {
    pub iteration: u32,
    pub state: IterationState,
    pub vocab: Vocabulary,
    pub candidates: Vec<CandidateRewrite>,
    pub exposures: Vec<ExposureEvent>,
    pub signals: Vec<SignalLabel>,
    pub training: TrainingBuild,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IterateOutcome {
    Completed { rounds: u32 },
    Paused { rounds: u32, at_iteration: u32 },
}

fn mix_seed(seed: u64, iteration: u32, salt: u64) -> u64 {
    seed ^ (u64::from(iteration) << 32) ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub struct Pipeline {
    pub config: PipelineConfig,
    gateway: Gateway,
    embedder: HashEmbedder,
    bench_ii: Option<BenchmarkII>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let gateway = Gateway::new(config.gateway)?;
        let embedder = HashEmbedder::new(config.embed_dim)?;
        let bench_ii = config.bench_ii.as_deref().map(BenchmarkII::load).transpose()?;
        Ok(Self {
            config,
            gateway,
            embedder,
            bench_ii,
        })
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn embedder(&self) -> &HashEmbedder {
        &self.embedder
    }

    fn aux(&self) -> (Box<dyn AuxLabeler + '_>, LabelSource) {
        match &self.config.endpoints.aux_labeler {
            Some(endpoint) => (
                Box::new(GatewayLabeler {
                    gateway: &self.gateway,
                    endpoint: endpoint.clone(),
                    params: self.config.params,
                }),
                LabelSource::AuxLlm,
            ),
            None => (Box::new(RuleOracle), LabelSource::RuleOracle),
        }
    }

    fn thread_pool(&self) -> Result<rayon::ThreadPool, PipelineError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.gateway.max_in_flight.max(1))
            .build()
            .map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn queries_for(&self, iteration: u32) -> Result<Vec<Query>, PipelineError> {
        load_queries(self.config.query_file(iteration), &self.config.thresholds)
    }

    /// Endpoints that iteration `k` would call, keyed by role.
    pub fn endpoints_for(&self, iteration: u32) -> BTreeMap<String, ModelEndpoint> {
        let mut out = BTreeMap::from([(
            "generator_public".to_string(),
            self.config.endpoints.generator_public.clone(),
        )]);
        if iteration > 0 {
            if let Some(e) = self.config.endpoints.generator_posttrained.get(&iteration) {
                out.insert("generator_posttrained".to_string(), e.clone());
            }
        }
        if let Some(e) = &self.config.endpoints.aux_labeler {
            out.insert("aux_labeler".to_string(), e.clone());
        }
        out
    }

    /// Public generator always; the post-trained one only when `iteration > 0`.
    pub fn generate(&self, queries: &[Query], iteration: u32) -> Result<GenerationBatch, PipelineError> {
        let mut generators = vec![(self.config.endpoints.generator_public.clone(), RewriteSource::PublicLlm)];
        if iteration > 0 {
            let e = self
                .config
                .endpoints
                .generator_posttrained
                .get(&iteration)
                .ok_or(PipelineError::AwaitingPostTraining(iteration))?;
            generators.push((e.clone(), RewriteSource::PostTrainedLlm(iteration)));
        }
        let pool = self.thread_pool()?;
        let per_query: Vec<Vec<GeneratorReply>> = pool.install(|| {
            queries
                .par_iter()
                .map(|q| {
                    let req = GenerationRequest::new(q.clone(), self.config.n_rewrites, RewriteDirection::ALL)
                        .map_err(|e| PipelineError::Config(e.to_string()))?;
                    let bundle = build_generation_prompt(&req);
                    generators
                        .iter()
                        .map(|(endpoint, source)| {
                            let raw = self.gateway.complete(endpoint, &bundle, &self.config.params)?;
                            let parsed = parse_generation_output(&raw)
                                .map(|o| o.rewrites)
                                .map_err(|e| e.to_string());
                            Ok((*source, parsed))
                        })
                        .collect::<Result<Vec<_>, PipelineError>>()
                })
                .collect::<Result<Vec<_>, PipelineError>>()
        })?;
        let mut batch = GenerationBatch::default();
        for (q, results) in queries.iter().zip(per_query) {
            for (source, parsed) in results {
                match parsed {
                    Ok(rewrites) => {
                        if matches!(source, RewriteSource::PostTrainedLlm(_)) {
                            batch.posttrained_candidates += rewrites.len();
                        }
                        batch
                            .candidates
                            .extend(rewrites.into_iter().map(|text| CandidateRewrite {
                                query_id: q.id.clone(),
                                text,
                                source,
                            }));
                    }
                    Err(e) => {
                        warn!("unparsable generation for query {}: {e}", q.id);
                        batch.parse_failures.push((q.id.clone(), source, e));
                    }
                }
            }
        }
        Ok(batch)
    }

    /// Replay items for a query; `None` when no log exists.
    pub fn replay_items(&self, query_id: &str) -> Result<Option<Vec<Item>>, PipelineError> {
        check_query_id(query_id)?;
        let path = self.config.replay_dir.join(format!("{query_id}.jsonl"));
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(load_items(&path)?))
    }

    /// Replays one session per query with the given rewrites deployed.
    pub fn simulate(
        &self,
        queries: &[Query],
        rewrites: &BTreeMap<String, Vec<String>>,
    ) -> Result<Simulated, PipelineError> {
        let empty = Vec::new();
        let per_query: Vec<Option<(Vec<ExposureEvent>, Vec<Item>)>> = queries
            .par_iter()
            .map(|q| {
                let Some(items) = self.replay_items(&q.id)? else {
                    warn!("no replay log for query {}, skipped", q.id);
                    return Ok(None);
                };
                let clicks = ClickLog::from_items(&items)?;
                let u2i_items = self
                    .config
                    .query_users
                    .get(&q.id)
                    .and_then(|u| self.config.u2i.get(u))
                    .unwrap_or(&empty);
                let session = Session {
                    query_id: &q.id,
                    query_text: q.text(),
                    rewrites: rewrites.get(&q.id).unwrap_or(&empty),
                    candidates: &items,
                    clicks: &clicks,
                    u2i_items,
                };
                let events = simulate_session(&session, &self.config.sim, &self.embedder)?;
                Ok(Some((events, items)))
            })
            .collect::<Result<_, PipelineError>>()?;
        let mut events = Vec::new();
        let mut items = BTreeMap::new();
        for (q, out) in queries.iter().zip(per_query) {
            if let Some((e, i)) = out {
                events.extend(e);
                items.insert(q.id.clone(), i);
            }
        }
        Ok((events, items))
    }

    pub fn build_training(
        &self,
        queries: &[Query],
        vocab: &Vocabulary,
        exposures: &[ExposureEvent],
        items: &BTreeMap<String, Vec<Item>>,
        iteration: u32,
    ) -> Result<TrainingBuild, PipelineError> {
        let (aux, aux_source) = self.aux();
        let mut by_query: BTreeMap<&str, Vec<crate::domain::RewriteRecord>> = BTreeMap::new();
        for r in vocab.records() {
            by_query.entry(r.query_id.as_str()).or_default().push(r.clone());
        }
        let no_records = Vec::new();

        let mut generation = Vec::new();
        let mut quality_entries = Vec::new();
        for q in queries {
            let records = by_query.get(q.id.as_str()).unwrap_or(&no_records);
            let positives = order_positives(records);
            if let Some(top) = positives.first() {
                let typo = aux.label(&AuxPayload::Typo {
                    query: q.text().to_string(),
                    context: q.rag_context.clone(),
                })?;
                if !matches!(typo, AuxLabel::Typo(_)) {
                    return Err(GatewayError::UnparsableLabel(typo.value().to_string()).into());
                }
                let labels = GenerationLabels {
                    typo,
                    typo_source: aux_source,
                    intent: RuleOracle.intent(q, top),
                    intent_source: LabelSource::RuleOracle,
                };
                generation.push(build_generation_sample(q, &positives, &labels, self.config.n_rewrites)?);
            }
            quality_entries.extend(assign_quality_labels(q, records, aux.as_ref(), aux_source)?);
        }
        let quality = group_seeded(quality_entries, 2, mix_seed(self.config.seed, iteration, 2))
            .iter()
            .map(|g| build_quality_sample(g))
            .collect::<Result<Vec<_>, _>>()?;

        let by_id: BTreeMap<&str, &Query> = queries.iter().map(|q| (q.id.as_str(), q)).collect();
        let mut seen = BTreeSet::new();
        let mut judged = Vec::new();
        for e in exposures.iter().filter(|e| e.channels.iter().any(|c| c.is_rewrite())) {
            if !seen.insert((e.query_id.as_str(), e.item_id.as_str())) {
                continue;
            }
            let (Some(q), Some(item)) = (
                by_id.get(e.query_id.as_str()),
                items
                    .get(&e.query_id)
                    .and_then(|v| v.iter().find(|i| i.id == e.item_id)),
            ) else {
                continue;
            };
            let (restaurant, cuisine) = match item.kind {
                ItemKind::Restaurant => (item.title.clone(), "None".to_string()),
                ItemKind::Cuisine => ("None".to_string(), item.title.clone()),
            };
            let aux_label = match aux.label(&AuxPayload::Relevance {
                query: q.text().to_string(),
                context: q.rag_context.clone(),
                restaurant: restaurant.clone(),
                cuisine: cuisine.clone(),
            })? {
                AuxLabel::Relevance(l) => l,
                other => return Err(GatewayError::UnparsableLabel(other.value().to_string()).into()),
            };
            judged.push(JudgedRelevance {
                query: q.text().to_string(),
                restaurant,
                cuisine,
                module_label: rule_relevance(&q.rag_context, &item.title),
                aux_label,
            });
        }
        let (kept, dropped) = agreement_filter(judged);
        let relevance = group_seeded(kept, 3, mix_seed(self.config.seed, iteration, 3))
            .iter()
            .map(|g| build_relevance_sample(g))
            .collect::<Result<Vec<_>, _>>()?;

        Ok(TrainingBuild {
            samples: BTreeMap::from([
                (TrainingTask::RewriteGeneration, generation),
                (TrainingTask::RewriteQuality, quality),
                (TrainingTask::Relevance, relevance),
            ]),
            dropped,
        })
    }

    /// Relevance and recall of this iteration's new rewrites alone.
    pub fn unique_eval(
        &self,
        queries: &[Query],
        unique: &BTreeMap<String, Vec<String>>,
    ) -> Result<UniqueEval, PipelineError> {
        let pairs: Vec<(Query, String)> = queries
            .iter()
            .flat_map(|q| {
                unique
                    .get(&q.id)
                    .into_iter()
                    .flatten()
                    .map(move |r| (q.clone(), r.clone()))
            })
            .collect();
        let relevance_high_rate = relevance_rate(&pairs, &RuleOracle)?;
        let recall_at = match &self.bench_ii {
            Some(bench) => {
                recall_at_k(unique, &restrict_bench(bench, unique), &self.config.ks, &self.embedder)?.recall_at
            }
            None => BTreeMap::new(),
        };
        Ok(UniqueEval {
            queries: unique.values().filter(|v| !v.is_empty()).count(),
            pairs: pairs.len(),
            relevance_high_rate,
            recall_at,
        })
    }

    pub fn run_iteration(
        &self,
        state: &IterationState,
        vocab: &Vocabulary,
        queries: &[Query],
    ) -> Result<IterationOutputs, PipelineError> {
        let k = state.iteration;
        let mut vocab = vocab.clone();
        vocab.set_iteration(k)?;
        let mut vocab = carryover_filter(&vocab);
        let positives_before = vocab.positives().count();

        let batch = self.generate(queries, k)?;
        let dedup = dedup_and_stats(&batch.candidates, &vocab);
        vocab.insert_candidates(&dedup.unique);
        vocab.mark_deployed();

        let deployed: BTreeMap<String, Vec<String>> = queries
            .iter()
            .map(|q| (q.id.clone(), vocab.active_for(&q.id)))
            .collect();
        let (exposures, items) = self.simulate(queries, &deployed)?;
        let signals = label_signals(&exposures);
        let vocab = carryover_filter(&update_vocabulary(&vocab, &signals)?);

        let training = self.build_training(queries, &vocab, &exposures, &items, k)?;

        let mut unique: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for c in &dedup.unique {
            unique.entry(c.query_id.clone()).or_default().push(c.text.clone());
        }
        let unique_eval = self.unique_eval(queries, &unique)?;

        let positives_total = vocab.positives().count();
        let stats = IterationStats {
            iteration: k,
            queries: queries.len(),
            candidates_generated: batch.candidates.len(),
            posttrained_candidates: batch.posttrained_candidates,
            parse_failures: batch.parse_failures.len(),
            unique_new: dedup.unique.len(),
            duplicates: dedup.duplicates,
            self_duplicates: dedup.self_duplicates,
            deployed: deployed.values().map(Vec::len).sum(),
            unique_portion: dedup.unique_portion,
            exposures: exposures.len(),
            level1_labels: signals.iter().filter(|s| s.level == SignalLevel::Level1).count(),
            level2_labels: signals.iter().filter(|s| s.level == SignalLevel::Level2).count(),
            positives_total,
            positives_gained: positives_total.saturating_sub(positives_before),
            retired_total: vocab.len() - vocab.active().count(),
            samples: training
                .samples
                .iter()
                .map(|(t, s)| (t.file_stem().to_string(), s.len()))
                .collect(),
            relevance_disagreements: training.dropped.len(),
            unique_eval,
        };
        info!(
            "iteration {k}: {} candidates, {} unique, {} positives",
            stats.candidates_generated, stats.unique_new, stats.positives_total
        );

        let mut next = state.clone();
        next.iteration = k + 1;
        next.endpoints = self.endpoints_for(k);
        next.stats.push(stats);
        Ok(IterationOutputs {
            iteration: k,
            state: next,
            vocab,
            candidates: batch.candidates,
            exposures,
            signals,
            training,
        })
    }

    /// Runs up to `rounds` iterations, pausing when a post-trained endpoint is missing.
    pub fn iterate(&self, workdir: &Workdir, rounds: u32) -> Result<IterateOutcome, PipelineError> {
        let _lock = workdir.lock()?;
        let mut state = workdir.load_state()?;
        for done in 0..rounds {
            let k = state.iteration;
            if k > 0 && !self.config.endpoints.generator_posttrained.contains_key(&k) {
                return Ok(IterateOutcome::Paused {
                    rounds: done,
                    at_iteration: k,
                });
            }
            let vocab = workdir.load_vocab(&state)?;
            let queries = self.queries_for(k)?;
            let outputs = self.run_iteration(&state, &vocab, &queries)?;
            commit(workdir, &outputs, &self.config.ks)?;
            state = outputs.state;
        }
        Ok(IterateOutcome::Completed { rounds })
    }
}

/// Benchmark II entries whose query has at least one rewrite in `rewrites`.
pub fn restrict_bench(bench: &BenchmarkII, rewrites: &BTreeMap<String, Vec<String>>) -> BenchmarkII {
    BenchmarkII {
        entries: bench
            .entries
            .iter()
            .filter(|e| rewrites.get(&e.query.id).is_some_and(|v| !v.is_empty()))
            .cloned()
            .collect(),
    }
}

/// Writes an iteration's outputs. Every file is replaced atomically and
/// `state.json` goes last, so a failed commit leaves the previous state in charge.
pub fn commit(workdir: &Workdir, out: &IterationOutputs, ks: &[usize]) -> Result<(), PipelineError> {
    let k = out.iteration;
    write_jsonl(&workdir.candidates_path(k), &out.candidates)?;
    write_jsonl(&workdir.exposures_path(k), &out.exposures)?;
    write_jsonl(&workdir.signals_path(k), &out.signals)?;
    for (task, samples) in &out.training.samples {
        write_jsonl(&workdir.train_iter_path(k, *task), samples)?;
        write_jsonl(&workdir.train_path(*task), samples)?;
    }
    write_jsonl(
        &workdir
            .reports_dir()
            .join("disagreements")
            .join(format!("iter_{k}.jsonl")),
        &out.training.dropped,
    )?;
    let records: Vec<_> = out.vocab.records().cloned().collect();
    write_jsonl(&workdir.root().join(&out.state.vocab_path), &records)?;
    write_reports(workdir, &out.state.stats, ks)?;
    write_state(workdir, &out.state)
}

fn to_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

pub fn write_state(workdir: &Workdir, state: &IterationState) -> Result<(), PipelineError> {
    Ok(write_atomic(&workdir.state_path(), to_pretty(state).as_bytes())?)
}

pub fn write_reports(workdir: &Workdir, stats: &[IterationStats], ks: &[usize]) -> Result<(), PipelineError> {
    let dir = workdir.reports_dir();
    write_atomic(&dir.join("iterations.json"), to_pretty(&stats).as_bytes())?;
    write_atomic(&dir.join("iterations.txt"), report_iterations(stats, ks).as_bytes())?;
    Ok(())
}

/// Per-iteration table: unique portion, positives gained, and the relevance
/// and recall@K of the unique rewrites alone.
pub fn report_iterations(stats: &[IterationStats], ks: &[usize]) -> String {
    let mut out = String::from("| Iteration | Unique portion | Positives gained | Relevance |");
    for k in ks {
        out.push_str(&format!(" Top{k} |"));
    }
    out.push('\n');
    for s in stats {
        out.push_str(&format!(
            "| {} | {:.3}% | {} | {:.4} |",
            s.iteration,
            s.unique_portion * 100.0,
            s.positives_gained,
            s.unique_eval.relevance_high_rate
        ));
        for k in ks {
            match s.unique_eval.recall_at.get(k) {
                Some(v) => out.push_str(&format!(" {v:.4} |")),
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}
