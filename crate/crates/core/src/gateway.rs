//! Completion gateway over remote model endpoints and a deterministic mock,
//! plus the auxiliary labeling interface (typo, quality, relevance).
//!
//! Wire shape for remote endpoints:
//!
//! ```text
//! POST {base_url}/complete
//! {"instruction": str, "user": str, "max_tokens": int, "temperature": float, "seed": int|null}
//! -> {"text": str}
//! ```
//!
//! Mock endpoints read fixtures from the directory named by `base_url`: every
//! `*.json` file there is an object mapping a fixture key to the reply text.
//! The key is `"{instruction_digest}|{user}"` where the digest is the first
//! 16 hex digits of the SHA-256 of the instruction; `"*|{user}"` matches any
//! instruction. Without a fixture the mock answers from a fallback template:
//!
//! - generation instructions: the associated restaurants then cuisines, then
//!   the query's tokens when it has several, capped at the requested count,
//!   in the one-line output format with `Correction: None`;
//! - typo / quality / relevance instructions: one label per group, picked by
//!   hashing the group text together with the request seed;
//! - anything else: `Output: {}`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::thread;
use std::time::Duration;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{normalize_text, tokens, RagContext};
use crate::prompting::{
    render_context, render_generation_output, GenerationOutput, PromptBundle, SearchIntent, GENERATION_ROLE_LINE,
    QUALITY_INSTRUCTION, RELEVANCE_INSTRUCTION, TYPO_INSTRUCTION,
};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("fixture error in {path}: {detail}")]
    Fixture { path: PathBuf, detail: String },
    #[error("answer {0:?} is outside the label vocabulary")]
    UnparsableLabel(String),
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Transport(_) | Self::Timeout)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub max_tokens: u32,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl Default for CompletionParams {
    fn default() -> Self {
        Self {
            max_tokens: 512,
            temperature: 0.0,
            seed: Some(0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    Remote,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub name: String,
    /// HTTP base URL for remote endpoints, fixture directory for mocks (may be empty).
    pub base_url: String,
    pub kind: EndpointKind,
    /// Bearer token for remote endpoints. Never written back out.
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
}

impl ModelEndpoint {
    pub fn mock(name: impl Into<String>, fixture_dir: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            base_url: fixture_dir.into(),
            kind: EndpointKind::Mock,
            api_key: None,
        }
    }

    pub fn remote(name: impl Into<String>, base_url: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            base_url: base_url.into(),
            kind: EndpointKind::Remote,
            api_key: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            timeout_ms: 30_000,
            max_retries: 2,
            backoff_ms: 200,
            max_in_flight: 4,
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    instruction: &'a str,
    user: &'a str,
    max_tokens: u32,
    temperature: f64,
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
}

pub fn fixture_key(bundle: &PromptBundle) -> String {
    format!("{}|{}", instruction_digest(&bundle.instruction), bundle.user)
}

pub fn instruction_digest(instruction: &str) -> String {
    let digest = Sha256::digest(instruction.as_bytes());
    hex::encode(&digest[..8])
}

type Fixtures = Arc<HashMap<String, String>>;

/// Shared, thread-safe completion front end.
pub struct Gateway {
    config: GatewayConfig,
    client: reqwest::blocking::Client,
    fixtures: RwLock<HashMap<String, Fixtures>>,
}

impl Gateway {
    pub fn new(config: GatewayConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(Self {
            config,
            client,
            fixtures: RwLock::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn complete(
        &self,
        endpoint: &ModelEndpoint,
        bundle: &PromptBundle,
        params: &CompletionParams,
    ) -> Result<String, GatewayError> {
        match endpoint.kind {
            EndpointKind::Mock => self.complete_mock(endpoint, bundle, params),
            EndpointKind::Remote => self.complete_remote_with_retries(endpoint, bundle, params),
        }
    }

    fn complete_remote_with_retries(
        &self,
        endpoint: &ModelEndpoint,
        bundle: &PromptBundle,
        params: &CompletionParams,
    ) -> Result<String, GatewayError> {
        let mut attempt = 0u32;
        loop {
            match self.complete_remote(endpoint, bundle, params) {
                Err(e) if e.is_retryable() && attempt < self.config.max_retries => {
                    log::warn!("{} attempt {} failed: {e}", endpoint.name, attempt + 1);
                    let backoff = self.config.backoff_ms.saturating_mul(1 << attempt.min(16));
                    thread::sleep(Duration::from_millis(backoff));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn complete_remote(
        &self,
        endpoint: &ModelEndpoint,
        bundle: &PromptBundle,
        params: &CompletionParams,
    ) -> Result<String, GatewayError> {
        let url = format!("{}/complete", endpoint.base_url.trim_end_matches('/'));
        let body = WireRequest {
            instruction: &bundle.instruction,
            user: &bundle.user,
            max_tokens: params.max_tokens,
            temperature: params.temperature,
            seed: params.seed,
        };
        let mut req = self.client.post(&url).json(&body);
        if let Some(key) = &endpoint.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(map_reqwest)?;
        let status = resp.status();
        if !status.is_success() {
            return Err(GatewayError::Transport(format!("{url} returned {status}")));
        }
        let parsed: WireResponse = resp.json().map_err(map_reqwest)?;
        Ok(parsed.text)
    }

    fn complete_mock(
        &self,
        endpoint: &ModelEndpoint,
        bundle: &PromptBundle,
        params: &CompletionParams,
    ) -> Result<String, GatewayError> {
        let fixtures = self.fixtures_for(&endpoint.base_url)?;
        if let Some(text) = fixtures
            .get(&fixture_key(bundle))
            .or_else(|| fixtures.get(&format!("*|{}", bundle.user)))
        {
            return Ok(text.clone());
        }
        Ok(mock_fallback(bundle, params))
    }

    fn fixtures_for(&self, dir: &str) -> Result<Fixtures, GatewayError> {
        if let Some(f) = self.fixtures.read().expect("fixture lock").get(dir) {
            return Ok(f.clone());
        }
        let loaded = Arc::new(load_fixture_dir(dir)?);
        self.fixtures
            .write()
            .expect("fixture lock")
            .insert(dir.to_string(), loaded.clone());
        Ok(loaded)
    }
}

fn map_reqwest(e: reqwest::Error) -> GatewayError {
    if e.is_timeout() {
        GatewayError::Timeout
    } else {
        GatewayError::Transport(e.to_string())
    }
}

/// Reads every `*.json` fixture file in `dir`, in file-name order. Later files win on key clashes.
pub fn load_fixture_dir(dir: &str) -> Result<HashMap<String, String>, GatewayError> {
    let mut out = HashMap::new();
    if dir.is_empty() || dir.starts_with("mock:") {
        return Ok(out);
    }
    let path = Path::new(dir);
    if !path.is_dir() {
        return Ok(out);
    }
    let fixture_err = |p: &Path, detail: String| GatewayError::Fixture {
        path: p.to_path_buf(),
        detail,
    };
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| fixture_err(path, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    for file in files {
        let raw = fs::read_to_string(&file).map_err(|e| fixture_err(&file, e.to_string()))?;
        let map: BTreeMap<String, String> =
            serde_json::from_str(&raw).map_err(|e| fixture_err(&file, e.to_string()))?;
        out.extend(map);
    }
    Ok(out)
}

fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h = FnvHasher::default();
    for p in parts {
        h.write(p);
        h.write_u8(0xff);
    }
    h.finish()
}

fn mock_fallback(bundle: &PromptBundle, params: &CompletionParams) -> String {
    let seed = params.seed.unwrap_or(0).to_le_bytes();
    let pick = |group: &str, vocab: &[&'static str]| -> &'static str {
        let h = stable_hash(&[group.as_bytes(), &seed]);
        vocab[(h % vocab.len() as u64) as usize]
    };
    let instruction = bundle.instruction.as_str();
    if instruction.starts_with(GENERATION_ROLE_LINE) {
        return mock_generation(bundle);
    }
    if instruction == TYPO_INSTRUCTION {
        return pick(&bundle.user, &["yes", "no"]).to_string();
    }
    let vocab: &[&str] = if instruction == QUALITY_INSTRUCTION {
        &["Yes", "No"]
    } else if instruction == RELEVANCE_INSTRUCTION {
        &["High", "Low", "None"]
    } else {
        return "Output: {}".to_string();
    };
    let groups: Vec<&str> = bundle.user.split("\n\n").filter(|g| !g.trim().is_empty()).collect();
    let labels: Vec<&str> = groups.iter().map(|g| pick(g, vocab)).collect();
    format!("Output: {{{}}}", render_group_labels(&labels))
}

/// `1.Yes. 2.No` for pairs, `1.Low. 2.High 3. None` for triples.
pub fn render_group_labels(labels: &[&str]) -> String {
    if let [a, b, c] = labels {
        return format!("1.{a}. 2.{b} 3. {c}");
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{}.{l}", i + 1))
        .collect::<Vec<_>>()
        .join(". ")
}

fn mock_generation(bundle: &PromptBundle) -> String {
    let line_value = |prefix: &str| {
        bundle
            .user
            .lines()
            .find_map(|l| l.strip_prefix(prefix))
            .map(str::trim)
            .unwrap_or_default()
            .to_string()
    };
    let query = line_value("Query:");
    let context = line_value("Associated restaurant/Cuisine:");
    let n = bundle
        .instruction
        .split("provide ")
        .nth(1)
        .and_then(|rest| rest.split_whitespace().next())
        .and_then(|n| n.parse::<usize>().ok())
        .unwrap_or(crate::prompting::DEFAULT_N_REWRITES);

    let (restaurants, cuisines) = match context.as_str() {
        "None" | "" => (String::new(), String::new()),
        c => match c.split_once('/') {
            Some((r, cu)) => (r.to_string(), cu.to_string()),
            None => (c.to_string(), String::new()),
        },
    };
    let split = |s: &str| -> Vec<String> { s.split(", ").filter_map(|e| normalize_text(e).ok()).collect() };
    let restaurants = split(&restaurants);
    let cuisines = split(&cuisines);
    let mut rewrites: Vec<String> = Vec::new();
    let norm_query = normalize_text(&query).unwrap_or_default();
    let query_tokens: Vec<String> = tokens(&norm_query).map(str::to_string).collect();
    let keyword_tokens = if query_tokens.len() > 1 {
        query_tokens
    } else {
        Vec::new()
    };
    for r in restaurants.iter().chain(cuisines.iter()).chain(keyword_tokens.iter()) {
        if !rewrites.contains(r) && *r != norm_query {
            rewrites.push(r.clone());
        }
    }
    rewrites.truncate(n);
    if rewrites.is_empty() && !norm_query.is_empty() {
        rewrites.push(norm_query.clone());
    }
    let intent = if !cuisines.is_empty() {
        SearchIntent::Cuisine
    } else if !restaurants.is_empty() {
        SearchIntent::Restaurant
    } else {
        SearchIntent::Neither
    };
    render_generation_output(&GenerationOutput {
        query_meaning: format!("search for {norm_query}"),
        correction: None,
        intent,
        rewrites,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxTask {
    Typo,
    Quality,
    Relevance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QualityLabel {
    Yes,
    No,
}

impl QualityLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Yes => "Yes",
            Self::No => "No",
        }
    }
}

/// Ordered weakest first, so `max` picks the strongest level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RelevanceLevel {
    None,
    Low,
    High,
}

impl RelevanceLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::High => "High",
            Self::Low => "Low",
            Self::None => "None",
        }
    }
}

/// A closed-vocabulary answer from an auxiliary labeler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AuxLabel {
    Typo(bool),
    Quality(QualityLabel),
    Relevance(RelevanceLevel),
}

impl AuxLabel {
    pub fn task(&self) -> AuxTask {
        match self {
            Self::Typo(_) => AuxTask::Typo,
            Self::Quality(_) => AuxTask::Quality,
            Self::Relevance(_) => AuxTask::Relevance,
        }
    }

    pub fn value(&self) -> &'static str {
        match self {
            Self::Typo(true) => "yes",
            Self::Typo(false) => "no",
            Self::Quality(q) => q.as_str(),
            Self::Relevance(r) => r.as_str(),
        }
    }
}

/// What an auxiliary labeler judges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuxPayload {
    Typo {
        query: String,
        context: RagContext,
    },
    Quality {
        query: String,
        context: RagContext,
        rewrite: String,
    },
    /// Product slots hold `"None"` when absent.
    Relevance {
        query: String,
        context: RagContext,
        restaurant: String,
        cuisine: String,
    },
}

impl AuxPayload {
    pub fn task(&self) -> AuxTask {
        match self {
            Self::Typo { .. } => AuxTask::Typo,
            Self::Quality { .. } => AuxTask::Quality,
            Self::Relevance { .. } => AuxTask::Relevance,
        }
    }

    /// Single-group prompt in the same shape as the training samples.
    pub fn to_bundle(&self) -> PromptBundle {
        match self {
            Self::Typo { query, context } => PromptBundle {
                instruction: TYPO_INSTRUCTION.to_string(),
                user: format!(
                    "Query:{query}\n\nAssociated restaurant/Cuisine:{}",
                    render_context(context)
                ),
            },
            Self::Quality {
                query,
                context,
                rewrite,
            } => PromptBundle {
                instruction: QUALITY_INSTRUCTION.to_string(),
                user: format!(
                    "Query1: {query}; Associated restaurant/Cuisine1:{}; Rewrite1: {rewrite}",
                    render_context(context)
                ),
            },
            Self::Relevance {
                query,
                restaurant,
                cuisine,
                ..
            } => PromptBundle {
                instruction: RELEVANCE_INSTRUCTION.to_string(),
                user: format!("Query1: {query}; Restaurant1: {restaurant}; Cuisine1: {cuisine}"),
            },
        }
    }
}

/// Extracts the first closed-vocabulary word of `task` from a model answer.
pub fn parse_aux_answer(task: AuxTask, answer: &str) -> Result<AuxLabel, GatewayError> {
    let words = answer
        .split(|c: char| !c.is_alphabetic())
        .filter(|w| !w.is_empty())
        .filter(|w| !w.eq_ignore_ascii_case("output"));
    for w in words {
        let lw = w.to_ascii_lowercase();
        let label = match (task, lw.as_str()) {
            (AuxTask::Typo, "yes") => AuxLabel::Typo(true),
            (AuxTask::Typo, "no") => AuxLabel::Typo(false),
            (AuxTask::Quality, "yes") => AuxLabel::Quality(QualityLabel::Yes),
            (AuxTask::Quality, "no") => AuxLabel::Quality(QualityLabel::No),
            (AuxTask::Relevance, "high") => AuxLabel::Relevance(RelevanceLevel::High),
            (AuxTask::Relevance, "low") => AuxLabel::Relevance(RelevanceLevel::Low),
            (AuxTask::Relevance, "none") => AuxLabel::Relevance(RelevanceLevel::None),
            _ => continue,
        };
        return Ok(label);
    }
    Err(GatewayError::UnparsableLabel(answer.to_string()))
}

pub trait AuxLabeler: Send + Sync {
    fn label(&self, payload: &AuxPayload) -> Result<AuxLabel, GatewayError>;
}

/// Auxiliary labeler backed by a model endpoint.
pub struct GatewayLabeler<'a> {
    pub gateway: &'a Gateway,
    pub endpoint: ModelEndpoint,
    pub params: CompletionParams,
}

impl AuxLabeler for GatewayLabeler<'_> {
    fn label(&self, payload: &AuxPayload) -> Result<AuxLabel, GatewayError> {
        aux_label(self.gateway, &self.endpoint, &self.params, payload)
    }
}

pub fn aux_label(
    gateway: &Gateway,
    endpoint: &ModelEndpoint,
    params: &CompletionParams,
    payload: &AuxPayload,
) -> Result<AuxLabel, GatewayError> {
    let answer = gateway.complete(endpoint, &payload.to_bundle(), params)?;
    parse_aux_answer(payload.task(), &answer)
}
