//! Offline evaluation: precision coverage against ground-truth rewrites,
//! relevance-high rate, and recall@K of clicked candidates when the origin
//! query is replaced with its rewrites.

pub mod embed;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{normalize_text, DomainError, FrequencyClass, Item, ItemKind, Query, RagContext};
use crate::gateway::{GatewayError, RelevanceLevel};
use crate::jsonl::{read_jsonl, JsonlError};
use crate::rules::RelevanceOracle;
use embed::{inner, EmbedError, Embedder};

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Io(#[from] JsonlError),
    #[error("benchmark row {row}: {source}")]
    InvalidRow { row: usize, source: DomainError },
    #[error("benchmark row {0} has an empty ground-truth set")]
    EmptyGroundTruth(usize),
    #[error("K must be positive")]
    InvalidK,
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Oracle(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchIEntry {
    pub query: Query,
    pub ground_truth: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BenchmarkI {
    pub entries: Vec<BenchIEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchIIEntry {
    pub query: Query,
    pub candidates: Vec<Item>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BenchmarkII {
    pub entries: Vec<BenchIIEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchIRow {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub query: String,
    pub frequency_class: FrequencyClass,
    #[serde(default)]
    pub restaurants: Vec<String>,
    #[serde(default)]
    pub cuisines: Vec<String>,
    pub ground_truth: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchCandidate {
    pub id: String,
    pub kind: ItemKind,
    pub title: String,
    #[serde(default)]
    pub clicked: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchIIRow {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub query: String,
    pub candidates: Vec<BenchCandidate>,
}

fn row_query(
    row: usize,
    id: &Option<String>,
    text: &str,
    class: FrequencyClass,
    ctx: RagContext,
) -> Result<Query, EvalError> {
    let invalid = |source| EvalError::InvalidRow { row, source };
    let id = match id {
        Some(id) => id.clone(),
        None => normalize_text(text).map_err(invalid)?,
    };
    Query::with_class(id, text, class, ctx).map_err(invalid)
}

impl BenchmarkI {
    pub fn from_rows(rows: Vec<BenchIRow>) -> Result<Self, EvalError> {
        let mut entries = Vec::with_capacity(rows.len());
        for (i, row) in rows.into_iter().enumerate() {
            let ctx = RagContext::new(row.restaurants, row.cuisines)
                .map_err(|source| EvalError::InvalidRow { row: i, source })?;
            let query = row_query(i, &row.id, &row.query, row.frequency_class, ctx)?;
            let ground_truth: BTreeSet<String> =
                row.ground_truth.iter().filter_map(|g| normalize_text(g).ok()).collect();
            if ground_truth.is_empty() {
                return Err(EvalError::EmptyGroundTruth(i));
            }
            entries.push(BenchIEntry { query, ground_truth });
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        Self::from_rows(read_jsonl(path)?)
    }
}

impl BenchmarkII {
    /// Entries without any clicked candidate are skipped with a warning.
    pub fn from_rows(rows: Vec<BenchIIRow>) -> Result<Self, EvalError> {
        let mut entries = Vec::with_capacity(rows.len());
        for (i, row) in rows.into_iter().enumerate() {
            let query = row_query(i, &row.id, &row.query, FrequencyClass::Tail, RagContext::default())?;
            if !row.candidates.iter().any(|c| c.clicked) {
                warn!("benchmark II row {i} ({}) has no clicked candidate, skipped", query.id);
                continue;
            }
            let candidates = row
                .candidates
                .into_iter()
                .map(|c| Item {
                    id: c.id,
                    kind: c.kind,
                    title: c.title,
                    clicked: c.clicked,
                    purchased: false,
                })
                .collect();
            entries.push(BenchIIEntry { query, candidates });
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        Self::from_rows(read_jsonl(path)?)
    }
}

/// One line of a rewrites file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteRow {
    pub query_id: String,
    pub rewrites: Vec<String>,
}

pub fn load_rewrites(path: &Path) -> Result<BTreeMap<String, Vec<String>>, EvalError> {
    let rows: Vec<RewriteRow> = read_jsonl(path)?;
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for row in rows {
        out.entry(row.query_id).or_default().extend(row.rewrites);
    }
    Ok(out)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// |generated ∩ GT| / |GT| per query, compared after normalization.
pub fn precision_per_query(generated: &BTreeMap<String, Vec<String>>, bench: &BenchmarkI) -> Vec<(String, f64)> {
    bench
        .entries
        .iter()
        .map(|e| {
            let hits: BTreeSet<String> = generated
                .get(&e.query.id)
                .into_iter()
                .flatten()
                .filter_map(|g| normalize_text(g).ok())
                .filter(|g| e.ground_truth.contains(g))
                .collect();
            (e.query.id.clone(), hits.len() as f64 / e.ground_truth.len() as f64)
        })
        .collect()
}

pub fn precision_coverage(generated: &BTreeMap<String, Vec<String>>, bench: &BenchmarkI) -> f64 {
    mean(precision_per_query(generated, bench).into_iter().map(|(_, p)| p))
}

pub fn relevance_levels(
    pairs: &[(Query, String)],
    oracle: &dyn RelevanceOracle,
) -> Result<Vec<RelevanceLevel>, GatewayError> {
    pairs.par_iter().map(|(q, rw)| oracle.relevance(q, rw)).collect()
}

/// Fraction of pairs the oracle labels `High`.
pub fn relevance_rate(pairs: &[(Query, String)], oracle: &dyn RelevanceOracle) -> Result<f64, GatewayError> {
    let levels = relevance_levels(pairs, oracle)?;
    Ok(mean(
        levels.iter().map(|l| f64::from(u8::from(*l == RelevanceLevel::High))),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecall {
    pub query_id: String,
    pub recall_at: BTreeMap<usize, f64>,
    /// No usable rewrite was supplied, so the origin query was scored instead.
    pub fell_back_to_origin: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallOutcome {
    pub recall_at: BTreeMap<usize, f64>,
    pub per_query: Vec<QueryRecall>,
}

/// Score of each candidate: the max inner product over the rewrite vectors.
pub fn candidate_scores(
    rewrite_vecs: &[Vec<f64>],
    candidates: &[Item],
    embedder: &dyn Embedder,
) -> Result<Vec<f64>, EvalError> {
    candidates
        .iter()
        .map(|c| {
            let v = embedder.embed(&c.title)?;
            Ok(rewrite_vecs
                .iter()
                .map(|r| inner(r, &v))
                .fold(f64::NEG_INFINITY, f64::max))
        })
        .collect()
}

/// Indices of the K best candidates: score descending, then item id ascending.
pub fn top_k_indices(scores: &[f64], candidates: &[Item], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let k = k.min(idx.len());
    if k == 0 {
        return Vec::new();
    }
    let cmp = |a: &usize, b: &usize| {
        scores[*b]
            .total_cmp(&scores[*a])
            .then_with(|| candidates[*a].id.cmp(&candidates[*b].id))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx
}

fn recall_of(top: &[usize], candidates: &[Item]) -> f64 {
    let clicked = candidates.iter().filter(|c| c.clicked).count();
    if clicked == 0 {
        return 0.0;
    }
    top.iter().filter(|&&i| candidates[i].clicked).count() as f64 / clicked as f64
}

pub fn recall_for_entry(
    rewrites: Option<&Vec<String>>,
    entry: &BenchIIEntry,
    ks: &[usize],
    embedder: &dyn Embedder,
) -> Result<QueryRecall, EvalError> {
    let mut vecs = Vec::new();
    for rw in rewrites.into_iter().flatten() {
        match embedder.embed(rw) {
            Ok(v) => vecs.push(v),
            Err(EmbedError::EmptyText) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    let fell_back = vecs.is_empty();
    if fell_back {
        vecs.push(embedder.embed(entry.query.text())?);
    }
    let scores = candidate_scores(&vecs, &entry.candidates, embedder)?;
    let recall_at = ks
        .iter()
        .map(|&k| {
            (
                k,
                recall_of(&top_k_indices(&scores, &entry.candidates, k), &entry.candidates),
            )
        })
        .collect();
    Ok(QueryRecall {
        query_id: entry.query.id.clone(),
        recall_at,
        fell_back_to_origin: fell_back,
    })
}

pub fn recall_at_k(
    rewrites: &BTreeMap<String, Vec<String>>,
    bench: &BenchmarkII,
    ks: &[usize],
    embedder: &dyn Embedder,
) -> Result<RecallOutcome, EvalError> {
    if ks.contains(&0) {
        return Err(EvalError::InvalidK);
    }
    let per_query: Vec<QueryRecall> = bench
        .entries
        .par_iter()
        .map(|e| recall_for_entry(rewrites.get(&e.query.id), e, ks, embedder))
        .collect::<Result<_, _>>()?;
    let recall_at = ks
        .iter()
        .map(|k| (*k, mean(per_query.iter().map(|q| q.recall_at[k]))))
        .collect();
    Ok(RecallOutcome { recall_at, per_query })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRelevance {
    pub query_id: String,
    pub rewrite: String,
    pub level: RelevanceLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPrecision {
    pub query_id: String,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub precision: Vec<QueryPrecision>,
    pub relevance: Vec<PairRelevance>,
    pub recall: Vec<QueryRecall>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source: String,
    pub precision: Option<f64>,
    pub relevance_high_rate: Option<f64>,
    pub recall_at: BTreeMap<usize, f64>,
    pub metadata: BTreeMap<String, String>,
    pub per_query: Breakdown,
}

impl EvalReport {
    /// Aggregates recomputed from the breakdown.
    pub fn recompute(&self) -> (Option<f64>, Option<f64>, BTreeMap<usize, f64>) {
        let precision = self
            .precision
            .map(|_| mean(self.per_query.precision.iter().map(|p| p.precision)));
        let relevance = self.relevance_high_rate.map(|_| {
            mean(
                self.per_query
                    .relevance
                    .iter()
                    .map(|p| f64::from(u8::from(p.level == RelevanceLevel::High))),
            )
        });
        let recall = self
            .recall_at
            .keys()
            .map(|k| (*k, mean(self.per_query.recall.iter().map(|q| q.recall_at[k]))))
            .collect();
        (precision, relevance, recall)
    }

    pub fn table_header(ks: &[usize]) -> String {
        let mut s = String::from("| Source | Precision | Relevance |");
        for k in ks {
            let _ = write!(s, " Top{k} |");
        }
        s
    }

    pub fn table_row(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let mut s = format!(
            "| {} | {} | {} |",
            self.source,
            cell(self.precision),
            cell(self.relevance_high_rate)
        );
        for v in self.recall_at.values() {
            let _ = write!(s, " {v:.4} |");
        }
        s
    }

    pub fn to_table(&self) -> String {
        let ks: Vec<usize> = self.recall_at.keys().copied().collect();
        format!("{}\n{}\n", Self::table_header(&ks), self.table_row())
    }
}

pub struct EvalInputs<'a> {
    pub source: &'a str,
    pub rewrites: &'a BTreeMap<String, Vec<String>>,
    pub bench_i: Option<&'a BenchmarkI>,
    pub bench_ii: Option<&'a BenchmarkII>,
    pub ks: &'a [usize],
}

/// Precision and relevance run on Benchmark I, recall on Benchmark II.
pub fn evaluate(
    inputs: &EvalInputs<'_>,
    oracle: &dyn RelevanceOracle,
    embedder: &dyn Embedder,
) -> Result<EvalReport, EvalError> {
    let mut breakdown = Breakdown {
        precision: Vec::new(),
        relevance: Vec::new(),
        recall: Vec::new(),
    };
    let mut precision = None;
    let mut relevance = None;
    if let Some(bench) = inputs.bench_i {
        breakdown.precision = precision_per_query(inputs.rewrites, bench)
            .into_iter()
            .map(|(query_id, precision)| QueryPrecision { query_id, precision })
            .collect();
        precision = Some(mean(breakdown.precision.iter().map(|p| p.precision)));

        let mut pairs = Vec::new();
        for e in &bench.entries {
            let rws: BTreeSet<String> = inputs
                .rewrites
                .get(&e.query.id)
                .into_iter()
                .flatten()
                .filter_map(|r| normalize_text(r).ok())
                .collect();
            pairs.extend(rws.into_iter().map(|r| (e.query.clone(), r)));
        }
        let levels = relevance_levels(&pairs, oracle)?;
        breakdown.relevance = pairs
            .into_iter()
            .zip(levels)
            .map(|((q, rewrite), level)| PairRelevance {
                query_id: q.id,
                rewrite,
                level,
            })
            .collect();
        relevance = Some(mean(
            breakdown
                .relevance
                .iter()
                .map(|p| f64::from(u8::from(p.level == RelevanceLevel::High))),
        ));
    }
    let mut recall_at = BTreeMap::new();
    if let Some(bench) = inputs.bench_ii {
        let outcome = recall_at_k(inputs.rewrites, bench, inputs.ks, embedder)?;
        recall_at = outcome.recall_at;
        breakdown.recall = outcome.per_query;
    }
    let fallbacks = breakdown.recall.iter().filter(|q| q.fell_back_to_origin).count();
    let metadata = BTreeMap::from([
        ("precision_aggregation".to_string(), "per_query_mean".to_string()),
        ("relevance_aggregation".to_string(), "pair_fraction_high".to_string()),
        (
            "recall_scoring".to_string(),
            "max_inner_product_over_rewrites".to_string(),
        ),
        ("recall_tie_break".to_string(), "score_desc_item_id_asc".to_string()),
        ("recall_origin_fallbacks".to_string(), fallbacks.to_string()),
        ("embedder_dim".to_string(), embedder.dim().to_string()),
    ]);
    Ok(EvalReport {
        source: inputs.source.to_string(),
        precision,
        relevance_high_rate: relevance,
        recall_at,
        metadata,
        per_query: breakdown,
    })
}
