//! Post-training sample builders for the three tasks: rewrite generation,
//! rewrite quality (pairs) and relevance (triples).
//!
//! Samples are exported as JSONL with `task`, `instruction`, `user` and
//! `assistant` fields. Label provenance stays in memory.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Query, RagContext, RewriteDirection, RewriteRecord, RewriteState};
use crate::gateway::{
    render_group_labels, AuxLabel, AuxLabeler, AuxPayload, GatewayError, QualityLabel, RelevanceLevel,
};
use crate::jsonl::{append_jsonl, JsonlError};
use crate::prompting::{
    parse_generation_output_with, render_context, render_generation_instruction, render_generation_output,
    render_generation_user, GenerationOutput, ParseMode, SearchIntent, QUALITY_INSTRUCTION, RELEVANCE_INSTRUCTION,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("query {0:?} has no positive rewrites")]
    NoPositives(String),
    #[error("expected {expected} entries per sample, got {got}")]
    BadArity { expected: usize, got: usize },
    #[error("expected a typo label, got {0:?}")]
    WrongLabelTask(AuxLabel),
    #[error("assistant text {0:?} does not follow the task grammar")]
    Grammar(String),
    #[error(transparent)]
    Aux(#[from] GatewayError),
    #[error(transparent)]
    Io(#[from] JsonlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingTask {
    RewriteGeneration,
    RewriteQuality,
    Relevance,
}

impl TrainingTask {
    pub fn file_stem(self) -> &'static str {
        match self {
            Self::RewriteGeneration => "generation",
            Self::RewriteQuality => "quality",
            Self::Relevance => "relevance",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    OnlineSignal,
    AuxLlm,
    RuleOracle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub task: TrainingTask,
    pub instruction: String,
    pub user: String,
    pub assistant: String,
    /// Which labeler produced each labeled field.
    #[serde(skip)]
    pub provenance: BTreeMap<String, LabelSource>,
}

/// Order positives by Level-1 count, then Level-2 count (both descending), then text.
pub fn order_positives(records: &[RewriteRecord]) -> Vec<String> {
    let mut positives: Vec<&RewriteRecord> = records.iter().filter(|r| r.state == RewriteState::Positive).collect();
    positives.sort_by(|a, b| {
        b.level1_count
            .cmp(&a.level1_count)
            .then(b.level2_count.cmp(&a.level2_count))
            .then_with(|| a.text.cmp(&b.text))
    });
    positives.into_iter().map(|r| r.text.clone()).collect()
}

fn closest_to<'a>(query: &str, positives: &'a [String]) -> Option<&'a String> {
    positives.iter().min_by_key(|p| strsim::levenshtein(query, p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerationLabels {
    pub typo: AuxLabel,
    pub typo_source: LabelSource,
    pub intent: SearchIntent,
    pub intent_source: LabelSource,
}

/// The assistant turn answers the three sub-tasks in the generation output
/// format: typo verdict (with the positive nearest the query by edit
/// distance as the correction), intent, and the positives in the given order.
pub fn build_generation_sample(
    query: &Query,
    positives: &[String],
    labels: &GenerationLabels,
    n_rewrites: usize,
) -> Result<TrainingSample, TrainError> {
    let AuxLabel::Typo(is_typo) = labels.typo else {
        return Err(TrainError::WrongLabelTask(labels.typo));
    };
    let first = positives
        .first()
        .ok_or_else(|| TrainError::NoPositives(query.id.clone()))?;
    let output = GenerationOutput {
        query_meaning: if is_typo {
            "The query is a typo.".to_string()
        } else {
            "The query is not a typo.".to_string()
        },
        correction: is_typo.then(|| closest_to(query.text(), positives).unwrap_or(first).clone()),
        intent: labels.intent,
        rewrites: positives.to_vec(),
    };
    let directions = RewriteDirection::ALL.into_iter().collect();
    let provenance = BTreeMap::from([
        ("typo".to_string(), labels.typo_source),
        ("intent".to_string(), labels.intent_source),
        ("rewrites".to_string(), LabelSource::OnlineSignal),
    ]);
    Ok(TrainingSample {
        task: TrainingTask::RewriteGeneration,
        instruction: render_generation_instruction(n_rewrites, &directions),
        user: render_generation_user(query.text(), &query.rag_context.top(), None),
        assistant: format!("Output: {}", render_generation_output(&output)),
        provenance,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QualityEntry {
    pub query: String,
    pub context: RagContext,
    pub rewrite: String,
    pub label: QualityLabel,
    pub source: LabelSource,
}

pub fn build_quality_sample(entries: &[QualityEntry]) -> Result<TrainingSample, TrainError> {
    if entries.len() != 2 {
        return Err(TrainError::BadArity {
            expected: 2,
            got: entries.len(),
        });
    }
    let user = entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let n = i + 1;
            format!(
                "Query{n}: {}; Associated restaurant/Cuisine{n}:{}; Rewrite{n}: {}",
                e.query,
                render_context(&e.context),
                e.rewrite
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n");
    let labels: Vec<&str> = entries.iter().map(|e| e.label.as_str()).collect();
    let provenance = entries
        .iter()
        .enumerate()
        .map(|(i, e)| (format!("label{}", i + 1), e.source))
        .collect();
    Ok(TrainingSample {
        task: TrainingTask::RewriteQuality,
        instruction: QUALITY_INSTRUCTION.to_string(),
        user,
        assistant: format!("Output: {{{}}}", render_group_labels(&labels)),
        provenance,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelevanceEntry {
    pub query: String,
    pub restaurant: String,
    pub cuisine: String,
    pub label: RelevanceLevel,
}

pub fn build_relevance_sample(entries: &[RelevanceEntry]) -> Result<TrainingSample, TrainError> {
    if entries.len() != 3 {
        return Err(TrainError::BadArity {
            expected: 3,
            got: entries.len(),
        });
    }
    let user = entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let n = i + 1;
            format!(
                "Query{n}: {}; Restaurant{n}: {}; Cuisine{n}: {}",
                e.query, e.restaurant, e.cuisine
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n");
    let labels: Vec<&str> = entries.iter().map(|e| e.label.as_str()).collect();
    let provenance = (1..=3)
        .map(|i| (format!("label{i}"), LabelSource::RuleOracle))
        .chain((1..=3).map(|i| (format!("label{i}_agreement"), LabelSource::AuxLlm)))
        .collect();
    Ok(TrainingSample {
        task: TrainingTask::Relevance,
        instruction: RELEVANCE_INSTRUCTION.to_string(),
        user,
        assistant: format!("Output: {{{}}}", render_group_labels(&labels)),
        provenance,
    })
}

/// A relevance entry judged by the relevance module and by the auxiliary model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JudgedRelevance {
    pub query: String,
    pub restaurant: String,
    pub cuisine: String,
    pub module_label: RelevanceLevel,
    pub aux_label: RelevanceLevel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisagreementDropped {
    pub query: String,
    pub restaurant: String,
    pub cuisine: String,
    pub module_label: RelevanceLevel,
    pub aux_label: RelevanceLevel,
}

/// Keeps entries where both judges agree; reports the rest.
pub fn agreement_filter(judged: Vec<JudgedRelevance>) -> (Vec<RelevanceEntry>, Vec<DisagreementDropped>) {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for j in judged {
        if j.module_label == j.aux_label {
            kept.push(RelevanceEntry {
                query: j.query,
                restaurant: j.restaurant,
                cuisine: j.cuisine,
                label: j.module_label,
            });
        } else {
            dropped.push(DisagreementDropped {
                query: j.query,
                restaurant: j.restaurant,
                cuisine: j.cuisine,
                module_label: j.module_label,
                aux_label: j.aux_label,
            });
        }
    }
    (kept, dropped)
}

/// Positive records are `Yes` from the online signal; the rest ask the auxiliary labeler.
/// Retired records are skipped.
pub fn assign_quality_labels(
    query: &Query,
    rewrites: &[RewriteRecord],
    aux: &dyn AuxLabeler,
    aux_source: LabelSource,
) -> Result<Vec<QualityEntry>, TrainError> {
    let mut out = Vec::new();
    for r in rewrites.iter().filter(|r| r.state != RewriteState::Retired) {
        let (label, source) = if r.state == RewriteState::Positive {
            (QualityLabel::Yes, LabelSource::OnlineSignal)
        } else {
            let payload = AuxPayload::Quality {
                query: query.text().to_string(),
                context: query.rag_context.clone(),
                rewrite: r.text.clone(),
            };
            match aux.label(&payload)? {
                AuxLabel::Quality(q) => (q, aux_source),
                other => return Err(GatewayError::UnparsableLabel(other.value().to_string()).into()),
            }
        };
        out.push(QualityEntry {
            query: query.text().to_string(),
            context: query.rag_context.clone(),
            rewrite: r.text.clone(),
            label,
            source,
        });
    }
    Ok(out)
}

/// Seeded shuffle, then full groups of `size`; a short tail is dropped.
pub fn group_seeded<T>(mut items: Vec<T>, size: usize, seed: u64) -> Vec<Vec<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
    let mut groups = Vec::with_capacity(items.len() / size.max(1));
    let mut iter = items.into_iter();
    loop {
        let group: Vec<T> = iter.by_ref().take(size).collect();
        if group.len() < size || size == 0 {
            break;
        }
        groups.push(group);
    }
    groups
}

fn group_words(assistant: &str) -> Result<Vec<&str>, TrainError> {
    let inner = assistant
        .strip_prefix("Output: {")
        .and_then(|s| s.strip_suffix('}'))
        .ok_or_else(|| TrainError::Grammar(assistant.to_string()))?;
    Ok(inner
        .split(|c: char| c == '.' || c.is_whitespace() || c.is_ascii_digit())
        .filter(|w| !w.is_empty())
        .collect())
}

pub fn parse_quality_output(assistant: &str) -> Result<Vec<QualityLabel>, TrainError> {
    let labels = group_words(assistant)?
        .into_iter()
        .map(|w| match w {
            "Yes" => Ok(QualityLabel::Yes),
            "No" => Ok(QualityLabel::No),
            _ => Err(TrainError::Grammar(assistant.to_string())),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let names: Vec<&str> = labels.iter().map(|l| l.as_str()).collect();
    if labels.len() != 2 || format!("Output: {{{}}}", render_group_labels(&names)) != assistant {
        return Err(TrainError::Grammar(assistant.to_string()));
    }
    Ok(labels)
}

pub fn parse_relevance_output(assistant: &str) -> Result<Vec<RelevanceLevel>, TrainError> {
    let labels = group_words(assistant)?
        .into_iter()
        .map(|w| match w {
            "High" => Ok(RelevanceLevel::High),
            "Low" => Ok(RelevanceLevel::Low),
            "None" => Ok(RelevanceLevel::None),
            _ => Err(TrainError::Grammar(assistant.to_string())),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let names: Vec<&str> = labels.iter().map(|l| l.as_str()).collect();
    if labels.len() != 3 || format!("Output: {{{}}}", render_group_labels(&names)) != assistant {
        return Err(TrainError::Grammar(assistant.to_string()));
    }
    Ok(labels)
}

/// Checks an assistant string against its task's grammar.
pub fn validate_assistant(task: TrainingTask, assistant: &str) -> Result<(), TrainError> {
    match task {
        TrainingTask::RewriteQuality => parse_quality_output(assistant).map(|_| ()),
        TrainingTask::Relevance => parse_relevance_output(assistant).map(|_| ()),
        TrainingTask::RewriteGeneration => {
            let body = assistant
                .strip_prefix("Output: ")
                .ok_or_else(|| TrainError::Grammar(assistant.to_string()))?;
            parse_generation_output_with(body, ParseMode::Strict)
                .map(|_| ())
                .map_err(|_| TrainError::Grammar(assistant.to_string()))
        }
    }
}

pub fn append_samples(path: &Path, samples: &[TrainingSample]) -> Result<(), TrainError> {
    append_jsonl(path, samples)?;
    Ok(())
}
