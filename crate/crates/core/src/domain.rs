//! Shared value types, text normalization and query-frequency classes.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("text is empty after normalization")]
    EmptyText,
    #[error("invalid frequency thresholds: high_min={high_min}, mid_min={mid_min}")]
    InvalidThresholds { high_min: u64, mid_min: u64 },
    #[error("rag context entry is empty")]
    EmptyContextEntry,
    #[error("item {0} is purchased but not clicked")]
    PurchaseWithoutClick(String),
}

/// Canonical form used for every identity comparison of query and rewrite text.
///
/// ASCII letters are lower-cased before NFC composition; other scripts are left
/// as-is. Whitespace runs collapse to one space and the ends are trimmed.
pub fn normalize_text(raw: &str) -> Result<String, DomainError> {
    let lowered: String = raw.chars().map(|c| c.to_ascii_lowercase()).collect();
    let composed: String = lowered.nfc().collect();
    let joined = composed.split_whitespace().collect::<Vec<_>>().join(" ");
    if joined.is_empty() {
        Err(DomainError::EmptyText)
    } else {
        Ok(joined)
    }
}

/// Whitespace tokens of already-normalized text.
pub fn tokens(normalized: &str) -> impl Iterator<Item = &str> {
    normalized.split(' ').filter(|t| !t.is_empty())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyClass {
    High,
    Mid,
    Tail,
}

impl FrequencyClass {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::High => "high",
            Self::Mid => "mid",
            Self::Tail => "tail",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyThresholds {
    high_min: u64,
    mid_min: u64,
}

impl FrequencyThresholds {
    pub fn new(high_min: u64, mid_min: u64) -> Result<Self, DomainError> {
        if mid_min >= 1 && high_min > mid_min {
            Ok(Self { high_min, mid_min })
        } else {
            Err(DomainError::InvalidThresholds { high_min, mid_min })
        }
    }

    pub fn high_min(&self) -> u64 {
        self.high_min
    }

    pub fn mid_min(&self) -> u64 {
        self.mid_min
    }
}

impl Default for FrequencyThresholds {
    fn default() -> Self {
        Self {
            high_min: 500,
            mid_min: 50,
        }
    }
}

pub fn classify_frequency(observed_count: u64, thresholds: &FrequencyThresholds) -> FrequencyClass {
    if observed_count >= thresholds.high_min {
        FrequencyClass::High
    } else if observed_count >= thresholds.mid_min {
        FrequencyClass::Mid
    } else {
        FrequencyClass::Tail
    }
}

/// Restaurants and cuisines historically interacted with under a query,
/// most-interacted first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RagContext {
    restaurants: Vec<String>,
    cuisines: Vec<String>,
}

impl RagContext {
    /// Trims entries and drops repeats (first occurrence wins). Empty entries are rejected.
    pub fn new(restaurants: Vec<String>, cuisines: Vec<String>) -> Result<Self, DomainError> {
        Ok(Self {
            restaurants: dedup_entries(restaurants)?,
            cuisines: dedup_entries(cuisines)?,
        })
    }

    pub fn restaurants(&self) -> &[String] {
        &self.restaurants
    }

    pub fn cuisines(&self) -> &[String] {
        &self.cuisines
    }

    pub fn is_empty(&self) -> bool {
        self.restaurants.is_empty() && self.cuisines.is_empty()
    }

    /// Restaurants then cuisines.
    pub fn entries(&self) -> impl Iterator<Item = &String> {
        self.restaurants.iter().chain(self.cuisines.iter())
    }

    /// Context reduced to the single most-interacted restaurant and cuisine.
    pub fn top(&self) -> RagContext {
        RagContext {
            restaurants: self.restaurants.iter().take(1).cloned().collect(),
            cuisines: self.cuisines.iter().take(1).cloned().collect(),
        }
    }
}

fn dedup_entries(entries: Vec<String>) -> Result<Vec<String>, DomainError> {
    let mut out: Vec<String> = Vec::with_capacity(entries.len());
    for e in entries {
        let e = e.trim().to_string();
        if e.is_empty() {
            return Err(DomainError::EmptyContextEntry);
        }
        if !out.contains(&e) {
            out.push(e);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    text: String,
    pub frequency_class: FrequencyClass,
    pub observed_count: u64,
    pub rag_context: RagContext,
}

impl Query {
    /// Builds a query whose text is normalized and whose class follows from the count.
    pub fn new(
        id: impl Into<String>,
        text: &str,
        observed_count: u64,
        thresholds: &FrequencyThresholds,
        rag_context: RagContext,
    ) -> Result<Self, DomainError> {
        Ok(Self {
            id: id.into(),
            text: normalize_text(text)?,
            frequency_class: classify_frequency(observed_count, thresholds),
            observed_count,
            rag_context,
        })
    }

    /// Query with an explicit class, for benchmark rows that carry a label instead of a count.
    pub fn with_class(
        id: impl Into<String>,
        text: &str,
        frequency_class: FrequencyClass,
        rag_context: RagContext,
    ) -> Result<Self, DomainError> {
        Ok(Self {
            id: id.into(),
            text: normalize_text(text)?,
            frequency_class,
            observed_count: 0,
            rag_context,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewriteDirection {
    KeywordExtraction,
    Correction,
    AliasSynonym,
    MainDish,
    LowRelevance,
}

impl RewriteDirection {
    pub const ALL: [RewriteDirection; 5] = [
        Self::KeywordExtraction,
        Self::Correction,
        Self::AliasSynonym,
        Self::MainDish,
        Self::LowRelevance,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "iteration")]
pub enum RewriteSource {
    PublicLlm,
    PostTrainedLlm(u32),
    Carryover,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewriteState {
    Candidate,
    Positive,
    Retired,
}

/// Lifecycle of one rewrite inside the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteRecord {
    pub query_id: String,
    pub text: String,
    pub source: RewriteSource,
    pub state: RewriteState,
    pub level1_count: u64,
    pub level2_count: u64,
    pub first_iteration: u32,
    pub last_seen_iteration: u32,
}

impl RewriteRecord {
    pub fn candidate(query_id: impl Into<String>, text: String, source: RewriteSource, iteration: u32) -> Self {
        Self {
            query_id: query_id.into(),
            text,
            source,
            state: RewriteState::Candidate,
            level1_count: 0,
            level2_count: 0,
            first_iteration: iteration,
            last_seen_iteration: iteration,
        }
    }

    pub fn key(&self) -> (String, String) {
        (self.query_id.clone(), self.text.clone())
    }

    pub fn signal_count(&self) -> u64 {
        self.level1_count + self.level2_count
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    Restaurant,
    Cuisine,
}

/// A retrievable candidate, carrying its replayed interaction flags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub kind: ItemKind,
    pub title: String,
    #[serde(default)]
    pub clicked: bool,
    #[serde(default)]
    pub purchased: bool,
}

impl Item {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.purchased && !self.clicked {
            return Err(DomainError::PurchaseWithoutClick(self.id.clone()));
        }
        if self.title.trim().is_empty() {
            return Err(DomainError::EmptyText);
        }
        Ok(())
    }
}

impl fmt::Display for ItemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Restaurant => f.write_str("restaurant"),
            Self::Cuisine => f.write_str("cuisine"),
        }
    }
}
