//! Generation prompts and the parser for the model's structured answer.
//!
//! The instruction walks the model through three steps (meaning and
//! correction, search intent, rewrites by direction) and ends with a one-line
//! output contract:
//!
//! ```text
//! {"Query meaning": "...", "Correction": "...", "Search intent": "...", "Rewrite": "a, b"}
//! ```

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{normalize_text, FrequencyClass, Query, RagContext, RewriteDirection};

pub const GENERATION_INSTRUCTION_TEMPLATE: &str = include_str!("../resources/generation_instruction.txt");
pub const GENERATION_USER_TEMPLATE: &str = include_str!("../resources/generation_user.txt");
pub const EXPLANATION_HIGH: &str = include_str!("../resources/explanation_high.txt");
pub const EXPLANATION_MID: &str = include_str!("../resources/explanation_mid.txt");
pub const EXPLANATION_TAIL: &str = include_str!("../resources/explanation_tail.txt");
pub const QUALITY_INSTRUCTION: &str = include_str!("../resources/quality_instruction.txt");
pub const RELEVANCE_INSTRUCTION: &str = include_str!("../resources/relevance_instruction.txt");
pub const TYPO_INSTRUCTION: &str = include_str!("../resources/typo_instruction.txt");

/// Leading sentence shared by every generation instruction.
pub const GENERATION_ROLE_LINE: &str =
    "You are a query analysis expert for a food delivery platform.\nYou are provided with";

pub const DEFAULT_N_REWRITES: usize = 10;

const NONE_SENTINEL: &str = "None";

pub fn direction_definition(direction: RewriteDirection) -> &'static str {
    match direction {
        RewriteDirection::KeywordExtraction => include_str!("../resources/direction_keyword_extraction.txt"),
        RewriteDirection::Correction => include_str!("../resources/direction_correction.txt"),
        RewriteDirection::AliasSynonym => include_str!("../resources/direction_alias_synonym.txt"),
        RewriteDirection::MainDish => include_str!("../resources/direction_main_dish.txt"),
        RewriteDirection::LowRelevance => include_str!("../resources/direction_low_relevance.txt"),
    }
}

pub fn category_explanation(class: FrequencyClass) -> &'static str {
    match class {
        FrequencyClass::High => EXPLANATION_HIGH,
        FrequencyClass::Mid => EXPLANATION_MID,
        FrequencyClass::Tail => EXPLANATION_TAIL,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptBundle {
    pub instruction: String,
    pub user: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RequestError {
    #[error("n_rewrites must be at least 1")]
    ZeroRewrites,
    #[error("at least one rewrite direction is required")]
    NoDirections,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationRequest {
    pub query: Query,
    n_rewrites: usize,
    directions: BTreeSet<RewriteDirection>,
}

impl GenerationRequest {
    pub fn new(
        query: Query,
        n_rewrites: usize,
        directions: impl IntoIterator<Item = RewriteDirection>,
    ) -> Result<Self, RequestError> {
        let directions: BTreeSet<_> = directions.into_iter().collect();
        if n_rewrites == 0 {
            return Err(RequestError::ZeroRewrites);
        }
        if directions.is_empty() {
            return Err(RequestError::NoDirections);
        }
        Ok(Self {
            query,
            n_rewrites,
            directions,
        })
    }

    /// All five directions, default rewrite count.
    pub fn with_defaults(query: Query) -> Self {
        Self {
            query,
            n_rewrites: DEFAULT_N_REWRITES,
            directions: RewriteDirection::ALL.into_iter().collect(),
        }
    }

    pub fn n_rewrites(&self) -> usize {
        self.n_rewrites
    }

    pub fn directions(&self) -> &BTreeSet<RewriteDirection> {
        &self.directions
    }
}

/// Renders the associated context line: restaurants, a slash, then cuisines.
pub fn render_context(ctx: &RagContext) -> String {
    if ctx.is_empty() {
        return NONE_SENTINEL.to_string();
    }
    format!("{}/{}", ctx.restaurants().join(", "), ctx.cuisines().join(", "))
}

pub fn render_generation_instruction(n_rewrites: usize, directions: &BTreeSet<RewriteDirection>) -> String {
    let defs: Vec<&str> = directions.iter().map(|d| direction_definition(*d)).collect();
    GENERATION_INSTRUCTION_TEMPLATE
        .replace("{n_rewrites}", &n_rewrites.to_string())
        .replace("{directions}", &defs.join("\n\n"))
}

/// User turn of a generation prompt. Training samples omit the explanation.
pub fn render_generation_user(query_text: &str, ctx: &RagContext, explanation: Option<&str>) -> String {
    let user = GENERATION_USER_TEMPLATE
        .replace("{query}", query_text)
        .replace("{context}", &render_context(ctx));
    match explanation {
        Some(e) => user.replace("{explanation}", e),
        None => user
            .split("\n\nQuery Explanation:")
            .next()
            .unwrap_or_default()
            .to_string(),
    }
}

pub fn build_generation_prompt(req: &GenerationRequest) -> PromptBundle {
    let q = &req.query;
    PromptBundle {
        instruction: render_generation_instruction(req.n_rewrites, &req.directions),
        user: render_generation_user(q.text(), &q.rag_context, Some(category_explanation(q.frequency_class))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SearchIntent {
    Cuisine,
    Restaurant,
    Neither,
}

impl SearchIntent {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cuisine => "Cuisine",
            Self::Restaurant => "Restaurant",
            Self::Neither => "Neither",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cuisine" => Some(Self::Cuisine),
            "restaurant" => Some(Self::Restaurant),
            "neither" => Some(Self::Neither),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub query_meaning: String,
    pub correction: Option<String>,
    pub intent: SearchIntent,
    /// Normalized, duplicate-free, most efficient first.
    pub rewrites: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no brace-delimited block found")]
    NoStructure,
    #[error("missing field {0:?}")]
    MissingField(&'static str),
    #[error("rewrite list is empty after normalization")]
    EmptyRewrites,
    #[error("unrecognized search intent {0:?}")]
    InvalidIntent(String),
    #[error("strict parse failed: {0}")]
    Strict(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    #[default]
    Tolerant,
    Strict,
}

const KEY_MEANING: &str = "Query meaning";
const KEY_CORRECTION: &str = "Correction";
const KEY_INTENT: &str = "Search intent";
const KEY_REWRITE: &str = "Rewrite";

/// Renders an output in the exact one-line shape the instruction requests.
pub fn render_generation_output(out: &GenerationOutput) -> String {
    let q = |s: &str| serde_json::to_string(s).expect("string serialization");
    format!(
        "{{{}: {}, {}: {}, {}: {}, {}: {}}}",
        q(KEY_MEANING),
        q(&out.query_meaning),
        q(KEY_CORRECTION),
        q(out.correction.as_deref().unwrap_or(NONE_SENTINEL)),
        q(KEY_INTENT),
        q(out.intent.as_str()),
        q(KEY_REWRITE),
        q(&out.rewrites.join(", ")),
    )
}

pub fn parse_generation_output(raw: &str) -> Result<GenerationOutput, ParseError> {
    parse_generation_output_with(raw, ParseMode::Tolerant)
}

pub fn parse_generation_output_with(raw: &str, mode: ParseMode) -> Result<GenerationOutput, ParseError> {
    let fields = match mode {
        ParseMode::Strict => strict_fields(raw)?,
        ParseMode::Tolerant => tolerant_fields(raw)?,
    };
    let get = |name: &'static str| -> Result<&str, ParseError> {
        fields
            .iter()
            .find(|(k, _)| k == &canonical_key(name))
            .map(|(_, v)| v.as_str())
            .ok_or(ParseError::MissingField(name))
    };

    let query_meaning = get(KEY_MEANING)?.trim().to_string();
    let correction_raw = get(KEY_CORRECTION)?.trim();
    let correction = if correction_raw.eq_ignore_ascii_case(NONE_SENTINEL) {
        None
    } else {
        normalize_text(correction_raw).ok()
    };
    let intent_raw = get(KEY_INTENT)?;
    let intent = SearchIntent::parse(intent_raw).ok_or_else(|| ParseError::InvalidIntent(intent_raw.to_string()))?;
    let rewrites = split_rewrites(get(KEY_REWRITE)?, mode);
    if rewrites.is_empty() {
        return Err(ParseError::EmptyRewrites);
    }
    Ok(GenerationOutput {
        query_meaning,
        correction,
        intent,
        rewrites,
    })
}

fn split_rewrites(raw: &str, mode: ParseMode) -> Vec<String> {
    let is_sep = |c: char| match mode {
        ParseMode::Strict => c == ',',
        ParseMode::Tolerant => c == ',' || c == '，',
    };
    let mut out: Vec<String> = Vec::new();
    for piece in raw.split(is_sep) {
        if let Ok(norm) = normalize_text(piece) {
            if !out.contains(&norm) {
                out.push(norm);
            }
        }
    }
    out
}

/// Lower-cased, whitespace-collapsed key; `rewrites` folds into `rewrite`.
fn canonical_key(key: &str) -> String {
    let k = key
        .replace('_', " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_ascii_lowercase();
    if k == "rewrites" {
        "rewrite".to_string()
    } else {
        k
    }
}

fn strict_fields(raw: &str) -> Result<Vec<(String, String)>, ParseError> {
    let trimmed = raw.trim();
    if !(trimmed.starts_with('{') && trimmed.ends_with('}')) {
        return Err(ParseError::NoStructure);
    }
    let map: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(trimmed).map_err(|e| ParseError::Strict(e.to_string()))?;
    let mut out = Vec::new();
    for (k, v) in map {
        let v = v
            .as_str()
            .ok_or_else(|| ParseError::Strict(format!("value of {k:?} is not a string")))?;
        // strict mode wants the exact key spelling
        if [KEY_MEANING, KEY_CORRECTION, KEY_INTENT, KEY_REWRITE].contains(&k.as_str()) {
            out.push((canonical_key(&k), v.to_string()));
        }
    }
    Ok(out)
}

fn normalize_quotes(raw: &str) -> String {
    raw.replace("``", "\"")
        .replace("''", "\"")
        .chars()
        .map(|c| match c {
            '\u{201C}' | '\u{201D}' | '\u{201E}' | '\u{201F}' | '\u{FF02}' | '\u{300C}' | '\u{300D}' => '"',
            '\u{FF5B}' => '{',
            '\u{FF5D}' => '}',
            '\u{FF1A}' => ':',
            c => c,
        })
        .collect()
}

fn tolerant_fields(raw: &str) -> Result<Vec<(String, String)>, ParseError> {
    let text = normalize_quotes(raw);
    let mut found_block = false;
    for (start, _) in text.match_indices('{') {
        let Some(end) = matching_brace(&text, start) else {
            continue;
        };
        found_block = true;
        let block = &text[start..=end];
        let fields = json_fields(block).unwrap_or_else(|| scan_pairs(&block[1..block.len() - 1]));
        if fields.iter().any(|(k, _)| is_known_key(k)) {
            return Ok(fields);
        }
    }
    if found_block {
        // a block exists but carries none of the keys
        Err(ParseError::MissingField(KEY_MEANING))
    } else {
        Err(ParseError::NoStructure)
    }
}

fn is_known_key(k: &str) -> bool {
    [KEY_MEANING, KEY_CORRECTION, KEY_INTENT, KEY_REWRITE]
        .iter()
        .any(|known| canonical_key(known) == k)
}

fn json_fields(block: &str) -> Option<Vec<(String, String)>> {
    let map: serde_json::Map<String, serde_json::Value> = serde_json::from_str(block).ok()?;
    Some(
        map.into_iter()
            .map(|(k, v)| {
                let v = match v {
                    serde_json::Value::String(s) => s,
                    serde_json::Value::Array(items) => items
                        .iter()
                        .map(|i| i.as_str().map(str::to_string).unwrap_or_else(|| i.to_string()))
                        .collect::<Vec<_>>()
                        .join(", "),
                    other => other.to_string(),
                };
                (canonical_key(&k), v)
            })
            .collect(),
    )
}

/// Index of the brace closing the one at `start`, skipping quoted spans.
fn matching_brace(text: &str, start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_quote = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_quote {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_quote = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_quote = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(start + i);
                }
            }
            _ => {}
        }
    }
    None
}

/// Loose `key: value` scanner for blocks that are not valid JSON.
fn scan_pairs(body: &str) -> Vec<(String, String)> {
    let chars: Vec<char> = body.chars().collect();
    let mut i = 0;
    let mut out = Vec::new();
    loop {
        while i < chars.len() && (chars[i].is_whitespace() || chars[i] == ',') {
            i += 1;
        }
        if i >= chars.len() {
            break;
        }
        let key = if chars[i] == '"' {
            let (s, next) = read_quoted(&chars, i);
            i = next;
            s
        } else {
            let begin = i;
            while i < chars.len() && chars[i] != ':' {
                i += 1;
            }
            chars[begin..i].iter().collect::<String>()
        };
        while i < chars.len() && chars[i].is_whitespace() {
            i += 1;
        }
        if i >= chars.len() || chars[i] != ':' {
            break;
        }
        i += 1;
        while i < chars.len() && chars[i].is_whitespace() {
            i += 1;
        }
        let value = if i < chars.len() && chars[i] == '"' {
            let (s, next) = read_quoted(&chars, i);
            i = next;
            s
        } else {
            let begin = i;
            while i < chars.len() && !at_next_key(&chars, i) {
                i += 1;
            }
            chars[begin..i].iter().collect::<String>().trim().to_string()
        };
        out.push((canonical_key(key.trim()), value));
    }
    out
}

/// True at a comma that is followed (after whitespace) by a quote.
fn at_next_key(chars: &[char], i: usize) -> bool {
    if chars[i] != ',' {
        return false;
    }
    chars[i + 1..]
        .iter()
        .find(|c| !c.is_whitespace())
        .is_some_and(|c| *c == '"')
}

fn read_quoted(chars: &[char], open: usize) -> (String, usize) {
    let mut s = String::new();
    let mut i = open + 1;
    while i < chars.len() {
        match chars[i] {
            '\\' if i + 1 < chars.len() => {
                s.push(match chars[i + 1] {
                    'n' => '\n',
                    't' => '\t',
                    other => other,
                });
                i += 2;
            }
            '"' => return (s, i + 1),
            c => {
                s.push(c);
                i += 1;
            }
        }
    }
    (s, i)
}
