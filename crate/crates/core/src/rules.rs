//! Deterministic rule oracles used when no external labeler is configured.
//!
//! All comparisons run on normalized text against the query's associated
//! restaurants and cuisines.
//!
//! - quality: `No` for an empty rewrite or one equal to the query; otherwise
//!   `Yes` when the rewrite shares a token with any associated entry.
//! - relevance: `High` when the rewrite equals an entry or its tokens are a
//!   subset of one entry's tokens, `Low` when it shares any token, else `None`.
//! - typo: `yes` when the query is not itself an entry or entry token, has at
//!   least four characters, and lies within edit distance 1..=2 of one.
//! - intent: `Cuisine` when the rewrite matches a cuisine name, `Restaurant`
//!   when it matches a restaurant name, else `Neither`.

use std::collections::BTreeSet;

use crate::domain::{normalize_text, tokens, Query, RagContext};
use crate::gateway::{AuxLabel, AuxLabeler, AuxPayload, GatewayError, QualityLabel, RelevanceLevel};
use crate::prompting::SearchIntent;

fn normalized_entries(names: &[String]) -> Vec<String> {
    names.iter().filter_map(|n| normalize_text(n).ok()).collect()
}

fn token_set(text: &str) -> BTreeSet<&str> {
    tokens(text).collect()
}

pub fn rule_quality(query: &str, ctx: &RagContext, rewrite: &str) -> QualityLabel {
    let (Ok(rewrite), Ok(query)) = (normalize_text(rewrite), normalize_text(query)) else {
        return QualityLabel::No;
    };
    if rewrite == query {
        return QualityLabel::No;
    }
    let rw_tokens = token_set(&rewrite);
    let entries = normalized_entries(ctx.restaurants())
        .into_iter()
        .chain(normalized_entries(ctx.cuisines()));
    for entry in entries {
        if tokens(&entry).any(|t| rw_tokens.contains(t)) {
            return QualityLabel::Yes;
        }
    }
    QualityLabel::No
}

pub fn rule_relevance(ctx: &RagContext, rewrite: &str) -> RelevanceLevel {
    let Ok(rewrite) = normalize_text(rewrite) else {
        return RelevanceLevel::None;
    };
    let rw_tokens = token_set(&rewrite);
    let mut best = RelevanceLevel::None;
    for entry in normalized_entries(ctx.restaurants())
        .into_iter()
        .chain(normalized_entries(ctx.cuisines()))
    {
        let entry_tokens = token_set(&entry);
        if entry == rewrite || rw_tokens.is_subset(&entry_tokens) {
            return RelevanceLevel::High;
        }
        if !rw_tokens.is_disjoint(&entry_tokens) {
            best = RelevanceLevel::Low;
        }
    }
    best
}

pub fn rule_typo(query: &str, ctx: &RagContext) -> bool {
    let Ok(query) = normalize_text(query) else {
        return false;
    };
    if query.chars().count() < 4 {
        return false;
    }
    let mut references: BTreeSet<String> = BTreeSet::new();
    for entry in ctx.entries().filter_map(|e| normalize_text(e).ok()) {
        references.extend(tokens(&entry).map(str::to_string));
        references.insert(entry);
    }
    if references.contains(&query) {
        return false;
    }
    references
        .iter()
        .any(|r| (1..=2).contains(&strsim::levenshtein(&query, r)))
}

pub fn rule_intent(ctx: &RagContext, rewrite: &str) -> SearchIntent {
    let Ok(rewrite) = normalize_text(rewrite) else {
        return SearchIntent::Neither;
    };
    if normalized_entries(ctx.cuisines()).contains(&rewrite) {
        SearchIntent::Cuisine
    } else if normalized_entries(ctx.restaurants()).contains(&rewrite) {
        SearchIntent::Restaurant
    } else {
        SearchIntent::Neither
    }
}

/// Scores a (query, rewrite) pair on the three relevance levels.
pub trait RelevanceOracle: Send + Sync {
    fn relevance(&self, query: &Query, rewrite: &str) -> Result<RelevanceLevel, GatewayError>;
}

/// Maps a positive rewrite to the intent it expresses for its query.
pub trait IntentOracle: Send + Sync {
    fn intent(&self, query: &Query, rewrite: &str) -> SearchIntent;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RuleOracle;

impl AuxLabeler for RuleOracle {
    fn label(&self, payload: &AuxPayload) -> Result<AuxLabel, GatewayError> {
        Ok(match payload {
            AuxPayload::Typo { query, context } => AuxLabel::Typo(rule_typo(query, context)),
            AuxPayload::Quality {
                query,
                context,
                rewrite,
            } => AuxLabel::Quality(rule_quality(query, context, rewrite)),
            AuxPayload::Relevance {
                context,
                restaurant,
                cuisine,
                ..
            } => {
                let level = [restaurant, cuisine]
                    .into_iter()
                    .filter(|slot| slot.as_str() != "None")
                    .map(|slot| rule_relevance(context, slot))
                    .max()
                    .unwrap_or(RelevanceLevel::None);
                AuxLabel::Relevance(level)
            }
        })
    }
}

impl RelevanceOracle for RuleOracle {
    fn relevance(&self, query: &Query, rewrite: &str) -> Result<RelevanceLevel, GatewayError> {
        Ok(rule_relevance(&query.rag_context, rewrite))
    }
}

impl IntentOracle for RuleOracle {
    fn intent(&self, query: &Query, rewrite: &str) -> SearchIntent {
        rule_intent(&query.rag_context, rewrite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> RagContext {
        RagContext::new(
            vec!["Wonton King".into(), "Xijiade Dumplings".into()],
            vec!["wonton soup".into(), "Shrimp Wonton".into()],
        )
        .unwrap()
    }

    #[test]
    fn quality_rule() {
        assert_eq!(rule_quality("wontom", &ctx(), "Wontom"), QualityLabel::No);
        assert_eq!(rule_quality("wontom", &ctx(), "   "), QualityLabel::No);
        assert_eq!(rule_quality("wontom", &ctx(), "wonton"), QualityLabel::Yes);
        assert_eq!(rule_quality("wontom", &ctx(), "pizza"), QualityLabel::No);
    }

    #[test]
    fn relevance_rule() {
        assert_eq!(rule_relevance(&ctx(), "Wonton Soup"), RelevanceLevel::High);
        assert_eq!(rule_relevance(&ctx(), "dumplings"), RelevanceLevel::High);
        assert_eq!(rule_relevance(&ctx(), "beef dumplings"), RelevanceLevel::Low);
        assert_eq!(rule_relevance(&ctx(), "pizza"), RelevanceLevel::None);
        assert_eq!(rule_relevance(&RagContext::default(), "pizza"), RelevanceLevel::None);
    }

    #[test]
    fn typo_rule() {
        assert!(rule_typo("wontom", &ctx()));
        assert!(!rule_typo("wonton", &ctx()));
        assert!(!rule_typo("kfc", &ctx()));
        assert!(!rule_typo("pizza hut", &ctx()));
    }

    #[test]
    fn intent_rule() {
        assert_eq!(rule_intent(&ctx(), "wonton soup"), SearchIntent::Cuisine);
        assert_eq!(rule_intent(&ctx(), "wonton king"), SearchIntent::Restaurant);
        assert_eq!(rule_intent(&ctx(), "wonton"), SearchIntent::Neither);
    }

    #[test]
    fn rule_oracle_payloads() {
        let q = AuxPayload::Quality {
            query: "wontom".into(),
            context: ctx(),
            rewrite: "wontom".into(),
        };
        assert_eq!(RuleOracle.label(&q).unwrap().value(), "No");
        let r = AuxPayload::Relevance {
            query: "wontom".into(),
            context: ctx(),
            restaurant: "None".into(),
            cuisine: "shrimp wonton".into(),
        };
        assert_eq!(RuleOracle.label(&r).unwrap().value(), "High");
        let none = AuxPayload::Relevance {
            query: "wontom".into(),
            context: ctx(),
            restaurant: "None".into(),
            cuisine: "None".into(),
        };
        assert_eq!(RuleOracle.label(&none).unwrap().value(), "None");
    }
}
