//! Offline stand-in for the serving path: per-channel retrieval, merge with
//! channel provenance, truncation to the exposure depth, and click replay.
//!
//! Every ordering is score descending with ties broken by item id ascending.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{normalize_text, tokens, DomainError, Item};
use crate::eval::embed::{inner, EmbedError, Embedder};
use crate::jsonl::{read_jsonl, JsonlError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Invalid(#[from] DomainError),
    #[error(transparent)]
    Io(#[from] JsonlError),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "channel", content = "text", rename_all = "snake_case")]
pub enum ChannelId {
    OriginQuery,
    /// Carries the normalized rewrite text it retrieved for.
    Rewrite(String),
    Embedding,
    U2i,
}

impl ChannelId {
    pub fn is_rewrite(&self) -> bool {
        matches!(self, Self::Rewrite(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub item_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub item_id: String,
    pub channels: BTreeSet<ChannelId>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExposureEvent {
    pub query_id: String,
    pub item_id: String,
    pub channels: BTreeSet<ChannelId>,
    pub clicked: bool,
    pub purchased: bool,
    pub rank: usize,
}

fn by_score_then_id(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

fn rank_and_truncate(mut items: Vec<ScoredItem>, limit: usize) -> Vec<ScoredItem> {
    items.sort_by(|a, b| by_score_then_id(a.score, &a.item_id, b.score, &b.item_id));
    items.truncate(limit);
    items
}

/// Substring or shared-token match on normalized titles.
///
/// Score is 2 for a substring hit (1 otherwise) plus the fraction of the
/// text's tokens that also occur in the title.
pub fn retrieve_lexical(text: &str, candidates: &[Item], limit: usize) -> Vec<ScoredItem> {
    let Ok(text) = normalize_text(text) else {
        return Vec::new();
    };
    let text_tokens: BTreeSet<&str> = tokens(&text).collect();
    let hits = candidates
        .iter()
        .filter_map(|item| {
            let title = normalize_text(&item.title).ok()?;
            let title_tokens: BTreeSet<&str> = tokens(&title).collect();
            let overlap = text_tokens.intersection(&title_tokens).count();
            let substring = title.contains(text.as_str());
            if !substring && overlap == 0 {
                return None;
            }
            let base = if substring { 2.0 } else { 1.0 };
            Some(ScoredItem {
                item_id: item.id.clone(),
                score: base + overlap as f64 / text_tokens.len() as f64,
            })
        })
        .collect();
    rank_and_truncate(hits, limit)
}

/// Inner product between the embedded text and each embedded title.
pub fn retrieve_embedding(
    text: &str,
    candidates: &[Item],
    limit: usize,
    embedder: &dyn Embedder,
) -> Result<Vec<ScoredItem>, EmbedError> {
    let q = embedder.embed(text)?;
    let mut scored = Vec::with_capacity(candidates.len());
    for item in candidates {
        let v = embedder.embed(&item.title)?;
        scored.push(ScoredItem {
            item_id: item.id.clone(),
            score: inner(&q, &v),
        });
    }
    Ok(rank_and_truncate(scored, limit))
}

/// Unions channel outputs per item, keeping every contributing channel and the best score.
pub fn merge_and_attribute(per_channel: &[(ChannelId, Vec<ScoredItem>)], expose_limit: usize) -> Vec<RetrievalResult> {
    let mut merged: BTreeMap<&str, (BTreeSet<ChannelId>, f64)> = BTreeMap::new();
    for (channel, items) in per_channel {
        for item in items {
            let entry = merged
                .entry(item.item_id.as_str())
                .or_insert_with(|| (BTreeSet::new(), f64::NEG_INFINITY));
            entry.0.insert(channel.clone());
            entry.1 = entry.1.max(item.score);
        }
    }
    let mut out: Vec<RetrievalResult> = merged
        .into_iter()
        .map(|(id, (channels, score))| RetrievalResult {
            item_id: id.to_string(),
            channels,
            score,
        })
        .collect();
    out.sort_by(|a, b| by_score_then_id(a.score, &a.item_id, b.score, &b.item_id));
    out.truncate(expose_limit);
    out
}

/// Click and purchase facts per item id, validated at ingestion.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClickLog {
    entries: BTreeMap<String, (bool, bool)>,
}

impl ClickLog {
    pub fn insert(&mut self, item_id: impl Into<String>, clicked: bool, purchased: bool) -> Result<(), DomainError> {
        let item_id = item_id.into();
        if purchased && !clicked {
            return Err(DomainError::PurchaseWithoutClick(item_id));
        }
        self.entries.insert(item_id, (clicked, purchased));
        Ok(())
    }

    pub fn from_items(items: &[Item]) -> Result<Self, DomainError> {
        let mut log = Self::default();
        for item in items {
            log.insert(item.id.clone(), item.clicked, item.purchased)?;
        }
        Ok(log)
    }

    pub fn lookup(&self, item_id: &str) -> (bool, bool) {
        self.entries.get(item_id).copied().unwrap_or((false, false))
    }
}

pub fn expose_with_replay(query_id: &str, merged: &[RetrievalResult], log: &ClickLog) -> Vec<ExposureEvent> {
    merged
        .iter()
        .enumerate()
        .map(|(rank, r)| {
            let (clicked, purchased) = log.lookup(&r.item_id);
            ExposureEvent {
                query_id: query_id.to_string(),
                item_id: r.item_id.clone(),
                channels: r.channels.clone(),
                clicked,
                purchased,
                rank,
            }
        })
        .collect()
}

/// Reads a candidate set with replayed click labels, one item per line.
pub fn load_items(path: &Path) -> Result<Vec<Item>, SimError> {
    let items: Vec<Item> = read_jsonl(path)?;
    for item in &items {
        item.validate()?;
    }
    Ok(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Per-channel retrieval depth for lexical channels.
    pub channel_limit: usize,
    pub embedding_limit: usize,
    /// Exposure truncation depth.
    pub expose_limit: usize,
    pub u2i_score: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            channel_limit: 20,
            embedding_limit: 3,
            expose_limit: 20,
            u2i_score: 0.0,
        }
    }
}

/// One replayed search session for a query.
pub struct Session<'a> {
    pub query_id: &'a str,
    pub query_text: &'a str,
    pub rewrites: &'a [String],
    pub candidates: &'a [Item],
    pub clicks: &'a ClickLog,
    /// Item ids the user-to-item stub returns for this session's user.
    pub u2i_items: &'a [String],
}

/// Runs every channel for one session and returns its exposure events.
pub fn simulate_session(
    session: &Session<'_>,
    cfg: &SimConfig,
    embedder: &dyn Embedder,
) -> Result<Vec<ExposureEvent>, SimError> {
    let mut per_channel: Vec<(ChannelId, Vec<ScoredItem>)> = vec![
        (
            ChannelId::OriginQuery,
            retrieve_lexical(session.query_text, session.candidates, cfg.channel_limit),
        ),
        (
            ChannelId::Embedding,
            retrieve_embedding(session.query_text, session.candidates, cfg.embedding_limit, embedder)?,
        ),
    ];
    for rw in session.rewrites {
        per_channel.push((
            ChannelId::Rewrite(rw.clone()),
            retrieve_lexical(rw, session.candidates, cfg.channel_limit),
        ));
    }
    let known: BTreeSet<&str> = session.candidates.iter().map(|i| i.id.as_str()).collect();
    let u2i: Vec<ScoredItem> = session
        .u2i_items
        .iter()
        .filter(|id| known.contains(id.as_str()))
        .map(|id| ScoredItem {
            item_id: id.clone(),
            score: cfg.u2i_score,
        })
        .collect();
    if !u2i.is_empty() {
        per_channel.push((ChannelId::U2i, u2i));
    }
    let merged = merge_and_attribute(&per_channel, cfg.expose_limit);
    Ok(expose_with_replay(session.query_id, &merged, session.clicks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ItemKind;
    use crate::eval::embed::HashEmbedder;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn item(id: &str, title: &str) -> Item {
        Item {
            id: id.into(),
            kind: ItemKind::Restaurant,
            title: title.into(),
            clicked: false,
            purchased: false,
        }
    }

    fn ids(v: &[ScoredItem]) -> Vec<&str> {
        v.iter().map(|s| s.item_id.as_str()).collect()
    }

    #[test]
    fn lexical_examples() {
        let cands = [item("a", "Wonton King"), item("b", "Pizza Hut")];
        assert_eq!(ids(&retrieve_lexical("wonton", &cands, 10)), ["a"]);
        let cands = [item("n", "noodles house")];
        let hits = retrieve_lexical("beef noodles", &cands, 10);
        assert_eq!(ids(&hits), ["n"]);
        assert_eq!(hits[0].score, 1.5);
        assert!(retrieve_lexical("zzz", &cands, 10).is_empty());
    }

    #[test]
    fn lexical_ordering_and_ties() {
        let cands = [
            item("c", "beef noodles"),
            item("b", "noodles"),
            item("a", "beef noodles soup"),
        ];
        let hits = retrieve_lexical("beef noodles", &cands, 10);
        assert_eq!(ids(&hits), ["a", "c", "b"]);
        assert_eq!(ids(&retrieve_lexical("beef noodles", &cands, 1)), ["a"]);
    }

    #[test]
    fn embedding_examples() {
        let e = HashEmbedder::new(64).unwrap();
        let cands = [
            item("a", "Wonton King"),
            item("b", "Pizza Hut"),
            item("c", "Noodle Bar"),
        ];
        let hits = retrieve_embedding("wonton king", &cands, 3, &e).unwrap();
        assert_eq!(hits[0].item_id, "a");
        assert!((hits[0].score - 1.0).abs() < 1e-9);
        assert_eq!(retrieve_embedding("wonton", &cands, 1, &e).unwrap().len(), 1);
    }

    #[test]
    fn embedding_matches_full_sort_oracle() {
        let e = HashEmbedder::new(16).unwrap();
        let cands = [item("x", "spicy hot pot"), item("y", "hot dog")];
        let hits = retrieve_embedding("hot pot", &cands, 2, &e).unwrap();
        let q = e.embed("hot pot").unwrap();
        let mut oracle: Vec<(f64, &str)> = cands
            .iter()
            .map(|c| (inner(&q, &e.embed(&c.title).unwrap()), c.id.as_str()))
            .collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        assert_eq!(ids(&hits), oracle.iter().map(|o| o.1).collect::<Vec<_>>());
    }

    fn scored(ids: &[&str], score: f64) -> Vec<ScoredItem> {
        ids.iter()
            .map(|id| ScoredItem {
                item_id: id.to_string(),
                score,
            })
            .collect()
    }

    #[test]
    fn merge_union_semantics() {
        let r = ChannelId::Rewrite("r".into());
        let merged = merge_and_attribute(
            &[
                (ChannelId::OriginQuery, scored(&["x"], 1.0)),
                (r.clone(), scored(&["x"], 2.0)),
            ],
            10,
        );
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].channels, [ChannelId::OriginQuery, r].into_iter().collect());
        assert_eq!(merged[0].score, 2.0);

        let merged = merge_and_attribute(
            &[
                (ChannelId::OriginQuery, scored(&["a", "b", "c"], 1.0)),
                (ChannelId::Embedding, scored(&["d", "e", "f", "g"], 0.5)),
            ],
            10,
        );
        assert_eq!(merged.len(), 7);
    }

    #[test]
    fn replay_examples() {
        let merged = merge_and_attribute(&[(ChannelId::OriginQuery, scored(&["A", "B"], 1.0))], 10);
        let mut log = ClickLog::default();
        log.insert("A", true, false).unwrap();
        let events = expose_with_replay("q", &merged, &log);
        assert_eq!(events.len(), 2);
        assert_eq!(
            (events[0].item_id.as_str(), events[0].clicked, events[0].rank),
            ("A", true, 0)
        );
        assert_eq!(
            (events[1].item_id.as_str(), events[1].clicked, events[1].rank),
            ("B", false, 1)
        );
        assert!(expose_with_replay("q", &[], &log).is_empty());
        assert!(log.insert("C", false, true).is_err());
    }

    #[test]
    fn session_uses_all_channels() {
        let e = HashEmbedder::new(32).unwrap();
        let mut cands = vec![
            item("1", "Wonton King"),
            item("2", "Pizza Hut"),
            item("3", "Burger Barn"),
        ];
        cands[0].clicked = true;
        let log = ClickLog::from_items(&cands).unwrap();
        let rewrites = vec!["wonton".to_string()];
        let u2i = vec!["3".to_string(), "missing".to_string()];
        let session = Session {
            query_id: "q",
            query_text: "wontom",
            rewrites: &rewrites,
            candidates: &cands,
            clicks: &log,
            u2i_items: &u2i,
        };
        let cfg = SimConfig {
            embedding_limit: 1,
            ..SimConfig::default()
        };
        let events = simulate_session(&session, &cfg, &e).unwrap();
        let wonton = events.iter().find(|ev| ev.item_id == "1").unwrap();
        assert!(wonton.clicked);
        assert!(wonton.channels.contains(&ChannelId::Rewrite("wonton".into())));
        let burger = events.iter().find(|ev| ev.item_id == "3").unwrap();
        assert!(burger.channels.contains(&ChannelId::U2i));
    }

    fn random_channels(rng: &mut ChaCha8Rng) -> Vec<(ChannelId, Vec<ScoredItem>)> {
        let n_channels = rng.gen_range(1..6);
        (0..n_channels)
            .map(|c| {
                let ch = match c {
                    0 => ChannelId::OriginQuery,
                    1 => ChannelId::Embedding,
                    _ => ChannelId::Rewrite(format!("r{c}")),
                };
                let items = (0..rng.gen_range(0..15))
                    .map(|_| ScoredItem {
                        item_id: format!("i{}", rng.gen_range(0..20)),
                        score: rng.gen_range(0..5) as f64,
                    })
                    .collect();
                (ch, items)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn merge_is_order_independent_and_attributes_exactly(seed in any::<u64>(), limit in 1usize..25) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let channels = random_channels(&mut rng);
            let merged = merge_and_attribute(&channels, limit);
            let mut shuffled = channels.clone();
            shuffled.shuffle(&mut rng);
            prop_assert_eq!(&merged, &merge_and_attribute(&shuffled, limit));
            prop_assert_eq!(&merged, &merge_and_attribute(&[channels.clone(), channels.clone()].concat(), limit));

            // brute-force provenance: scan every channel list per item
            for r in &merged {
                let expected: BTreeSet<ChannelId> = channels
                    .iter()
                    .filter(|(_, items)| items.iter().any(|i| i.item_id == r.item_id))
                    .map(|(c, _)| c.clone())
                    .collect();
                prop_assert_eq!(&r.channels, &expected);
            }
            // truncation never drops a better item
            let full = merge_and_attribute(&channels, usize::MAX);
            if let Some(last) = merged.last() {
                for dropped in full.iter().skip(merged.len()) {
                    prop_assert!(dropped.score <= last.score);
                }
            }
        }
    }
}
