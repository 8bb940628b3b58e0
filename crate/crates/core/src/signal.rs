//! Click-signal attribution and the rewrite vocabulary.
//!
//! A clicked item whose provenance holds only rewrite channels credits each of
//! those rewrites with a Level-1 signal. A clicked item that a rewrite
//! retrieved together with any other channel credits that rewrite with a
//! Level-2 signal. Unclicked items and items without a rewrite channel emit
//! nothing.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{RewriteRecord, RewriteSource, RewriteState};
use crate::search::{ChannelId, ExposureEvent};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SignalError {
    #[error("no vocabulary record for rewrite {text:?} of query {query_id:?}")]
    UnknownRewrite { query_id: String, text: String },
    #[error("rewrite {text:?} of query {query_id:?} is retired")]
    RetiredRewrite { query_id: String, text: String },
    #[error("duplicate vocabulary record for rewrite {text:?} of query {query_id:?}")]
    DuplicateRecord { query_id: String, text: String },
    #[error("vocabulary iteration cannot move back from {current} to {requested}")]
    IterationRegressed { current: u32, requested: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalLevel {
    Level1,
    Level2,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SignalLabel {
    pub query_id: String,
    pub rewrite_text: String,
    pub level: SignalLevel,
    pub item_id: String,
}

pub fn label_signals(events: &[ExposureEvent]) -> Vec<SignalLabel> {
    let mut out = Vec::new();
    for event in events.iter().filter(|e| e.clicked) {
        let rewrites: Vec<&str> = event
            .channels
            .iter()
            .filter_map(|c| match c {
                ChannelId::Rewrite(text) => Some(text.as_str()),
                _ => None,
            })
            .collect();
        if rewrites.is_empty() {
            continue;
        }
        let level = if rewrites.len() == event.channels.len() {
            SignalLevel::Level1
        } else {
            SignalLevel::Level2
        };
        out.extend(rewrites.into_iter().map(|text| SignalLabel {
            query_id: event.query_id.clone(),
            rewrite_text: text.to_string(),
            level,
            item_id: event.item_id.clone(),
        }));
    }
    out
}

/// A freshly generated rewrite before it enters the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateRewrite {
    pub query_id: String,
    pub text: String,
    pub source: RewriteSource,
}

impl CandidateRewrite {
    fn key(&self) -> (String, String) {
        (self.query_id.clone(), self.text.clone())
    }
}

type Key = (String, String);

/// Rewrite records keyed by (query id, normalized text). Retired records stay as tombstones.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    records: BTreeMap<Key, RewriteRecord>,
    iteration: u32,
}

impl Vocabulary {
    pub fn new(iteration: u32) -> Self {
        Self {
            records: BTreeMap::new(),
            iteration,
        }
    }

    pub fn from_records(records: Vec<RewriteRecord>, iteration: u32) -> Result<Self, SignalError> {
        let mut vocab = Self::new(iteration);
        for r in records {
            let key = r.key();
            if vocab.records.contains_key(&key) {
                return Err(SignalError::DuplicateRecord {
                    query_id: key.0,
                    text: key.1,
                });
            }
            vocab.records.insert(key, r);
        }
        Ok(vocab)
    }

    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    pub fn set_iteration(&mut self, iteration: u32) -> Result<(), SignalError> {
        if iteration < self.iteration {
            return Err(SignalError::IterationRegressed {
                current: self.iteration,
                requested: iteration,
            });
        }
        self.iteration = iteration;
        Ok(())
    }

    pub fn get(&self, query_id: &str, text: &str) -> Option<&RewriteRecord> {
        self.records.get(&(query_id.to_string(), text.to_string()))
    }

    pub fn contains(&self, query_id: &str, text: &str) -> bool {
        self.get(query_id, text).is_some()
    }

    /// Records in key order.
    pub fn records(&self) -> impl Iterator<Item = &RewriteRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn positives(&self) -> impl Iterator<Item = &RewriteRecord> {
        self.records().filter(|r| r.state == RewriteState::Positive)
    }

    pub fn active(&self) -> impl Iterator<Item = &RewriteRecord> {
        self.records().filter(|r| r.state != RewriteState::Retired)
    }

    /// Active rewrite texts for one query, in key order.
    pub fn active_for(&self, query_id: &str) -> Vec<String> {
        self.active()
            .filter(|r| r.query_id == query_id)
            .map(|r| r.text.clone())
            .collect()
    }

    /// Adds candidates that are not yet keyed in the vocabulary.
    pub fn insert_candidates(&mut self, candidates: &[CandidateRewrite]) {
        for c in candidates {
            self.records.entry(c.key()).or_insert_with(|| {
                RewriteRecord::candidate(c.query_id.clone(), c.text.clone(), c.source, self.iteration)
            });
        }
    }

    /// Stamps every active record as deployed in the current iteration.
    pub fn mark_deployed(&mut self) {
        let it = self.iteration;
        for r in self.records.values_mut() {
            if r.state != RewriteState::Retired {
                r.last_seen_iteration = r.last_seen_iteration.max(it);
            }
        }
    }

    pub fn into_records(self) -> Vec<RewriteRecord> {
        self.records.into_values().collect()
    }
}

pub fn update_vocabulary(vocab: &Vocabulary, labels: &[SignalLabel]) -> Result<Vocabulary, SignalError> {
    let mut next = vocab.clone();
    for label in labels {
        let key = (label.query_id.clone(), label.rewrite_text.clone());
        let record = next.records.get_mut(&key).ok_or_else(|| SignalError::UnknownRewrite {
            query_id: key.0.clone(),
            text: key.1.clone(),
        })?;
        if record.state == RewriteState::Retired {
            return Err(SignalError::RetiredRewrite {
                query_id: key.0,
                text: key.1,
            });
        }
        match label.level {
            SignalLevel::Level1 => record.level1_count += 1,
            SignalLevel::Level2 => record.level2_count += 1,
        }
        record.state = RewriteState::Positive;
    }
    Ok(next)
}

/// Retires unsignalled candidates from earlier iterations and relabels older positives as carryover.
pub fn carryover_filter(vocab: &Vocabulary) -> Vocabulary {
    let mut next = vocab.clone();
    let current = next.iteration;
    for r in next.records.values_mut() {
        if r.last_seen_iteration >= current {
            continue;
        }
        match r.state {
            RewriteState::Candidate => r.state = RewriteState::Retired,
            RewriteState::Positive => r.source = RewriteSource::Carryover,
            RewriteState::Retired => {}
        }
    }
    next
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupOutcome {
    pub unique: Vec<CandidateRewrite>,
    /// Inputs dropped because the vocabulary already holds their key.
    pub duplicates: usize,
    /// Inputs dropped as repeats within the batch itself.
    pub self_duplicates: usize,
    /// Active records already deployed alongside this batch.
    pub deployed_survivors: usize,
    pub unique_portion: f64,
}

/// Drops candidates already keyed in the vocabulary (tombstones included) and
/// reports the share of new rewrites among everything deployed this iteration.
pub fn dedup_and_stats(new_candidates: &[CandidateRewrite], vocab: &Vocabulary) -> DedupOutcome {
    let mut seen: BTreeSet<Key> = BTreeSet::new();
    let mut unique = Vec::new();
    let mut duplicates = 0;
    let mut self_duplicates = 0;
    for c in new_candidates {
        if !seen.insert(c.key()) {
            self_duplicates += 1;
        } else if vocab.records.contains_key(&c.key()) {
            duplicates += 1;
        } else {
            unique.push(c.clone());
        }
    }
    let deployed_survivors = vocab.active().count();
    let total = unique.len() + deployed_survivors;
    let unique_portion = if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    };
    DedupOutcome {
        unique,
        duplicates,
        self_duplicates,
        deployed_survivors,
        unique_portion,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn event(channels: &[ChannelId], clicked: bool) -> ExposureEvent {
        ExposureEvent {
            query_id: "q".into(),
            item_id: "i".into(),
            channels: channels.iter().cloned().collect(),
            clicked,
            purchased: false,
            rank: 0,
        }
    }

    fn rw(t: &str) -> ChannelId {
        ChannelId::Rewrite(t.into())
    }

    #[test]
    fn label_examples() {
        let l = label_signals(&[event(&[rw("r1")], true)]);
        assert_eq!(l.len(), 1);
        assert_eq!((l[0].rewrite_text.as_str(), l[0].level), ("r1", SignalLevel::Level1));

        let l = label_signals(&[event(&[rw("r1"), ChannelId::OriginQuery], true)]);
        assert_eq!((l[0].rewrite_text.as_str(), l[0].level), ("r1", SignalLevel::Level2));

        assert!(label_signals(&[event(&[rw("r1")], false)]).is_empty());
        assert!(label_signals(&[event(&[ChannelId::Embedding], true)]).is_empty());
    }

    #[test]
    fn multiple_rewrite_only_channels_each_get_level1() {
        let l = label_signals(&[event(&[rw("a"), rw("b")], true)]);
        assert_eq!(l.len(), 2);
        assert!(l.iter().all(|x| x.level == SignalLevel::Level1));
    }

    fn label(text: &str, level: SignalLevel) -> SignalLabel {
        SignalLabel {
            query_id: "q".into(),
            rewrite_text: text.into(),
            level,
            item_id: "i".into(),
        }
    }

    fn vocab_with(texts: &[&str], iteration: u32) -> Vocabulary {
        let mut v = Vocabulary::new(iteration);
        let cands: Vec<CandidateRewrite> = texts
            .iter()
            .map(|t| CandidateRewrite {
                query_id: "q".into(),
                text: t.to_string(),
                source: RewriteSource::PublicLlm,
            })
            .collect();
        v.insert_candidates(&cands);
        v
    }

    #[test]
    fn update_examples() {
        let v = vocab_with(&["a"], 0);
        let v = update_vocabulary(&v, &[label("a", SignalLevel::Level1)]).unwrap();
        let r = v.get("q", "a").unwrap();
        assert_eq!((r.state, r.level1_count), (RewriteState::Positive, 1));

        let v = update_vocabulary(&v, &[label("a", SignalLevel::Level2)]).unwrap();
        let r = v.get("q", "a").unwrap();
        assert_eq!(
            (r.state, r.level1_count, r.level2_count),
            (RewriteState::Positive, 1, 1)
        );

        assert_eq!(
            update_vocabulary(&v, &[label("zz", SignalLevel::Level1)]),
            Err(SignalError::UnknownRewrite {
                query_id: "q".into(),
                text: "zz".into()
            })
        );
    }

    #[test]
    fn carryover_examples() {
        let mut v = vocab_with(&["old", "good"], 0);
        v = update_vocabulary(&v, &[label("good", SignalLevel::Level1)]).unwrap();
        v.set_iteration(1).unwrap();
        v.insert_candidates(&[CandidateRewrite {
            query_id: "q".into(),
            text: "new".into(),
            source: RewriteSource::PostTrainedLlm(1),
        }]);
        let f = carryover_filter(&v);
        assert_eq!(f.get("q", "old").unwrap().state, RewriteState::Retired);
        assert_eq!(f.get("q", "good").unwrap().state, RewriteState::Positive);
        assert_eq!(f.get("q", "good").unwrap().source, RewriteSource::Carryover);
        assert_eq!(f.get("q", "new").unwrap().state, RewriteState::Candidate);
        assert_eq!(carryover_filter(&f), f);
        assert!(v.set_iteration(0).is_err());
    }

    fn cand(q: &str, t: &str) -> CandidateRewrite {
        CandidateRewrite {
            query_id: q.into(),
            text: t.into(),
            source: RewriteSource::PublicLlm,
        }
    }

    #[test]
    fn dedup_examples() {
        let v = vocab_with(&["a", "b"], 0);
        let out = dedup_and_stats(&[cand("q", "a"), cand("q", "b")], &v);
        assert!(out.unique.is_empty());
        assert_eq!(out.unique_portion, 0.0);

        let out = dedup_and_stats(&[cand("q", "a"), cand("q", "a"), cand("p", "a")], &Vocabulary::new(0));
        assert_eq!(out.unique.len(), 2);
        assert_eq!(out.self_duplicates, 1);
        assert_eq!(out.unique_portion, 1.0);

        // 117 deployed survivors plus one new rewrite
        let texts: Vec<String> = (0..117).map(|i| format!("r{i}")).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let v = vocab_with(&refs, 0);
        let out = dedup_and_stats(&[cand("q", "r0"), cand("q", "fresh")], &v);
        assert_eq!(out.unique.len(), 1);
        assert!((out.unique_portion - 1.0 / 118.0).abs() < 1e-12);
        assert!((out.unique_portion - 0.00847).abs() < 1e-5);
    }

    #[test]
    fn dedup_treats_tombstones_as_seen() {
        let mut v = vocab_with(&["stale"], 0);
        v.set_iteration(1).unwrap();
        let v = carryover_filter(&v);
        let out = dedup_and_stats(&[cand("q", "stale")], &v);
        assert!(out.unique.is_empty());
        assert_eq!(out.deployed_survivors, 0);
    }

    proptest! {
        #[test]
        fn update_is_monotone(picks in proptest::collection::vec((0usize..4, any::<bool>()), 0..20)) {
            let texts = ["a", "b", "c", "d"];
            let mut v = vocab_with(&texts, 0);
            for (i, l1) in picks {
                let level = if l1 { SignalLevel::Level1 } else { SignalLevel::Level2 };
                let next = update_vocabulary(&v, &[label(texts[i], level)]).unwrap();
                for (before, after) in v.records().zip(next.records()) {
                    prop_assert!(after.level1_count >= before.level1_count);
                    prop_assert!(after.level2_count >= before.level2_count);
                    if before.state == RewriteState::Positive {
                        prop_assert_eq!(after.state, RewriteState::Positive);
                    }
                    prop_assert_eq!(after.state == RewriteState::Positive, after.signal_count() >= 1);
                }
                v = next;
            }
        }

        #[test]
        fn dedup_partitions_input(
            existing in proptest::collection::btree_set("[a-e]", 0..5),
            incoming in proptest::collection::vec(("[pq]", "[a-h]"), 0..20),
        ) {
            let refs: Vec<&str> = existing.iter().map(String::as_str).collect();
            let v = vocab_with(&refs, 0);
            let cands: Vec<CandidateRewrite> = incoming.iter().map(|(q, t)| cand(q, t)).collect();
            let out = dedup_and_stats(&cands, &v);
            for u in &out.unique {
                prop_assert!(!v.contains(&u.query_id, &u.text));
            }
            let self_deduped: BTreeSet<_> = cands.iter().map(|c| c.key()).collect();
            prop_assert_eq!(out.unique.len() + out.duplicates, self_deduped.len());
            prop_assert!((0.0..=1.0).contains(&out.unique_portion));
        }
    }
}
