#![allow(dead_code)]

pub mod golden;

use std::collections::{BTreeMap, BTreeSet};

use qrloop::domain::{FrequencyClass, Item, ItemKind, Query, RagContext};
use qrloop::eval::embed::{inner, Embedder};
use qrloop::eval::{BenchIIEntry, BenchmarkII};
use qrloop::search::{ChannelId, ExposureEvent};
use qrloop::signal::{SignalLabel, SignalLevel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WORDS: [&str; 16] = [
    "wonton", "soup", "beef", "noodle", "rice", "sushi", "pizza", "tofu", "duck", "bun", "spicy", "fried", "tea",
    "milk", "curry", "roll",
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn phrase(rng: &mut ChaCha8Rng, max_words: usize) -> String {
    (0..rng.gen_range(1..=max_words))
        .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

/// Signal labels by splitting each clicked item's channels into the rewrite
/// part and the rest: an empty rest means Level-1.
pub fn signal_oracle(events: &[ExposureEvent]) -> BTreeSet<SignalLabel> {
    let mut out = BTreeSet::new();
    for e in events {
        if !e.clicked {
            continue;
        }
        let (rewrite, rest): (BTreeSet<&ChannelId>, BTreeSet<&ChannelId>) =
            e.channels.iter().partition(|c| matches!(c, ChannelId::Rewrite(_)));
        let level = if rest.is_empty() {
            SignalLevel::Level1
        } else {
            SignalLevel::Level2
        };
        for c in rewrite {
            if let ChannelId::Rewrite(text) = c {
                out.insert(SignalLabel {
                    query_id: e.query_id.clone(),
                    rewrite_text: text.clone(),
                    level,
                    item_id: e.item_id.clone(),
                });
            }
        }
    }
    out
}

/// A random exposure log with up to `max_events` events and 1..=`max_channels` channels per event.
pub fn random_log(rng: &mut ChaCha8Rng, max_events: usize, max_channels: usize) -> Vec<ExposureEvent> {
    let n = rng.gen_range(1..=max_events);
    (0..n)
        .map(|i| {
            let k = rng.gen_range(1..=max_channels);
            let mut channels = BTreeSet::new();
            while channels.len() < k {
                channels.insert(match rng.gen_range(0..6) {
                    0 => ChannelId::OriginQuery,
                    1 => ChannelId::Embedding,
                    2 => ChannelId::U2i,
                    _ => ChannelId::Rewrite(format!("rw{}", rng.gen_range(0..12))),
                });
            }
            let clicked = rng.gen_bool(0.3);
            ExposureEvent {
                query_id: format!("q{}", rng.gen_range(0..20)),
                item_id: format!("i{i}"),
                channels,
                clicked,
                purchased: clicked && rng.gen_bool(0.3),
                rank: i,
            }
        })
        .collect()
}

pub fn bench_item(id: String, title: String, clicked: bool) -> Item {
    Item {
        id,
        kind: ItemKind::Cuisine,
        title,
        clicked,
        purchased: false,
    }
}

/// One Benchmark-II-style instance: `n` candidates, 2 or 3 clicked, 1..=4 rewrites.
pub fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> (BenchIIEntry, Vec<String>) {
    let clicked_count = rng.gen_range(2..=3);
    let mut clicked = BTreeSet::new();
    while clicked.len() < clicked_count {
        clicked.insert(rng.gen_range(0..n));
    }
    let candidates = (0..n)
        .map(|i| bench_item(format!("{i:04}"), phrase(rng, 3), clicked.contains(&i)))
        .collect();
    let rewrites = (0..rng.gen_range(1..=4)).map(|_| phrase(rng, 2)).collect();
    let entry = BenchIIEntry {
        query: Query::with_class("q", "query", FrequencyClass::Tail, RagContext::default()).unwrap(),
        candidates,
    };
    (entry, rewrites)
}

pub fn single(entry: BenchIIEntry) -> BenchmarkII {
    BenchmarkII { entries: vec![entry] }
}

pub fn rewrites_map(rws: &[String]) -> BTreeMap<String, Vec<String>> {
    BTreeMap::from([("q".to_string(), rws.to_vec())])
}

/// Recall by fully sorting (score desc, id asc) and counting clicked items in the first K.
pub fn recall_oracle(entry: &BenchIIEntry, rewrites: &[String], k: usize, embedder: &dyn Embedder) -> f64 {
    let vecs: Vec<Vec<f64>> = rewrites.iter().map(|r| embedder.embed(r).unwrap()).collect();
    let mut scored: Vec<(f64, &Item)> = entry
        .candidates
        .iter()
        .map(|c| {
            let v = embedder.embed(&c.title).unwrap();
            let s = vecs.iter().map(|r| inner(r, &v)).fold(f64::NEG_INFINITY, f64::max);
            (s, c)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
    let clicked = entry.candidates.iter().filter(|c| c.clicked).count();
    let hit = scored.iter().take(k).filter(|(_, c)| c.clicked).count();
    hit as f64 / clicked as f64
}

/// Every file under `root`, keyed by relative path.
pub fn file_tree(root: &std::path::Path) -> BTreeMap<std::path::PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = std::fs::read(&path).unwrap();
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), bytes);
            }
        }
    }
    out
}
