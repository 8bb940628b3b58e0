//! Seeded synthetic food-delivery world: queries with associated restaurants
//! and cuisines, replay logs, both benchmarks, and mock fixtures for the
//! post-trained generator of each later iteration.
//!
//! Queries come in three shapes. Tail queries misspell one word of a dish or
//! restaurant name, mid queries use a dish alias, and high queries name a dish
//! directly. Replay logs hold the query's related items plus distractors;
//! related items are clicked far more often.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::domain::{
    normalize_text, tokens, FrequencyClass, FrequencyThresholds, Item, ItemKind, Query, RagContext, RewriteDirection,
};
use crate::eval::{BenchCandidate, BenchIIRow, BenchIRow, RewriteRow};
use crate::gateway::fixture_key;
use crate::jsonl::{write_atomic, write_jsonl, JsonlError};
use crate::pipeline::QueryRow;
use crate::prompting::{
    build_generation_prompt, render_generation_output, GenerationOutput, GenerationRequest, SearchIntent,
};

const DISHES: [(&str, &str); 32] = [
    ("wonton soup", "huntun"),
    ("dumplings", "jiaozi"),
    ("bubble tea", "boba"),
    ("hot pot", "huoguo"),
    ("beef noodles", "niurou mian"),
    ("fried rice", "chaofan"),
    ("mapo tofu", "spicy bean curd"),
    ("kung pao chicken", "gongbao jiding"),
    ("peking duck", "roast duck"),
    ("spring rolls", "egg rolls"),
    ("pho", "vietnamese noodle soup"),
    ("ramen", "japanese noodles"),
    ("sushi", "maki"),
    ("bibimbap", "mixed rice bowl"),
    ("pad thai", "thai fried noodles"),
    ("tacos", "taqueria"),
    ("burrito", "wrap"),
    ("pizza", "pie slice"),
    ("burger", "hamburger"),
    ("fried chicken", "crispy chicken"),
    ("curry", "masala"),
    ("biryani", "dum rice"),
    ("shawarma", "doner"),
    ("falafel", "chickpea fritters"),
    ("lasagna", "baked pasta"),
    ("pancakes", "flapjacks"),
    ("cheesecake", "cheese tart"),
    ("croissant", "butter pastry"),
    ("congee", "rice porridge"),
    ("xiaolongbao", "soup dumplings"),
    ("steamed buns", "baozi"),
    ("milk tea", "naicha"),
];

const PREFIXES: [&str; 16] = [
    "Golden", "Lucky", "Happy", "Red", "Jade", "Royal", "Sunny", "Old", "Little", "Grand", "Silver", "Dragon", "Lotus",
    "Bamboo", "Harbor", "Maple",
];

const SUFFIXES: [&str; 6] = ["House", "Kitchen", "Express", "Garden", "Bistro", "Corner"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_queries: usize,
    pub n_restaurants: usize,
    pub distractors: usize,
    /// Post-trained fixtures are written for iterations 1..=posttrained_iterations.
    pub posttrained_iterations: u32,
    pub n_rewrites: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_queries: 60,
            n_restaurants: 40,
            distractors: 15,
            posttrained_iterations: 2,
            n_rewrites: crate::prompting::DEFAULT_N_REWRITES,
        }
    }
}

#[derive(Debug, Clone)]
struct Restaurant {
    id: String,
    name: String,
    dishes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub queries: Vec<QueryRow>,
    pub replay: BTreeMap<String, Vec<Item>>,
    pub bench_i: Vec<BenchIRow>,
    pub bench_ii: Vec<BenchIIRow>,
    /// Fixture maps per iteration for the post-trained generator.
    pub posttrained: BTreeMap<u32, BTreeMap<String, String>>,
    pub u2i: BTreeMap<String, Vec<String>>,
    pub query_users: BTreeMap<String, String>,
    /// Every word in the world, sorted; source for the random-token baseline.
    pub lexicon: Vec<String>,
}

/// Replaces one character of a word of length >= 4 with a nearby letter.
fn misspell(word: &str, rng: &mut ChaCha8Rng) -> String {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() < 4 {
        return format!("{word}{word}");
    }
    let pos = rng.gen_range(1..chars.len());
    let mut out = chars.clone();
    let c = chars[pos];
    let replacement = if c == 'z' { 'y' } else { ((c as u8) + 1) as char };
    out[pos] = if c.is_ascii_lowercase() { replacement } else { 'x' };
    out.into_iter().collect()
}

fn longest_word(text: &str) -> &str {
    text.split_whitespace()
        .max_by_key(|w| (w.len(), std::cmp::Reverse(*w)))
        .unwrap_or(text)
}

pub fn generate_world(cfg: &SynthConfig) -> SynthWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut names = BTreeSet::new();
    let mut restaurants = Vec::with_capacity(cfg.n_restaurants);
    while restaurants.len() < cfg.n_restaurants {
        let first = rng.gen_range(0..DISHES.len());
        let name = format!(
            "{} {} {}",
            PREFIXES[rng.gen_range(0..PREFIXES.len())],
            titlecase(longest_word(DISHES[first].0)),
            SUFFIXES[rng.gen_range(0..SUFFIXES.len())]
        );
        if !names.insert(name.clone()) {
            continue;
        }
        let mut dishes = vec![first];
        for _ in 0..rng.gen_range(0..3) {
            let d = rng.gen_range(0..DISHES.len());
            if !dishes.contains(&d) {
                dishes.push(d);
            }
        }
        restaurants.push(Restaurant {
            id: format!("r{:03}", restaurants.len()),
            name,
            dishes,
        });
    }
    let dish_item = |d: usize| Item {
        id: format!("c{d:03}"),
        kind: ItemKind::Cuisine,
        title: DISHES[d].0.to_string(),
        clicked: false,
        purchased: false,
    };
    let rest_item = |r: &Restaurant| Item {
        id: r.id.clone(),
        kind: ItemKind::Restaurant,
        title: r.name.clone(),
        clicked: false,
        purchased: false,
    };

    let mut world = SynthWorld {
        queries: Vec::new(),
        replay: BTreeMap::new(),
        bench_i: Vec::new(),
        bench_ii: Vec::new(),
        posttrained: BTreeMap::new(),
        u2i: BTreeMap::new(),
        query_users: BTreeMap::new(),
        lexicon: Vec::new(),
    };
    let mut used_texts = BTreeSet::new();
    let mut attempts = 0;
    while world.queries.len() < cfg.n_queries && attempts < cfg.n_queries * 50 {
        attempts += 1;
        let dish = rng.gen_range(0..DISHES.len());
        let serving: Vec<&Restaurant> = restaurants.iter().filter(|r| r.dishes.contains(&dish)).collect();
        if serving.is_empty() {
            continue;
        }
        let (dish_name, alias) = DISHES[dish];
        let shape = world.queries.len() % 3;
        let (text, count, correction) = match shape {
            0 => {
                let word = longest_word(dish_name);
                let typo = misspell(word, &mut rng);
                (
                    dish_name.replacen(word, &typo, 1),
                    rng.gen_range(1..50),
                    Some(dish_name.to_string()),
                )
            }
            1 => (alias.to_string(), rng.gen_range(50..500), None),
            _ => (dish_name.to_string(), rng.gen_range(500..5000), None),
        };
        if !used_texts.insert(text.clone()) {
            continue;
        }
        let qid = format!("q{:03}", world.queries.len());

        let mut ctx_restaurants: Vec<&Restaurant> = serving.clone();
        ctx_restaurants.shuffle(&mut rng);
        ctx_restaurants.truncate(2);
        let mut ctx_dishes = vec![dish];
        for r in &ctx_restaurants {
            for &d in &r.dishes {
                if !ctx_dishes.contains(&d) && ctx_dishes.len() < 3 {
                    ctx_dishes.push(d);
                }
            }
        }
        let row = QueryRow {
            id: qid.clone(),
            text: text.clone(),
            observed_count: count,
            restaurants: ctx_restaurants.iter().map(|r| r.name.clone()).collect(),
            cuisines: ctx_dishes.iter().map(|&d| DISHES[d].0.to_string()).collect(),
        };

        let mut related: Vec<Item> = ctx_restaurants.iter().map(|r| rest_item(r)).collect();
        related.extend(ctx_dishes.iter().map(|&d| dish_item(d)));
        let related_ids: BTreeSet<String> = related.iter().map(|i| i.id.clone()).collect();
        let mut items = related;
        let mut pool: Vec<Item> = restaurants
            .iter()
            .map(rest_item)
            .chain((0..DISHES.len()).map(dish_item))
            .filter(|i| !related_ids.contains(&i.id))
            .collect();
        pool.shuffle(&mut rng);
        items.extend(pool.into_iter().take(cfg.distractors));
        for item in &mut items {
            let p = if related_ids.contains(&item.id) { 0.6 } else { 0.04 };
            item.clicked = rng.gen_bool(p);
            item.purchased = item.clicked && rng.gen_bool(0.4);
        }
        if !items.iter().any(|i| i.clicked && related_ids.contains(&i.id)) {
            items[0].clicked = true;
        }
        items.sort_by(|a, b| a.id.cmp(&b.id));

        let mut gt: Vec<String> = row.restaurants.iter().chain(&row.cuisines).cloned().collect();
        if let Some(c) = &correction {
            gt.push(c.clone());
        }
        gt.push(longest_word(dish_name).to_string());
        gt.sort();
        gt.dedup();
        world.bench_i.push(BenchIRow {
            id: Some(qid.clone()),
            query: text.clone(),
            frequency_class: match shape {
                0 => FrequencyClass::Tail,
                1 => FrequencyClass::Mid,
                _ => FrequencyClass::High,
            },
            restaurants: row.restaurants.clone(),
            cuisines: row.cuisines.clone(),
            ground_truth: gt,
        });
        world.bench_ii.push(BenchIIRow {
            id: Some(qid.clone()),
            query: text.clone(),
            candidates: items
                .iter()
                .map(|i| BenchCandidate {
                    id: i.id.clone(),
                    kind: i.kind,
                    title: i.title.clone(),
                    clicked: i.clicked,
                })
                .collect(),
        });
        if world.queries.len() % 4 == 3 {
            let user = format!("u{:03}", world.queries.len());
            let clicked: Vec<String> = items
                .iter()
                .filter(|i| i.clicked)
                .map(|i| i.id.clone())
                .take(1)
                .collect();
            world.u2i.insert(user.clone(), clicked);
            world.query_users.insert(qid.clone(), user);
        }
        world.replay.insert(qid, items);
        world.queries.push(row);
    }

    let mut lexicon = BTreeSet::new();
    for (d, a) in DISHES {
        lexicon.extend(d.split_whitespace().map(str::to_string));
        lexicon.extend(a.split_whitespace().map(str::to_string));
    }
    for r in &restaurants {
        lexicon.extend(r.name.split_whitespace().map(|w| w.to_lowercase()));
    }
    world.lexicon = lexicon.into_iter().collect();

    for k in 1..=cfg.posttrained_iterations {
        world
            .posttrained
            .insert(k, posttrained_fixtures(&world.queries, k, cfg.n_rewrites));
    }
    world
}

fn titlecase(word: &str) -> String {
    let mut c = word.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn row_query(row: &QueryRow) -> Query {
    let ctx = RagContext::new(row.restaurants.clone(), row.cuisines.clone()).expect("synthetic context");
    Query::new(
        row.id.clone(),
        &row.text,
        row.observed_count,
        &FrequencyThresholds::default(),
        ctx,
    )
    .expect("synthetic query")
}

/// Rewrites a post-trained model would add for `row`, most likely first.
fn expansion_pool(row: &QueryRow) -> Vec<String> {
    let mut pool = Vec::new();
    for entry in row.cuisines.iter().chain(&row.restaurants) {
        if let Ok(n) = normalize_text(entry) {
            pool.push(longest_word(&n).to_string());
        }
    }
    if let Some(c) = row.cuisines.first().and_then(|c| normalize_text(c).ok()) {
        pool.push(format!("{c} delivery"));
        pool.push(format!("best {c}"));
    }
    let mut seen = BTreeSet::new();
    pool.retain(|p| seen.insert(p.clone()));
    pool
}

/// Post-trained output at iteration `k`: the context entries plus a prefix
/// of the expansion pool that grows by a shrinking step each iteration
/// (3 new rewrites at k = 1, 1 at k = 2, none later).
pub fn posttrained_rewrites(row: &QueryRow, k: u32) -> Vec<String> {
    let pool = expansion_pool(row);
    let take = match k {
        0 => 0,
        1 => 3,
        _ => 4,
    };
    let mut out: Vec<String> = row
        .restaurants
        .iter()
        .chain(&row.cuisines)
        .filter_map(|e| normalize_text(e).ok())
        .collect();
    out.extend(pool.into_iter().take(take));
    let mut seen = BTreeSet::new();
    out.retain(|r| seen.insert(r.clone()));
    out
}

pub fn posttrained_fixtures(queries: &[QueryRow], k: u32, n_rewrites: usize) -> BTreeMap<String, String> {
    queries
        .iter()
        .map(|row| {
            let q = row_query(row);
            let req =
                GenerationRequest::new(q.clone(), n_rewrites, RewriteDirection::ALL).expect("positive rewrite count");
            let bundle = build_generation_prompt(&req);
            let intent = if row.cuisines.is_empty() {
                SearchIntent::Restaurant
            } else {
                SearchIntent::Cuisine
            };
            let out = GenerationOutput {
                query_meaning: format!("looking for {}", q.text()),
                correction: None,
                intent,
                rewrites: posttrained_rewrites(row, k).into_iter().take(n_rewrites).collect(),
            };
            (fixture_key(&bundle), render_generation_output(&out))
        })
        .collect()
}

/// Context-injecting generator: associated restaurants and cuisines, then query tokens.
pub fn context_rewrites(row: &QueryRow, n: usize) -> Vec<String> {
    let q = row_query(row);
    let mut out: Vec<String> = row
        .restaurants
        .iter()
        .chain(&row.cuisines)
        .filter_map(|e| normalize_text(e).ok())
        .collect();
    let toks: Vec<&str> = tokens(q.text()).collect();
    if toks.len() > 1 {
        out.extend(toks.iter().map(|t| t.to_string()));
    }
    let mut seen = BTreeSet::new();
    out.retain(|r| seen.insert(r.clone()));
    out.truncate(n);
    out
}

/// Context-blind baseline: random one- or two-word strings from the lexicon.
pub fn random_token_rewrites(lexicon: &[String], n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    (0..n)
        .map(|_| {
            let len = rng.gen_range(1..=2);
            (0..len)
                .map(|_| lexicon[rng.gen_range(0..lexicon.len())].as_str())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

pub fn rewrite_rows(rewrites: &BTreeMap<String, Vec<String>>) -> Vec<RewriteRow> {
    rewrites
        .iter()
        .map(|(q, r)| RewriteRow {
            query_id: q.clone(),
            rewrites: r.clone(),
        })
        .collect()
}

/// Writes the world under `dir` together with a `config.json` that points at it.
pub fn write_world(world: &SynthWorld, dir: &Path, seed: u64) -> Result<PathBuf, JsonlError> {
    write_jsonl(&dir.join("queries.jsonl"), &world.queries)?;
    for (qid, items) in &world.replay {
        write_jsonl(&dir.join("replay").join(format!("{qid}.jsonl")), items)?;
    }
    write_jsonl(&dir.join("bench1.jsonl"), &world.bench_i)?;
    write_jsonl(&dir.join("bench2.jsonl"), &world.bench_ii)?;
    let mut posttrained = serde_json::Map::new();
    for (k, fixtures) in &world.posttrained {
        let rel = format!("fixtures/posttrained_{k}");
        let body = serde_json::to_string_pretty(fixtures).expect("string map");
        write_atomic(&dir.join(&rel).join("generation.json"), body.as_bytes())?;
        posttrained.insert(
            k.to_string(),
            json!({"name": format!("posttrained-{k}"), "base_url": rel, "kind": "mock"}),
        );
    }
    let config = json!({
        "seed": seed,
        "queries": ["queries.jsonl"],
        "replay_dir": "replay",
        "bench_i": "bench1.jsonl",
        "bench_ii": "bench2.jsonl",
        "endpoints": {
            "generator_public": {"name": "public-mock", "base_url": "", "kind": "mock"},
            "generator_posttrained": posttrained,
        },
        "u2i": world.u2i,
        "query_users": world.query_users,
    });
    let path = dir.join("config.json");
    let mut text = serde_json::to_string_pretty(&config).expect("json value");
    text.push('\n');
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}
