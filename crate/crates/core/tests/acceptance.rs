//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach stdout. A
//! criterion listed in `KNOWN_FAILING` still prints FAIL but does not fail the
//! run; if it ever starts passing the run fails so the list gets updated.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use qrloop::eval::embed::{embed, inner, Embedder, HashEmbedder};
use qrloop::eval::{
    candidate_scores, evaluate, precision_coverage, recall_at_k, BenchmarkI, BenchmarkII, EvalInputs, DEFAULT_KS,
};
use qrloop::jsonl::read_jsonl;
use qrloop::pipeline::{IterateOutcome, Pipeline, PipelineConfig, Workdir};
use qrloop::prompting::{parse_generation_output, render_generation_output, GenerationOutput, SearchIntent};
use qrloop::rules::RuleOracle;
use qrloop::search::ExposureEvent;
use qrloop::signal::label_signals;
use qrloop::synth::{context_rewrites, generate_world, random_token_rewrites, write_world, SynthConfig};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Recall@K is not monotone in the rewrite set under max scoring, so the
/// literal dominance property cannot hold on random instances.
const KNOWN_FAILING: &[&str] = &["monotonicity-dominance"];

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> (bool, String)) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok((pass, detail)) => Outcome { name, pass, detail },
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome {
                name,
                pass: false,
                detail: format!("panicked: {msg}"),
            }
        }
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn signal_oracle_equivalence() -> (bool, String) {
    let start = Instant::now();
    let mut rng = common::rng(1);
    let (mut mismatches, mut events, mut labels) = (0, 0, 0);
    for _ in 0..1000 {
        let log = common::random_log(&mut rng, 10_000, 8);
        let got = label_signals(&log);
        let set: BTreeSet<_> = got.iter().cloned().collect();
        let want = common::signal_oracle(&log);
        if set.len() != got.len() || set != want {
            mismatches += 1;
        }
        events += log.len();
        labels += want.len();
    }
    let elapsed = start.elapsed();
    let pass = mismatches == 0 && elapsed < Duration::from_secs(30);
    let detail = format!(
        "1000 logs, {events} events, {labels} labels, {mismatches} mismatches, {}",
        secs(elapsed)
    );
    (pass, detail)
}

fn recall_oracle_equivalence() -> (bool, String) {
    let start = Instant::now();
    let embedder = HashEmbedder::new(32).unwrap();
    let mut rng = common::rng(2);
    let mut mismatches = 0;
    for _ in 0..200 {
        let (entry, rewrites) = common::random_instance(&mut rng, 500);
        let out = recall_at_k(
            &common::rewrites_map(&rewrites),
            &common::single(entry.clone()),
            &DEFAULT_KS,
            &embedder,
        )
        .unwrap();
        for k in DEFAULT_KS {
            if out.recall_at[&k] != common::recall_oracle(&entry, &rewrites, k, &embedder) {
                mismatches += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = mismatches == 0 && elapsed < Duration::from_secs(60);
    (
        pass,
        format!(
            "200 instances x K{DEFAULT_KS:?}, {mismatches} mismatches, {}",
            secs(elapsed)
        ),
    )
}

fn recall_of(entry: &qrloop::eval::BenchIIEntry, rewrites: &[String], embedder: &HashEmbedder) -> BTreeMap<usize, f64> {
    recall_at_k(
        &common::rewrites_map(rewrites),
        &common::single(entry.clone()),
        &DEFAULT_KS,
        embedder,
    )
    .unwrap()
    .recall_at
}

fn monotonicity_dominance() -> (bool, String) {
    let embedder = HashEmbedder::new(32).unwrap();
    let mut rng = common::rng(3);
    let (mut mono_violations, mut score_violations, mut recall_violations) = (0, 0, 0);
    for _ in 0..100 {
        let (entry, _) = common::random_instance(&mut rng, 500);
        let full: Vec<String> = {
            let mut set = BTreeSet::new();
            while set.len() < 4 {
                set.insert(common::phrase(&mut rng, 2));
            }
            let mut v: Vec<String> = set.into_iter().collect();
            v.shuffle(&mut rng);
            v
        };
        let subset: Vec<String> = loop {
            let s: Vec<String> = full.iter().filter(|_| rng.gen_bool(0.5)).cloned().collect();
            if !s.is_empty() && s.len() < full.len() {
                break s;
            }
        };
        let full_recall = recall_of(&entry, &full, &embedder);
        let sub_recall = recall_of(&entry, &subset, &embedder);
        for r in [&full_recall, &sub_recall] {
            let v: Vec<f64> = DEFAULT_KS.iter().map(|k| r[k]).collect();
            if v.windows(2).any(|w| w[0] > w[1]) {
                mono_violations += 1;
            }
        }
        let vecs = |rws: &[String]| -> Vec<Vec<f64>> { rws.iter().map(|r| embedder.embed(r).unwrap()).collect() };
        let full_scores = candidate_scores(&vecs(&full), &entry.candidates, &embedder).unwrap();
        let sub_scores = candidate_scores(&vecs(&subset), &entry.candidates, &embedder).unwrap();
        if full_scores.iter().zip(&sub_scores).any(|(f, s)| f < s) {
            score_violations += 1;
        }
        recall_violations += DEFAULT_KS.iter().filter(|k| full_recall[k] < sub_recall[k]).count();
    }
    let pass = mono_violations == 0 && score_violations == 0 && recall_violations == 0;
    let detail = format!(
        "100 subset pairs: K-monotonicity violations {mono_violations}, per-candidate score dominance violations \
         {score_violations}, recall dominance violations {recall_violations}/300"
    );
    (pass, detail)
}

fn run_loop(config: &Path, work: &Path) -> Workdir {
    let p = Pipeline::new(PipelineConfig::load(config).unwrap()).unwrap();
    let wd = Workdir::new(work);
    assert_eq!(p.iterate(&wd, 3).unwrap(), IterateOutcome::Completed { rounds: 3 });
    wd
}

fn loop_determinism() -> (bool, String) {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let world = generate_world(&SynthConfig::default());
    let config = write_world(&world, &dir.path().join("fixture"), 7).unwrap();
    let a = run_loop(&config, &dir.path().join("a"));
    let b = run_loop(&config, &dir.path().join("b"));
    let (ta, tb) = (common::file_tree(a.root()), common::file_tree(b.root()));
    let differing = ta.keys().chain(tb.keys()).filter(|p| ta.get(*p) != tb.get(*p)).count();

    let state = a.load_state().unwrap();
    let positives: BTreeSet<(String, String)> = a.load_vocab(&state).unwrap().positives().map(|r| r.key()).collect();
    let mut union = BTreeSet::new();
    for k in 0..3 {
        let events: Vec<ExposureEvent> = read_jsonl(&a.exposures_path(k)).unwrap();
        union.extend(
            common::signal_oracle(&events)
                .into_iter()
                .map(|l| (l.query_id, l.rewrite_text)),
        );
    }
    let elapsed = start.elapsed();
    let portions: Vec<String> = state
        .stats
        .iter()
        .map(|s| format!("{:.1}%", s.unique_portion * 100.0))
        .collect();
    let pass = differing == 0 && positives == union && elapsed < Duration::from_secs(120);
    let detail = format!(
        "{} files, {differing} differ; {} positives vs {} oracle labels (equal: {}); unique portion {}; {}",
        ta.len(),
        positives.len(),
        union.len(),
        positives == union,
        portions.join(" -> "),
        secs(elapsed)
    );
    (pass, detail)
}

fn format_fidelity() -> (bool, String) {
    let renderings = common::golden::renderings();
    let bad: Vec<&str> = renderings
        .iter()
        .filter(|(file, text)| *text != common::golden::golden(file))
        .map(|(file, _)| *file)
        .collect();
    let detail = format!(
        "{}/{} fixtures byte-exact {bad:?}",
        renderings.len() - bad.len(),
        renderings.len()
    );
    (bad.is_empty(), detail)
}

const MEANINGS: [&str; 4] = [
    "The query is a typo.",
    "The query is not a typo.",
    "User wants a warm noodle dish.",
    "A restaurant name, maybe misspelled.",
];

fn random_output(rng: &mut ChaCha8Rng) -> GenerationOutput {
    let mut rewrites = Vec::new();
    for _ in 0..rng.gen_range(1..=10) {
        let p = common::phrase(rng, 3);
        if !rewrites.contains(&p) {
            rewrites.push(p);
        }
    }
    GenerationOutput {
        query_meaning: MEANINGS[rng.gen_range(0..MEANINGS.len())].to_string(),
        correction: rng.gen_bool(0.5).then(|| common::phrase(rng, 2)),
        intent: [SearchIntent::Cuisine, SearchIntent::Restaurant, SearchIntent::Neither][rng.gen_range(0..3)],
        rewrites,
    }
}

fn curly(s: &str) -> String {
    let mut open = true;
    s.chars()
        .map(|c| {
            if c == '"' {
                open = !open;
                if open {
                    '\u{201D}'
                } else {
                    '\u{201C}'
                }
            } else {
                c
            }
        })
        .collect()
}

fn chatter(s: &str, rng: &mut ChaCha8Rng) -> String {
    const BEFORE: [&str; 3] = [
        "Sure! Here is the result:\n",
        "Output: ",
        "Note {draft}: analysis done.\n\n",
    ];
    const AFTER: [&str; 3] = ["", "\nHope this helps.", "\n\nLet me know if you need more rewrites."];
    format!("{}{s}{}", BEFORE[rng.gen_range(0..3)], AFTER[rng.gen_range(0..3)])
}

fn fullwidth(s: &str, out: &GenerationOutput) -> String {
    s.replace(&out.rewrites.join(", "), &out.rewrites.join("，"))
}

/// A benign mutation (expected to parse back to `out`) or, every 25th case,
/// a destructive one (expected to be rejected).
fn mutate(i: usize, out: &GenerationOutput, rng: &mut ChaCha8Rng) -> (String, bool) {
    let s = render_generation_output(out);
    if i % 25 == 24 {
        let broken = match (i / 25) % 4 {
            0 => s[..s.len() / 2].to_string(),
            1 => s.replace("\"Rewrite\"", "\"Summary\""),
            2 => s.replace(['{', '}'], ""),
            _ => s.replace(out.intent.as_str(), "Dessert"),
        };
        return (broken, false);
    }
    let m = match i % 8 {
        0 => curly(&s),
        1 => chatter(&s, rng),
        2 => fullwidth(&s, out),
        3 => format!("```json\n{s}\n```"),
        4 => s
            .replace(", \"", ",\n  \"")
            .replace("{\"", "{\n  \"")
            .replace("\"}", "\"\n}"),
        5 => s
            .replace("\": \"", "'': ``")
            .replace("\", \"", "'', ``")
            .replace("{\"", "{``")
            .replace("\"}", "''}"),
        6 => chatter(&fullwidth(&curly(&s), out), rng),
        _ => s
            .replace("\"Rewrite\"", "\"Rewrites\"")
            .replace("\"Search intent\"", "\"search_intent\""),
    };
    (m, true)
}

fn parser_robustness() -> (bool, String) {
    let mut rng = common::rng(6);
    let mut panics = 0;
    let mut attempt = |raw: &str| match catch_unwind(|| parse_generation_output(raw)) {
        Ok(r) => Some(r),
        Err(_) => {
            panics += 1;
            None
        }
    };

    let well_formed: Vec<GenerationOutput> = (0..100).map(|_| random_output(&mut rng)).collect();
    let wf_ok = well_formed
        .iter()
        .filter(|o| attempt(&render_generation_output(o)) == Some(Ok((*o).clone())))
        .count();

    let (mut parsed, mut typed_rejects, mut wrong) = (0, 0, 0);
    for i in 0..200 {
        let out = random_output(&mut rng);
        let (raw, benign) = mutate(i, &out, &mut rng);
        match attempt(&raw) {
            Some(Ok(got)) if benign && got == out => parsed += 1,
            Some(Ok(_)) => wrong += 1,
            Some(Err(_)) => typed_rejects += 1,
            None => {}
        }
    }
    let rate = parsed as f64 / 200.0;
    let pass = wf_ok == 100 && rate >= 0.95 && panics == 0 && wrong == 0;
    let detail = format!(
        "well-formed {wf_ok}/100; mutations parsed {parsed}/200 ({:.1}%), typed errors {typed_rejects}, \
         wrong parses {wrong}, panics {panics}",
        rate * 100.0
    );
    (pass, detail)
}

fn directional_sanity() -> (bool, String) {
    let world = generate_world(&SynthConfig::default());
    let bench = BenchmarkI::from_rows(world.bench_i.clone()).unwrap();
    let mut rng = common::rng(7);
    let with_context: BTreeMap<String, Vec<String>> = world
        .queries
        .iter()
        .map(|q| (q.id.clone(), context_rewrites(q, 10)))
        .collect();
    let random: BTreeMap<String, Vec<String>> = world
        .queries
        .iter()
        .map(|q| (q.id.clone(), random_token_rewrites(&world.lexicon, 10, &mut rng)))
        .collect();
    let (c, r) = (
        precision_coverage(&with_context, &bench),
        precision_coverage(&random, &bench),
    );
    let pass = c > r && c >= 2.0 * r;
    (pass, format!("context {c:.4} vs random-token {r:.4} ({:.1}x)", c / r))
}

fn metric_bounds() -> (bool, String) {
    let world = generate_world(&SynthConfig::default());
    let bench_i = BenchmarkI::from_rows(world.bench_i.clone()).unwrap();
    let bench_ii = BenchmarkII::from_rows(world.bench_ii.clone()).unwrap();
    let embedder = HashEmbedder::new(64).unwrap();
    let mut rng = common::rng(8);
    let sources: Vec<(&str, BTreeMap<String, Vec<String>>)> = vec![
        (
            "context",
            world
                .queries
                .iter()
                .map(|q| (q.id.clone(), context_rewrites(q, 10)))
                .collect(),
        ),
        (
            "random",
            world
                .queries
                .iter()
                .map(|q| (q.id.clone(), random_token_rewrites(&world.lexicon, 10, &mut rng)))
                .collect(),
        ),
    ];
    let in_unit = |v: f64| (0.0..=1.0).contains(&v);
    let (mut out_of_bounds, mut max_gap) = (0, 0.0f64);
    for (source, rewrites) in &sources {
        let inputs = EvalInputs {
            source,
            rewrites,
            bench_i: Some(&bench_i),
            bench_ii: Some(&bench_ii),
            ks: &DEFAULT_KS,
        };
        let report = evaluate(&inputs, &RuleOracle, &embedder).unwrap();
        let mut values: Vec<f64> = report.precision.into_iter().chain(report.relevance_high_rate).collect();
        values.extend(report.recall_at.values());
        values.extend(report.per_query.precision.iter().map(|p| p.precision));
        values.extend(
            report
                .per_query
                .recall
                .iter()
                .flat_map(|q| q.recall_at.values().copied()),
        );
        out_of_bounds += values.iter().filter(|v| !in_unit(**v)).count();

        let (p, r, recall) = report.recompute();
        let gaps = [(report.precision, p), (report.relevance_high_rate, r)]
            .into_iter()
            .map(|(a, b)| (a.unwrap() - b.unwrap()).abs())
            .chain(report.recall_at.iter().map(|(k, v)| (v - recall[k]).abs()));
        max_gap = gaps.fold(max_gap, f64::max);
    }

    let mut max_norm_err = 0.0f64;
    for dim in [8, 32, 64, 256] {
        for _ in 0..250 {
            let text = common::phrase(&mut rng, 4);
            let v = embed(&text, dim).unwrap();
            max_norm_err = max_norm_err.max((inner(&v, &v).sqrt() - 1.0).abs());
        }
    }
    let pass = out_of_bounds == 0 && max_gap <= 1e-9 && max_norm_err <= 1e-6;
    let detail =
        format!("{out_of_bounds} values outside [0,1]; max recompute gap {max_gap:e}; max |norm-1| {max_norm_err:e}");
    (pass, detail)
}

fn main() -> ExitCode {
    let outcomes = [
        check("signal-oracle", signal_oracle_equivalence),
        check("recall-oracle", recall_oracle_equivalence),
        check("monotonicity-dominance", monotonicity_dominance),
        check("loop-determinism", loop_determinism),
        check("format-fidelity", format_fidelity),
        check("parser-robustness", parser_robustness),
        check("directional-sanity", directional_sanity),
        check("metric-bounds", metric_bounds),
    ];
    let mut unexpected = Vec::new();
    for o in &outcomes {
        let known = KNOWN_FAILING.contains(&o.name);
        let tag = if o.pass { "PASS" } else { "FAIL" };
        let note = if known && !o.pass { " (known, see README)" } else { "" };
        println!("[{tag}] {}: {}{note}", o.name, o.detail);
        if o.pass == known {
            unexpected.push(o.name);
        }
    }
    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!("acceptance: {passed}/{} criteria pass", outcomes.len());
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected outcome for {unexpected:?}");
        ExitCode::FAILURE
    }
}
