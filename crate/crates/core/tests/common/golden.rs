use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;

use qrloop::domain::{FrequencyThresholds, Query, RagContext, RewriteDirection};
use qrloop::gateway::{AuxLabel, QualityLabel, RelevanceLevel};
use qrloop::jsonl::to_jsonl;
use qrloop::prompting::{
    build_generation_prompt, render_generation_instruction, GenerationRequest, SearchIntent, EXPLANATION_HIGH,
    EXPLANATION_MID, QUALITY_INSTRUCTION, RELEVANCE_INSTRUCTION,
};
use qrloop::trainset::{
    build_generation_sample, build_quality_sample, build_relevance_sample, GenerationLabels, LabelSource, QualityEntry,
    RelevanceEntry, TrainingSample,
};

pub fn golden(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn ctx() -> RagContext {
    RagContext::new(vec!["Wonton King".into()], vec!["wonton soup".into()]).unwrap()
}

fn wontom() -> Query {
    Query::new("q1", "wontom", 3, &FrequencyThresholds::default(), ctx()).unwrap()
}

/// The three sample types for the `wontom` fixture.
pub fn samples() -> [TrainingSample; 3] {
    let generation = build_generation_sample(
        &wontom(),
        &["wonton".into(), "wonton soup".into()],
        &GenerationLabels {
            typo: AuxLabel::Typo(true),
            typo_source: LabelSource::RuleOracle,
            intent: SearchIntent::Cuisine,
            intent_source: LabelSource::RuleOracle,
        },
        10,
    )
    .unwrap();
    let q = |rewrite: &str, label| QualityEntry {
        query: "wontom".into(),
        context: ctx(),
        rewrite: rewrite.into(),
        label,
        source: LabelSource::RuleOracle,
    };
    let quality = build_quality_sample(&[q("wonton", QualityLabel::Yes), q("wontom", QualityLabel::No)]).unwrap();
    let r = |restaurant: &str, cuisine: &str, label| RelevanceEntry {
        query: "wontom".into(),
        restaurant: restaurant.into(),
        cuisine: cuisine.into(),
        label,
    };
    let relevance = build_relevance_sample(&[
        r("None", "shrimp wonton", RelevanceLevel::Low),
        r("Wonton King", "None", RelevanceLevel::High),
        r("None", "pizza", RelevanceLevel::None),
    ])
    .unwrap();
    [generation, quality, relevance]
}

/// (golden file, rendered text) for every prompt and sample fixture.
pub fn renderings() -> Vec<(&'static str, String)> {
    let dirs = [
        RewriteDirection::KeywordExtraction,
        RewriteDirection::AliasSynonym,
        RewriteDirection::MainDish,
        RewriteDirection::LowRelevance,
    ];
    let tail = build_generation_prompt(&GenerationRequest::new(wontom(), 10, dirs).unwrap());
    let all: BTreeSet<_> = RewriteDirection::ALL.into_iter().collect();
    let [generation, quality, relevance] = samples();
    let jsonl = to_jsonl(&[generation.clone(), quality.clone(), relevance.clone()]);
    vec![
        ("tail_generation_instruction.txt", tail.instruction),
        ("tail_generation_user.txt", tail.user),
        (
            "full_generation_instruction.txt",
            render_generation_instruction(10, &all),
        ),
        ("explanation_high.txt", EXPLANATION_HIGH.to_string()),
        ("explanation_mid.txt", EXPLANATION_MID.to_string()),
        ("quality_instruction.txt", QUALITY_INSTRUCTION.to_string()),
        ("relevance_instruction.txt", RELEVANCE_INSTRUCTION.to_string()),
        ("generation_user.txt", generation.user),
        ("generation_assistant.txt", generation.assistant),
        ("quality_user.txt", quality.user),
        ("quality_assistant.txt", quality.assistant),
        ("relevance_user.txt", relevance.user),
        ("relevance_assistant.txt", relevance.assistant),
        ("samples.jsonl", jsonl),
    ]
}
