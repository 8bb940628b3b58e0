//! Iterative LLM query-rewrite pipeline for food-delivery search.
//!
//! Rewrites are generated by a pluggable model gateway, deployed into a
//! replayed multi-channel retrieval simulation, credited from clicks, and
//! turned into post-training files for the next model. The `eval` module
//! holds the offline precision, relevance and recall@K protocols.

pub mod domain;
pub mod eval;
pub mod gateway;
pub mod jsonl;
pub mod pipeline;
pub mod prompting;
pub mod rules;
pub mod search;
pub mod signal;
pub mod synth;
pub mod trainset;
