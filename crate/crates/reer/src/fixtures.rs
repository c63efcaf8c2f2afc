//! The shipped fixture corpus and its reference-run manifest.
//!
//! Fifty (query, solution) pairs across ten categories, embedded so
//! offline runs need no input files. The manifest freezes the values a
//! committed reference demo run produced; the acceptance suite holds
//! future runs to at least that baseline.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::trajectory::QuerySolutionPair;

const DEMO_PAIRS_JSONL: &str = include_str!("../fixtures/demo_pairs.jsonl");
const MANIFEST_JSON: &str = include_str!("../fixtures/manifest.json");

/// The embedded 50-pair corpus.
pub fn demo_pairs() -> Vec<QuerySolutionPair> {
    DEMO_PAIRS_JSONL
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("shipped corpus parses"))
        .collect()
}

/// Hex SHA-256 of the embedded corpus bytes.
pub fn corpus_hash() -> String {
    let mut h = Sha256::new();
    h.update(DEMO_PAIRS_JSONL.as_bytes());
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Parameters the reference demo run used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoDefaults {
    pub scorer_order: usize,
    pub candidates_per_expansion: usize,
    pub passes: usize,
    pub seed: u64,
    pub max_iterations: usize,
}

/// Values measured by the committed reference demo run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub improvement_fraction: f64,
    pub mean_initial_ppl: f64,
    pub mean_final_ppl: f64,
    pub mean_words_before: f64,
    pub mean_words_after: f64,
    pub repetition_passes: usize,
    pub end_of_thinking_passes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureManifest {
    pub pair_count: usize,
    pub corpus_sha256: String,
    pub demo: DemoDefaults,
    pub baseline: Baseline,
}

/// The shipped manifest.
pub fn manifest() -> FixtureManifest {
    serde_json::from_str(MANIFEST_JSON).expect("shipped manifest parses")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_has_fifty_valid_distinct_pairs() {
        let pairs = demo_pairs();
        assert_eq!(pairs.len(), 50);
        let mut ids = std::collections::HashSet::new();
        for pair in &pairs {
            pair.validate().unwrap();
            assert!(ids.insert(pair.id.clone()), "duplicate id {}", pair.id);
        }
    }

    #[test]
    fn corpus_spans_multiple_categories() {
        let pairs = demo_pairs();
        let categories: std::collections::HashSet<&str> =
            pairs.iter().map(|p| p.category.as_str()).collect();
        assert!(categories.len() >= 8, "got {categories:?}");
    }

    #[test]
    fn manifest_matches_the_embedded_corpus() {
        let m = manifest();
        assert_eq!(m.pair_count, demo_pairs().len());
        assert_eq!(m.corpus_sha256, corpus_hash());
    }
}
