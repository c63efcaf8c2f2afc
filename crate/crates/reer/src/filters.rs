//! Post-synthesis quality gates.
//!
//! Two heuristics prune degenerate trajectories: reflective trigger
//! phrases persisting into the final stretch of the text (a failure to
//! conclude), and a high share of total word n-grams concentrated in
//! the top few (degenerative looping). Both are pure functions; running
//! them twice yields identical verdicts.

use std::collections::HashMap;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};

/// Default share of trailing characters checked by the
/// end-of-thinking filter.
pub const DEFAULT_TAIL_FRACTION: f64 = 0.10;
/// Defaults for the repetition filter: word trigrams, top-3 share,
/// fail above 0.15.
pub const DEFAULT_NGRAM: usize = 3;
pub const DEFAULT_TOP_K: usize = 3;
pub const DEFAULT_REPETITION_THRESHOLD: f64 = 0.15;

/// Compiled case-insensitive word-boundary matchers for a pattern list.
pub struct PatternSet {
    patterns: Vec<(String, Regex)>,
}

impl PatternSet {
    /// Compiles literal patterns into word-boundary matchers. Patterns
    /// are matched case-insensitively; multi-word patterns match across
    /// single spaces.
    pub fn compile(patterns: &[String]) -> PatternSet {
        let compiled = patterns
            .iter()
            .map(|p| {
                let re = RegexBuilder::new(&format!(r"\b{}\b", regex::escape(p)))
                    .case_insensitive(true)
                    .build()
                    .expect("escaped literal pattern compiles");
                (p.clone(), re)
            })
            .collect();
        PatternSet { patterns: compiled }
    }

    /// Occurrence count per pattern.
    pub fn count_occurrences(&self, text: &str) -> std::collections::BTreeMap<String, usize> {
        self.patterns
            .iter()
            .map(|(name, re)| (name.clone(), re.find_iter(text).count()))
            .collect()
    }

    /// All matches as (pattern, character offset of the match start).
    pub fn matches_with_positions(&self, text: &str) -> Vec<(String, usize)> {
        let mut byte_to_char: HashMap<usize, usize> = HashMap::new();
        for (char_idx, (byte_idx, _)) in text.char_indices().enumerate() {
            byte_to_char.insert(byte_idx, char_idx);
        }
        let mut out = Vec::new();
        for (name, re) in &self.patterns {
            for m in re.find_iter(text) {
                out.push((name.clone(), byte_to_char[&m.start()]));
            }
        }
        out.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        out
    }

    /// Whether any pattern occurs anywhere in the text.
    pub fn any_match(&self, text: &str) -> bool {
        self.patterns.iter().any(|(_, re)| re.is_match(text))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterId {
    EndOfThinking,
    Repetition,
}

/// Thresholds for both filters; the config-file surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub tail_fraction: f64,
    pub ngram: usize,
    pub top_k: usize,
    pub repetition_threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            tail_fraction: DEFAULT_TAIL_FRACTION,
            ngram: DEFAULT_NGRAM,
            top_k: DEFAULT_TOP_K,
            repetition_threshold: DEFAULT_REPETITION_THRESHOLD,
        }
    }
}

/// Runs both quality gates over one trajectory text.
pub fn filter_trajectory(
    text: &str,
    patterns: &PatternSet,
    config: &FilterConfig,
) -> Vec<FilterVerdict> {
    vec![
        end_of_thinking_filter(text, patterns, config.tail_fraction),
        repetition_filter(text, config.ngram, config.top_k, config.repetition_threshold),
    ]
}

/// One matched item backing a verdict: a pattern with its character
/// position, or an n-gram with its count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDetail {
    pub item: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
}

/// Outcome of one filter over one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub filter_id: FilterId,
    pub passed: bool,
    /// Pattern count in the tail, or the top-k n-gram share.
    pub score: f64,
    pub details: Vec<FilterDetail>,
}

/// Fails a text whose reflective trigger phrases persist into the last
/// `tail_fraction` of its characters.
///
/// The tail is the final `ceil(tail_fraction * chars)` characters; a
/// match whose start lands on the tail's first character already fails.
/// Empty text passes vacuously.
pub fn end_of_thinking_filter(
    text: &str,
    patterns: &PatternSet,
    tail_fraction: f64,
) -> FilterVerdict {
    assert!(
        tail_fraction > 0.0 && tail_fraction < 1.0,
        "tail_fraction must be in (0, 1)"
    );
    let char_count = text.chars().count();
    if char_count == 0 {
        return FilterVerdict {
            filter_id: FilterId::EndOfThinking,
            passed: true,
            score: 0.0,
            details: Vec::new(),
        };
    }
    let tail_len = (tail_fraction * char_count as f64).ceil() as usize;
    let tail_start = char_count - tail_len.min(char_count);
    let details: Vec<FilterDetail> = patterns
        .matches_with_positions(text)
        .into_iter()
        .filter(|(_, pos)| *pos >= tail_start)
        .map(|(item, pos)| FilterDetail {
            item,
            position: Some(pos),
            count: None,
        })
        .collect();
    FilterVerdict {
        filter_id: FilterId::EndOfThinking,
        passed: details.is_empty(),
        score: details.len() as f64,
        details,
    }
}

/// Fails a text whose `top_k` most frequent word n-grams account for
/// more than `threshold` of all its n-grams.
///
/// Tokens are lowercased whitespace-split words. Texts with fewer than
/// `n` tokens score 0 and pass.
pub fn repetition_filter(text: &str, n: usize, top_k: usize, threshold: f64) -> FilterVerdict {
    assert!(n >= 1 && top_k >= 1, "n and top_k must be >= 1");
    assert!(
        threshold > 0.0 && threshold <= 1.0,
        "threshold must be in (0, 1]"
    );
    let tokens: Vec<String> = text
        .split_whitespace()
        .map(|w| w.to_lowercase())
        .collect();
    if tokens.len() < n {
        return FilterVerdict {
            filter_id: FilterId::Repetition,
            passed: true,
            score: 0.0,
            details: Vec::new(),
        };
    }
    let total = tokens.len() - n + 1;
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    let mut ranked: Vec<(&[String], usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let top: Vec<(&[String], usize)> = ranked.into_iter().take(top_k).collect();
    let top_sum: usize = top.iter().map(|(_, c)| c).sum();
    let score = top_sum as f64 / total as f64;
    FilterVerdict {
        filter_id: FilterId::Repetition,
        passed: score <= threshold,
        score,
        details: top
            .into_iter()
            .map(|(gram, count)| FilterDetail {
                item: gram.join(" "),
                position: None,
                count: Some(count),
            })
            .collect(),
    }
}
