//! Initial trajectories and per-segment refinement candidates.
//!
//! Both operations render a prompt asset against a pluggable text
//! generator. Candidate extraction is tolerant of surrounding prose:
//! only `<refine>` bodies count, and any candidate that shares a
//! verbatim word span longer than the no-copy limit with the reference
//! solution is discarded.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::assets::{render, AssetStore};
use crate::backends::{generate_text, CompletionRequest, TextCompletion};
use crate::error::Error;
use crate::filters::PatternSet;
use crate::trajectory::{QuerySolutionPair, Segment, SegmentationPolicy, Trajectory};
use crate::Result;

/// Longest verbatim word span a candidate may share with the solution.
pub const NO_COPY_SPAN_WORDS: usize = 4;

/// Everything a segment expansion conditions on: the refined prefix,
/// the segment under edit, and the not-yet-refined suffix.
#[derive(Debug, Clone, Copy)]
pub struct RefinementContext<'a> {
    pub pair: &'a QuerySolutionPair,
    pub prefix: &'a [Segment],
    pub target: &'a Segment,
    pub suffix: &'a [Segment],
    pub iteration: usize,
}

impl<'a> RefinementContext<'a> {
    pub fn new(
        pair: &'a QuerySolutionPair,
        trajectory: &'a Trajectory,
        index: usize,
        iteration: usize,
    ) -> Result<RefinementContext<'a>> {
        let segments = trajectory.segments();
        if index >= segments.len() {
            return Err(Error::IndexOutOfRange {
                index,
                len: segments.len(),
            });
        }
        Ok(RefinementContext {
            pair,
            prefix: &segments[..index],
            target: &segments[index],
            suffix: &segments[index + 1..],
            iteration,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateOrigin {
    Generated,
    Original,
}

/// One proposed replacement for a segment. `score` is filled in by the
/// search when the candidate is evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub score: Option<f64>,
    pub origin: CandidateOrigin,
}

/// The candidates for one expansion. The incumbent segment is always
/// present exactly once, first; generation failures are noted rather
/// than fatal so a sweep can continue.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    pub failures: Vec<String>,
}

impl CandidateSet {
    /// Index of the incumbent candidate.
    pub fn original_index(&self) -> Option<usize> {
        self.candidates
            .iter()
            .position(|c| c.origin == CandidateOrigin::Original)
    }
}

/// A text generator: a completion backend plus the fixed call
/// parameters every generation request shares. The configured seed is
/// part of every request, so scripted runs are reproducible.
pub struct Generator {
    backend: Arc<dyn TextCompletion>,
    model: String,
    max_new_tokens: u32,
    sampling: BTreeMap<String, serde_json::Value>,
    seed: u64,
}

impl Generator {
    pub fn new(backend: Arc<dyn TextCompletion>, model: impl Into<String>, seed: u64) -> Generator {
        Generator {
            backend,
            model: model.into(),
            max_new_tokens: 2048,
            sampling: BTreeMap::new(),
            seed,
        }
    }

    pub fn with_max_new_tokens(mut self, max_new_tokens: u32) -> Generator {
        self.max_new_tokens = max_new_tokens;
        self
    }

    /// Extra sampling parameters passed through to the backend untouched.
    pub fn with_sampling(mut self, key: &str, value: serde_json::Value) -> Generator {
        self.sampling.insert(key.to_string(), value);
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn request(&self, prompt: String, extra: &[(&str, serde_json::Value)]) -> CompletionRequest {
        let mut req = CompletionRequest::generation(&self.model, prompt, self.max_new_tokens);
        req.sampling = self.sampling.clone();
        req.sampling
            .insert("seed".into(), serde_json::json!(self.seed));
        for (k, v) in extra {
            req.sampling.insert((*k).to_string(), v.clone());
        }
        req
    }

    pub fn generate(
        &self,
        prompt: String,
        extra: &[(&str, serde_json::Value)],
    ) -> Result<String> {
        let req = self.request(prompt, extra);
        let reply = generate_text(self.backend.as_ref(), &req)?;
        Ok(reply.text.expect("validated by generate_text"))
    }
}

/// Strips one `<think>...</think>` wrapper if the whole text is wrapped.
fn strip_think_wrapper(text: &str) -> &str {
    let trimmed = text.trim();
    match trimmed
        .strip_prefix("<think>")
        .and_then(|t| t.strip_suffix("</think>"))
    {
        Some(inner) => inner.trim(),
        None => trimmed,
    }
}

/// Generates the initial trajectory for a pair.
pub fn init_trajectory(
    pair: &QuerySolutionPair,
    generator: &Generator,
    assets: &AssetStore,
) -> Result<Trajectory> {
    let prompt = render(
        &assets.initial_thinking,
        &[
            ("query", pair.query.as_str()),
            ("solution", pair.solution.as_str()),
        ],
    )?;
    let text = generator.generate(prompt, &[])?;
    let body = strip_think_wrapper(&text);
    if body.is_empty() {
        return Err(Error::EmptyGeneration);
    }
    Trajectory::segment(body, SegmentationPolicy::BlankLine).map_err(|e| match e {
        Error::EmptyInput => Error::EmptyGeneration,
        other => other,
    })
}

/// Returns a verbatim word span longer than `max_words` shared between
/// `candidate` and `solution`, if any. Spans are contiguous word
/// sequences compared exactly.
pub fn shared_verbatim_span(
    candidate: &str,
    solution: &str,
    max_words: usize,
) -> Option<String> {
    let span = max_words + 1;
    let solution_words: Vec<&str> = solution.split_whitespace().collect();
    if solution_words.len() < span {
        return None;
    }
    let forbidden: HashSet<&[&str]> = solution_words.windows(span).collect();
    let candidate_words: Vec<&str> = candidate.split_whitespace().collect();
    candidate_words
        .windows(span)
        .find(|w| forbidden.contains(*w))
        .map(|w| w.join(" "))
}

/// Extracts all `<refine>...</refine>` bodies from a generated reply.
fn extract_refine_bodies(text: &str) -> Vec<&str> {
    let mut bodies = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("<refine>") {
        rest = &rest[start + "<refine>".len()..];
        match rest.find("</refine>") {
            Some(end) => {
                bodies.push(rest[..end].trim());
                rest = &rest[end + "</refine>".len()..];
            }
            None => break,
        }
    }
    bodies
}

/// Expands one segment into at most `k` generated candidates plus the
/// incumbent. Generator failures are recorded per call in the returned
/// set; candidates that are empty, duplicates, or violate the no-copy
/// constraint are dropped.
pub fn expand_segment(
    ctx: &RefinementContext<'_>,
    k: usize,
    generator: &Generator,
    assets: &AssetStore,
) -> Result<CandidateSet> {
    let mut set = CandidateSet::default();
    set.candidates.push(Candidate {
        text: ctx.target.text.clone(),
        score: None,
        origin: CandidateOrigin::Original,
    });
    if k == 0 {
        return Ok(set);
    }

    let join = |segments: &[Segment]| {
        segments
            .iter()
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join("\n\n")
    };
    let prompt = render(
        &assets.segment_edit,
        &[
            ("query", ctx.pair.query.as_str()),
            ("solution", ctx.pair.solution.as_str()),
            ("prefix", join(ctx.prefix).as_str()),
            ("target", ctx.target.text.as_str()),
            ("suffix", join(ctx.suffix).as_str()),
        ],
    )?;

    let mut seen: HashSet<String> = HashSet::new();
    seen.insert(ctx.target.text.clone());
    for ordinal in 0..k {
        let generated_count = set.candidates.len() - 1;
        if generated_count >= k {
            break;
        }
        let reply = generator.generate(
            prompt.clone(),
            &[
                ("iteration", serde_json::json!(ctx.iteration)),
                ("candidate", serde_json::json!(ordinal)),
            ],
        );
        let text = match reply {
            Ok(text) => text,
            Err(err) => {
                set.failures.push(format!("candidate {ordinal}: {err}"));
                continue;
            }
        };
        for body in extract_refine_bodies(&text) {
            if set.candidates.len() > k {
                break;
            }
            let normalized = match Trajectory::from_segments([body]) {
                Ok(t) => t.segments()[0].text.clone(),
                Err(_) => continue,
            };
            if seen.contains(&normalized) {
                continue;
            }
            if let Some(span) =
                shared_verbatim_span(&normalized, &ctx.pair.solution, NO_COPY_SPAN_WORDS)
            {
                log::debug!(
                    "pair={} dropped candidate copying {:?}",
                    ctx.pair.id,
                    span
                );
                continue;
            }
            seen.insert(normalized.clone());
            set.candidates.push(Candidate {
                text: normalized,
                score: None,
                origin: CandidateOrigin::Generated,
            });
        }
    }
    Ok(set)
}

/// Per-pattern occurrence counts, case-insensitive on word boundaries.
pub fn inject_thinking_patterns_check(
    text: &str,
    patterns: &[String],
) -> BTreeMap<String, usize> {
    PatternSet::compile(patterns).count_occurrences(text)
}
