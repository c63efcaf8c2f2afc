//! Perplexity scoring of a solution conditioned on query and trajectory.
//!
//! Two scorers implement the same contract: a remote logprob-echo
//! backend (see [`RemoteScorer`]) and the built-in character n-gram
//! reference model, which is deterministic and runs offline. Perplexity
//! values are only ever compared within one scorer, so the token unit
//! (backend tokens vs characters) does not need to match across them.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::assets::{render, AssetStore};
use crate::backends::{complete_with_logprobs, CompletionRequest, TextCompletion};
use crate::error::Error;
use crate::trajectory::{QuerySolutionPair, Trajectory};
use crate::Result;

/// Query characters outside the model alphabet map to this reserved
/// symbol so every character keeps a nonzero smoothed probability.
/// Corpora should not themselves contain it.
pub const UNKNOWN_SYMBOL: char = '\u{FFFD}';

/// The rendered conditioning text plus the solution to score.
///
/// `boundary` is a character offset into `prompt + solution`; the
/// suffix starting there is exactly the solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreContext {
    pub prompt: String,
    pub solution: String,
    pub boundary: usize,
    /// Version tag of the template the prompt was rendered from.
    pub template_version: String,
}

impl ScoreContext {
    pub fn new(prompt: String, solution: String, template_version: String) -> ScoreContext {
        let boundary = prompt.chars().count();
        ScoreContext {
            prompt,
            solution,
            boundary,
            template_version,
        }
    }

    /// Prompt and solution concatenated; the text a scoring backend
    /// echoes.
    pub fn full_text(&self) -> String {
        format!("{}{}", self.prompt, self.solution)
    }
}

/// Per-token logprobs of the solution and their aggregate perplexity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    /// Natural-log probabilities, one per scored token, all <= 0.
    pub token_logprobs: Vec<f64>,
    /// exp of the mean negative log-likelihood; >= 1.
    pub ppl: f64,
    pub token_count: usize,
    pub scorer_id: String,
    pub template_version: String,
}

/// Renders the scoring template for (pair, trajectory).
///
/// The prompt embeds the query, then the trajectory wrapped in think
/// markers, and ends with the answer scaffold, so the solution begins
/// exactly at the boundary. Byte-deterministic for fixed inputs and
/// template version.
pub fn assemble_scoring_prompt(
    pair: &QuerySolutionPair,
    trajectory: &Trajectory,
    assets: &AssetStore,
) -> Result<ScoreContext> {
    let prompt = render(
        &assets.scoring_context,
        &[
            ("query", pair.query.as_str()),
            ("trajectory", trajectory.join().as_str()),
        ],
    )?;
    Ok(ScoreContext::new(
        prompt,
        pair.solution.clone(),
        assets.scoring_context.version_tag(),
    ))
}

/// exp(-mean(logprobs)). Errors on an empty list and on entries that
/// are not finite or are positive.
pub fn perplexity(token_logprobs: &[f64]) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(Error::EmptyLogprobs);
    }
    for (index, &value) in token_logprobs.iter().enumerate() {
        if !value.is_finite() || value > 0.0 {
            return Err(Error::InvalidLogprob { index, value });
        }
    }
    let mean = token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64;
    Ok((-mean).exp())
}

struct ContextCounts {
    total: u32,
    next: HashMap<char, u32>,
}

/// Character n-gram model with add-one smoothing applied at query time.
///
/// Deterministic given (corpus, order). The alphabet is the set of
/// distinct corpus characters; the smoothed conditional distribution
/// over it sums to one for every context.
pub struct ReferenceLm {
    order: usize,
    contexts: HashMap<String, ContextCounts>,
    alphabet: BTreeSet<char>,
}

impl ReferenceLm {
    /// Counts all length-`order` character windows of `corpus`.
    pub fn train(corpus: &str, order: usize) -> Result<ReferenceLm> {
        if order == 0 {
            return Err(Error::InvalidOrder);
        }
        let chars: Vec<char> = corpus.chars().collect();
        if chars.len() < order {
            return Err(Error::CorpusTooShort {
                len: chars.len(),
                order,
            });
        }
        let alphabet: BTreeSet<char> = chars.iter().copied().collect();
        let mut contexts: HashMap<String, ContextCounts> = HashMap::new();
        for window in chars.windows(order) {
            let ctx: String = window[..order - 1].iter().collect();
            let target = window[order - 1];
            let entry = contexts.entry(ctx).or_insert_with(|| ContextCounts {
                total: 0,
                next: HashMap::new(),
            });
            entry.total += 1;
            *entry.next.entry(target).or_insert(0) += 1;
        }
        Ok(ReferenceLm {
            order,
            contexts,
            alphabet,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alphabet(&self) -> &BTreeSet<char> {
        &self.alphabet
    }

    fn map_symbol(&self, c: char) -> char {
        if self.alphabet.contains(&c) {
            c
        } else {
            UNKNOWN_SYMBOL
        }
    }

    /// ln P(target | context) with add-one smoothing over the alphabet.
    ///
    /// `context` may be shorter than order-1; it is front-padded with
    /// the unknown symbol. Unknown characters in either position map to
    /// the unknown symbol, which receives the add-one numerator.
    pub fn conditional_logprob(&self, context: &[char], target: char) -> f64 {
        let need = self.order - 1;
        let mut key = String::with_capacity(need);
        for _ in context.len()..need {
            key.push(UNKNOWN_SYMBOL);
        }
        let skip = context.len().saturating_sub(need);
        for &c in &context[skip..] {
            key.push(self.map_symbol(c));
        }
        let target = self.map_symbol(target);
        let (count, total) = match self.contexts.get(&key) {
            Some(cc) => (cc.next.get(&target).copied().unwrap_or(0), cc.total),
            None => (0, 0),
        };
        let vocab = self.alphabet.len() as f64;
        (((count + 1) as f64) / (total as f64 + vocab)).ln()
    }

    /// One logprob per character of the solution, each conditioned on
    /// the preceding order-1 characters of the full concatenation, so
    /// the prompt's tail conditions the first characters of the
    /// solution.
    pub fn score(&self, ctx: &ScoreContext) -> Result<ScoreResult> {
        if ctx.solution.is_empty() {
            return Err(Error::EmptySolution);
        }
        let full: Vec<char> = ctx.full_text().chars().collect();
        let mut logprobs = Vec::with_capacity(full.len() - ctx.boundary);
        for j in ctx.boundary..full.len() {
            let start = j.saturating_sub(self.order - 1);
            logprobs.push(self.conditional_logprob(&full[start..j], full[j]));
        }
        let ppl = perplexity(&logprobs)?;
        let token_count = logprobs.len();
        Ok(ScoreResult {
            token_logprobs: logprobs,
            ppl,
            token_count,
            scorer_id: format!("reference_lm(order={})", self.order),
            template_version: ctx.template_version.clone(),
        })
    }
}

/// Anything that can turn a score context into a perplexity.
///
/// Scoring is pure with respect to the context and safe to invoke
/// concurrently.
pub trait Scorer: Send + Sync {
    fn id(&self) -> String;
    fn score(&self, ctx: &ScoreContext) -> Result<ScoreResult>;
}

/// Where the reference scorer's training corpus comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    /// Retrain on the conditioning text of every context scored. The
    /// trajectory then shapes the model that scores the solution: a
    /// plan that anticipates the solution's wording makes the solution
    /// more predictable and lowers its perplexity.
    Conditioning,
    /// Train once on an external corpus and reuse it for every score.
    Fixed,
}

/// Offline scorer backed by [`ReferenceLm`]. Tokens are characters.
pub struct ReferenceLmScorer {
    order: usize,
    source: CorpusSource,
    fixed: Option<ReferenceLm>,
}

impl ReferenceLmScorer {
    pub fn conditioning(order: usize) -> Result<ReferenceLmScorer> {
        if order == 0 {
            return Err(Error::InvalidOrder);
        }
        Ok(ReferenceLmScorer {
            order,
            source: CorpusSource::Conditioning,
            fixed: None,
        })
    }

    pub fn fixed(corpus: &str, order: usize) -> Result<ReferenceLmScorer> {
        Ok(ReferenceLmScorer {
            order,
            source: CorpusSource::Fixed,
            fixed: Some(ReferenceLm::train(corpus, order)?),
        })
    }
}

impl Scorer for ReferenceLmScorer {
    fn id(&self) -> String {
        let source = match self.source {
            CorpusSource::Conditioning => "conditioning",
            CorpusSource::Fixed => "fixed",
        };
        format!("reference_lm(order={},corpus={})", self.order, source)
    }

    fn score(&self, ctx: &ScoreContext) -> Result<ScoreResult> {
        let trained;
        let lm = match &self.fixed {
            Some(lm) => lm,
            None => {
                trained = ReferenceLm::train(&ctx.prompt, self.order)?;
                &trained
            }
        };
        let mut result = lm.score(ctx)?;
        result.scorer_id = self.id();
        Ok(result)
    }
}

/// Scorer backed by a completion backend that echoes per-token
/// logprobs. Solution tokens are those whose character offset is at or
/// past the context boundary.
pub struct RemoteScorer {
    backend: Arc<dyn TextCompletion>,
    model: String,
}

impl RemoteScorer {
    pub fn new(backend: Arc<dyn TextCompletion>, model: impl Into<String>) -> RemoteScorer {
        RemoteScorer {
            backend,
            model: model.into(),
        }
    }
}

impl Scorer for RemoteScorer {
    fn id(&self) -> String {
        format!("remote({})", self.model)
    }

    fn score(&self, ctx: &ScoreContext) -> Result<ScoreResult> {
        let req = CompletionRequest::scoring(&self.model, ctx.full_text());
        let reply = complete_with_logprobs(self.backend.as_ref(), &req)?;
        let tokens = reply
            .echoed_token_logprobs
            .expect("validated by complete_with_logprobs");
        let token_logprobs: Vec<f64> = tokens
            .iter()
            .filter(|t| t.char_offset >= ctx.boundary)
            .map(|t| t.logprob)
            .collect();
        if token_logprobs.is_empty() {
            return Err(Error::NoSolutionTokens);
        }
        let ppl = perplexity(&token_logprobs)?;
        let token_count = token_logprobs.len();
        Ok(ScoreResult {
            token_logprobs,
            ppl,
            token_count,
            scorer_id: self.id(),
            template_version: ctx.template_version.clone(),
        })
    }
}
