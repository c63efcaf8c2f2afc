//! Iterative local search over trajectory segments.
//!
//! Each step expands one segment into candidates, scores the solution's
//! perplexity under every candidate trajectory, and accepts the argmin.
//! The incumbent is always a candidate and is never re-scored — its
//! score is the current state's perplexity — so accepted perplexity is
//! exactly non-increasing step over step, independent of scorer noise.
//!
//! One search is strictly sequential; independent pairs run in parallel
//! under `run_batch` when the `parallel` feature is on.

use std::collections::BTreeMap;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assets::AssetStore;
use crate::error::{Error, PartialScore};
use crate::filters::FilterVerdict;
use crate::generation::{
    expand_segment, init_trajectory, Candidate, CandidateOrigin, CandidateSet, Generator,
    RefinementContext,
};
use crate::scoring::{assemble_scoring_prompt, Scorer};
use crate::trajectory::{QuerySolutionPair, Trajectory};
use crate::Result;

/// Schema version stamped on every emitted record line.
pub const RECORD_SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Budget of expansion steps, accepted or kept.
    pub max_iterations: usize,
    /// Stop once perplexity reaches this value; none means budget-only.
    pub ppl_threshold: Option<f64>,
    /// Generated candidates requested per expansion (k).
    pub candidates_per_expansion: usize,
    /// Full left-to-right sweeps over the segments.
    pub passes: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            max_iterations: 256,
            ppl_threshold: None,
            candidates_per_expansion: 4,
            passes: 2,
            seed: 0,
        }
    }
}

/// One accepted-or-kept expansion step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub segment_index: usize,
    pub chosen_origin: CandidateOrigin,
    pub ppl_before: f64,
    pub ppl_after: f64,
}

/// The evolving search position.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchState {
    pub trajectory: Trajectory,
    pub ppl: f64,
    pub step_log: Vec<StepRecord>,
    pub iterations: usize,
}

impl SearchState {
    pub fn new(trajectory: Trajectory, ppl: f64) -> SearchState {
        SearchState {
            trajectory,
            ppl,
            step_log: Vec::new(),
            iterations: 0,
        }
    }
}

/// The full outcome of one search, serialized as one JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRecord {
    pub schema_version: String,
    pub pair_id: String,
    pub category: String,
    pub initial_trajectory: String,
    pub final_trajectory: String,
    pub initial_ppl: f64,
    pub final_ppl: f64,
    pub iterations: usize,
    /// Set when a backend failed mid-search and the record carries the
    /// best state reached instead of a completed run.
    pub degraded: bool,
    pub scorer_id: String,
    pub template_versions: BTreeMap<String, String>,
    pub step_log: Vec<StepRecord>,
    /// Attached by the filter stage; empty until then.
    pub filter_verdicts: Vec<FilterVerdict>,
}

fn score_candidate(
    state: &SearchState,
    index: usize,
    candidate: &Candidate,
    pair: &QuerySolutionPair,
    scorer: &dyn Scorer,
    assets: &AssetStore,
) -> Result<f64> {
    if candidate.origin == CandidateOrigin::Original {
        // Identical trajectory; reusing the accepted value keeps the
        // descent exact even under a noisy scorer.
        return Ok(state.ppl);
    }
    let trial = state.trajectory.replace_segment(index, &candidate.text)?;
    let ctx = assemble_scoring_prompt(pair, &trial, assets)?;
    Ok(scorer.score(&ctx)?.ppl)
}

/// Scores every candidate and accepts the argmin.
///
/// Ties favor the incumbent, then the lowest candidate ordinal. On a
/// scorer failure the state is left unchanged and the error carries the
/// scores gathered so far.
///
/// # Panics
///
/// Panics if the candidate set does not contain the original segment.
pub fn evaluate_and_select(
    state: &SearchState,
    index: usize,
    cands: &mut CandidateSet,
    pair: &QuerySolutionPair,
    scorer: &dyn Scorer,
    assets: &AssetStore,
) -> Result<SearchState> {
    assert!(
        cands.original_index().is_some(),
        "candidate set must contain the original segment"
    );

    #[cfg(feature = "parallel")]
    let scored: Vec<Result<f64>> = cands
        .candidates
        .par_iter()
        .map(|c| score_candidate(state, index, c, pair, scorer, assets))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let scored: Vec<Result<f64>> = cands
        .candidates
        .iter()
        .map(|c| score_candidate(state, index, c, pair, scorer, assets))
        .collect();

    let mut partial = Vec::new();
    let mut first_error: Option<(usize, Error)> = None;
    for (ordinal, result) in scored.into_iter().enumerate() {
        match result {
            Ok(ppl) => {
                cands.candidates[ordinal].score = Some(ppl);
                partial.push(PartialScore { ordinal, ppl });
            }
            Err(err) if first_error.is_none() => first_error = Some((ordinal, err)),
            Err(_) => {}
        }
    }
    if let Some((_, err)) = first_error {
        return Err(Error::StepFailed {
            index,
            partial,
            source: Box::new(err),
        });
    }

    // Strict argmin over candidates in order; the original sits first,
    // so equal scores keep it, and among generated candidates the
    // lowest ordinal wins.
    let mut best_ordinal = 0;
    let mut best_ppl = cands.candidates[0].score.expect("scored above");
    for (ordinal, candidate) in cands.candidates.iter().enumerate().skip(1) {
        let ppl = candidate.score.expect("scored above");
        if ppl < best_ppl {
            best_ppl = ppl;
            best_ordinal = ordinal;
        }
    }

    let chosen = &cands.candidates[best_ordinal];
    let trajectory = match chosen.origin {
        CandidateOrigin::Original => state.trajectory.clone(),
        CandidateOrigin::Generated => state.trajectory.replace_segment(index, &chosen.text)?,
    };
    let mut step_log = state.step_log.clone();
    step_log.push(StepRecord {
        segment_index: index,
        chosen_origin: chosen.origin,
        ppl_before: state.ppl,
        ppl_after: best_ppl,
    });
    log::debug!(
        target: "reer::search",
        "pair={} segment={} ppl_before={:.6} ppl_after={:.6} origin={:?}",
        pair.id,
        index,
        state.ppl,
        best_ppl,
        chosen.origin
    );
    Ok(SearchState {
        trajectory,
        ppl: best_ppl,
        step_log,
        iterations: state.iterations + 1,
    })
}

/// Wires a config, generator, scorer, and assets into runnable searches.
pub struct SearchRunner<'a> {
    pub config: &'a SearchConfig,
    pub generator: &'a Generator,
    pub scorer: &'a dyn Scorer,
    pub assets: &'a AssetStore,
}

impl SearchRunner<'_> {
    /// Runs the full search for one pair.
    ///
    /// Initialization failures abort; a backend failure mid-search
    /// finalizes with the best state reached, flagged degraded.
    pub fn run(&self, pair: &QuerySolutionPair) -> Result<SynthesisRecord> {
        pair.validate()?;
        let initial = init_trajectory(pair, self.generator, self.assets)
            .map_err(|e| Error::Initialization(Box::new(e)))?;
        let initial_ctx = assemble_scoring_prompt(pair, &initial, self.assets)
            .map_err(|e| Error::Initialization(Box::new(e)))?;
        let initial_ppl = self
            .scorer
            .score(&initial_ctx)
            .map_err(|e| Error::Initialization(Box::new(e)))?
            .ppl;

        let segment_count = initial.len();
        let mut state = SearchState::new(initial.clone(), initial_ppl);
        let mut degraded = false;

        'sweeps: for _pass in 0..self.config.passes {
            for index in 0..segment_count {
                if state.iterations >= self.config.max_iterations {
                    break 'sweeps;
                }
                if let Some(threshold) = self.config.ppl_threshold {
                    if state.ppl <= threshold {
                        break 'sweeps;
                    }
                }
                let ctx = RefinementContext::new(pair, &state.trajectory, index, state.iterations)?;
                let mut cands = match expand_segment(
                    &ctx,
                    self.config.candidates_per_expansion,
                    self.generator,
                    self.assets,
                ) {
                    Ok(set) => set,
                    Err(err) => {
                        log::warn!("pair={} expansion failed, degrading: {err}", pair.id);
                        degraded = true;
                        break 'sweeps;
                    }
                };
                if !cands.failures.is_empty() {
                    degraded = true;
                }
                match evaluate_and_select(&state, index, &mut cands, pair, self.scorer, self.assets)
                {
                    Ok(next) => state = next,
                    Err(err) => {
                        log::warn!("pair={} step failed, degrading: {err}", pair.id);
                        degraded = true;
                        break 'sweeps;
                    }
                }
            }
        }

        Ok(SynthesisRecord {
            schema_version: RECORD_SCHEMA_VERSION.into(),
            pair_id: pair.id.clone(),
            category: pair.category.clone(),
            initial_trajectory: initial.join(),
            final_trajectory: state.trajectory.join(),
            initial_ppl,
            final_ppl: state.ppl,
            iterations: state.iterations,
            degraded,
            scorer_id: self.scorer.id(),
            template_versions: self.assets.template_versions(),
            step_log: state.step_log,
            filter_verdicts: Vec::new(),
        })
    }

    /// Runs independent pairs, in parallel when the `parallel` feature
    /// is on. Results come back in input order either way.
    pub fn run_batch(&self, pairs: &[QuerySolutionPair]) -> Vec<Result<SynthesisRecord>> {
        #[cfg(feature = "parallel")]
        {
            pairs.par_iter().map(|p| self.run(p)).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            self.run_batch_sequential(pairs)
        }
    }

    /// Sequential batch, always available; the comparison baseline for
    /// the parallel path.
    pub fn run_batch_sequential(&self, pairs: &[QuerySolutionPair]) -> Vec<Result<SynthesisRecord>> {
        pairs.iter().map(|p| self.run(p)).collect()
    }

    /// Streams results to a single-writer sink in input order as they
    /// complete, so partially finished batches are already on disk.
    ///
    /// The parallel iteration runs on the calling thread and therefore
    /// inside whatever worker pool the caller installed; only the sink
    /// moves to a consumer thread.
    pub fn run_batch_ordered<F>(&self, pairs: &[QuerySolutionPair], mut sink: F)
    where
        F: FnMut(usize, Result<SynthesisRecord>) + Send,
    {
        #[cfg(feature = "parallel")]
        {
            let (tx, rx) = std::sync::mpsc::channel::<(usize, Result<SynthesisRecord>)>();
            std::thread::scope(|scope| {
                let consumer = scope.spawn(move || {
                    let mut pending = BTreeMap::new();
                    let mut next = 0usize;
                    for (index, result) in rx {
                        pending.insert(index, result);
                        while let Some(result) = pending.remove(&next) {
                            sink(next, result);
                            next += 1;
                        }
                    }
                });
                pairs
                    .par_iter()
                    .enumerate()
                    .for_each_with(tx, |tx, (index, pair)| {
                        let _ = tx.send((index, self.run(pair)));
                    });
                consumer.join().expect("sink thread");
            });
        }
        #[cfg(not(feature = "parallel"))]
        for (index, pair) in pairs.iter().enumerate() {
            sink(index, self.run(pair));
        }
    }
}

/// Runs `f` inside a worker pool of the requested size. Zero means the
/// default pool; without the `parallel` feature the closure simply runs
/// on the calling thread.
#[cfg(feature = "parallel")]
pub fn with_worker_pool<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    if workers == 0 {
        f()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("worker pool builds")
            .install(f)
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_worker_pool<R>(_workers: usize, f: impl FnOnce() -> R) -> R {
    f()
}
