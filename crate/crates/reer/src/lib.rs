//! Recover deep reasoning trajectories "backwards" from known-good
//! (query, solution) pairs.
//!
//! Given a query `x` and a high-quality reference solution `y`, the
//! pipeline searches for a reasoning trajectory `z` (an ordered list of
//! thinking segments) that minimizes the perplexity of `y` conditioned
//! on `x` and `z`. The search is gradient-free: it sweeps the trajectory
//! segment by segment, asks a generator backend for candidate
//! refinements, scores each candidate trajectory by the solution's
//! perplexity, and accepts the argmin. The incumbent segment is always
//! in the candidate set, so accepted perplexity never increases.
//!
//! Modules map onto the pipeline stages:
//!
//! * [`trajectory`] — pairs, segments, trajectories, and the
//!   blank-line segmentation they all share.
//! * [`scoring`] — perplexity from per-token logprobs, the scoring
//!   prompt, and the built-in character n-gram reference model used as
//!   a deterministic offline scorer.
//! * [`generation`] — initial-trajectory and segment-refinement prompt
//!   rendering, candidate extraction, and the no-copy constraint.
//! * [`search`] — the iterative local search with monotone acceptance.
//! * [`filters`] — end-of-thinking and n-gram repetition quality gates.
//! * [`backends`] — completion transports: remote HTTP with logprob
//!   echo, an on-disk response cache, and deterministic test backends.
//! * [`dataset`] — JSONL ingestion, training-record assembly, data
//!   mixing, statistics, and the quality-judge prompt plumbing.
//! * [`demo`] — the fully offline end-to-end pipeline over the shipped
//!   fixture corpus.
//!
//! Batch synthesis over independent pairs is data-parallel; the
//! `parallel` feature (on by default) backs it with a rayon pool, and
//! disabling the feature falls back to a sequential loop with identical
//! output bytes.

pub mod assets;
pub mod backends;
pub mod dataset;
pub mod demo;
pub mod error;
pub mod filters;
pub mod fixtures;
pub mod generation;
pub mod scoring;
pub mod search;
pub mod trajectory;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
