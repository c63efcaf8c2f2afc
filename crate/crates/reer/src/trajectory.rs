//! Pairs, segments, and trajectories.
//!
//! A trajectory is the unit the search edits: an ordered list of
//! non-empty text segments split on blank lines. Segmentation and
//! joining are exact inverses on normalized text, which is what lets a
//! trajectory round-trip through JSONL as plain text.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// Where a (query, solution) pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    WritingPlatform,
    PublicDomain,
    PublicDataset,
    Fixture,
}

/// One (query, solution) pair with category and provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySolutionPair {
    pub id: String,
    pub query: String,
    pub solution: String,
    pub category: String,
    pub source: PairSource,
}

impl QuerySolutionPair {
    /// Validates the non-empty invariants. Id uniqueness is a dataset
    /// concern checked at ingest.
    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(Error::InvalidPair {
                id: self.id.clone(),
                reason: "id is empty".into(),
            });
        }
        if self.query.trim().is_empty() {
            return Err(Error::InvalidPair {
                id: self.id.clone(),
                reason: "query is empty".into(),
            });
        }
        if self.solution.trim().is_empty() {
            return Err(Error::InvalidPair {
                id: self.id.clone(),
                reason: "solution is empty".into(),
            });
        }
        Ok(())
    }
}

/// One reasoning step: a paragraph-level unit of the trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    /// 0-based position within the trajectory.
    pub index: usize,
    /// Non-empty text with no blank-line delimiter inside.
    pub text: String,
}

/// How raw text is split into segments.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentationPolicy {
    /// Maximal runs split on blank lines (2+ consecutive newlines),
    /// trailing whitespace trimmed per segment, whitespace-only chunks
    /// dropped.
    #[default]
    BlankLine,
}

/// The delimiter that joins segments back into text.
pub const SEGMENT_DELIMITER: &str = "\n\n";

/// An ordered, contiguous list of segments. Immutable value type:
/// every edit produces a new trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    segments: Vec<Segment>,
}

/// Collapses internal blank lines so the text stays a single segment,
/// trims trailing whitespace, and rejects empty results.
fn normalize_segment_text(text: &str) -> Result<String> {
    let collapsed = collapse_newline_runs(text);
    let trimmed = collapsed.trim_end();
    if trimmed.trim().is_empty() {
        return Err(Error::EmptyReplacement);
    }
    Ok(trimmed.to_string())
}

/// Replaces every run of 2+ newlines with a single newline.
fn collapse_newline_runs(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut run = 0usize;
    for ch in text.chars() {
        if ch == '\n' {
            run += 1;
        } else {
            if run > 0 {
                out.push('\n');
                run = 0;
            }
            out.push(ch);
        }
    }
    if run > 0 {
        out.push('\n');
    }
    out
}

/// Splits text into maximal chunks on runs of 2+ newlines.
fn split_on_blank_lines(text: &str) -> Vec<&str> {
    let mut chunks = Vec::new();
    let bytes = text.as_bytes();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < bytes.len() {
        if bytes[i] == b'\n' {
            let run_start = i;
            while i < bytes.len() && bytes[i] == b'\n' {
                i += 1;
            }
            if i - run_start >= 2 {
                chunks.push(&text[start..run_start]);
                start = i;
            }
        } else {
            i += 1;
        }
    }
    chunks.push(&text[start..]);
    chunks
}

impl Trajectory {
    /// Splits `text` into a trajectory under the given policy.
    ///
    /// Deterministic; errors on whitespace-only input. Joining the
    /// result reproduces the normalized input exactly.
    pub fn segment(text: &str, policy: SegmentationPolicy) -> Result<Trajectory> {
        let SegmentationPolicy::BlankLine = policy;
        if text.trim().is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut segments = Vec::new();
        for chunk in split_on_blank_lines(text) {
            let trimmed = chunk.trim_end();
            if trimmed.trim().is_empty() {
                continue;
            }
            segments.push(Segment {
                index: segments.len(),
                text: trimmed.to_string(),
            });
        }
        debug_assert!(!segments.is_empty());
        Ok(Trajectory { segments })
    }

    /// Builds a trajectory from already-normalized segment texts.
    pub fn from_segments<I, S>(texts: I) -> Result<Trajectory>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut segments = Vec::new();
        for text in texts {
            let text = normalize_segment_text(text.as_ref())?;
            segments.push(Segment {
                index: segments.len(),
                text,
            });
        }
        if segments.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(Trajectory { segments })
    }

    /// Joins segments with exactly one blank line.
    pub fn join(&self) -> String {
        let mut out = String::new();
        for (i, seg) in self.segments.iter().enumerate() {
            if i > 0 {
                out.push_str(SEGMENT_DELIMITER);
            }
            out.push_str(&seg.text);
        }
        out
    }

    /// New trajectory with segment `index` replaced. The replacement is
    /// normalized to stay a single segment; the receiver is unchanged.
    pub fn replace_segment(&self, index: usize, text: &str) -> Result<Trajectory> {
        if index >= self.segments.len() {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.segments.len(),
            });
        }
        let text = normalize_segment_text(text)?;
        let mut segments = self.segments.clone();
        segments[index].text = text;
        Ok(Trajectory { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Whitespace-delimited word count over the joined text.
    pub fn word_count(&self) -> usize {
        self.segments
            .iter()
            .map(|s| s.text.split_whitespace().count())
            .sum()
    }
}
