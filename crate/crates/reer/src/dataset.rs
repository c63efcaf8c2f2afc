//! JSONL ingestion, training-record assembly, mixing, and statistics.
//!
//! All interchange is UTF-8 JSONL, one record per line, every schema
//! carrying a `schema_version` field. The training string format is
//! anchored on the scoring-context template, so the text a record is
//! trained on is byte-identical to the text its perplexity was scored
//! against, plus the closing answer tag.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::assets::{render, AssetStore};
use crate::error::Error;
use crate::filters::{FilterVerdict, PatternSet};
use crate::search::{SynthesisRecord, RECORD_SCHEMA_VERSION};
use crate::trajectory::QuerySolutionPair;
use crate::Result;

/// How ingest reacts to bad lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestMode {
    /// First malformed line aborts with its line number.
    Strict,
    /// Malformed lines are skipped and counted.
    Lenient,
}

/// Ingest outcome: validated pairs plus skipped-line diagnostics.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub pairs: Vec<QuerySolutionPair>,
    /// (line number, reason) for every skipped line in lenient mode.
    pub skipped: Vec<(usize, String)>,
}

#[derive(Deserialize)]
struct WirePair {
    #[serde(default)]
    schema_version: Option<String>,
    id: String,
    query: String,
    solution: String,
    category: String,
    source: crate::trajectory::PairSource,
}

/// Reads (query, solution) pairs from JSONL, validating field presence,
/// non-emptiness, and id uniqueness. Line numbers are 1-based.
pub fn ingest_pairs(path: &Path, mode: IngestMode) -> Result<Ingested> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    let mut seen_ids: HashSet<String> = HashSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let outcome = parse_pair_line(&line, line_no, &mut seen_ids);
        match outcome {
            Ok(pair) => pairs.push(pair),
            Err(err) => match mode {
                IngestMode::Strict => return Err(err),
                IngestMode::Lenient => skipped.push((line_no, err.to_string())),
            },
        }
    }
    Ok(Ingested { pairs, skipped })
}

fn parse_pair_line(
    line: &str,
    line_no: usize,
    seen_ids: &mut HashSet<String>,
) -> Result<QuerySolutionPair> {
    let wire: WirePair = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
        line: line_no,
        reason: e.to_string(),
    })?;
    if let Some(version) = &wire.schema_version {
        if version != RECORD_SCHEMA_VERSION {
            return Err(Error::MalformedLine {
                line: line_no,
                reason: format!("unsupported schema_version {version:?}"),
            });
        }
    }
    let pair = QuerySolutionPair {
        id: wire.id,
        query: wire.query,
        solution: wire.solution,
        category: wire.category,
        source: wire.source,
    };
    pair.validate().map_err(|e| Error::MalformedLine {
        line: line_no,
        reason: e.to_string(),
    })?;
    if !seen_ids.insert(pair.id.clone()) {
        return Err(Error::DuplicateId {
            line: line_no,
            id: pair.id,
        });
    }
    Ok(pair)
}

/// Generic JSONL reader with line numbers on parse failures.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut items = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

/// Writes items as JSONL through one writer, one line per item.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut file, item)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// Search provenance carried by every training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub initial_ppl: f64,
    pub final_ppl: f64,
    pub iterations: usize,
    pub filter_verdicts: Vec<FilterVerdict>,
    pub template_versions: BTreeMap<String, String>,
}

/// One fine-tuning example: query, recovered thinking, and answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub schema_version: String,
    pub id: String,
    pub query: String,
    pub think: String,
    pub answer: String,
    pub category: String,
    pub provenance: Provenance,
}

const THINK_OPEN: &str = "\n<think>\n";
const THINK_TO_ANSWER: &str = "\n</think>\n\n<answer>\n";
const ANSWER_CLOSE: &str = "\n</answer>";

fn reject_marker(field: &str, value: &str, markers: &[&str]) -> Result<()> {
    for marker in markers {
        if value.contains(marker) {
            return Err(Error::MarkerCollision {
                field: field.into(),
                marker: (*marker).to_string(),
            });
        }
    }
    Ok(())
}

/// Renders the full training string: instruction preamble, the thinking
/// wrapped in think tags, then the answer wrapped in answer tags.
pub fn format_training_text(
    query: &str,
    think: &str,
    answer: &str,
    assets: &AssetStore,
) -> Result<String> {
    if think.trim().is_empty() {
        return Err(Error::EmptyField {
            field: "think".into(),
        });
    }
    if answer.trim().is_empty() {
        return Err(Error::EmptyField {
            field: "answer".into(),
        });
    }
    // Marker hygiene keeps parsing exact: the first think tag in the
    // string is the scaffold's, and the closing delimiter is unique.
    reject_marker("query", query, &["<think>", "</think>"])?;
    reject_marker("think", think, &["</think>"])?;
    let prefix = render(
        &assets.scoring_context,
        &[("query", query), ("trajectory", think)],
    )?;
    Ok(format!("{prefix}{answer}{ANSWER_CLOSE}"))
}

/// The fields recovered from a formatted training string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTraining {
    pub think: String,
    pub answer: String,
}

/// Recovers think and answer exactly from a formatted training string.
pub fn parse_training_text(text: &str) -> Result<ParsedTraining> {
    let think_start = text
        .find(THINK_OPEN)
        .ok_or_else(|| Error::MissingReportField {
            field: "<think>".into(),
        })?
        + THINK_OPEN.len();
    let rel_end = text[think_start..]
        .find(THINK_TO_ANSWER)
        .ok_or_else(|| Error::MissingReportField {
            field: "</think>".into(),
        })?;
    let think = &text[think_start..think_start + rel_end];
    let answer_start = think_start + rel_end + THINK_TO_ANSWER.len();
    let answer_end = text.len().checked_sub(ANSWER_CLOSE.len()).filter(|&end| {
        end >= answer_start && &text[end..] == ANSWER_CLOSE
    });
    let answer_end = answer_end.ok_or_else(|| Error::MissingReportField {
        field: "</answer>".into(),
    })?;
    Ok(ParsedTraining {
        think: think.to_string(),
        answer: text[answer_start..answer_end].to_string(),
    })
}

/// Builds a training record and its formatted string from a synthesis
/// record that passed all filters.
pub fn assemble_training_record(
    rec: &SynthesisRecord,
    pair: &QuerySolutionPair,
    assets: &AssetStore,
) -> Result<(TrainingRecord, String)> {
    for verdict in &rec.filter_verdicts {
        if !verdict.passed {
            return Err(Error::FilterFailed {
                id: rec.pair_id.clone(),
                filter: format!("{:?}", verdict.filter_id),
            });
        }
    }
    let formatted =
        format_training_text(&pair.query, &rec.final_trajectory, &pair.solution, assets)?;
    let record = TrainingRecord {
        schema_version: RECORD_SCHEMA_VERSION.into(),
        id: rec.pair_id.clone(),
        query: pair.query.clone(),
        think: rec.final_trajectory.clone(),
        answer: pair.solution.clone(),
        category: pair.category.clone(),
        provenance: Provenance {
            initial_ppl: rec.initial_ppl,
            final_ppl: rec.final_ppl,
            iterations: rec.iterations,
            filter_verdicts: rec.filter_verdicts.clone(),
            template_versions: rec.template_versions.clone(),
        },
    };
    Ok((record, formatted))
}

/// How many records to draw from each pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixTarget {
    /// Exact per-source counts.
    Counts { synthetic: usize, external: usize },
    /// Integer parts; the largest whole multiple both pools can serve.
    /// `1:0` means all synthetic records and no external ones.
    Ratio { synthetic: u32, external: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixSummary {
    pub from_synthetic: usize,
    pub from_external: usize,
}

/// Seeded sample-and-interleave of two record pools. Deterministic:
/// the same inputs and seed produce the same output, byte for byte.
pub fn mix_datasets(
    synthetic: &[TrainingRecord],
    external: &[TrainingRecord],
    target: MixTarget,
    seed: u64,
    strict: bool,
) -> Result<(Vec<TrainingRecord>, MixSummary)> {
    let (want_synth, want_ext) = match target {
        MixTarget::Counts {
            synthetic: s,
            external: e,
        } => (s, e),
        MixTarget::Ratio {
            synthetic: rs,
            external: re,
        } => match (rs, re) {
            (0, 0) => (0, 0),
            (_, 0) => (synthetic.len(), 0),
            (0, _) => (0, external.len()),
            (rs, re) => {
                let k = (synthetic.len() / rs as usize).min(external.len() / re as usize);
                (k * rs as usize, k * re as usize)
            }
        },
    };
    for (want, pool, name) in [
        (want_synth, synthetic.len(), "synthetic"),
        (want_ext, external.len(), "external"),
    ] {
        if want > pool && strict {
            return Err(Error::InsufficientRecords {
                requested: want,
                available: pool,
                source_name: name.into(),
            });
        }
    }
    let take_synth = want_synth.min(synthetic.len());
    let take_ext = want_ext.min(external.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = |pool: &[TrainingRecord], take: usize, rng: &mut ChaCha8Rng| {
        let mut indices: Vec<usize> = (0..pool.len()).collect();
        indices.shuffle(rng);
        indices.truncate(take);
        indices.sort_unstable();
        indices.iter().map(|&i| pool[i].clone()).collect::<Vec<_>>()
    };
    let mut mixed = sample(synthetic, take_synth, &mut rng);
    mixed.extend(sample(external, take_ext, &mut rng));
    mixed.shuffle(&mut rng);
    Ok((
        mixed,
        MixSummary {
            from_synthetic: take_synth,
            from_external: take_ext,
        },
    ))
}

/// Bins are half-open `[edges[i], edges[i+1])`; the final bin is
/// unbounded above. Values below the first edge land in bin 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    fn build(edges: &[f64], values: impl Iterator<Item = f64>) -> Histogram {
        let mut counts = vec![0usize; edges.len()];
        for v in values {
            let mut bin = 0;
            for (i, &edge) in edges.iter().enumerate() {
                if v >= edge {
                    bin = i;
                } else {
                    break;
                }
            }
            counts[bin] += 1;
        }
        Histogram {
            edges: edges.to_vec(),
            counts,
        }
    }
}

/// Fixed perplexity bin edges (powers of two from 1).
pub const PPL_BIN_EDGES: [f64; 8] = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0];
/// Fixed word-count bin edges.
pub const WORD_BIN_EDGES: [f64; 8] = [0.0, 25.0, 50.0, 100.0, 200.0, 400.0, 800.0, 1600.0];

/// Aggregate view of a batch of synthesis records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub schema_version: String,
    pub record_count: usize,
    pub mean_initial_ppl: f64,
    pub mean_final_ppl: f64,
    /// Mean of (initial - final), elementwise.
    pub mean_ppl_delta: f64,
    /// Exact |{r : final < initial}| / N.
    pub improvement_fraction: f64,
    pub mean_words_before: f64,
    pub mean_words_after: f64,
    pub ppl_before: Histogram,
    pub ppl_after: Histogram,
    pub words_before: Histogram,
    pub words_after: Histogram,
    pub category_counts: BTreeMap<String, usize>,
    /// Records containing each pattern at least once, deduplicated per
    /// record.
    pub pattern_frequencies: BTreeMap<String, usize>,
}

fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Per-pattern count of texts containing at least one occurrence.
/// Presence, not multiplicity: repeats within one text count once.
pub fn pattern_presence_counts<'a>(
    texts: impl Iterator<Item = &'a str>,
    patterns: &[String],
) -> BTreeMap<String, usize> {
    let set = PatternSet::compile(patterns);
    let mut table: BTreeMap<String, usize> =
        patterns.iter().map(|p| (p.clone(), 0)).collect();
    for text in texts {
        for (pattern, count) in set.count_occurrences(text) {
            if count > 0 {
                *table.get_mut(&pattern).expect("seeded above") += 1;
            }
        }
    }
    table
}

/// Per-pattern count of training records containing the pattern in
/// their thinking text.
pub fn pattern_frequencies(
    records: &[TrainingRecord],
    patterns: &[String],
) -> BTreeMap<String, usize> {
    pattern_presence_counts(records.iter().map(|r| r.think.as_str()), patterns)
}

/// Computes the stats report. Deterministic given input order.
pub fn compute_stats(records: &[SynthesisRecord], patterns: &[String]) -> StatsReport {
    let n = records.len();
    let mean = |values: &mut dyn Iterator<Item = f64>| -> f64 {
        if n == 0 {
            return 0.0;
        }
        values.sum::<f64>() / n as f64
    };
    let improvement = records
        .iter()
        .filter(|r| r.final_ppl < r.initial_ppl)
        .count();
    let mut category_counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        *category_counts.entry(r.category.clone()).or_insert(0) += 1;
    }
    StatsReport {
        schema_version: RECORD_SCHEMA_VERSION.into(),
        record_count: n,
        mean_initial_ppl: mean(&mut records.iter().map(|r| r.initial_ppl)),
        mean_final_ppl: mean(&mut records.iter().map(|r| r.final_ppl)),
        mean_ppl_delta: mean(&mut records.iter().map(|r| r.initial_ppl - r.final_ppl)),
        improvement_fraction: if n == 0 {
            0.0
        } else {
            improvement as f64 / n as f64
        },
        mean_words_before: mean(&mut records.iter().map(|r| word_count(&r.initial_trajectory) as f64)),
        mean_words_after: mean(&mut records.iter().map(|r| word_count(&r.final_trajectory) as f64)),
        ppl_before: Histogram::build(&PPL_BIN_EDGES, records.iter().map(|r| r.initial_ppl)),
        ppl_after: Histogram::build(&PPL_BIN_EDGES, records.iter().map(|r| r.final_ppl)),
        words_before: Histogram::build(
            &WORD_BIN_EDGES,
            records.iter().map(|r| word_count(&r.initial_trajectory) as f64),
        ),
        words_after: Histogram::build(
            &WORD_BIN_EDGES,
            records.iter().map(|r| word_count(&r.final_trajectory) as f64),
        ),
        category_counts,
        pattern_frequencies: pattern_presence_counts(
            records.iter().map(|r| r.final_trajectory.as_str()),
            patterns,
        ),
    }
}

fn csv_field(value: &str) -> String {
    if value.contains(',') || value.contains('"') || value.contains('\n') {
        format!("\"{}\"", value.replace('"', "\"\""))
    } else {
        value.to_string()
    }
}

impl StatsReport {
    /// CSV export. Columns: `metric,key,value`. Row order: scalar
    /// metrics, then histogram bins low to high, then categories and
    /// patterns in lexicographic order. Byte-deterministic.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,key,value\n");
        let mut row = |metric: &str, key: &str, value: String| {
            out.push_str(&format!(
                "{},{},{}\n",
                csv_field(metric),
                csv_field(key),
                csv_field(&value)
            ));
        };
        row("record_count", "", self.record_count.to_string());
        row("mean_initial_ppl", "", format!("{}", self.mean_initial_ppl));
        row("mean_final_ppl", "", format!("{}", self.mean_final_ppl));
        row("mean_ppl_delta", "", format!("{}", self.mean_ppl_delta));
        row(
            "improvement_fraction",
            "",
            format!("{}", self.improvement_fraction),
        );
        row("mean_words_before", "", format!("{}", self.mean_words_before));
        row("mean_words_after", "", format!("{}", self.mean_words_after));
        for (name, hist) in [
            ("ppl_before", &self.ppl_before),
            ("ppl_after", &self.ppl_after),
            ("words_before", &self.words_before),
            ("words_after", &self.words_after),
        ] {
            for (edge, count) in hist.edges.iter().zip(&hist.counts) {
                row(name, &format!("{edge}"), count.to_string());
            }
        }
        for (category, count) in &self.category_counts {
            row("category", category, count.to_string());
        }
        for (pattern, count) in &self.pattern_frequencies {
            row("pattern", pattern, count.to_string());
        }
        out
    }
}

/// One judged dimension: a score and its justification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionScore {
    pub score: u8,
    pub justification: String,
}

/// The five-dimension quality report a judge reply parses into.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityReport {
    pub understanding: DimensionScore,
    pub structure: DimensionScore,
    pub depth: DimensionScore,
    pub clarity: DimensionScore,
    pub grounding: DimensionScore,
    pub overall_summary: Option<String>,
}

/// Renders the quality-rating prompt, substituting the request and
/// response verbatim at the `$INST$` / `$RESPONSE$` slots.
pub fn format_quality_prompt(
    query: &str,
    response: &str,
    assets: &AssetStore,
) -> Result<String> {
    let template = &assets.quality_rating.text;
    for marker in ["$INST$", "$RESPONSE$"] {
        if !template.contains(marker) {
            return Err(Error::MissingPlaceholder {
                template: assets.quality_rating.name.to_string(),
                name: marker.to_string(),
            });
        }
    }
    Ok(template
        .replace("$INST$", query)
        .replace("$RESPONSE$", response))
}

fn score_from_value(field: &str, value: &serde_json::Value) -> Result<i64> {
    let parsed = match value {
        serde_json::Value::Number(n) => n.as_i64(),
        serde_json::Value::String(s) => s.trim().parse::<i64>().ok(),
        _ => None,
    };
    parsed.ok_or_else(|| Error::MissingReportField {
        field: field.to_string(),
    })
}

fn dimension(
    report: &serde_json::Value,
    field: &str,
    score_key: &str,
    range: std::ops::RangeInclusive<i64>,
) -> Result<DimensionScore> {
    let node = report.get(field).ok_or_else(|| Error::MissingReportField {
        field: field.to_string(),
    })?;
    let raw = node.get(score_key).ok_or_else(|| Error::MissingReportField {
        field: format!("{field}.{score_key}"),
    })?;
    let score = score_from_value(&format!("{field}.{score_key}"), raw)?;
    if !range.contains(&score) {
        return Err(Error::ScoreOutOfRange {
            field: field.to_string(),
            value: score,
        });
    }
    let justification = node
        .get("justification")
        .and_then(|j| j.as_str())
        .unwrap_or_default()
        .to_string();
    Ok(DimensionScore {
        score: score as u8,
        justification,
    })
}

/// Parses a judge reply: finds the first JSON object in the text and
/// extracts the five dimension scores, validating their ranges
/// (quality dimensions 1-5; grounding severity 0-5).
pub fn parse_quality_report(text: &str) -> Result<QualityReport> {
    let start = text.find('{').ok_or(Error::MissingReportJson)?;
    let value: serde_json::Value = serde_json::Deserializer::from_str(&text[start..])
        .into_iter()
        .next()
        .ok_or(Error::MissingReportJson)?
        .map_err(|_| Error::MissingReportJson)?;
    let report = value
        .get("evaluationReport")
        .ok_or_else(|| Error::MissingReportField {
            field: "evaluationReport".into(),
        })?;
    Ok(QualityReport {
        understanding: dimension(report, "understandingAndDecomposition", "score", 1..=5)?,
        structure: dimension(report, "structureAndConsistency", "score", 1..=5)?,
        depth: dimension(report, "depthOfAnalysis", "score", 1..=5)?,
        clarity: dimension(report, "presentationClarity", "score", 1..=5)?,
        grounding: dimension(report, "factualGrounding", "severityScore", 0..=5)?,
        overall_summary: report
            .get("overallSummary")
            .and_then(|s| s.as_str())
            .map(str::to_string),
    })
}
