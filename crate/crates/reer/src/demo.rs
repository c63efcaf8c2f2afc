//! The fully offline end-to-end pipeline over the shipped corpus:
//! synthesize, filter, assemble, and report statistics, with the
//! synthetic generator and the conditioning reference scorer. No
//! network is touched anywhere on this path.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::assets::AssetStore;
use crate::backends::{http_call_count, SyntheticBackend};
use crate::dataset::{
    assemble_training_record, compute_stats, write_jsonl, StatsReport, TrainingRecord,
};
use crate::filters::{filter_trajectory, FilterConfig, FilterId, PatternSet};
use crate::generation::Generator;
use crate::scoring::ReferenceLmScorer;
use crate::search::{SearchConfig, SearchRunner, SynthesisRecord};
use crate::{fixtures, Result};

/// Outcome of one demo run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub record_count: usize,
    pub degraded: usize,
    /// Records passing both filters.
    pub filters_passed: usize,
    pub excluded: usize,
    pub repetition_passes: usize,
    pub end_of_thinking_passes: usize,
    pub training_count: usize,
    pub stats: StatsReport,
    pub elapsed_ms: u64,
    pub generator_calls: u64,
    /// HTTP calls observed during the run; always zero here.
    pub http_calls: u64,
}

/// Runs the demo pipeline at `seed`, writing `records.jsonl`,
/// `training.jsonl`, `stats.csv`, `stats.json`, and `report.json` under
/// `out_dir` when given.
pub fn run_demo(seed: u64, out_dir: Option<&Path>) -> Result<DemoReport> {
    let started = Instant::now();
    let http_before = http_call_count();
    let manifest = fixtures::manifest();

    let assets = AssetStore::embedded();
    let pairs = fixtures::demo_pairs();
    let backend = Arc::new(SyntheticBackend::new(seed));
    let generator = Generator::new(backend.clone(), "synthetic", seed);
    let scorer = ReferenceLmScorer::conditioning(manifest.demo.scorer_order)?;
    let config = SearchConfig {
        max_iterations: manifest.demo.max_iterations,
        ppl_threshold: None,
        candidates_per_expansion: manifest.demo.candidates_per_expansion,
        passes: manifest.demo.passes,
        seed,
    };
    let runner = SearchRunner {
        config: &config,
        generator: &generator,
        scorer: &scorer,
        assets: &assets,
    };

    let mut records: Vec<SynthesisRecord> = Vec::with_capacity(pairs.len());
    for result in runner.run_batch(&pairs) {
        records.push(result?);
    }

    let patterns = PatternSet::compile(&assets.patterns());
    let filter_config = FilterConfig::default();
    for record in &mut records {
        record.filter_verdicts =
            filter_trajectory(&record.final_trajectory, &patterns, &filter_config);
    }

    let mut training: Vec<TrainingRecord> = Vec::new();
    let mut formatted: Vec<String> = Vec::new();
    let mut excluded = 0usize;
    for (record, pair) in records.iter().zip(&pairs) {
        if record.filter_verdicts.iter().all(|v| v.passed) {
            let (rec, text) = assemble_training_record(record, pair, &assets)?;
            training.push(rec);
            formatted.push(text);
        } else {
            excluded += 1;
        }
    }

    let stats = compute_stats(&records, &assets.patterns());
    let passes_for = |id: FilterId| {
        records
            .iter()
            .filter(|r| {
                r.filter_verdicts
                    .iter()
                    .any(|v| v.filter_id == id && v.passed)
            })
            .count()
    };
    let report = DemoReport {
        record_count: records.len(),
        degraded: records.iter().filter(|r| r.degraded).count(),
        filters_passed: records.len() - excluded,
        excluded,
        repetition_passes: passes_for(FilterId::Repetition),
        end_of_thinking_passes: passes_for(FilterId::EndOfThinking),
        training_count: training.len(),
        stats,
        elapsed_ms: started.elapsed().as_millis() as u64,
        generator_calls: backend.calls(),
        http_calls: http_call_count() - http_before,
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("records.jsonl"), &records)?;
        write_jsonl(&dir.join("training.jsonl"), &training)?;
        std::fs::write(dir.join("stats.csv"), report.stats.to_csv())?;
        std::fs::write(
            dir.join("stats.json"),
            serde_json::to_string_pretty(&report.stats)?,
        )?;
        std::fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
    }
    Ok(report)
}
