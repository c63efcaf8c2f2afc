//! One function per subcommand, thin orchestration over the library.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;

use reer::dataset::{
    assemble_training_record, compute_stats, format_quality_prompt, ingest_pairs,
    parse_quality_report, read_jsonl, write_jsonl, mix_datasets, TrainingRecord,
};
use reer::demo::run_demo;
use reer::filters::{filter_trajectory, PatternSet};
use reer::fixtures;
use reer::generation::Generator;
use reer::scoring::assemble_scoring_prompt;
use reer::search::{with_worker_pool, SearchRunner, SynthesisRecord};
use reer::trajectory::{QuerySolutionPair, SegmentationPolicy, Trajectory};

use crate::config::RunConfig;

/// ok / partial / fatal.
pub enum Outcome {
    Ok,
    Partial,
}

impl Outcome {
    pub fn code(&self) -> i32 {
        match self {
            Outcome::Ok => 0,
            Outcome::Partial => 1,
        }
    }
}

fn records_path(config: &RunConfig, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .unwrap_or_else(|| config.output_dir.join("records.jsonl"))
}

fn load_pairs(config: &RunConfig) -> anyhow::Result<Vec<QuerySolutionPair>> {
    let input = config.input.as_ref().expect("validated");
    let ingested = ingest_pairs(input, config.ingest_mode.into())?;
    for (line, reason) in &ingested.skipped {
        log::warn!("{}:{line}: skipped: {reason}", input.display());
    }
    if !ingested.skipped.is_empty() {
        println!("skipped {} malformed line(s)", ingested.skipped.len());
    }
    Ok(ingested.pairs)
}

pub fn cmd_synthesize(config: &RunConfig, workers: usize) -> anyhow::Result<Outcome> {
    let pairs = load_pairs(config)?;
    if pairs.is_empty() {
        println!("0 pairs in, 0 records out");
        return Ok(Outcome::Ok);
    }
    let assets = config.assets()?;
    let scorer = config.build_scorer()?;
    let generator: Generator = config.build_generator(config.search.seed)?;
    let runner = SearchRunner {
        config: &config.search,
        generator: &generator,
        scorer: scorer.as_ref(),
        assets: &assets,
    };

    std::fs::create_dir_all(&config.output_dir)?;
    let out_path = config.output_dir.join("records.jsonl");
    let file = std::fs::File::create(&out_path)?;
    let mut writer = std::io::BufWriter::new(file);
    let mut written = 0usize;
    let mut degraded = 0usize;
    let mut failed = 0usize;

    with_worker_pool(workers, || {
        runner.run_batch_ordered(&pairs, |index, result| match result {
            Ok(record) => {
                if record.degraded {
                    degraded += 1;
                }
                serde_json::to_writer(&mut writer, &record).expect("record serializes");
                writer.write_all(b"\n").expect("record write");
                writer.flush().expect("record flush");
                written += 1;
            }
            Err(err) => {
                failed += 1;
                log::error!("pair {} failed: {err}", pairs[index].id);
            }
        });
    });

    println!(
        "{} pairs in, {written} records out ({degraded} degraded, {failed} failed) -> {}",
        pairs.len(),
        out_path.display()
    );
    Ok(if degraded == 0 && failed == 0 {
        Outcome::Ok
    } else {
        Outcome::Partial
    })
}

pub fn cmd_filter(config: &RunConfig, records: &Option<PathBuf>) -> anyhow::Result<Outcome> {
    let path = records_path(config, records);
    let mut records: Vec<SynthesisRecord> =
        read_jsonl(&path).with_context(|| format!("reading {}", path.display()))?;
    let assets = config.assets()?;
    let patterns = PatternSet::compile(&assets.patterns());
    let mut passed = 0usize;
    for record in &mut records {
        record.filter_verdicts =
            filter_trajectory(&record.final_trajectory, &patterns, &config.filters);
        if record.filter_verdicts.iter().all(|v| v.passed) {
            passed += 1;
        }
    }
    let out = config.output_dir.join("records_filtered.jsonl");
    write_jsonl(&out, &records)?;
    println!(
        "{} records filtered: {passed} passed, {} failed -> {}",
        records.len(),
        records.len() - passed,
        out.display()
    );
    Ok(Outcome::Ok)
}

pub fn cmd_assemble(
    config: &RunConfig,
    records: &Option<PathBuf>,
    judge: bool,
) -> anyhow::Result<Outcome> {
    let pairs = load_pairs(config)?;
    let default_filtered = config.output_dir.join("records_filtered.jsonl");
    let path = match records {
        Some(path) => path.clone(),
        None if default_filtered.exists() => default_filtered,
        None => records_path(config, &None),
    };
    let records: Vec<SynthesisRecord> =
        read_jsonl(&path).with_context(|| format!("reading {}", path.display()))?;
    let assets = config.assets()?;

    let by_id: std::collections::HashMap<&str, &QuerySolutionPair> =
        pairs.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut training: Vec<TrainingRecord> = Vec::new();
    let mut texts: Vec<serde_json::Value> = Vec::new();
    let mut excluded = 0usize;
    let mut missing_pair = 0usize;
    for record in &records {
        let Some(pair) = by_id.get(record.pair_id.as_str()) else {
            missing_pair += 1;
            log::warn!("record {} has no matching pair, skipping", record.pair_id);
            continue;
        };
        if !record.filter_verdicts.iter().all(|v| v.passed) {
            excluded += 1;
            continue;
        }
        let (rec, text) = assemble_training_record(record, pair, &assets)?;
        texts.push(serde_json::json!({"id": rec.id, "text": text}));
        training.push(rec);
    }

    let (final_records, mix_note) = match (&config.external, &config.mix) {
        (Some(external_path), Some(target)) => {
            let external: Vec<TrainingRecord> = read_jsonl(external_path)
                .with_context(|| format!("reading {}", external_path.display()))?;
            let (mixed, summary) = mix_datasets(
                &training,
                &external,
                *target,
                config.search.seed,
                config.mix_strict,
            )?;
            let note = format!(
                ", mixed {} synthetic + {} external",
                summary.from_synthetic, summary.from_external
            );
            (mixed, note)
        }
        _ => (training, String::new()),
    };

    let out = config.output_dir.join("training.jsonl");
    write_jsonl(&out, &final_records)?;
    write_jsonl(&config.output_dir.join("training_text.jsonl"), &texts)?;
    println!(
        "{} records in, {} training records out ({excluded} excluded by filters, \
         {missing_pair} without pairs){mix_note} -> {}",
        records.len(),
        final_records.len(),
        out.display()
    );

    if judge {
        run_judge(config, &final_records)?;
    }
    Ok(Outcome::Ok)
}

/// Formats the quality prompt for every record, sends it through the
/// configured generator backend, and parses the reports.
fn run_judge(config: &RunConfig, records: &[TrainingRecord]) -> anyhow::Result<()> {
    let assets = config.assets()?;
    let generator = config.build_generator(config.search.seed)?;
    let mut reports: Vec<serde_json::Value> = Vec::new();
    for record in records {
        let response = format!(
            "<think>\n{}\n</think>\n\n<answer>\n{}\n</answer>",
            record.think, record.answer
        );
        let prompt = format_quality_prompt(&record.query, &response, &assets)?;
        match generator
            .generate(prompt, &[])
            .map_err(anyhow::Error::from)
            .and_then(|reply| parse_quality_report(&reply).map_err(anyhow::Error::from))
        {
            Ok(report) => reports.push(serde_json::json!({
                "id": record.id,
                "report": report,
            })),
            Err(err) => log::warn!("judge failed for {}: {err}", record.id),
        }
    }
    let out = config.output_dir.join("judge.jsonl");
    write_jsonl(&out, &reports)?;
    println!("{} judge reports -> {}", reports.len(), out.display());
    Ok(())
}

pub fn cmd_stats(config: &RunConfig, records: &Option<PathBuf>) -> anyhow::Result<Outcome> {
    let path = records_path(config, records);
    let records: Vec<SynthesisRecord> =
        read_jsonl(&path).with_context(|| format!("reading {}", path.display()))?;
    let assets = config.assets()?;
    let report = compute_stats(&records, &assets.patterns());
    std::fs::create_dir_all(&config.output_dir)?;
    let csv_path = config.output_dir.join("stats.csv");
    std::fs::write(&csv_path, report.to_csv())?;
    std::fs::write(
        config.output_dir.join("stats.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "{} records: improvement fraction {:.4}, mean ppl {:.3} -> {:.3}, mean words {:.1} -> {:.1} -> {}",
        report.record_count,
        report.improvement_fraction,
        report.mean_initial_ppl,
        report.mean_final_ppl,
        report.mean_words_before,
        report.mean_words_after,
        csv_path.display()
    );
    Ok(Outcome::Ok)
}

pub fn cmd_score(config: &RunConfig, records: &Option<PathBuf>) -> anyhow::Result<Outcome> {
    let pairs = load_pairs(config)?;
    let path = records_path(config, records);
    let records: Vec<SynthesisRecord> =
        read_jsonl(&path).with_context(|| format!("reading {}", path.display()))?;
    let assets = config.assets()?;
    let scorer = config.build_scorer()?;
    let by_id: std::collections::HashMap<&str, &QuerySolutionPair> =
        pairs.iter().map(|p| (p.id.as_str(), p)).collect();

    let mut scores: Vec<serde_json::Value> = Vec::new();
    let mut failed = 0usize;
    for record in &records {
        let Some(pair) = by_id.get(record.pair_id.as_str()) else {
            failed += 1;
            log::warn!("record {} has no matching pair", record.pair_id);
            continue;
        };
        let trajectory =
            Trajectory::segment(&record.final_trajectory, SegmentationPolicy::BlankLine)?;
        let ctx = assemble_scoring_prompt(pair, &trajectory, &assets)?;
        match scorer.score(&ctx) {
            Ok(result) => scores.push(serde_json::json!({
                "pair_id": record.pair_id,
                "ppl": result.ppl,
                "token_count": result.token_count,
                "scorer_id": result.scorer_id,
                "template_version": result.template_version,
            })),
            Err(err) => {
                failed += 1;
                log::error!("scoring {} failed: {err}", record.pair_id);
            }
        }
    }
    let out = config.output_dir.join("scores.jsonl");
    write_jsonl(&out, &scores)?;
    println!("{} scored, {failed} failed -> {}", scores.len(), out.display());
    Ok(if failed == 0 { Outcome::Ok } else { Outcome::Partial })
}

pub fn cmd_demo(out_dir: &Path, seed: Option<u64>) -> anyhow::Result<Outcome> {
    let manifest = fixtures::manifest();
    let seed = seed.unwrap_or(manifest.demo.seed);
    let report = run_demo(seed, Some(out_dir))?;
    println!(
        "demo: {} records, improvement fraction {:.4} (baseline {:.4}), \
         mean ppl {:.3} -> {:.3}, mean words {:.1} -> {:.1}",
        report.record_count,
        report.stats.improvement_fraction,
        manifest.baseline.improvement_fraction,
        report.stats.mean_initial_ppl,
        report.stats.mean_final_ppl,
        report.stats.mean_words_before,
        report.stats.mean_words_after,
    );
    println!(
        "filters: {} passed both, {} excluded; training records: {}; \
         generator calls: {}; http calls: {}; {} ms -> {}",
        report.filters_passed,
        report.excluded,
        report.training_count,
        report.generator_calls,
        report.http_calls,
        report.elapsed_ms,
        out_dir.display()
    );
    Ok(Outcome::Ok)
}
