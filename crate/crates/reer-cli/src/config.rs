//! The declarative run configuration: one JSON file drives every
//! command, with a handful of CLI flags that win over it.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use reer::assets::AssetStore;
use reer::backends::{HttpBackend, RemoteConfig, SyntheticBackend};
use reer::dataset::{IngestMode, MixTarget};
use reer::filters::FilterConfig;
use reer::generation::Generator;
use reer::scoring::{ReferenceLmScorer, RemoteScorer, Scorer};
use reer::search::SearchConfig;

fn default_order() -> usize {
    4
}

fn default_max_new_tokens() -> u32 {
    2048
}

/// Which scorer computes PPL(solution | query, trajectory).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerConfig {
    /// Built-in character n-gram model. Without `corpus_file` it
    /// retrains on the conditioning text of every evaluation.
    ReferenceLm {
        #[serde(default = "default_order")]
        order: usize,
        #[serde(default)]
        corpus_file: Option<PathBuf>,
    },
    /// Remote logprob-echo backend.
    Remote {
        #[serde(flatten)]
        remote: RemoteConfig,
    },
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig::ReferenceLm {
            order: default_order(),
            corpus_file: None,
        }
    }
}

/// Which backend proposes initial trajectories and refinements.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorConfig {
    /// Deterministic offline generator keyed by request identity.
    Scripted {
        #[serde(default)]
        seed: Option<u64>,
    },
    Remote {
        #[serde(flatten)]
        remote: RemoteConfig,
        #[serde(default = "default_max_new_tokens")]
        max_new_tokens: u32,
    },
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig::Scripted { seed: None }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Pairs JSONL for synthesize/assemble/score.
    pub input: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Overrides the embedded prompt assets with files from a directory.
    pub template_dir: Option<PathBuf>,
    pub ingest_mode: IngestModeConfig,
    pub search: SearchConfig,
    pub filters: FilterConfig,
    pub scorer: ScorerConfig,
    pub generator: GeneratorConfig,
    /// Worker-pool size; 0 uses the default.
    pub workers: usize,
    /// External training records to mix in during assemble.
    pub external: Option<PathBuf>,
    pub mix: Option<MixTarget>,
    pub mix_strict: bool,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestModeConfig {
    #[default]
    Strict,
    Lenient,
}

impl From<IngestModeConfig> for IngestMode {
    fn from(mode: IngestModeConfig) -> IngestMode {
        match mode {
            IngestModeConfig::Strict => IngestMode::Strict,
            IngestModeConfig::Lenient => IngestMode::Lenient,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| anyhow::anyhow!("cannot parse config {}: {e}", path.display()))?;
        Ok(config)
    }

    /// Collects every validation problem before any work starts.
    pub fn validate(&self, needs_input: bool) -> Vec<String> {
        let mut problems = Vec::new();
        if needs_input {
            match &self.input {
                None => problems.push("config is missing \"input\" (pairs JSONL path)".into()),
                Some(path) if !path.exists() => {
                    problems.push(format!("input file {} does not exist", path.display()))
                }
                _ => {}
            }
        }
        if let Some(dir) = &self.template_dir {
            if let Err(err) = AssetStore::from_dir(dir) {
                problems.push(err.to_string());
            }
        }
        if let ScorerConfig::ReferenceLm { order, corpus_file } = &self.scorer {
            if *order == 0 {
                problems.push("scorer.order must be >= 1".into());
            }
            if let Some(path) = corpus_file {
                if !path.exists() {
                    problems.push(format!("scorer corpus file {} does not exist", path.display()));
                }
            }
        }
        if self.search.passes == 0 {
            problems.push("search.passes must be >= 1".into());
        }
        if let Some(threshold) = self.search.ppl_threshold {
            if threshold <= 0.0 {
                problems.push("search.ppl_threshold must be > 0".into());
            }
        }
        if !(self.filters.tail_fraction > 0.0 && self.filters.tail_fraction < 1.0) {
            problems.push("filters.tail_fraction must be in (0, 1)".into());
        }
        if !(self.filters.repetition_threshold > 0.0 && self.filters.repetition_threshold <= 1.0) {
            problems.push("filters.repetition_threshold must be in (0, 1]".into());
        }
        if self.filters.ngram == 0 || self.filters.top_k == 0 {
            problems.push("filters.ngram and filters.top_k must be >= 1".into());
        }
        if let Some(path) = &self.external {
            if !path.exists() {
                problems.push(format!("external records file {} does not exist", path.display()));
            }
        }
        problems
    }

    pub fn assets(&self) -> anyhow::Result<AssetStore> {
        match &self.template_dir {
            Some(dir) => Ok(AssetStore::from_dir(dir)?),
            None => Ok(AssetStore::embedded()),
        }
    }

    pub fn build_scorer(&self) -> anyhow::Result<Box<dyn Scorer>> {
        match &self.scorer {
            ScorerConfig::ReferenceLm { order, corpus_file } => match corpus_file {
                None => Ok(Box::new(ReferenceLmScorer::conditioning(*order)?)),
                Some(path) => {
                    let corpus = std::fs::read_to_string(path)?;
                    Ok(Box::new(ReferenceLmScorer::fixed(&corpus, *order)?))
                }
            },
            ScorerConfig::Remote { remote } => {
                let backend = HttpBackend::build_stack(remote)?;
                Ok(Box::new(RemoteScorer::new(backend, remote.model.clone())))
            }
        }
    }

    pub fn build_generator(&self, seed: u64) -> anyhow::Result<Generator> {
        match &self.generator {
            GeneratorConfig::Scripted { seed: fixed } => {
                let seed = fixed.unwrap_or(seed);
                Ok(Generator::new(
                    Arc::new(SyntheticBackend::new(seed)),
                    "synthetic",
                    seed,
                ))
            }
            GeneratorConfig::Remote {
                remote,
                max_new_tokens,
            } => {
                let backend = HttpBackend::build_stack(remote)?;
                Ok(Generator::new(backend, remote.model.clone(), seed)
                    .with_max_new_tokens(*max_new_tokens))
            }
        }
    }
}
