//! Versioned prompt-template assets and the placeholder renderer.
//!
//! Every prompt the pipeline sends is rendered from one of these text
//! assets. Assets are embedded at compile time, can be overridden from
//! a directory, and each carries a version tag plus a content hash that
//! ends up in record provenance, so a dataset can always be traced back
//! to the exact prompt bytes that produced it.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::Result;

/// Names and filenames of the shipped assets.
const ASSET_FILES: [(&str, &str); 6] = [
    ("initial_thinking", "initial_thinking_v1.txt"),
    ("segment_edit", "segment_edit_v1.txt"),
    ("standard_inference", "standard_inference_v1.txt"),
    ("scoring_context", "scoring_context_v1.txt"),
    ("quality_rating", "quality_rating_v1.txt"),
    ("thinking_patterns", "thinking_patterns_v1.txt"),
];

/// One versioned text asset.
#[derive(Debug, Clone)]
pub struct PromptAsset {
    pub name: &'static str,
    pub version: String,
    pub text: String,
}

impl PromptAsset {
    /// Hex SHA-256 of the asset bytes.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.text.as_bytes());
        hex(&h.finalize())
    }

    /// `version@first-12-hash-chars`, the string recorded in provenance.
    pub fn version_tag(&self) -> String {
        format!("{}@{}", self.version, &self.hash()[..12])
    }
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// The full set of assets a pipeline run uses.
#[derive(Debug, Clone)]
pub struct AssetStore {
    pub initial_thinking: PromptAsset,
    pub segment_edit: PromptAsset,
    pub standard_inference: PromptAsset,
    /// Standard-inference text followed by the think/answer scaffold;
    /// the conditioning text every score is computed against and the
    /// preamble of every training record.
    pub scoring_context: PromptAsset,
    pub quality_rating: PromptAsset,
    pub thinking_patterns: PromptAsset,
}

impl Default for AssetStore {
    fn default() -> Self {
        Self::embedded()
    }
}

impl AssetStore {
    /// The compiled-in v1 assets.
    pub fn embedded() -> AssetStore {
        let make = |name: &'static str, text: &str| PromptAsset {
            name,
            version: "v1".into(),
            text: text.to_string(),
        };
        AssetStore {
            initial_thinking: make(
                "initial_thinking",
                include_str!("../assets/initial_thinking_v1.txt"),
            ),
            segment_edit: make("segment_edit", include_str!("../assets/segment_edit_v1.txt")),
            standard_inference: make(
                "standard_inference",
                include_str!("../assets/standard_inference_v1.txt"),
            ),
            scoring_context: make(
                "scoring_context",
                include_str!("../assets/scoring_context_v1.txt"),
            ),
            quality_rating: make(
                "quality_rating",
                include_str!("../assets/quality_rating_v1.txt"),
            ),
            thinking_patterns: make(
                "thinking_patterns",
                include_str!("../assets/thinking_patterns_v1.txt"),
            ),
        }
    }

    /// Loads all five assets from a directory, by their shipped file
    /// names. A missing file is an error naming the asset.
    pub fn from_dir(dir: &Path) -> Result<AssetStore> {
        let mut loaded: BTreeMap<&str, PromptAsset> = BTreeMap::new();
        for (name, file) in ASSET_FILES {
            let path = dir.join(file);
            let text = std::fs::read_to_string(&path).map_err(|_| Error::MissingAsset {
                name: name.to_string(),
                path: path.display().to_string(),
            })?;
            loaded.insert(
                name,
                PromptAsset {
                    name,
                    version: "v1-custom".into(),
                    text,
                },
            );
        }
        Ok(AssetStore {
            initial_thinking: loaded.remove("initial_thinking").unwrap(),
            segment_edit: loaded.remove("segment_edit").unwrap(),
            standard_inference: loaded.remove("standard_inference").unwrap(),
            scoring_context: loaded.remove("scoring_context").unwrap(),
            quality_rating: loaded.remove("quality_rating").unwrap(),
            thinking_patterns: loaded.remove("thinking_patterns").unwrap(),
        })
    }

    /// Version tags for all assets, keyed by asset name.
    pub fn template_versions(&self) -> BTreeMap<String, String> {
        [
            &self.initial_thinking,
            &self.segment_edit,
            &self.standard_inference,
            &self.scoring_context,
            &self.quality_rating,
            &self.thinking_patterns,
        ]
        .into_iter()
        .map(|a| (a.name.to_string(), a.version_tag()))
        .collect()
    }

    /// The thinking-pattern trigger list, one pattern per line.
    pub fn patterns(&self) -> Vec<String> {
        self.thinking_patterns
            .text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect()
    }
}

/// Scans a template for `{name}` placeholders.
fn placeholders(text: &str) -> Vec<(usize, usize, &str)> {
    let mut found = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            if let Some(end) = text[i + 1..].find('}') {
                let name = &text[i + 1..i + 1 + end];
                if !name.is_empty()
                    && name
                        .bytes()
                        .all(|b| b.is_ascii_lowercase() || b == b'_')
                {
                    found.push((i, i + end + 2, name));
                    i += end + 2;
                    continue;
                }
            }
        }
        i += 1;
    }
    found
}

/// Renders a template by substituting every `{name}` placeholder.
///
/// Total and deterministic: every binding must appear in the template
/// at least once, every placeholder in the template must be bound, and
/// substituted values are never rescanned. Repeated placeholders are
/// all substituted.
pub fn render(asset: &PromptAsset, bindings: &[(&str, &str)]) -> Result<String> {
    let slots = placeholders(&asset.text);
    for (name, _) in bindings {
        if !slots.iter().any(|(_, _, n)| n == name) {
            return Err(Error::MissingPlaceholder {
                template: asset.name.to_string(),
                name: name.to_string(),
            });
        }
    }
    let mut out = String::with_capacity(asset.text.len());
    let mut cursor = 0;
    for (start, end, name) in slots {
        out.push_str(&asset.text[cursor..start]);
        match bindings.iter().find(|(n, _)| n == &name) {
            Some((_, value)) => out.push_str(value),
            None => {
                return Err(Error::UnboundPlaceholder {
                    template: asset.name.to_string(),
                    name: name.to_string(),
                })
            }
        }
        cursor = end;
    }
    out.push_str(&asset.text[cursor..]);
    Ok(out)
}
