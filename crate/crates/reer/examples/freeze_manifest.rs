//! Regenerates `fixtures/manifest.json` from a fresh reference demo
//! run. Run after changing the fixture corpus, the demo defaults, or
//! anything on the synthesis path, then commit the result:
//!
//! ```text
//! cargo run -p reer --release --example freeze_manifest > crates/reer/fixtures/manifest.json
//! ```

use reer::demo::run_demo;
use reer::fixtures::{self, Baseline, DemoDefaults, FixtureManifest};

fn main() {
    let current = fixtures::manifest();
    let report = run_demo(current.demo.seed, None).expect("reference demo run");
    let manifest = FixtureManifest {
        pair_count: report.record_count,
        corpus_sha256: fixtures::corpus_hash(),
        demo: DemoDefaults { ..current.demo },
        baseline: Baseline {
            improvement_fraction: report.stats.improvement_fraction,
            mean_initial_ppl: report.stats.mean_initial_ppl,
            mean_final_ppl: report.stats.mean_final_ppl,
            mean_words_before: report.stats.mean_words_before,
            mean_words_after: report.stats.mean_words_after,
            repetition_passes: report.repetition_passes,
            end_of_thinking_passes: report.end_of_thinking_passes,
        },
    };
    println!("{}", serde_json::to_string_pretty(&manifest).unwrap());
}
