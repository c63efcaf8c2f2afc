//! Deterministic offline backends.
//!
//! [`ScriptedBackend`] maps request hashes to canned replies and counts
//! calls; it is the harness for transport, cache, and retry tests.
//! [`SyntheticBackend`] answers generation prompts procedurally: it
//! parses the task, solution, and edit target back out of the rendered
//! prompt and derives a reply from a ChaCha stream seeded by the
//! request hash, so identical requests always produce identical text.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::BackendError;

use super::{BackendReply, CompletionRequest, TextCompletion};

/// Replies keyed by request hash, with per-backend call counters.
#[derive(Default)]
pub struct ScriptedBackend {
    replies: Mutex<HashMap<String, BackendReply>>,
    calls: AtomicU64,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    failures_remaining: AtomicU32,
    delay: Option<Duration>,
}

impl ScriptedBackend {
    pub fn new() -> ScriptedBackend {
        ScriptedBackend::default()
    }

    /// Adds an artificial per-call delay so concurrency is observable.
    pub fn with_delay(mut self, delay: Duration) -> ScriptedBackend {
        self.delay = Some(delay);
        self
    }

    pub fn insert(&self, req: &CompletionRequest, reply: BackendReply) {
        self.replies
            .lock()
            .unwrap()
            .insert(req.request_hash(), reply);
    }

    pub fn insert_text(&self, req: &CompletionRequest, text: &str) {
        self.insert(req, BackendReply::from_text(text));
    }

    /// Makes the next `n` calls fail with a transport error.
    pub fn fail_next(&self, n: u32) {
        self.failures_remaining.store(n, Ordering::SeqCst);
    }

    /// Total calls that reached this backend.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    /// Highest number of simultaneously in-flight calls observed.
    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }
}

impl TextCompletion for ScriptedBackend {
    fn id(&self) -> &str {
        "scripted"
    }

    fn complete(&self, req: &CompletionRequest) -> Result<BackendReply, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        let result = (|| {
            if let Some(delay) = self.delay {
                std::thread::sleep(delay);
            }
            if self
                .failures_remaining
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
                .is_ok()
            {
                return Err(BackendError::Transport {
                    attempts: 1,
                    message: "scripted transport failure".into(),
                });
            }
            let hash = req.request_hash();
            match self.replies.lock().unwrap().get(&hash) {
                Some(reply) => Ok(reply.clone()),
                None => Err(BackendError::MissingFixture { hash }),
            }
        })();
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }
}

/// Extracts the text between two literal markers of a rendered prompt.
fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let s = text.find(start)? + start.len();
    let e = text[s..].find(end)? + s;
    Some(&text[s..e])
}

const OPENERS: [&str; 6] = [
    "Hmm, maybe I should weave in",
    "Let me think about how to use",
    "Wait, the task also points toward",
    "But wait, I could sharpen this with",
    "Hmm...alternatively, maybe the key detail is",
    "Let me anchor this part around",
];

const CLOSERS: [&str; 5] = [
    "That keeps the plan concrete and moves it forward.",
    "This grounds the next stretch of the piece.",
    "So the paragraph now earns its place in the plan.",
    "That detail should make the ending feel inevitable.",
    "With that settled, the structure holds together.",
];

// Trailing-section openers carry no reflective trigger phrases; a
// trajectory that keeps second-guessing in its final stretch reads as
// unfinished and the end-of-thinking gate will reject it.
const FINAL_OPENERS: [&str; 4] = [
    "The close should settle on",
    "I will also fold in",
    "One more detail worth planting is",
    "The ending can lean on",
];

const FINAL_CLOSERS: [&str; 4] = [
    "The plan is complete and the draft can be written straight through.",
    "Nothing is left unresolved, so the writing itself comes next.",
    "Every section now has its material, and the piece can be finished cleanly.",
    "The structure is settled from first line to last.",
];

const INITIAL_OPENINGS: [&str; 4] = [
    "Alright, the task in front of me is clear enough that I can start mapping it out.",
    "Okay, I want to be sure I understand what the reader actually needs from this.",
    "So the request comes down to a specific piece of writing with its own shape.",
    "First I need to sit with the task and work out what it is really asking for.",
];

const INITIAL_MIDDLES: [&str; 6] = [
    "Let me sketch the audience: who reads this, and what should change for them by the end.",
    "Hmm, maybe the strongest angle is to commit to one core idea and let everything serve it.",
    "I will lay out a skeleton first, an opening hook, a layered middle, and a clean landing.",
    "Wait, I should decide the tone before the structure, since the tone constrains every sentence.",
    "Let me list the raw material I have to work with and what still needs inventing.",
    "But wait, the order matters: motivation first, then the concrete details that pay it off.",
];

const INITIAL_ENDINGS: [&str; 4] = [
    "The outline is settled now, so the drafting can proceed in one steady pass.",
    "That gives me a spine for the piece; each paragraph now has a single job.",
    "The plan covers intent, content, and structure, which is enough to begin.",
    "Everything above converges on a draft I can write straight through.",
];

/// Deterministic procedural generator for offline runs.
///
/// Initial-thinking prompts get a multi-paragraph plan derived from the
/// task; segment-edit prompts get the original paragraph extended with
/// reflective connectors and short word chunks sampled from the target
/// output (never more than three consecutive words, keeping clear of
/// the no-copy span limit). Scoring-shape requests are unsupported.
pub struct SyntheticBackend {
    seed: u64,
    calls: AtomicU64,
}

impl SyntheticBackend {
    pub fn new(seed: u64) -> SyntheticBackend {
        SyntheticBackend {
            seed,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn rng_for(&self, req: &CompletionRequest) -> ChaCha8Rng {
        let hash = req.request_hash();
        let mut key = 0u64;
        for (i, byte) in hash.as_bytes().iter().take(8).enumerate() {
            key |= (*byte as u64) << (i * 8);
        }
        ChaCha8Rng::seed_from_u64(self.seed ^ key)
    }

    /// Up to `max_words` consecutive words of `source`, chosen by the rng.
    fn chunk(rng: &mut ChaCha8Rng, source: &[&str], max_words: usize) -> String {
        if source.is_empty() {
            return "the main thread of the piece".into();
        }
        let len = rng.gen_range(2..=max_words).min(source.len());
        let start = rng.gen_range(0..=source.len() - len);
        source[start..start + len].join(" ")
    }

    fn initial_reply(&self, rng: &mut ChaCha8Rng, task: &str, solution: &str) -> String {
        let task_words: Vec<&str> = task.split_whitespace().collect();
        let solution_words: Vec<&str> = solution.split_whitespace().collect();
        let n_paragraphs = rng.gen_range(3..=4);
        let mut paragraphs = Vec::with_capacity(n_paragraphs);

        let opening = *INITIAL_OPENINGS.choose(rng).unwrap();
        paragraphs.push(format!(
            "{opening} The request mentions {}, so that phrase sets the frame.",
            Self::chunk(rng, &task_words, 3)
        ));

        let mut middles: Vec<&str> = INITIAL_MIDDLES.to_vec();
        middles.shuffle(rng);
        for middle in middles.iter().take(n_paragraphs - 2) {
            paragraphs.push((*middle).to_string());
        }

        // A faint echo of the target keeps the plan aimed at it without
        // copying; the closing paragraph stays free of trigger phrases.
        let ending = *INITIAL_ENDINGS.choose(rng).unwrap();
        paragraphs.push(format!(
            "The piece should close near {}. {ending}",
            Self::chunk(rng, &solution_words, 2)
        ));

        format!("<think>\n{}\n</think>", paragraphs.join("\n\n"))
    }

    fn refine_reply(
        &self,
        rng: &mut ChaCha8Rng,
        target: &str,
        solution: &str,
        is_last_segment: bool,
    ) -> String {
        let solution_words: Vec<&str> = solution.split_whitespace().collect();
        let n_additions = rng.gen_range(1..=3);
        let mut sentences = Vec::with_capacity(n_additions + 2);
        for i in 0..n_additions {
            // keep trigger phrases away from a final paragraph's tail
            let opener = if is_last_segment && i > 0 {
                *FINAL_OPENERS.choose(rng).unwrap()
            } else {
                *OPENERS.choose(rng).unwrap()
            };
            let chunk = Self::chunk(rng, &solution_words, 3);
            sentences.push(format!("{opener} {chunk}."));
        }
        if is_last_segment {
            sentences.push(format!(
                "{} {}.",
                FINAL_OPENERS.choose(rng).unwrap(),
                Self::chunk(rng, &solution_words, 3)
            ));
            sentences.push((*FINAL_CLOSERS.choose(rng).unwrap()).to_string());
        } else {
            sentences.push((*CLOSERS.choose(rng).unwrap()).to_string());
        }
        let refined = format!("{target} {}", sentences.join(" "));
        format!(
            "<analyze>\nThe paragraph carries one stage of the plan; it can hold more \
             specific intent without changing its role.\n</analyze>\n<refine>\n{refined}\n</refine>"
        )
    }
}

impl TextCompletion for SyntheticBackend {
    fn id(&self) -> &str {
        "synthetic"
    }

    fn complete(&self, req: &CompletionRequest) -> Result<BackendReply, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if req.is_scoring_shape() {
            return Err(BackendError::Unsupported(
                "synthetic backend does not score".into(),
            ));
        }
        let mut rng = self.rng_for(req);
        let prompt = req.prompt.as_str();

        // Initial-thinking prompts embed the solution after this marker.
        if prompt.contains("Here is the solution you will create:") {
            let task = between(prompt, "Here is a task:\n", "\n\nHere is the solution")
                .unwrap_or_default();
            let solution = between(
                prompt,
                "Here is the solution you will create:\n",
                "\n\nNow, you need to write down",
            )
            .unwrap_or_default();
            return Ok(BackendReply::from_text(
                self.initial_reply(&mut rng, task, solution),
            ));
        }

        // Segment-edit prompts mark the paragraph to refine; use the
        // final replace block, which the template repeats at the end.
        if prompt.contains("---> **Task**") {
            let solution = between(prompt, "---> **Target Output**\n", "\n---> **Thinking Process**")
                .unwrap_or_default();
            let target = prompt
                .rfind("<replace>\n")
                .and_then(|s| {
                    let rest = &prompt[s + "<replace>\n".len()..];
                    rest.find("\n</replace>").map(|e| &rest[..e])
                })
                .unwrap_or_default();
            // An empty suffix after the first replace block means the
            // edit targets the trajectory's final paragraph.
            let is_last_segment = between(prompt, "</replace>\n", "\n\nFollow this three-step")
                .map(|suffix| suffix.trim().is_empty())
                .unwrap_or(false);
            return Ok(BackendReply::from_text(self.refine_reply(
                &mut rng,
                target,
                solution,
                is_last_segment,
            )));
        }

        Err(BackendError::Unsupported(
            "synthetic backend does not recognize this prompt".into(),
        ))
    }
}
