//! Collaborative-reasoning corpus: I2I instructions, teacher explanations and
//! their mixing with the alignment corpus.

use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Catalog, I2IPair};
use crate::error::{Error, Result};
use crate::nn::Support;
use crate::seqmodel::{LmExample, LmTarget, TokenId, Vocabulary};

/// Explanations with fewer whitespace-separated tokens are discarded.
pub const MIN_EXPLANATION_TOKENS: usize = 30;

/// Teacher prompt for one related pair, filled with item titles.
pub fn i2i_instruction(src_title: &str, dst_title: &str) -> String {
    format!(
        "In collaborative filtering, item {src_title} and item {dst_title} are highly correlated. \
         Please explain why users who purchase {src_title} also tend to purchase {dst_title}?"
    )
}

/// One line of `i2i_instructions.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct I2IInstruction {
    pub src: String,
    pub dst: String,
    pub instruction: String,
    pub explanation: String,
}

/// Instructions for each pair; explanations are left empty for the teacher.
pub fn build_i2i_instructions(pairs: &[I2IPair], catalog: &Catalog) -> Vec<I2IInstruction> {
    pairs
        .iter()
        .map(|p| I2IInstruction {
            src: catalog.id(p.source).to_string(),
            dst: catalog.id(p.target).to_string(),
            instruction: i2i_instruction(&catalog.get(p.source).title, &catalog.get(p.target).title),
            explanation: String::new(),
        })
        .collect()
}

pub trait TeacherClient {
    fn explain(&self, instruction: &str) -> Result<String>;
}

/// Deterministic offline teacher: picks a template by hashing the
/// instruction and fills it with the instruction's content words. One
/// template is deliberately too short, so the length filter is exercised.
#[derive(Clone, Debug, Default)]
pub struct FixtureTeacher;

const STOPWORDS: &[&str] = &[
    "in",
    "collaborative",
    "filtering",
    "item",
    "and",
    "are",
    "highly",
    "correlated",
    "please",
    "explain",
    "why",
    "users",
    "who",
    "purchase",
    "also",
    "tend",
    "to",
];

const TEMPLATES: &[&str] = &[
    "both products serve the same routine so a shopper who buys {0} {1} usually needs {2} {3} soon after \
     because the two items are used together and the first one runs out at a similar pace as the second",
    "people who like {0} {1} often explore related items in the same category and {2} {3} shares the \
     style and purpose of the first item so it becomes a natural next purchase for the same kind of user",
    "{0} pairs with {2}",
    "the first item {0} {1} builds a habit and the second item {2} {3} completes that habit which explains \
     why many customers place both of them in their baskets within a short period of time in their history",
];

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl TeacherClient for FixtureTeacher {
    fn explain(&self, instruction: &str) -> Result<String> {
        let content: Vec<String> = crate::seqmodel::vocab::words(instruction)
            .filter(|w| !STOPWORDS.contains(&w.as_str()))
            .collect();
        let pick = |i: usize| content.get(i * content.len() / 4).cloned().unwrap_or_default();
        let template = TEMPLATES[((fnv1a(instruction) >> 32) % TEMPLATES.len() as u64) as usize];
        let mut text = template.to_string();
        for i in 0..4 {
            text = text.replace(&format!("{{{i}}}"), &pick(i));
        }
        Ok(text.split_whitespace().collect::<Vec<_>>().join(" "))
    }
}

/// Retries a teacher with exponential backoff.
pub struct RetryingTeacher<T> {
    pub inner: T,
    pub max_attempts: usize,
    pub base_delay: Duration,
}

impl<T: TeacherClient> TeacherClient for RetryingTeacher<T> {
    fn explain(&self, instruction: &str) -> Result<String> {
        let mut delay = self.base_delay;
        let mut last = None;
        for attempt in 0..self.max_attempts.max(1) {
            match self.inner.explain(instruction) {
                Ok(t) => return Ok(t),
                Err(e) => {
                    log::debug!("teacher attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                    if attempt + 1 < self.max_attempts {
                        thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(last.unwrap_or_else(|| Error::Teacher("no attempts made".into())))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExplainStats {
    pub requested: usize,
    pub failed: usize,
    pub too_short: usize,
}

/// Fills explanations. Pairs whose teacher call fails or whose explanation
/// has fewer than [`MIN_EXPLANATION_TOKENS`] tokens are dropped with a warning.
pub fn explain_all(
    instructions: Vec<I2IInstruction>,
    teacher: &dyn TeacherClient,
) -> (Vec<I2IInstruction>, ExplainStats) {
    let mut stats = ExplainStats::default();
    let mut out = Vec::with_capacity(instructions.len());
    for mut ins in instructions {
        stats.requested += 1;
        match teacher.explain(&ins.instruction) {
            Ok(text) if text.split_whitespace().count() >= MIN_EXPLANATION_TOKENS => {
                ins.explanation = text;
                out.push(ins);
            }
            Ok(_) => stats.too_short += 1,
            Err(e) => {
                log::warn!("skipping pair {} -> {}: {e}", ins.src, ins.dst);
                stats.failed += 1;
            }
        }
    }
    (out, stats)
}

/// `instruction <think> explanation </think> <|eos|>`, supervised on the
/// explanation block only.
pub fn collab_example(ins: &I2IInstruction, vocab: &Vocabulary) -> LmExample {
    let mut tokens: Vec<TokenId> = vocab.encode_text(&ins.instruction);
    let first = tokens.len() + 1;
    tokens.push(vocab.think_open());
    tokens.extend(vocab.encode_text(&ins.explanation));
    tokens.push(vocab.think_close());
    tokens.push(vocab.eos());
    let targets = (first..tokens.len())
        .map(|pos| LmTarget {
            pos,
            support: Support::Full,
            weight: 1.0,
        })
        .collect();
    LmExample { tokens, targets }
}

/// Mixes two corpora 1:1: the smaller one is resampled with replacement
/// (seeded) up to the size of the larger.
pub fn mix_one_to_one(a: Vec<LmExample>, b: Vec<LmExample>, seed: u64) -> Vec<LmExample> {
    if a.is_empty() || b.is_empty() {
        return if a.is_empty() { b } else { a };
    }
    let (big, small) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = big.clone();
    out.extend(small.iter().cloned());
    for _ in small.len()..big.len() {
        out.push(small[rng.random_range(0..small.len())].clone());
    }
    out
}

#[cfg(feature = "http-teacher")]
pub use http::HttpTeacher;

#[cfg(feature = "http-teacher")]
mod http {
    use super::*;

    /// Chat-completions style endpoint client.
    #[derive(Clone, Debug)]
    pub struct HttpTeacher {
        pub endpoint: String,
        pub model: String,
        /// Name of the environment variable holding the bearer token.
        pub token_env: String,
        pub timeout: Duration,
    }

    impl TeacherClient for HttpTeacher {
        fn explain(&self, instruction: &str) -> Result<String> {
            let token = std::env::var(&self.token_env)
                .map_err(|_| Error::Teacher(format!("environment variable {} is not set", self.token_env)))?;
            let body = serde_json::json!({
                "model": self.model,
                "messages": [{"role": "user", "content": instruction}],
            });
            let agent: ureq::Agent = ureq::Agent::config_builder()
                .timeout_global(Some(self.timeout))
                .build()
                .into();
            let mut resp = agent
                .post(&self.endpoint)
                .header("Authorization", &format!("Bearer {token}"))
                .send_json(&body)
                .map_err(|e| Error::Teacher(e.to_string()))?;
            let v: serde_json::Value = resp.body_mut().read_json().map_err(|e| Error::Teacher(e.to_string()))?;
            v["choices"][0]["message"]["content"]
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| Error::Teacher("response has no message content".into()))
        }
    }
}
