//! Text generation backends.
//!
//! [`RemoteGenerator`] forwards prompts and sampling settings to an external
//! model server. The mock generators read contexts back out of the prompt by
//! its marker strings, which makes the whole revision loop deterministic.

use serde::{Deserialize, Serialize};

use crate::embed::{http_agent, post_json};
use crate::error::{Error, Result};
use crate::prompt::{ANSWER_MARKER, CONTEXT_MARKER, QUESTION_MARKER};
use crate::text::{seeded_hash, tokenize};

/// The three answers a mock generator gives without context, one per
/// polarity class.
pub const BASELINE_ANSWERS: [&str; 3] = ["Yes, it is good.", "No, it is wrong.", "It's okay."];

pub const DEFAULT_MOCK_SEED: u64 = 0;

/// Sampling settings sent to remote backends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    /// Top-k as a fraction of the backend vocabulary; the backend resolves k.
    pub top_k_fraction: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            top_k_fraction: 0.10,
            temperature: 0.1,
            max_new_tokens: 64,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_k_fraction > 0.0 && self.top_k_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "top_k_fraction {} outside (0, 1]",
                self.top_k_fraction
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        if self.max_new_tokens < 1 {
            return Err(Error::InvalidConfig("max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

pub trait Generator: Send + Sync {
    fn generate(&self, prompt: &str, config: &GenerationConfig) -> Result<String>;
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
    top_k_fraction: f64,
    temperature: f64,
    max_new_tokens: usize,
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
}

/// HTTP client for an external generator. Stateless, so concurrent calls
/// are fine.
#[derive(Debug, Clone)]
pub struct RemoteGenerator {
    url: String,
    agent: ureq::Agent,
}

impl RemoteGenerator {
    pub const ENV_URL: &'static str = "RIT_GEN_URL";

    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            agent: http_agent(),
        }
    }

    pub fn from_env() -> Result<Self> {
        std::env::var(Self::ENV_URL)
            .map(Self::new)
            .map_err(|_| Error::InvalidConfig(format!("{} is not set", Self::ENV_URL)))
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl Generator for RemoteGenerator {
    fn generate(&self, prompt: &str, config: &GenerationConfig) -> Result<String> {
        let request = GenerateRequest {
            prompt,
            top_k_fraction: config.top_k_fraction,
            temperature: config.temperature,
            max_new_tokens: config.max_new_tokens,
        };
        let response: GenerateResponse = post_json(&self.agent, &self.url, &request)?;
        let text = response.text.trim();
        if text.is_empty() {
            return Err(Error::BackendProtocol("generator returned empty text".into()));
        }
        Ok(text.to_owned())
    }
}

/// One prepended context as recovered from a prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContextBlock {
    QaPair { question: String, answer: String },
    Statement(String),
}

impl ContextBlock {
    /// What the echo generator answers with.
    pub fn echoed(&self) -> &str {
        match self {
            ContextBlock::QaPair { answer, .. } => answer,
            ContextBlock::Statement(s) => s,
        }
    }

    fn text(&self) -> String {
        match self {
            ContextBlock::QaPair { question, answer } => format!("{question} {answer}"),
            ContextBlock::Statement(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPrompt {
    /// In prompt order, so the last block is the most similar context.
    pub contexts: Vec<ContextBlock>,
    pub query: String,
}

/// Splits a prompt built by the prompt module back into its parts.
pub fn parse_prompt(prompt: &str) -> Result<ParsedPrompt> {
    let bad = |why: &str| Error::PromptParse(why.to_owned());
    let body = prompt
        .trim_end()
        .strip_suffix(ANSWER_MARKER)
        .ok_or_else(|| bad("prompt does not end with the answer marker"))?;
    let q_pos = body
        .rfind(QUESTION_MARKER)
        .ok_or_else(|| bad("no final question block"))?;
    let query = body[q_pos + QUESTION_MARKER.len()..].trim();
    if query.is_empty() {
        return Err(bad("final question is empty"));
    }
    let prefix = body[..q_pos].trim();

    let contexts = if prefix.is_empty() {
        Vec::new()
    } else if let Some(rest) = prefix.strip_prefix(CONTEXT_MARKER) {
        rest.split(CONTEXT_MARKER)
            .map(|s| {
                let s = s.trim();
                if s.is_empty() {
                    Err(bad("empty context statement"))
                } else {
                    Ok(ContextBlock::Statement(s.to_owned()))
                }
            })
            .collect::<Result<Vec<_>>>()?
    } else if let Some(rest) = prefix.strip_prefix(QUESTION_MARKER) {
        rest.split(QUESTION_MARKER)
            .map(|block| {
                let (q, a) = block
                    .split_once(ANSWER_MARKER)
                    .ok_or_else(|| bad("context question without answer"))?;
                Ok(ContextBlock::QaPair {
                    question: q.trim().to_owned(),
                    answer: a.trim().to_owned(),
                })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        return Err(bad("unrecognized text before the final question"));
    };

    Ok(ParsedPrompt {
        contexts,
        query: query.to_owned(),
    })
}

/// The context-free answer for `query`: one of [`BASELINE_ANSWERS`], picked
/// by a seeded hash of the query.
pub fn baseline_answer(query: &str, seed: u64) -> &'static str {
    BASELINE_ANSWERS[(seeded_hash(query.trim(), seed) % 3) as usize]
}

pub fn echo_generate(prompt: &str) -> Result<String> {
    EchoGenerator::default().respond(prompt)
}

pub fn relevance_aware_generate(prompt: &str, overlap_threshold: f64) -> Result<String> {
    RelevanceAwareGenerator::new(overlap_threshold, DEFAULT_MOCK_SEED).respond(prompt)
}

/// Jaccard index of two token sets; 0 when both are empty.
pub fn jaccard(a: &str, b: &str) -> f64 {
    use std::collections::HashSet;
    let a: HashSet<String> = tokenize(a).into_iter().collect();
    let b: HashSet<String> = tokenize(b).into_iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Answers with the most similar (last) context, or with the baseline
/// answer when the prompt carries no context.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EchoGenerator {
    pub seed: u64,
}

impl EchoGenerator {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn respond(&self, prompt: &str) -> Result<String> {
        let parsed = parse_prompt(prompt)?;
        Ok(match parsed.contexts.last() {
            Some(block) => block.echoed().to_owned(),
            None => baseline_answer(&parsed.query, self.seed).to_owned(),
        })
    }
}

impl Generator for EchoGenerator {
    fn generate(&self, prompt: &str, _config: &GenerationConfig) -> Result<String> {
        self.respond(prompt)
    }
}

/// Echo generator that ignores a context whose token overlap with the
/// question is below `overlap_threshold`, mimicking a model that judges
/// relevance on its own.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelevanceAwareGenerator {
    pub overlap_threshold: f64,
    pub seed: u64,
}

impl RelevanceAwareGenerator {
    pub fn new(overlap_threshold: f64, seed: u64) -> Self {
        Self {
            overlap_threshold,
            seed,
        }
    }

    pub fn respond(&self, prompt: &str) -> Result<String> {
        let parsed = parse_prompt(prompt)?;
        match parsed.contexts.last() {
            Some(block) if jaccard(&block.text(), &parsed.query) >= self.overlap_threshold => {
                Ok(block.echoed().to_owned())
            }
            _ => Ok(baseline_answer(&parsed.query, self.seed).to_owned()),
        }
    }
}

impl Generator for RelevanceAwareGenerator {
    fn generate(&self, prompt: &str, _config: &GenerationConfig) -> Result<String> {
        self.respond(prompt)
    }
}
