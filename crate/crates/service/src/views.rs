//! Wire shapes shared by the HTTP handlers and the CLI's `--json` output.

use serde::{Deserialize, Serialize};

use rit_core::engine::Upsert;
use rit_core::metrics::{EvalDiagnostics, EvalReport};
use rit_core::prompt::contains_marker;
use rit_core::{
    EntrySource, GenerationConfig, InteractionRecord, OutcomeCase, Polarity, PromptTemplate, RetrievalConfig,
    RevisionEntry,
};

pub const MARKER_WARNING: &str =
    "query contains a prompt marker (Question:, Answer: or Context:); the prompt may be misread";

/// A corpus entry without its embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryView {
    pub id: String,
    pub query: String,
    pub answer: String,
    pub polarity: Polarity,
    pub source: EntrySource,
    pub active: bool,
    pub created_at: i64,
}

impl From<&RevisionEntry> for EntryView {
    fn from(e: &RevisionEntry) -> Self {
        Self {
            id: e.id.clone(),
            query: e.query_text.clone(),
            answer: e.answer_text.clone(),
            polarity: e.polarity,
            source: e.source,
            active: e.active,
            created_at: e.created_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextView {
    pub id: String,
    pub query: String,
    pub answer: String,
    pub polarity: Polarity,
    pub similarity: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub query: String,
    pub answer: String,
    pub polarity: Polarity,
    pub low_confidence: bool,
    pub uncertain: bool,
    pub outcome: OutcomeCase,
    /// Most similar first.
    pub contexts: Vec<ContextView>,
    /// The exact prompt sent to the generator.
    pub prompt: String,
    pub retrieval: RetrievalConfig,
    pub warnings: Vec<String>,
}

impl QueryResponse {
    pub fn new(record: InteractionRecord, retrieval: RetrievalConfig) -> Self {
        let contexts = record
            .hits
            .iter()
            .zip(&record.contexts)
            .map(|(hit, entry)| ContextView {
                id: hit.entry_id.clone(),
                query: entry.query_text.clone(),
                answer: entry.answer_text.clone(),
                polarity: entry.polarity,
                similarity: hit.similarity,
                rank: hit.rank,
            })
            .collect();
        let mut warnings = Vec::new();
        if contains_marker(&record.query) {
            warnings.push(MARKER_WARNING.to_owned());
        }
        Self {
            uncertain: record.hits.is_empty(),
            query: record.query,
            answer: record.generated_answer,
            polarity: record.predicted_polarity,
            low_confidence: record.low_confidence_polarity,
            outcome: record.outcome,
            contexts,
            prompt: record.prompt,
            retrieval,
            warnings,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackResponse {
    pub id: String,
    pub created: bool,
    pub entry: EntryView,
}

impl From<Upsert> for FeedbackResponse {
    fn from(up: Upsert) -> Self {
        Self {
            id: up.entry.id.clone(),
            created: up.created,
            entry: EntryView::from(&up.entry),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusPage {
    pub items: Vec<EntryView>,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResponse {
    pub report: EvalReport,
    pub diagnostics: EvalDiagnostics,
}

/// Runtime-adjustable settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub retrieval: RetrievalConfig,
    pub generation: GenerationConfig,
}

/// Partial settings update; every field optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingsPatch {
    pub t: Option<f64>,
    pub c: Option<usize>,
    pub template: Option<PromptTemplate>,
    pub top_k_fraction: Option<f64>,
    pub temperature: Option<f64>,
    pub max_new_tokens: Option<usize>,
}

impl SettingsPatch {
    /// The patched settings, validated. `self` is left untouched on error.
    pub fn apply(&self, current: Settings) -> rit_core::Result<Settings> {
        let mut next = current;
        if let Some(t) = self.t {
            next.retrieval.t = t;
        }
        if let Some(c) = self.c {
            next.retrieval.c = c;
        }
        if let Some(template) = self.template {
            next.retrieval.template = template;
        }
        if let Some(k) = self.top_k_fraction {
            next.generation.top_k_fraction = k;
        }
        if let Some(temp) = self.temperature {
            next.generation.temperature = temp;
        }
        if let Some(n) = self.max_new_tokens {
            next.generation.max_new_tokens = n;
        }
        next.retrieval.validate()?;
        next.generation.validate()?;
        Ok(next)
    }
}
