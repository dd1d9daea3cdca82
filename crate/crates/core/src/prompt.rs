//! Prompt construction.
//!
//! The base prompt is `Question: {query} Answer:`. Retrieved contexts are
//! prepended either as earlier question/answer turns or as `Context:`
//! statements, least similar first, so the closest context sits right before
//! the final question. User text is not escaped: a query that itself
//! contains a marker string will confuse marker-based parsing downstream.

use serde::{Deserialize, Serialize};

use crate::engine::RevisionEntry;
use crate::error::{Error, Result};

pub const QUESTION_MARKER: &str = "Question:";
pub const ANSWER_MARKER: &str = "Answer:";
pub const CONTEXT_MARKER: &str = "Context:";

/// Answer text that marks an entry as a standalone statement.
pub const STATEMENT_SENTINEL: &str = ".";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTemplate {
    /// `Question: {context} Answer: {context answer}`
    #[default]
    QaPair,
    /// `Context: {statement}`
    ContextStatement,
}

impl PromptTemplate {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptTemplate::QaPair => "qa_pair",
            PromptTemplate::ContextStatement => "context_statement",
        }
    }
}

impl std::str::FromStr for PromptTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qa_pair" => Ok(PromptTemplate::QaPair),
            "context_statement" => Ok(PromptTemplate::ContextStatement),
            other => Err(Error::InvalidConfig(format!("unknown template {other:?}"))),
        }
    }
}

pub fn render_base(query: &str) -> Result<String> {
    if query.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    Ok(format!("{QUESTION_MARKER} {query} {ANSWER_MARKER}"))
}

/// Declarative form of an entry: the query text followed by the answer, or
/// the query text alone when the answer is the statement sentinel.
pub fn statement_text(entry: &RevisionEntry) -> String {
    let answer = entry.answer_text.trim();
    if answer == STATEMENT_SENTINEL {
        entry.query_text.clone()
    } else {
        format!("{} {}", entry.query_text, entry.answer_text)
    }
}

/// Prepends `contexts` to the base prompt. Contexts are re-ordered by
/// ascending similarity; equal similarities keep their input order.
pub fn render_contextualized(
    query: &str,
    contexts: &[(&RevisionEntry, f64)],
    variant: PromptTemplate,
) -> Result<String> {
    if contexts.is_empty() {
        return Err(Error::NoContext);
    }
    let base = render_base(query)?;
    let mut ordered: Vec<&(&RevisionEntry, f64)> = contexts.iter().collect();
    ordered.sort_by(|a, b| a.1.total_cmp(&b.1));

    let mut out = String::new();
    for (entry, _) in ordered {
        match variant {
            PromptTemplate::QaPair => {
                out.push_str(&format!(
                    "{QUESTION_MARKER} {} {ANSWER_MARKER} {} ",
                    entry.query_text, entry.answer_text
                ));
            }
            PromptTemplate::ContextStatement => {
                out.push_str(&format!("{CONTEXT_MARKER} {} ", statement_text(entry)));
            }
        }
    }
    out.push_str(&base);
    Ok(out)
}

/// True when user text contains one of the prompt markers.
pub fn contains_marker(text: &str) -> bool {
    [QUESTION_MARKER, ANSWER_MARKER, CONTEXT_MARKER]
        .iter()
        .any(|m| text.contains(m))
}
