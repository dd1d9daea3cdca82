//! The end-to-end answer path (embed, retrieve, contextualize, generate,
//! classify) and the three-case interaction protocol.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::{EntrySource, RetrievalConfig, RetrievalHit, RevisionEngine, RevisionEntry, Upsert};
use crate::error::{Error, Result};
use crate::generate::{GenerationConfig, Generator};
use crate::prompt::{render_base, render_contextualized};
use crate::text::tokenize;

/// Three-class moral judgment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub enum Polarity {
    Negative,
    Neutral,
    Positive,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Negative, Polarity::Neutral, Polarity::Positive];

    pub fn value(self) -> i8 {
        match self {
            Polarity::Negative => -1,
            Polarity::Neutral => 0,
            Polarity::Positive => 1,
        }
    }
}

impl TryFrom<i8> for Polarity {
    type Error = Error;

    fn try_from(v: i8) -> Result<Self> {
        match v {
            -1 => Ok(Polarity::Negative),
            0 => Ok(Polarity::Neutral),
            1 => Ok(Polarity::Positive),
            other => Err(Error::InvalidInput(format!("polarity must be -1, 0 or 1, got {other}"))),
        }
    }
}

impl TryFrom<i64> for Polarity {
    type Error = Error;

    fn try_from(v: i64) -> Result<Self> {
        i8::try_from(v)
            .map_err(|_| Error::InvalidInput(format!("polarity must be -1, 0 or 1, got {v}")))
            .and_then(Polarity::try_from)
    }
}

impl From<Polarity> for i8 {
    fn from(p: Polarity) -> i8 {
        p.value()
    }
}

impl std::fmt::Display for Polarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Polarity::Neutral => f.write_str("0"),
            _ => write!(f, "{:+}", self.value()),
        }
    }
}

/// Text-to-class mapping. Returns the class and whether the mapping was a
/// low-confidence fallback.
pub trait PolarityClassifier: Send + Sync {
    fn classify(&self, text: &str) -> (Polarity, bool);
}

/// Keyword rule table; see [`classify_polarity`].
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleClassifier;

impl PolarityClassifier for RuleClassifier {
    fn classify(&self, text: &str) -> (Polarity, bool) {
        classify_polarity(text)
    }
}

const NEG_WORDS: &[&str] = &["wrong", "bad", "rude", "shouldn't", "immoral", "unacceptable", "don't"];
const NEG_PHRASES: &[(&str, &str)] = &[("should", "not"), ("not", "okay"), ("do", "not")];
const POS_WORDS: &[&str] = &["good", "right", "okay", "ok", "fine", "acceptable", "moral"];
const NEU_WORDS: &[&str] = &["depends", "discretionary", "expected", "understandable"];
// "it's okay" is the archetypal discretionary answer; matched before "okay"
// can count as positive.
const NEU_PHRASES: &[(&str, &str)] = &[("it's", "okay"), ("it's", "ok"), ("it's", "fine")];

fn is_negator(tok: &str) -> bool {
    tok == "not" || tok == "never" || tok.ends_with("n't")
}

/// Deterministic rule table.
///
/// A leading "no" or "yes" decides outright. Otherwise negative, positive
/// and neutral lexemes are counted (two-word phrases first, consuming both
/// tokens; "should" is positive only with no negator in the two tokens
/// before it). The largest count wins; no hits or a tie for first place
/// gives neutral with the low-confidence flag set.
pub fn classify_polarity(text: &str) -> (Polarity, bool) {
    let tokens = tokenize(text);
    match tokens.first().map(String::as_str) {
        Some("no") => return (Polarity::Negative, false),
        Some("yes") => return (Polarity::Positive, false),
        _ => {}
    }

    let (mut neg, mut pos, mut neu) = (0usize, 0usize, 0usize);
    let mut i = 0;
    while i < tokens.len() {
        let tok = tokens[i].as_str();
        if let Some(next) = tokens.get(i + 1).map(String::as_str) {
            if NEG_PHRASES.contains(&(tok, next)) {
                neg += 1;
                i += 2;
                continue;
            }
            if NEU_PHRASES.contains(&(tok, next)) {
                neu += 1;
                i += 2;
                continue;
            }
        }
        if NEG_WORDS.contains(&tok) {
            neg += 1;
        } else if POS_WORDS.contains(&tok) {
            pos += 1;
        } else if NEU_WORDS.contains(&tok) {
            neu += 1;
        } else if tok == "should" {
            let window = &tokens[i.saturating_sub(2)..i];
            if !window.iter().any(|t| is_negator(t)) {
                pos += 1;
            }
        }
        i += 1;
    }

    let best = neg.max(pos).max(neu);
    let leaders = [neg, pos, neu].iter().filter(|&&c| c == best).count();
    if best == 0 || leaders > 1 {
        return (Polarity::Neutral, true);
    }
    let class = if best == neg {
        Polarity::Negative
    } else if best == pos {
        Polarity::Positive
    } else {
        Polarity::Neutral
    };
    (class, false)
}

/// The three situations a prediction can end in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeCase {
    /// Prediction contradicts the user; corrective feedback needed.
    MisalignedNeedsFeedback,
    /// No context passed the threshold; the model signals uncertainty.
    UncertainNoContext,
    /// Context was used and the prediction stands.
    AlignedWithContext,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserVerdict {
    Accept,
    Reject,
    #[default]
    None,
}

/// Full trace of one answered query.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionRecord {
    pub query: String,
    pub hits: Vec<RetrievalHit>,
    /// Snapshot of the hit entries, parallel to `hits`.
    pub contexts: Vec<RevisionEntry>,
    pub prompt: String,
    pub generated_answer: String,
    pub predicted_polarity: Polarity,
    pub low_confidence_polarity: bool,
    pub outcome: OutcomeCase,
}

impl InteractionRecord {
    pub fn is_contextualized(&self) -> bool {
        !self.hits.is_empty()
    }

    pub fn top_similarity(&self) -> Option<f64> {
        self.hits.first().map(|h| h.similarity)
    }
}

/// Case 2 whenever nothing was retrieved; otherwise a rejection means case 1
/// and anything else (including silence) case 3.
pub fn resolve_outcome(record: &InteractionRecord, verdict: UserVerdict) -> OutcomeCase {
    if record.hits.is_empty() {
        return OutcomeCase::UncertainNoContext;
    }
    match verdict {
        UserVerdict::Reject => OutcomeCase::MisalignedNeedsFeedback,
        UserVerdict::Accept | UserVerdict::None => OutcomeCase::AlignedWithContext,
    }
}

/// Output of the context-free path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaselineOutput {
    pub prompt: String,
    pub generated_answer: String,
    pub predicted_polarity: Polarity,
    pub low_confidence_polarity: bool,
}

/// The bare model: base prompt straight into the generator, no engine.
pub fn baseline_path(
    query: &str,
    generator: &dyn Generator,
    classifier: &dyn PolarityClassifier,
    gen_cfg: &GenerationConfig,
) -> Result<BaselineOutput> {
    let prompt = render_base(query)?;
    let generated_answer = generator.generate(&prompt, gen_cfg)?;
    let (predicted_polarity, low_confidence_polarity) = classifier.classify(&generated_answer);
    Ok(BaselineOutput {
        prompt,
        generated_answer,
        predicted_polarity,
        low_confidence_polarity,
    })
}

/// A generator plus a revision engine.
#[derive(Clone)]
pub struct Pipeline {
    engine: Arc<RevisionEngine>,
    generator: Arc<dyn Generator>,
    classifier: Arc<dyn PolarityClassifier>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline").field("engine", &self.engine).finish_non_exhaustive()
    }
}

impl Pipeline {
    pub fn new(engine: Arc<RevisionEngine>, generator: Arc<dyn Generator>) -> Self {
        Self {
            engine,
            generator,
            classifier: Arc::new(RuleClassifier),
        }
    }

    pub fn with_classifier(mut self, classifier: Arc<dyn PolarityClassifier>) -> Self {
        self.classifier = classifier;
        self
    }

    /// Same generator and classifier over a different engine.
    pub fn with_engine(&self, engine: Arc<RevisionEngine>) -> Self {
        Self {
            engine,
            generator: Arc::clone(&self.generator),
            classifier: Arc::clone(&self.classifier),
        }
    }

    pub fn engine(&self) -> &Arc<RevisionEngine> {
        &self.engine
    }

    pub fn generator(&self) -> &dyn Generator {
        self.generator.as_ref()
    }

    pub fn classifier(&self) -> &dyn PolarityClassifier {
        self.classifier.as_ref()
    }

    pub fn classify(&self, text: &str) -> (Polarity, bool) {
        self.classifier.classify(text)
    }

    pub fn answer(
        &self,
        query: &str,
        retrieval: &RetrievalConfig,
        gen_cfg: &GenerationConfig,
    ) -> Result<InteractionRecord> {
        if query.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        let embedding = self.engine.embedder().embed(query)?;
        let retrieved = self.engine.retrieve_entries(&embedding, retrieval)?;
        let (hits, contexts): (Vec<_>, Vec<_>) = retrieved.into_iter().unzip();

        let prompt = if hits.is_empty() {
            render_base(query)?
        } else {
            let pairs: Vec<(&RevisionEntry, f64)> = contexts
                .iter()
                .zip(&hits)
                .map(|(e, h)| (e, h.similarity))
                .collect();
            render_contextualized(query, &pairs, retrieval.template)?
        };
        let generated_answer = self.generator.generate(&prompt, gen_cfg)?;
        let (predicted_polarity, low_confidence_polarity) = self.classifier.classify(&generated_answer);
        let outcome = if hits.is_empty() {
            OutcomeCase::UncertainNoContext
        } else {
            OutcomeCase::AlignedWithContext
        };
        Ok(InteractionRecord {
            query: query.to_owned(),
            hits,
            contexts,
            prompt,
            generated_answer,
            predicted_polarity,
            low_confidence_polarity,
            outcome,
        })
    }

    pub fn answer_baseline(&self, query: &str, gen_cfg: &GenerationConfig) -> Result<BaselineOutput> {
        baseline_path(query, self.generator.as_ref(), self.classifier.as_ref(), gen_cfg)
    }

    /// Stores a user correction; the next identical query retrieves it.
    pub fn apply_feedback(&self, query: &str, corrected_answer: &str, polarity: Polarity) -> Result<Upsert> {
        self.engine
            .add_entry(query, corrected_answer, polarity, EntrySource::User)
    }
}
