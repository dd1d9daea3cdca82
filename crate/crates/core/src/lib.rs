//! Non-parametric model revision.
//!
//! A frozen text generator is steered by an editable corpus of
//! question/answer contexts. Queries are embedded, matched against the
//! corpus by cosine similarity, and the closest contexts above a threshold
//! are prepended to the prompt. Users correct the model by editing the
//! corpus instead of its weights.
//!
//! - [`embed`]: embeddings and cosine similarity
//! - [`engine`]: the revision corpus and threshold retrieval
//! - [`prompt`]: base and contextualized prompts
//! - [`generate`]: remote and mock generators
//! - [`pipeline`]: the answer path, polarity mapping and interaction cases
//! - [`simulate`]: feedback simulation, sweeps and similarity buckets
//! - [`metrics`]: BLEU, ROUGE-L, METEOR, embedding similarity, accuracy

pub mod embed;
pub mod engine;
pub mod error;
pub mod generate;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod simulate;
pub mod text;

pub use embed::{cosine_similarity, hash_embed, Embedder, EmbeddingVector, HashEmbedder};
pub use engine::{EntrySource, RetrievalConfig, RetrievalHit, RevisionEngine, RevisionEntry};
pub use error::{Error, Result};
pub use generate::{EchoGenerator, GenerationConfig, Generator};
pub use metrics::EvalReport;
pub use pipeline::{classify_polarity, InteractionRecord, OutcomeCase, Pipeline, Polarity};
pub use prompt::PromptTemplate;
pub use simulate::LabeledExample;
