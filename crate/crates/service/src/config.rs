//! Startup configuration and backend resolution.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use serde::Serialize;

use rit_core::embed::RemoteEmbedder;
use rit_core::engine::Clock;
use rit_core::generate::RemoteGenerator;
use rit_core::{
    EchoGenerator, Embedder, Error, GenerationConfig, Generator, HashEmbedder, Pipeline, RetrievalConfig,
    RevisionEngine,
};

/// Where embeddings and generations come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    /// HTTP embedder and generator.
    Remote,
    /// Hash embedder and echo generator; needs nothing external.
    Mock,
}

impl BackendMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendMode::Remote => "remote",
            BackendMode::Mock => "mock",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    /// Corpus file loaded at startup and rewritten after every mutation.
    pub corpus_path: Option<PathBuf>,
    pub retrieval: RetrievalConfig,
    pub generation: GenerationConfig,
    pub embed_url: Option<String>,
    pub gen_url: Option<String>,
    pub backend: BackendMode,
    pub clock: Clock,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            corpus_path: None,
            retrieval: RetrievalConfig::default(),
            generation: GenerationConfig::default(),
            embed_url: None,
            gen_url: None,
            backend: BackendMode::Mock,
            clock: Clock::System,
        }
    }
}

/// A shared embedder and generator pair.
pub type Backends = (Arc<dyn Embedder>, Arc<dyn Generator>);

impl ServiceConfig {
    /// Resolves the single embedder and generator for this configuration.
    pub fn backends(&self) -> Result<Backends, Error> {
        match self.backend {
            BackendMode::Mock => Ok((
                Arc::new(HashEmbedder::new(HashEmbedder::DEFAULT_DIM, 0)?),
                Arc::new(EchoGenerator::default()),
            )),
            BackendMode::Remote => {
                let embed_url = self.embed_url.as_deref().ok_or_else(|| {
                    Error::InvalidConfig(format!("remote mode needs {}", RemoteEmbedder::ENV_URL))
                })?;
                let gen_url = self.gen_url.as_deref().ok_or_else(|| {
                    Error::InvalidConfig(format!("remote mode needs {}", RemoteGenerator::ENV_URL))
                })?;
                Ok((
                    Arc::new(RemoteEmbedder::new(embed_url)),
                    Arc::new(RemoteGenerator::new(gen_url)),
                ))
            }
        }
    }

    /// Builds the pipeline, loading the corpus file if it exists.
    pub fn build_pipeline(&self) -> Result<Pipeline, Error> {
        self.retrieval.validate()?;
        self.generation.validate()?;
        let (embedder, generator) = self.backends()?;
        let engine = RevisionEngine::new(embedder).with_clock(self.clock);
        if let Some(path) = self.corpus_path.as_deref().filter(|p| p.exists()) {
            let n = engine.load_corpus(path)?;
            log::info!("loaded {n} entries from {}", path.display());
        }
        Ok(Pipeline::new(Arc::new(engine), generator))
    }
}
