//! The `rit` command line.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rit_core::engine::{Clock, EntryPatch};
use rit_core::metrics::evaluate_detailed;
use rit_core::simulate::{
    bucket_by_similarity, fill_engine, gen_synthetic_dataset, iterative_expansion, load_dataset, run_queries,
    save_dataset, select_feedback, sweep_threshold, write_csv, LabeledExample, SimulationConfig,
};
use rit_core::{EntrySource, GenerationConfig, Pipeline, Polarity, PromptTemplate, RetrievalConfig, RevisionEngine};

use crate::config::{BackendMode, ServiceConfig};
use crate::http::{self, AppState};
use crate::views::{CorpusPage, EntryView, FeedbackResponse, QueryResponse, Settings};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] rit_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io {
            context: context.into(),
            source,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendChoice {
    /// Remote when both backend URLs are set, mock when neither is.
    Auto,
    Remote,
    Mock,
}

#[derive(Debug, Parser)]
#[command(name = "rit", version, about = "Revise a frozen language model through an editable corpus of contexts")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    #[arg(long, global = true, value_enum, default_value_t = BackendChoice::Auto)]
    pub backend: BackendChoice,
    /// Embedding service endpoint.
    #[arg(long, global = true, env = "RIT_EMBED_URL")]
    pub embed_url: Option<String>,
    /// Generation service endpoint.
    #[arg(long, global = true, env = "RIT_GEN_URL")]
    pub gen_url: Option<String>,
    /// Corpus file (JSON lines).
    #[arg(long, global = true, env = "RIT_CORPUS_PATH")]
    pub corpus: Option<PathBuf>,
    /// Similarity threshold in [-1, 1].
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub t: Option<f64>,
    /// Maximum number of contexts.
    #[arg(long, global = true)]
    pub c: Option<usize>,
    /// Prompt layout: qa_pair or context_statement.
    #[arg(long, global = true)]
    pub template: Option<PromptTemplate>,
    /// Sample from this fraction of the vocabulary.
    #[arg(long, global = true)]
    pub top_k_fraction: Option<f64>,
    /// Sampling temperature, above 0.
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    /// Cap on generated tokens.
    #[arg(long, global = true)]
    pub max_new_tokens: Option<usize>,
    /// Stamp new entries with this time instead of the wall clock.
    #[arg(long, global = true, hide = true, allow_negative_numbers = true)]
    pub fixed_clock: Option<i64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
    },
    /// Check a labeled dataset; with --as-corpus, add its rows to the corpus.
    Ingest {
        dataset: PathBuf,
        #[arg(long)]
        as_corpus: bool,
    },
    /// Answer one query.
    Query {
        text: String,
        #[arg(long)]
        json: bool,
    },
    /// Store a corrected answer for a query.
    Feedback {
        query: String,
        answer: String,
        #[arg(allow_negative_numbers = true)]
        polarity: i8,
        #[arg(long)]
        json: bool,
    },
    /// Browse and edit corpus entries.
    Corpus {
        #[command(subcommand)]
        command: CorpusCommand,
    },
    /// Score the pipeline on a labeled dataset.
    Eval {
        dataset: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Feedback simulations over dataset splits.
    Simulate {
        #[command(subcommand)]
        command: SimulateCommand,
    },
    /// Accuracy at several thresholds.
    Sweep {
        /// Test rows; defaults to the synthetic test split over the synthetic train corpus.
        dataset: Option<PathBuf>,
        #[arg(long = "t-list", value_delimiter = ',', required = true, allow_negative_numbers = true)]
        t_list: Vec<f64>,
        #[command(flatten)]
        synthetic: SyntheticArgs,
    },
    /// Accuracy of contextualized answers by minimum similarity.
    Buckets {
        dataset: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = SimulationConfig::default().buckets)]
        buckets: Vec<f64>,
        #[command(flatten)]
        synthetic: SyntheticArgs,
    },
    /// Write synthetic train/val/test splits.
    GenSynthetic {
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        synthetic: SyntheticArgs,
    },
}

#[derive(Debug, Subcommand)]
pub enum CorpusCommand {
    List {
        #[arg(long, default_value_t = 0)]
        offset: usize,
        #[arg(long, default_value_t = http::DEFAULT_PAGE_LIMIT)]
        limit: usize,
        #[arg(long)]
        search: Option<String>,
        #[arg(long)]
        json: bool,
    },
    Update {
        id: String,
        #[arg(long)]
        query: Option<String>,
        #[arg(long)]
        answer: Option<String>,
        #[arg(long, allow_negative_numbers = true)]
        polarity: Option<i8>,
    },
    Delete {
        id: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum SimulateCommand {
    /// Keep the train rows that help answer validation rows correctly.
    Select {
        #[arg(long, requires = "val")]
        train: Option<PathBuf>,
        #[arg(long, requires = "train")]
        val: Option<PathBuf>,
        /// Where to write the kept rows.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        synthetic: SyntheticArgs,
    },
    /// Grow the corpus from a pool for queries that found no context.
    Expand {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value_t = SimulationConfig::default().iterations)]
        iterations: usize,
    },
}

#[derive(Debug, Clone, Args)]
pub struct SyntheticArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = SimulationConfig::default().n_actions)]
    pub n_actions: usize,
    #[arg(long, default_value_t = SimulationConfig::default().paraphrases_per_split)]
    pub per_split: usize,
}

impl GlobalArgs {
    fn backend_mode(&self) -> CliResult<BackendMode> {
        match (self.backend, &self.embed_url, &self.gen_url) {
            (BackendChoice::Mock, _, _) => Ok(BackendMode::Mock),
            (BackendChoice::Remote, _, _) | (BackendChoice::Auto, Some(_), Some(_)) => Ok(BackendMode::Remote),
            (BackendChoice::Auto, None, None) => Ok(BackendMode::Mock),
            (BackendChoice::Auto, _, _) => Err(CliError::Usage(
                "set both --embed-url and --gen-url, or neither (mock mode)".into(),
            )),
        }
    }

    /// Retrieval defaults; simulations on hash embeddings use the threshold
    /// calibrated for them unless one is given.
    fn retrieval(&self, mode: BackendMode, simulation: bool) -> CliResult<RetrievalConfig> {
        let default_t = if simulation && mode == BackendMode::Mock {
            SimulationConfig::HASH_EMBEDDER_T
        } else {
            RetrievalConfig::DEFAULT_T
        };
        let base = RetrievalConfig::default();
        let cfg = RetrievalConfig {
            t: self.t.unwrap_or(default_t),
            c: self.c.unwrap_or(base.c),
            template: self.template.unwrap_or(base.template),
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    fn generation(&self) -> CliResult<GenerationConfig> {
        let base = GenerationConfig::default();
        let cfg = GenerationConfig {
            top_k_fraction: self.top_k_fraction.unwrap_or(base.top_k_fraction),
            temperature: self.temperature.unwrap_or(base.temperature),
            max_new_tokens: self.max_new_tokens.unwrap_or(base.max_new_tokens),
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    fn service_config(&self, simulation: bool) -> CliResult<ServiceConfig> {
        let backend = self.backend_mode()?;
        Ok(ServiceConfig {
            corpus_path: self.corpus.clone(),
            retrieval: self.retrieval(backend, simulation)?,
            generation: self.generation()?,
            embed_url: self.embed_url.clone(),
            gen_url: self.gen_url.clone(),
            backend,
            clock: self.fixed_clock.map_or(Clock::System, Clock::Fixed),
            ..ServiceConfig::default()
        })
    }

    fn corpus_path(&self) -> CliResult<&Path> {
        self.corpus
            .as_deref()
            .ok_or_else(|| CliError::Usage("this command needs --corpus or RIT_CORPUS_PATH".into()))
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{rendered}")
            } else {
                write!(out, "{rendered}")
            };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_USAGE
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_FAILURE
        }
    }
}

fn write_out(out: &mut dyn Write, text: impl std::fmt::Display) -> CliResult {
    writeln!(out, "{text}").map_err(|e| CliError::io("stdout", e))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("view types serialize")
}

fn execute(cli: &Cli, out: &mut dyn Write) -> CliResult {
    let g = &cli.global;
    match &cli.command {
        Command::Serve { listen } => serve(g, *listen, out),
        Command::Ingest { dataset, as_corpus } => ingest(g, dataset, *as_corpus, out),
        Command::Query { text, json } => query(g, text, *json, out),
        Command::Feedback {
            query,
            answer,
            polarity,
            json,
        } => feedback(g, query, answer, *polarity, *json, out),
        Command::Corpus { command } => corpus(g, command, out),
        Command::Eval { dataset, json } => eval(g, dataset, *json, out),
        Command::Simulate { command } => match command {
            SimulateCommand::Select {
                train,
                val,
                out: kept_path,
                synthetic,
            } => select(g, train.as_deref(), val.as_deref(), kept_path.as_deref(), synthetic, out),
            SimulateCommand::Expand {
                queries,
                pool,
                iterations,
            } => expand(g, queries, pool, *iterations, out),
        },
        Command::Sweep {
            dataset,
            t_list,
            synthetic,
        } => sweep(g, dataset.as_deref(), t_list, synthetic, out),
        Command::Buckets {
            dataset,
            buckets,
            synthetic,
        } => bucket_table(g, dataset.as_deref(), buckets, synthetic, out),
        Command::GenSynthetic { out_dir, synthetic } => gen_synthetic(out_dir, synthetic, out),
    }
}

fn serve(g: &GlobalArgs, listen: SocketAddr, out: &mut dyn Write) -> CliResult {
    let cfg = ServiceConfig {
        listen,
        ..g.service_config(false)?
    };
    let pipeline = cfg.build_pipeline()?;
    let settings = Settings {
        retrieval: cfg.retrieval,
        generation: cfg.generation,
    };
    let state = Arc::new(AppState::new(pipeline, settings, cfg.corpus_path.clone(), cfg.backend));
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::io("starting runtime", e))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(cfg.listen)
            .await
            .map_err(|e| CliError::io(format!("binding {}", cfg.listen), e))?;
        let addr = listener.local_addr().map_err(|e| CliError::io("binding", e))?;
        write_out(out, format_args!("listening on http://{addr} ({} backends)", cfg.backend.as_str()))?;
        out.flush().map_err(|e| CliError::io("stdout", e))?;
        http::serve(listener, state).await.map_err(|e| CliError::io("serving", e))
    })
}

fn save(pipeline: &Pipeline, path: &Path) -> CliResult<usize> {
    Ok(pipeline.engine().save_corpus(path)?)
}

fn ingest(g: &GlobalArgs, dataset: &Path, as_corpus: bool, out: &mut dyn Write) -> CliResult {
    let rows = load_dataset(dataset)?;
    if !as_corpus {
        let mut counts = [0usize; 3];
        for r in &rows {
            counts[(r.gold_polarity.value() + 1) as usize] += 1;
        }
        return write_out(
            out,
            format_args!(
                "{} valid rows (polarity -1: {}, 0: {}, +1: {})",
                rows.len(),
                counts[0],
                counts[1],
                counts[2]
            ),
        );
    }
    let path = g.corpus_path()?;
    let pipeline = g.service_config(false)?.build_pipeline()?;
    let before = pipeline.engine().len();
    fill_engine(pipeline.engine(), &rows, EntrySource::Dataset)?;
    let total = save(&pipeline, path)?;
    write_out(
        out,
        format_args!("ingested {} rows; corpus {} now holds {total} entries ({} new)", rows.len(), path.display(), total - before),
    )
}

fn query(g: &GlobalArgs, text: &str, json: bool, out: &mut dyn Write) -> CliResult {
    let cfg = g.service_config(false)?;
    let pipeline = cfg.build_pipeline()?;
    let record = pipeline.answer(text, &cfg.retrieval, &cfg.generation)?;
    let response = QueryResponse::new(record, cfg.retrieval);
    if json {
        return write_out(out, to_json(&response));
    }
    for w in &response.warnings {
        write_out(out, format_args!("warning: {w}"))?;
    }
    if response.uncertain {
        write_out(
            out,
            format_args!("UNCERTAIN: no context at or above t={}; consider adding feedback", cfg.retrieval.t),
        )?;
    }
    write_out(out, format_args!("answer: {}", response.answer))?;
    let confidence = if response.low_confidence { " (low confidence)" } else { "" };
    write_out(out, format_args!("polarity: {}{confidence}", response.polarity))?;
    for ctx in &response.contexts {
        write_out(
            out,
            format_args!("context #{} [{}] similarity {:.3}: {} -> {}", ctx.rank, ctx.id, ctx.similarity, ctx.query, ctx.answer),
        )?;
    }
    write_out(out, format_args!("prompt: {}", response.prompt))
}

fn feedback(g: &GlobalArgs, q: &str, answer: &str, polarity: i8, json: bool, out: &mut dyn Write) -> CliResult {
    let polarity = Polarity::try_from(polarity).map_err(|e| CliError::Usage(e.to_string()))?;
    let path = g.corpus_path()?;
    let pipeline = g.service_config(false)?.build_pipeline()?;
    let up = pipeline.apply_feedback(q, answer, polarity)?;
    save(&pipeline, path)?;
    let response = FeedbackResponse::from(up);
    if json {
        return write_out(out, to_json(&response));
    }
    let verb = if response.created { "created" } else { "updated" };
    write_out(out, format_args!("{verb} {}", response.id))
}

fn corpus(g: &GlobalArgs, command: &CorpusCommand, out: &mut dyn Write) -> CliResult {
    let path = g.corpus_path()?;
    let pipeline = g.service_config(false)?.build_pipeline()?;
    let engine = pipeline.engine();
    match command {
        CorpusCommand::List {
            offset,
            limit,
            search,
            json,
        } => {
            if *limit == 0 {
                return Err(CliError::Usage("--limit must be at least 1".into()));
            }
            let (items, total) = engine.list(*offset, *limit, search.as_deref().filter(|s| !s.is_empty()));
            let page = CorpusPage {
                items: items.iter().map(EntryView::from).collect(),
                total,
                offset: *offset,
                limit: *limit,
            };
            if *json {
                return write_out(out, to_json(&page));
            }
            for e in &page.items {
                write_out(out, format_args!("{}\t{}\t{}\t{}", e.id, e.polarity, e.query, e.answer))?;
            }
            write_out(out, format_args!("{} of {total} entries", page.items.len()))
        }
        CorpusCommand::Update {
            id,
            query,
            answer,
            polarity,
        } => {
            let polarity = polarity
                .map(Polarity::try_from)
                .transpose()
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let patch = EntryPatch {
                query_text: query.clone(),
                answer_text: answer.clone(),
                polarity,
            };
            let entry = engine.update_entry(id, &patch)?;
            save(&pipeline, path)?;
            write_out(out, format_args!("updated {}", entry.id))
        }
        CorpusCommand::Delete { id } => {
            if !engine.remove_entry(id) {
                return Err(rit_core::Error::NotFound(format!("entry {id}")).into());
            }
            save(&pipeline, path)?;
            write_out(out, format_args!("deleted {id}"))
        }
    }
}

fn eval(g: &GlobalArgs, dataset: &Path, json: bool, out: &mut dyn Write) -> CliResult {
    let cfg = g.service_config(false)?;
    let pipeline = cfg.build_pipeline()?;
    let rows = load_dataset(dataset)?;
    if rows.is_empty() {
        return Err(rit_core::Error::InvalidInput(format!("{} has no rows", dataset.display())).into());
    }
    let records = run_queries(&pipeline, &rows, &cfg.retrieval, &cfg.generation)?;
    let engine = pipeline.engine();
    let (report, diagnostics) = evaluate_detailed(&records, &rows, engine.embedder().as_ref(), engine.len())?;
    if json {
        return write_out(out, to_json(&serde_json::json!({ "report": report, "diagnostics": diagnostics })));
    }
    write_csv(&mut *out, &[report])?;
    Ok(())
}

/// Test rows plus a pipeline to run them through: the given dataset over
/// the configured corpus, or the synthetic test split over the synthetic
/// train split.
fn workload(g: &GlobalArgs, dataset: Option<&Path>, synthetic: &SyntheticArgs) -> CliResult<(ServiceConfig, Pipeline, Vec<LabeledExample>)> {
    let cfg = g.service_config(true)?;
    let pipeline = cfg.build_pipeline()?;
    let rows = match dataset {
        Some(path) => load_dataset(path)?,
        None => {
            let splits = gen_synthetic_dataset(synthetic.seed, synthetic.n_actions, synthetic.per_split)?;
            let (embedder, generator) = cfg.backends()?;
            let engine = Arc::new(RevisionEngine::new(embedder).with_clock(cfg.clock));
            fill_engine(&engine, &splits.train, EntrySource::Dataset)?;
            return Ok((cfg, Pipeline::new(engine, generator), splits.test));
        }
    };
    Ok((cfg, pipeline, rows))
}

fn sweep(g: &GlobalArgs, dataset: Option<&Path>, t_list: &[f64], synthetic: &SyntheticArgs, out: &mut dyn Write) -> CliResult {
    let (cfg, pipeline, rows) = workload(g, dataset, synthetic)?;
    let rows = sweep_threshold(&rows, t_list, &pipeline, &cfg.retrieval, &cfg.generation)?;
    write_csv(&mut *out, &rows)?;
    Ok(())
}

fn bucket_table(g: &GlobalArgs, dataset: Option<&Path>, bounds: &[f64], synthetic: &SyntheticArgs, out: &mut dyn Write) -> CliResult {
    let (cfg, pipeline, rows) = workload(g, dataset, synthetic)?;
    let records = run_queries(&pipeline, &rows, &cfg.retrieval, &cfg.generation)?;
    let table = bucket_by_similarity(&records, &rows, bounds)?;
    write_csv(&mut *out, &table)?;
    Ok(())
}

fn select(
    g: &GlobalArgs,
    train: Option<&Path>,
    val: Option<&Path>,
    kept_path: Option<&Path>,
    synthetic: &SyntheticArgs,
    out: &mut dyn Write,
) -> CliResult {
    let cfg = g.service_config(true)?;
    let (train, val) = match (train, val) {
        (Some(t), Some(v)) => (load_dataset(t)?, load_dataset(v)?),
        _ => {
            let splits = gen_synthetic_dataset(synthetic.seed, synthetic.n_actions, synthetic.per_split)?;
            (splits.train, splits.val)
        }
    };
    let (embedder, generator) = cfg.backends()?;
    let pipeline = Pipeline::new(Arc::new(RevisionEngine::new(embedder).with_clock(cfg.clock)), generator);
    let kept = select_feedback(&train, &val, &cfg.retrieval, &pipeline, &cfg.generation)?;
    if let Some(path) = kept_path {
        save_dataset(path, &kept)?;
    }
    write_out(
        out,
        format_args!(
            "kept {} of {} train rows ({:.1}%) at t={}",
            kept.len(),
            train.len(),
            100.0 * kept.len() as f64 / train.len().max(1) as f64,
            cfg.retrieval.t
        ),
    )
}

fn expand(g: &GlobalArgs, queries: &Path, pool: &Path, iterations: usize, out: &mut dyn Write) -> CliResult {
    let path = g.corpus_path()?;
    let cfg = g.service_config(true)?;
    let pipeline = cfg.build_pipeline()?;
    let queries = load_dataset(queries)?;
    let pool = load_dataset(pool)?;
    let (rounds, _) = iterative_expansion(&queries, &pool, &pipeline, &cfg.retrieval, &cfg.generation, iterations)?;
    save(&pipeline, path)?;
    write_csv(&mut *out, &rounds)?;
    Ok(())
}

fn gen_synthetic(out_dir: &Path, synthetic: &SyntheticArgs, out: &mut dyn Write) -> CliResult {
    let splits = gen_synthetic_dataset(synthetic.seed, synthetic.n_actions, synthetic.per_split)?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir.display().to_string(), e))?;
    for (name, rows) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        let path = out_dir.join(format!("{name}.jsonl"));
        save_dataset(&path, rows)?;
        write_out(out, format_args!("{}: {} rows", path.display(), rows.len()))?;
    }
    Ok(())
}
