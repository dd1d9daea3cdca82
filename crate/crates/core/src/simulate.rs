//! Feedback simulation at desk scale.
//!
//! Dataset splits stand in for users: the validation split decides which
//! training rows are worth keeping, a held-out pool answers the queries the
//! model was uncertain about, and the test split measures the result. A
//! synthetic moral-question generator provides data with known labels.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::HashEmbedder;
use crate::engine::{EntrySource, RetrievalConfig, RevisionEngine, RevisionEntry};
use crate::error::{Error, Result};
use crate::generate::GenerationConfig;
use crate::pipeline::{InteractionRecord, OutcomeCase, Pipeline, Polarity};

/// One dataset row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub query: String,
    #[serde(rename = "answer")]
    pub gold_answer: String,
    #[serde(rename = "polarity")]
    pub gold_polarity: Polarity,
}

impl LabeledExample {
    pub fn new(query: impl Into<String>, gold_answer: impl Into<String>, gold_polarity: Polarity) -> Self {
        Self {
            query: query.into(),
            gold_answer: gold_answer.into(),
            gold_polarity,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub seed: u64,
    /// Rounds of uncertainty-driven expansion.
    pub iterations: usize,
    /// Ascending thresholds for sweeps.
    pub thresholds: Vec<f64>,
    /// Ascending minimum similarities for bucket analysis.
    pub buckets: Vec<f64>,
    pub n_actions: usize,
    pub paraphrases_per_split: usize,
    /// Retrieval settings; t is calibrated for the hash embedder.
    pub retrieval: RetrievalConfig,
    pub embed_dim: usize,
}

impl SimulationConfig {
    /// Threshold that plays the role of 0.875 in the hash-embedding space.
    pub const HASH_EMBEDDER_T: f64 = 0.5;
    /// Stricter threshold for expansion runs, so the kept corpus leaves
    /// some queries without context.
    pub const HASH_EXPANSION_T: f64 = 0.65;
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 2,
            thresholds: vec![0.2, 0.5, 0.8],
            buckets: vec![0.8, 0.85, 0.9, 0.95],
            n_actions: 30,
            paraphrases_per_split: 3,
            retrieval: RetrievalConfig::with_threshold(Self::HASH_EMBEDDER_T),
            embed_dim: HashEmbedder::DEFAULT_DIM,
        }
    }
}

const PREFIXES: [&str; 3] = ["Should I", "Is it okay to", "Can I"];
const SUFFIXES: [&str; 3] = ["", " today", " sometimes"];

/// Built-in actions, interleaved +1, -1, 0 so any prefix whose length is a
/// multiple of three is class-balanced. No token appears in two actions or
/// in the fixed prefixes and suffixes.
const ACTIONS: &[(&str, i8)] = &[
    ("help elderly neighbors carry groceries", 1),
    ("steal money from coworker desks", -1),
    ("wear striped socks with sandals", 0),
    ("donate blood during weekend drives", 1),
    ("cheat on chemistry exams secretly", -1),
    ("eat cold cereal as dinner", 0),
    ("thank bus drivers every single ride", 1),
    ("lie under oath in court", -1),
    ("dye my hair bright purple", 0),
    ("volunteer at animal shelters regularly", 1),
    ("kick stray dogs down alleys", -1),
    ("sleep until noon most weekends", 0),
    ("visit grandma while she recovers", 1),
    ("litter plastic bags along beaches", -1),
    ("paint bedroom walls vivid orange", 0),
    ("tutor struggling pupils without payment", 1),
    ("bully younger kids over chat", -1),
    ("blast loud jazz records indoors", 0),
    ("plant oak saplings around parks", 1),
    ("forge signatures upon bank checks", -1),
    ("collect vintage postcards by mail", 0),
    ("return lost wallets containing cash", 1),
    ("vandalize public statues downtown overnight", -1),
    ("watch cartoons like an adult", 0),
    ("comfort crying children near playgrounds", 1),
    ("spread nasty rumors about classmates", -1),
    ("drink espresso late into night", 0),
    ("hold doors open for strangers", 1),
    ("poison wild garden birds deliberately", -1),
    ("rearrange living room furniture monthly", 0),
    ("recycle empty glass bottles responsibly", 1),
    ("dodge paying restaurant bills repeatedly", -1),
    ("take long bubble baths nightly", 0),
    ("apologize sincerely after hurting someone", 1),
    ("insult waiters rudely through reviews", -1),
    ("knit woolly scarves riding trains", 0),
];

/// Number of built-in actions available to [`gen_synthetic_dataset`].
pub fn action_count() -> usize {
    ACTIONS.len()
}

/// Canonical answer for a polarity class.
pub fn gold_answer_for(polarity: Polarity) -> &'static str {
    match polarity {
        Polarity::Positive => "Yes, it is good.",
        Polarity::Negative => "No, it is wrong.",
        Polarity::Neutral => "It's okay.",
    }
}

/// All nine phrasings of an action.
pub fn paraphrases(action: &str) -> Vec<String> {
    PREFIXES
        .iter()
        .flat_map(|p| SUFFIXES.iter().map(move |s| format!("{p} {action}{s}?")))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticSplits {
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

/// Builds train/val/test splits from the first `n_actions` built-in
/// actions. Each action's nine phrasings are shuffled with `seed` and dealt
/// out `per_split` at a time, so no phrasing lands in two splits.
pub fn gen_synthetic_dataset(seed: u64, n_actions: usize, per_split: usize) -> Result<SyntheticSplits> {
    if n_actions == 0 || n_actions > ACTIONS.len() {
        return Err(Error::InvalidConfig(format!(
            "n_actions must be in 1..={}, got {n_actions}",
            ACTIONS.len()
        )));
    }
    let per_action = PREFIXES.len() * SUFFIXES.len();
    if per_split == 0 || per_split * 3 > per_action {
        return Err(Error::InvalidConfig(format!(
            "paraphrases_per_split must be in 1..={}, got {per_split}",
            per_action / 3
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = SyntheticSplits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for &(action, value) in &ACTIONS[..n_actions] {
        let polarity = Polarity::try_from(value)?;
        let mut phrasings = paraphrases(action);
        phrasings.shuffle(&mut rng);
        let mut chunks = phrasings.chunks(per_split);
        for split in [&mut splits.train, &mut splits.val, &mut splits.test] {
            for q in chunks.next().expect("nine phrasings cover three splits") {
                split.push(LabeledExample::new(q.clone(), gold_answer_for(polarity), polarity));
            }
        }
    }
    Ok(splits)
}

pub fn parse_dataset(raw: &str) -> Result<Vec<LabeledExample>> {
    let mut rows = Vec::new();
    for (idx, line) in raw.split('\n').enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: LabeledExample =
            serde_json::from_str(line).map_err(|e| Error::parse(idx + 1, e.to_string()))?;
        if row.query.trim().is_empty() || row.gold_answer.trim().is_empty() {
            return Err(Error::parse(idx + 1, "empty query or answer"));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<LabeledExample>> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
        _ => Error::io(path, e),
    })?;
    parse_dataset(&raw)
}

pub fn save_dataset(path: impl AsRef<Path>, rows: &[LabeledExample]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).map_err(|e| Error::InvalidInput(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Adds every row to the engine; returns the entry id each row ended up in.
pub fn fill_engine(engine: &RevisionEngine, rows: &[LabeledExample], source: EntrySource) -> Result<Vec<String>> {
    rows.iter()
        .map(|row| {
            engine
                .add_entry(&row.query, &row.gold_answer, row.gold_polarity, source)
                .map(|u| u.entry.id)
        })
        .collect()
}

pub fn run_queries(
    pipeline: &Pipeline,
    rows: &[LabeledExample],
    retrieval: &RetrievalConfig,
    gen_cfg: &GenerationConfig,
) -> Result<Vec<InteractionRecord>> {
    rows.iter()
        .map(|row| pipeline.answer(&row.query, retrieval, gen_cfg))
        .collect()
}

/// Fraction of records whose predicted polarity matches the gold label;
/// `None` for an empty selection.
pub fn accuracy_of<'a>(pairs: impl IntoIterator<Item = (&'a InteractionRecord, &'a LabeledExample)>) -> Option<f64> {
    let (mut n, mut correct) = (0usize, 0usize);
    for (rec, gold) in pairs {
        n += 1;
        correct += usize::from(rec.predicted_polarity == gold.gold_polarity);
    }
    (n > 0).then(|| correct as f64 / n as f64)
}

/// Keeps the training rows that lead validation queries to the right
/// polarity.
///
/// A fresh engine holding all of `train` answers each validation query; when
/// some context was retrieved and the predicted polarity matches the gold
/// label, every retrieved entry is kept. Kept rows come back in the order
/// they were first marked.
pub fn select_feedback(
    train: &[LabeledExample],
    val: &[LabeledExample],
    retrieval: &RetrievalConfig,
    pipeline: &Pipeline,
    gen_cfg: &GenerationConfig,
) -> Result<Vec<LabeledExample>> {
    let base = pipeline.engine();
    let engine = Arc::new(RevisionEngine::new(Arc::clone(base.embedder())).with_clock(base.clock()));
    let ids = fill_engine(&engine, train, EntrySource::Dataset)?;
    let row_of: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let scratch = pipeline.with_engine(engine);

    let mut seen = HashSet::new();
    let mut kept = Vec::new();
    for example in val {
        let rec = scratch.answer(&example.query, retrieval, gen_cfg)?;
        if rec.hits.is_empty() || rec.predicted_polarity != example.gold_polarity {
            continue;
        }
        for hit in &rec.hits {
            let row = row_of[hit.entry_id.as_str()];
            if seen.insert(row) {
                kept.push(train[row].clone());
            }
        }
    }
    Ok(kept)
}

/// For each uncertain query, adds the most similar pool row (similarity at
/// least `retrieval.t`, earliest row on ties) to the engine. Returns the
/// entries that were newly created; a pool row is added at most once.
pub fn expand_uncertain(
    queries: &[String],
    pool: &[LabeledExample],
    engine: &RevisionEngine,
    retrieval: &RetrievalConfig,
) -> Result<Vec<RevisionEntry>> {
    if queries.is_empty() || pool.is_empty() {
        return Ok(Vec::new());
    }
    let embedder = engine.embedder();
    let pool_texts: Vec<&str> = pool.iter().map(|r| r.query.as_str()).collect();
    let pool_vecs = embedder.embed_batch(&pool_texts)?;

    let mut used = HashSet::new();
    let mut added = Vec::new();
    for query in queries {
        let qv = embedder.embed(query)?;
        let mut best: Option<(f64, usize)> = None;
        for (idx, pv) in pool_vecs.iter().enumerate() {
            let sim = pv.unit_similarity(&qv)?;
            if sim >= retrieval.t && best.is_none_or(|(b, _)| sim > b) {
                best = Some((sim, idx));
            }
        }
        let Some((_, idx)) = best else { continue };
        if !used.insert(idx) {
            continue;
        }
        let row = &pool[idx];
        let up = engine.add_entry(&row.query, &row.gold_answer, row.gold_polarity, EntrySource::Simulation)?;
        if up.created {
            added.push(up.entry);
        }
    }
    Ok(added)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpansionRound {
    pub iteration: usize,
    pub uncertain_before: usize,
    pub added: usize,
}

/// Repeats answer-then-expand for `iterations` rounds over `queries`.
pub fn iterative_expansion(
    queries: &[LabeledExample],
    pool: &[LabeledExample],
    pipeline: &Pipeline,
    retrieval: &RetrievalConfig,
    gen_cfg: &GenerationConfig,
    iterations: usize,
) -> Result<(Vec<ExpansionRound>, Vec<RevisionEntry>)> {
    let mut rounds = Vec::new();
    let mut all_added = Vec::new();
    for iteration in 1..=iterations {
        let records = run_queries(pipeline, queries, retrieval, gen_cfg)?;
        let uncertain: Vec<String> = records
            .into_iter()
            .filter(|r| r.outcome == OutcomeCase::UncertainNoContext)
            .map(|r| r.query)
            .collect();
        let added = expand_uncertain(&uncertain, pool, pipeline.engine(), retrieval)?;
        rounds.push(ExpansionRound {
            iteration,
            uncertain_before: uncertain.len(),
            added: added.len(),
        });
        all_added.extend(added);
    }
    Ok((rounds, all_added))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub t: f64,
    pub n_total: usize,
    pub n_contextualized: usize,
    pub accuracy_overall: f64,
    pub accuracy_contextualized: Option<f64>,
    pub accuracy_noncontextualized: Option<f64>,
}

/// Evaluates `test` once per threshold, splitting accuracy by whether a
/// context was used.
pub fn sweep_threshold(
    test: &[LabeledExample],
    t_values: &[f64],
    pipeline: &Pipeline,
    base: &RetrievalConfig,
    gen_cfg: &GenerationConfig,
) -> Result<Vec<SweepRow>> {
    if test.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    if t_values.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig("thresholds must be ascending".into()));
    }
    t_values
        .iter()
        .map(|&t| {
            let cfg = RetrievalConfig { t, ..*base };
            let records = run_queries(pipeline, test, &cfg, gen_cfg)?;
            let pairs: Vec<_> = records.iter().zip(test).collect();
            let (ctx, plain): (Vec<_>, Vec<_>) = pairs.iter().copied().partition(|(r, _)| r.is_contextualized());
            Ok(SweepRow {
                t,
                n_total: test.len(),
                n_contextualized: ctx.len(),
                accuracy_overall: accuracy_of(pairs.iter().copied()).unwrap_or(0.0),
                accuracy_contextualized: accuracy_of(ctx),
                accuracy_noncontextualized: accuracy_of(plain),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub min_similarity: f64,
    pub n: usize,
    pub accuracy: Option<f64>,
}

/// Cumulative buckets: bucket `b` holds contextualized records whose top
/// hit similarity is at least `b`.
pub fn bucket_by_similarity(
    records: &[InteractionRecord],
    golds: &[LabeledExample],
    buckets: &[f64],
) -> Result<Vec<BucketRow>> {
    if records.len() != golds.len() {
        return Err(Error::InvalidInput(format!(
            "{} records vs {} gold rows",
            records.len(),
            golds.len()
        )));
    }
    if buckets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig("buckets must be ascending".into()));
    }
    Ok(buckets
        .iter()
        .map(|&b| {
            let members: Vec<_> = records
                .iter()
                .zip(golds)
                .filter(|(r, _)| r.top_similarity().is_some_and(|s| s >= b))
                .collect();
            BucketRow {
                min_similarity: b,
                n: members.len(),
                accuracy: accuracy_of(members),
            }
        })
        .collect())
}

/// Writes rows as CSV with a header row taken from the field names.
pub fn write_csv<W: std::io::Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
    }
    writer
        .flush()
        .map_err(|e| Error::InvalidInput(e.to_string()))
}
