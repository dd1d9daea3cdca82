//! The revision engine: an editable corpus of question/answer contexts with
//! exact cosine-threshold retrieval.
//!
//! Readers and writers share one `RwLock`. Embedding work happens before the
//! write lock is taken, so a retrieval sees either the old corpus or the new
//! one and never a half-applied mutation.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::embed::{Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::pipeline::Polarity;
use crate::prompt::PromptTemplate;
use crate::text::normalize_query;

/// Where a corpus entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntrySource {
    User,
    Dataset,
    Simulation,
}

impl EntrySource {
    pub fn as_str(self) -> &'static str {
        match self {
            EntrySource::User => "user",
            EntrySource::Dataset => "dataset",
            EntrySource::Simulation => "simulation",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RevisionEntry {
    pub id: String,
    /// The side matched against incoming queries.
    pub query_text: String,
    pub answer_text: String,
    pub polarity: Polarity,
    /// Embedding of `query_text`.
    pub embedding: EmbeddingVector,
    pub source: EntrySource,
    pub active: bool,
    pub created_at: i64,
}

/// Retrieval hyperparameters: similarity threshold, context count and
/// contextualization variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub t: f64,
    pub c: usize,
    pub template: PromptTemplate,
}

impl RetrievalConfig {
    pub const DEFAULT_T: f64 = 0.875;
    pub const DEFAULT_C: usize = 1;

    pub fn with_threshold(t: f64) -> Self {
        Self {
            t,
            ..Self::default()
        }
    }

    /// Strict check used at user-facing boundaries: t in [-1, 1], c >= 1.
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.t) {
            return Err(Error::InvalidConfig(format!(
                "threshold t={} outside [-1, 1]",
                self.t
            )));
        }
        self.check_retrievable()
    }

    /// Thresholds above 1 are allowed here; they switch retrieval off, which
    /// threshold sweeps rely on.
    fn check_retrievable(&self) -> Result<()> {
        if self.t.is_nan() {
            return Err(Error::InvalidConfig("threshold t is NaN".into()));
        }
        if self.c < 1 {
            return Err(Error::InvalidConfig("context count c must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            t: Self::DEFAULT_T,
            c: Self::DEFAULT_C,
            template: PromptTemplate::QaPair,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalHit {
    pub entry_id: String,
    pub similarity: f64,
    /// 1-based.
    pub rank: usize,
}

/// Result of [`RevisionEngine::add_entry`].
#[derive(Debug, Clone, PartialEq)]
pub struct Upsert {
    pub entry: RevisionEntry,
    /// `false` when an existing entry with the same normalized query was
    /// overwritten.
    pub created: bool,
}

/// Partial update for [`RevisionEngine::update_entry`].
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
pub struct EntryPatch {
    pub query_text: Option<String>,
    pub answer_text: Option<String>,
    pub polarity: Option<Polarity>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub count: usize,
    pub dim: Option<usize>,
    pub polarity_histogram: BTreeMap<i8, usize>,
    pub source_histogram: BTreeMap<String, usize>,
}

/// Timestamp source for new entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Clock {
    #[default]
    System,
    Fixed(i64),
}

impl Clock {
    pub fn now(self) -> i64 {
        match self {
            Clock::System => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs() as i64)
                .unwrap_or(0),
            Clock::Fixed(t) => t,
        }
    }
}

#[derive(Debug, Default)]
struct CorpusState {
    /// Insertion order; soft-deleted entries keep their slot until save.
    entries: Vec<RevisionEntry>,
    by_id: HashMap<String, usize>,
    /// Normalized query -> slot, active entries only.
    by_query: HashMap<String, usize>,
    active: usize,
    dim: Option<usize>,
    next_seq: u64,
}

impl CorpusState {
    fn from_entries(entries: Vec<RevisionEntry>) -> Result<Self> {
        let mut state = CorpusState::default();
        for (idx, entry) in entries.iter().enumerate() {
            if entry.query_text.trim().is_empty() || entry.answer_text.trim().is_empty() {
                return Err(Error::parse(idx + 1, "empty query or answer"));
            }
            if state.by_id.insert(entry.id.clone(), idx).is_some() {
                return Err(Error::parse(idx + 1, format!("duplicate id {:?}", entry.id)));
            }
            match state.dim {
                Some(d) if d != entry.embedding.dim() => {
                    return Err(Error::parse(
                        idx + 1,
                        format!("embedding dimension {} differs from {d}", entry.embedding.dim()),
                    ))
                }
                _ => state.dim = Some(entry.embedding.dim()),
            }
            if entry.active {
                let key = normalize_query(&entry.query_text);
                if state.by_query.insert(key, idx).is_some() {
                    return Err(Error::parse(
                        idx + 1,
                        format!("duplicate active query {:?}", entry.query_text),
                    ));
                }
                state.active += 1;
            }
            if let Some(seq) = entry.id.strip_prefix('e').and_then(|s| s.parse::<u64>().ok()) {
                state.next_seq = state.next_seq.max(seq);
            }
        }
        state.entries = entries;
        Ok(state)
    }

    fn fresh_id(&mut self) -> String {
        loop {
            self.next_seq += 1;
            let id = format!("e{:08}", self.next_seq);
            if !self.by_id.contains_key(&id) {
                return id;
            }
        }
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        match self.dim {
            Some(expected) if self.active > 0 && expected != dim => Err(Error::DimMismatch {
                expected,
                actual: dim,
            }),
            _ => Ok(()),
        }
    }

    fn active_entry(&self, id: &str) -> Option<(usize, &RevisionEntry)> {
        let idx = *self.by_id.get(id)?;
        let entry = &self.entries[idx];
        entry.active.then_some((idx, entry))
    }
}

/// Serialized form of one corpus line.
#[derive(Debug, Serialize, Deserialize)]
struct EntryRecord {
    id: String,
    query: String,
    answer: String,
    polarity: Polarity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f64>>,
    source: EntrySource,
    active: bool,
    created_at: i64,
}

pub struct RevisionEngine {
    embedder: Arc<dyn Embedder>,
    clock: Clock,
    state: RwLock<CorpusState>,
}

impl std::fmt::Debug for RevisionEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RevisionEngine")
            .field("count", &self.len())
            .field("clock", &self.clock)
            .finish()
    }
}

impl RevisionEngine {
    pub fn new(embedder: Arc<dyn Embedder>) -> Self {
        Self {
            embedder,
            clock: Clock::System,
            state: RwLock::new(CorpusState::default()),
        }
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    /// Builds an engine over prepared entries (embeddings included).
    pub fn from_entries(embedder: Arc<dyn Embedder>, entries: Vec<RevisionEntry>) -> Result<Self> {
        let engine = Self::new(embedder);
        engine.replace_entries(entries)?;
        Ok(engine)
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    fn read(&self) -> RwLockReadGuard<'_, CorpusState> {
        self.state.read().unwrap_or_else(|p| p.into_inner())
    }

    fn write(&self) -> RwLockWriteGuard<'_, CorpusState> {
        self.state.write().unwrap_or_else(|p| p.into_inner())
    }

    pub fn len(&self) -> usize {
        self.read().active
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stores a new context, or overwrites answer and polarity of the active
    /// entry whose normalized query matches.
    pub fn add_entry(
        &self,
        query_text: &str,
        answer_text: &str,
        polarity: Polarity,
        source: EntrySource,
    ) -> Result<Upsert> {
        if query_text.trim().is_empty() || answer_text.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        let embedding = self.embedder.embed(query_text)?;
        let key = normalize_query(query_text);

        let mut state = self.write();
        if let Some(&idx) = state.by_query.get(&key) {
            let entry = &mut state.entries[idx];
            entry.answer_text = answer_text.to_owned();
            entry.polarity = polarity;
            return Ok(Upsert {
                entry: entry.clone(),
                created: false,
            });
        }
        state.check_dim(embedding.dim())?;
        let entry = RevisionEntry {
            id: state.fresh_id(),
            query_text: query_text.to_owned(),
            answer_text: answer_text.to_owned(),
            polarity,
            embedding,
            source,
            active: true,
            created_at: self.clock.now(),
        };
        let idx = state.entries.len();
        state.dim = Some(entry.embedding.dim());
        state.by_id.insert(entry.id.clone(), idx);
        state.by_query.insert(key, idx);
        state.active += 1;
        state.entries.push(entry.clone());
        Ok(Upsert {
            entry,
            created: true,
        })
    }

    /// Soft-deletes an entry. Returns whether it was present.
    pub fn remove_entry(&self, id: &str) -> bool {
        let mut state = self.write();
        let Some((idx, entry)) = state.active_entry(id) else {
            return false;
        };
        let key = normalize_query(&entry.query_text);
        state.entries[idx].active = false;
        state.by_query.remove(&key);
        state.active -= 1;
        true
    }

    pub fn update_entry(&self, id: &str, patch: &EntryPatch) -> Result<RevisionEntry> {
        if let Some(q) = &patch.query_text {
            if q.trim().is_empty() {
                return Err(Error::EmptyText);
            }
        }
        if let Some(a) = &patch.answer_text {
            if a.trim().is_empty() {
                return Err(Error::EmptyText);
            }
        }
        let current = self
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("entry {id}")))?;
        let new_embedding = match &patch.query_text {
            Some(q) if *q != current.query_text => Some(self.embedder.embed(q)?),
            _ => None,
        };

        let mut state = self.write();
        let (idx, _) = state
            .active_entry(id)
            .ok_or_else(|| Error::NotFound(format!("entry {id}")))?;
        if let (Some(q), Some(emb)) = (&patch.query_text, new_embedding) {
            let old_key = normalize_query(&state.entries[idx].query_text);
            let new_key = normalize_query(q);
            if new_key != old_key {
                if state.by_query.contains_key(&new_key) {
                    return Err(Error::InvalidInput(format!(
                        "another entry already holds query {q:?}"
                    )));
                }
                state.by_query.remove(&old_key);
                state.by_query.insert(new_key, idx);
            }
            state.check_dim(emb.dim())?;
            let entry = &mut state.entries[idx];
            entry.query_text = q.clone();
            entry.embedding = emb;
        }
        let entry = &mut state.entries[idx];
        if let Some(a) = &patch.answer_text {
            entry.answer_text = a.clone();
        }
        if let Some(p) = patch.polarity {
            entry.polarity = p;
        }
        Ok(entry.clone())
    }

    pub fn get(&self, id: &str) -> Option<RevisionEntry> {
        self.read().active_entry(id).map(|(_, e)| e.clone())
    }

    /// Active entries in insertion order.
    pub fn entries(&self) -> Vec<RevisionEntry> {
        self.read()
            .entries
            .iter()
            .filter(|e| e.active)
            .cloned()
            .collect()
    }

    /// Page through active entries whose query contains `search`
    /// (case-insensitive). Returns the page and the total match count.
    pub fn list(&self, offset: usize, limit: usize, search: Option<&str>) -> (Vec<RevisionEntry>, usize) {
        let needle = search.map(str::to_lowercase);
        let state = self.read();
        let matching: Vec<&RevisionEntry> = state
            .entries
            .iter()
            .filter(|e| e.active)
            .filter(|e| match &needle {
                Some(n) => e.query_text.to_lowercase().contains(n.as_str()),
                None => true,
            })
            .collect();
        let total = matching.len();
        let page = matching
            .into_iter()
            .skip(offset)
            .take(limit)
            .cloned()
            .collect();
        (page, total)
    }

    /// Exact scan: keep entries with similarity >= t, order by similarity
    /// descending then id ascending, keep the first c.
    pub fn retrieve(&self, query: &EmbeddingVector, config: &RetrievalConfig) -> Result<Vec<RetrievalHit>> {
        Ok(self
            .retrieve_entries(query, config)?
            .into_iter()
            .map(|(hit, _)| hit)
            .collect())
    }

    /// Like [`retrieve`](Self::retrieve) but also returns a snapshot of each
    /// hit entry, taken under the same read lock.
    pub fn retrieve_entries(
        &self,
        query: &EmbeddingVector,
        config: &RetrievalConfig,
    ) -> Result<Vec<(RetrievalHit, RevisionEntry)>> {
        config.check_retrievable()?;
        let state = self.read();
        state.check_dim(query.dim())?;
        let mut scored = Vec::new();
        for (idx, entry) in state.entries.iter().enumerate() {
            if !entry.active {
                continue;
            }
            let sim = entry.embedding.unit_similarity(query)?;
            if sim >= config.t {
                scored.push((sim, idx));
            }
        }
        scored.sort_by(|(sa, ia), (sb, ib)| {
            sb.total_cmp(sa)
                .then_with(|| state.entries[*ia].id.cmp(&state.entries[*ib].id))
        });
        scored.truncate(config.c);
        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(rank, (similarity, idx))| {
                let entry = &state.entries[idx];
                (
                    RetrievalHit {
                        entry_id: entry.id.clone(),
                        similarity,
                        rank: rank + 1,
                    },
                    entry.clone(),
                )
            })
            .collect())
    }

    pub fn stats(&self) -> CorpusStats {
        let state = self.read();
        let mut polarity_histogram: BTreeMap<i8, usize> =
            Polarity::ALL.iter().map(|p| (p.value(), 0)).collect();
        let mut source_histogram = BTreeMap::new();
        for entry in state.entries.iter().filter(|e| e.active) {
            *polarity_histogram.entry(entry.polarity.value()).or_default() += 1;
            *source_histogram
                .entry(entry.source.as_str().to_owned())
                .or_default() += 1;
        }
        CorpusStats {
            count: state.active,
            dim: state.dim.filter(|_| state.active > 0).or(self.embedder.dim()),
            polarity_histogram,
            source_histogram,
        }
    }

    /// Swaps in a new set of entries wholesale. Nothing changes on error.
    pub fn replace_entries(&self, entries: Vec<RevisionEntry>) -> Result<usize> {
        if let (Some(expected), Some(first)) = (self.embedder.dim(), entries.first()) {
            if first.embedding.dim() != expected {
                return Err(Error::DimMismatch {
                    expected,
                    actual: first.embedding.dim(),
                });
            }
        }
        let fresh = CorpusState::from_entries(entries)?;
        let count = fresh.active;
        *self.write() = fresh;
        Ok(count)
    }

    /// Writes active entries as JSON lines. Soft-deleted entries are purged
    /// from memory as well, so the engine matches what a reload would give.
    pub fn save_corpus(&self, path: impl AsRef<Path>) -> Result<usize> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        let count = {
            let mut state = self.write();
            if state.active != state.entries.len() {
                let kept: Vec<RevisionEntry> = state.entries.iter().filter(|e| e.active).cloned().collect();
                *state = CorpusState::from_entries(kept)?;
            }
            let mut count = 0;
            for entry in state.entries.iter().filter(|e| e.active) {
                let record = EntryRecord {
                    id: entry.id.clone(),
                    query: entry.query_text.clone(),
                    answer: entry.answer_text.clone(),
                    polarity: entry.polarity,
                    embedding: Some(entry.embedding.values().to_vec()),
                    source: entry.source,
                    active: entry.active,
                    created_at: entry.created_at,
                };
                serde_json::to_writer(&mut buf, &record)
                    .map_err(|e| Error::InvalidInput(e.to_string()))?;
                buf.push(b'\n');
                count += 1;
            }
            count
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("jsonl.tmp");
        let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        file.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        file.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(count)
    }

    /// Replaces the corpus with the file's contents. All-or-nothing: any bad
    /// line leaves the current corpus untouched.
    pub fn load_corpus(&self, path: impl AsRef<Path>) -> Result<usize> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
            _ => Error::io(path, e),
        })?;
        let entries = self.parse_corpus(&raw)?;
        self.replace_entries(entries)
    }

    fn parse_corpus(&self, raw: &str) -> Result<Vec<RevisionEntry>> {
        let mut records = Vec::new();
        for (idx, line) in raw.split('\n').enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: EntryRecord =
                serde_json::from_str(line).map_err(|e| Error::parse(idx + 1, e.to_string()))?;
            if record.query.trim().is_empty() || record.answer.trim().is_empty() {
                return Err(Error::parse(idx + 1, "empty query or answer"));
            }
            records.push((idx + 1, record));
        }

        // Embed the rows that came without a vector in one batch.
        let missing: Vec<&str> = records
            .iter()
            .filter(|(_, r)| r.embedding.is_none())
            .map(|(_, r)| r.query.as_str())
            .collect();
        let mut computed = if missing.is_empty() {
            Vec::new()
        } else {
            self.embedder.embed_batch(&missing)?
        }
        .into_iter();

        records
            .into_iter()
            .map(|(line, r)| {
                let embedding = match r.embedding {
                    Some(values) => EmbeddingVector::from_raw(values)
                        .map_err(|e| Error::parse(line, e.to_string()))?,
                    None => computed
                        .next()
                        .ok_or_else(|| Error::BackendProtocol("embedder dropped rows".into()))?,
                };
                Ok(RevisionEntry {
                    id: r.id,
                    query_text: r.query,
                    answer_text: r.answer,
                    polarity: r.polarity,
                    embedding,
                    source: r.source,
                    active: r.active,
                    created_at: r.created_at,
                })
            })
            .collect()
    }

    /// Ids of active entries whose stored embedding no longer matches what
    /// the configured embedder produces for their query.
    pub fn stale_embeddings(&self) -> Result<Vec<String>> {
        let entries = self.entries();
        let mut stale = Vec::new();
        for entry in entries {
            if self.embedder.embed(&entry.query_text)? != entry.embedding {
                stale.push(entry.id);
            }
        }
        Ok(stale)
    }
}
