//! Test-only oracles and a stub HTTP server.
//!
//! The oracles re-derive results from first principles (explicit loops over
//! raw vectors, template lookups) without going through the engine,
//! pipeline or simulation code they check.

#![allow(dead_code)]

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use rit_core::generate::BASELINE_ANSWERS;
use rit_core::simulate::LabeledExample;
use rit_core::text::seeded_hash;
use rit_core::{hash_embed, Polarity};

/// Dot product summed in index order, clamped like cosine.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s.clamp(-1.0, 1.0)
}

/// Brute-force top-c filter: (id, similarity) pairs.
pub fn oracle_retrieve(entries: &[(String, Vec<f64>)], query: &[f64], t: f64, c: usize) -> Vec<(String, f64)> {
    let mut kept: Vec<(String, f64)> = Vec::new();
    for (id, v) in entries {
        let s = dot(v, query);
        if s >= t {
            kept.push((id.clone(), s));
        }
    }
    // selection sort: highest similarity first, smaller id on ties
    let mut out = Vec::new();
    while !kept.is_empty() && out.len() < c {
        let mut best = 0;
        for i in 1..kept.len() {
            let (ref bid, bs) = kept[best];
            let (ref id, s) = kept[i];
            if s > bs || (s == bs && id < bid) {
                best = i;
            }
        }
        out.push(kept.remove(best));
    }
    out
}

/// Polarity of each canned answer the echo generator can produce without
/// context.
pub fn baseline_polarity(query: &str, seed: u64) -> Polarity {
    let answer = BASELINE_ANSWERS[(seeded_hash(query.trim(), seed) % 3) as usize];
    match answer {
        "Yes, it is good." => Polarity::Positive,
        "No, it is wrong." => Polarity::Negative,
        "It's okay." => Polarity::Neutral,
        other => panic!("unexpected canned answer {other}"),
    }
}

/// Outcome of one query under the brute-force simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOutcome {
    pub contextualized: bool,
    pub top_similarity: Option<f64>,
    pub predicted: Polarity,
}

/// Corpus as plain rows; insertion index doubles as id order.
#[derive(Debug, Clone, Default)]
pub struct OracleCorpus {
    pub rows: Vec<(LabeledExample, Vec<f64>)>,
    pub dim: usize,
    pub seed: u64,
}

impl OracleCorpus {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            rows: Vec::new(),
            dim,
            seed,
        }
    }

    fn key(q: &str) -> String {
        q.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
    }

    /// Upsert by normalized query; returns true when a row was appended.
    pub fn add(&mut self, row: &LabeledExample) -> bool {
        let key = Self::key(&row.query);
        if let Some(existing) = self.rows.iter_mut().find(|(r, _)| Self::key(&r.query) == key) {
            existing.0.gold_answer = row.gold_answer.clone();
            existing.0.gold_polarity = row.gold_polarity;
            return false;
        }
        let v = hash_embed(&row.query, self.dim, self.seed).unwrap();
        self.rows.push((row.clone(), v.values().to_vec()));
        true
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        hash_embed(text, self.dim, self.seed).unwrap().values().to_vec()
    }

    /// Nearest row at or above `t` (first inserted wins ties).
    pub fn nearest(&self, query: &[f64], t: f64) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, (_, v)) in self.rows.iter().enumerate() {
            let s = dot(v, query);
            if s >= t && best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best
    }

    /// Echo-generator prediction with c = 1: the nearest row's gold label,
    /// otherwise the canned baseline answer's label.
    pub fn predict(&self, query: &str, t: f64, mock_seed: u64) -> OracleOutcome {
        match self.nearest(&self.vector(query), t) {
            Some((i, s)) => OracleOutcome {
                contextualized: true,
                top_similarity: Some(s),
                predicted: self.rows[i].0.gold_polarity,
            },
            None => OracleOutcome {
                contextualized: false,
                top_similarity: None,
                predicted: baseline_polarity(query, mock_seed),
            },
        }
    }

    pub fn accuracy(&self, test: &[LabeledExample], t: f64) -> f64 {
        let correct = test
            .iter()
            .filter(|r| self.predict(&r.query, t, 0).predicted == r.gold_polarity)
            .count();
        correct as f64 / test.len() as f64
    }

    pub fn uncertain(&self, test: &[LabeledExample], t: f64) -> usize {
        test.iter().filter(|r| !self.predict(&r.query, t, 0).contextualized).count()
    }
}

pub fn oracle_baseline_accuracy(test: &[LabeledExample]) -> f64 {
    let correct = test
        .iter()
        .filter(|r| baseline_polarity(&r.query, 0) == r.gold_polarity)
        .count();
    correct as f64 / test.len() as f64
}

/// Brute-force replay of uncertainty-driven expansion: each round, every
/// uncertain query pulls in its nearest pool row (>= t, first row on ties).
pub fn oracle_expand(corpus: &mut OracleCorpus, queries: &[LabeledExample], pool: &[LabeledExample], t: f64, rounds: usize) -> usize {
    let mut added = 0;
    for _ in 0..rounds {
        let uncertain: Vec<&LabeledExample> = queries
            .iter()
            .filter(|q| !corpus.predict(&q.query, t, 0).contextualized)
            .collect();
        let mut pool_corpus = OracleCorpus::new(corpus.dim, corpus.seed);
        pool_corpus.rows = pool
            .iter()
            .map(|r| (r.clone(), corpus.vector(&r.query)))
            .collect();
        let mut used = HashSet::new();
        for q in uncertain {
            if let Some((i, _)) = pool_corpus.nearest(&corpus.vector(&q.query), t) {
                if used.insert(i) && corpus.add(&pool[i]) {
                    added += 1;
                }
            }
        }
    }
    added
}

/// Brute-force replay of feedback selection with the echo generator, c = 1.
pub fn oracle_select(train: &[LabeledExample], val: &[LabeledExample], dim: usize, t: f64) -> Vec<LabeledExample> {
    let mut corpus = OracleCorpus::new(dim, 0);
    for r in train {
        corpus.add(r);
    }
    let mut kept_idx: Vec<usize> = Vec::new();
    for v in val {
        if let Some((i, _)) = corpus.nearest(&corpus.vector(&v.query), t) {
            if corpus.rows[i].0.gold_polarity == v.gold_polarity && !kept_idx.contains(&i) {
                kept_idx.push(i);
            }
        }
    }
    kept_idx.into_iter().map(|i| corpus.rows[i].0.clone()).collect()
}

/// A one-shot-per-connection HTTP server that records request bodies and
/// answers every request with the same status and JSON body.
pub struct StubServer {
    pub url: String,
    pub bodies: Arc<Mutex<Vec<String>>>,
}

impl StubServer {
    pub fn start(status: u16, response: &str) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/", listener.local_addr().unwrap());
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let recorded = Arc::clone(&bodies);
        let response = response.to_owned();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut content_length = 0usize;
                let mut chunked = false;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        content_length = v.trim().parse().unwrap_or(0);
                    }
                    if lower.starts_with("transfer-encoding:") && lower.contains("chunked") {
                        chunked = true;
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut body = Vec::new();
                if chunked {
                    loop {
                        let mut size_line = String::new();
                        reader.read_line(&mut size_line).unwrap();
                        let size = usize::from_str_radix(size_line.trim(), 16).unwrap_or(0);
                        let mut chunk = vec![0u8; size + 2];
                        reader.read_exact(&mut chunk).unwrap();
                        if size == 0 {
                            break;
                        }
                        body.extend_from_slice(&chunk[..size]);
                    }
                } else {
                    body.resize(content_length, 0);
                    reader.read_exact(&mut body).unwrap();
                }
                recorded.lock().unwrap().push(String::from_utf8_lossy(&body).into_owned());
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    response.len(),
                    response
                );
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        Self { url, bodies }
    }

    pub fn last_body(&self) -> serde_json::Value {
        let bodies = self.bodies.lock().unwrap();
        serde_json::from_str(bodies.last().expect("no request recorded")).unwrap()
    }
}

/// A URL nothing listens on.
pub fn dead_url() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    format!("http://{addr}/")
}
