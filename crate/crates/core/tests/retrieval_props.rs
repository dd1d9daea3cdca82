mod common;

use std::sync::Arc;

use proptest::prelude::*;

use rit_core::{
    Embedder, EmbeddingVector, EntrySource, Polarity, RetrievalConfig, RevisionEngine, RevisionEntry,
};

struct FixedDim(usize);

impl Embedder for FixedDim {
    fn embed_batch(&self, _: &[&str]) -> rit_core::Result<Vec<EmbeddingVector>> {
        unreachable!("entries carry their own embeddings")
    }

    fn dim(&self) -> Option<usize> {
        Some(self.0)
    }
}

fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(-1.0), Just(0.0), Just(1.0), -1.0..1.0f64], dim)
        .prop_filter("nonzero", |v| v.iter().any(|x| *x != 0.0))
}

fn corpus_and_query() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..8).prop_flat_map(|dim| {
        (prop::collection::vec(nonzero_vec(dim), 0..40), nonzero_vec(dim))
    })
}

fn engine_of(vectors: &[Vec<f64>]) -> RevisionEngine {
    let dim = vectors.first().map_or(1, Vec::len);
    let entries = vectors
        .iter()
        .enumerate()
        .map(|(i, v)| RevisionEntry {
            id: format!("e{i:08}"),
            query_text: format!("q{i}"),
            answer_text: "a".into(),
            polarity: Polarity::Neutral,
            embedding: EmbeddingVector::from_raw(v.clone()).unwrap(),
            source: EntrySource::Dataset,
            active: true,
            created_at: 0,
        })
        .collect();
    RevisionEngine::from_entries(Arc::new(FixedDim(dim)), entries).unwrap()
}

fn ids(engine: &RevisionEngine, q: &EmbeddingVector, t: f64, c: usize) -> Vec<String> {
    let cfg = RetrievalConfig {
        t,
        c,
        ..RetrievalConfig::default()
    };
    engine.retrieve(q, &cfg).unwrap().into_iter().map(|h| h.entry_id).collect()
}

proptest! {
    #[test]
    fn raising_t_shrinks_the_hit_set((vectors, query) in corpus_and_query(), t1 in -1.0..1.0f64, dt in 0.0..1.0f64) {
        let engine = engine_of(&vectors);
        let q = EmbeddingVector::from_raw(query).unwrap();
        let n = vectors.len().max(1);
        let loose = ids(&engine, &q, t1, n);
        let strict = ids(&engine, &q, t1 + dt, n);
        prop_assert!(strict.iter().all(|id| loose.contains(id)));
    }

    #[test]
    fn hits_at_c_prefix_hits_at_c_plus_one((vectors, query) in corpus_and_query(), t in -1.0..1.0f64, c in 1usize..12) {
        let engine = engine_of(&vectors);
        let q = EmbeddingVector::from_raw(query).unwrap();
        let shorter = ids(&engine, &q, t, c);
        let longer = ids(&engine, &q, t, c + 1);
        prop_assert!(longer.starts_with(&shorter));
    }

    #[test]
    fn hits_respect_threshold_and_rank((vectors, query) in corpus_and_query(), t in -1.0..1.0f64, c in 1usize..12) {
        let engine = engine_of(&vectors);
        let q = EmbeddingVector::from_raw(query).unwrap();
        let cfg = RetrievalConfig { t, c, ..RetrievalConfig::default() };
        let hits = engine.retrieve(&q, &cfg).unwrap();
        prop_assert!(hits.len() <= c);
        for (i, h) in hits.iter().enumerate() {
            prop_assert!(h.similarity >= t);
            prop_assert_eq!(h.rank, i + 1);
        }
    }

    #[test]
    fn retrieval_matches_brute_force((vectors, query) in corpus_and_query(), t in -1.0..1.0f64, c in 1usize..12) {
        let engine = engine_of(&vectors);
        let q = EmbeddingVector::from_raw(query).unwrap();
        let plain: Vec<(String, Vec<f64>)> = engine
            .entries()
            .into_iter()
            .map(|e| (e.id, e.embedding.values().to_vec()))
            .collect();
        let cfg = RetrievalConfig { t, c, ..RetrievalConfig::default() };
        let got: Vec<(String, f64)> = engine
            .retrieve(&q, &cfg)
            .unwrap()
            .into_iter()
            .map(|h| (h.entry_id, h.similarity))
            .collect();
        prop_assert_eq!(got, common::oracle_retrieve(&plain, q.values(), t, c));
    }
}

#[test]
fn soft_deleted_entries_are_not_retrieved() {
    let engine = engine_of(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
    let q = EmbeddingVector::from_raw(vec![1.0, 0.0]).unwrap();
    assert_eq!(ids(&engine, &q, 0.5, 5), ["e00000000", "e00000001"]);
    assert!(engine.remove_entry("e00000000"));
    assert_eq!(ids(&engine, &q, 0.5, 5), ["e00000001"]);
}

#[test]
fn threshold_is_inclusive() {
    let engine = engine_of(&[vec![1.0, 0.0]]);
    let q = EmbeddingVector::from_raw(vec![1.0, 0.0]).unwrap();
    assert_eq!(ids(&engine, &q, 1.0, 1), ["e00000000"]);
    assert!(ids(&engine, &q, 1.0 + 1e-12, 1).is_empty());
}
