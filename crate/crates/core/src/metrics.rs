//! NLG and polarity metrics.
//!
//! All n-gram metrics share the tokenizer in [`crate::text`]. Corpus scores
//! are arithmetic means of sentence scores.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::embed::{cosine_similarity, Embedder};
use crate::error::{Error, Result};
use crate::pipeline::{InteractionRecord, Polarity};
use crate::simulate::LabeledExample;
use crate::text::tokenize;

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;

/// Search budget for the chunk-minimizing METEOR alignment. Past it the best
/// alignment found so far (at worst the greedy one) is used.
const METEOR_SEARCH_BUDGET: usize = 200_000;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU with uniform weights over orders 1..=n.
///
/// Orders >= 2 with no clipped match are smoothed to 1/(total+1); order 1 is
/// never smoothed. Empty candidate or reference scores 0.
///
/// # Panics
/// If `n == 0`.
pub fn bleu_n(candidate: &str, reference: &str, n: usize) -> f64 {
    assert!(n >= 1, "BLEU order must be at least 1");
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let cand_counts = ngram_counts(&cand, order);
        let ref_counts = ngram_counts(&refr, order);
        let total = cand.len().saturating_sub(order - 1);
        let clipped: usize = cand_counts
            .iter()
            .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
            .sum();
        let precision = if order >= 2 && clipped == 0 {
            1.0 / (total as f64 + 1.0)
        } else {
            clipped as f64 / total as f64
        };
        if precision == 0.0 {
            return 0.0;
        }
        log_sum += precision.ln();
    }
    let (c, r) = (cand.len() as f64, refr.len() as f64);
    let brevity = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    brevity * (log_sum / n as f64).exp()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&cand, &refr);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / cand.len() as f64;
    let r = lcs as f64 / refr.len() as f64;
    2.0 * p * r / (p + r)
}

/// Exact-match unigram alignment with the fewest chunks among all
/// maximum-cardinality alignments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeteorAlignment {
    pub matches: usize,
    pub chunks: usize,
}

struct AlignSearch<'a> {
    cand: &'a [String],
    /// Reference positions per token.
    positions: HashMap<&'a str, Vec<usize>>,
    /// Matches each token type must receive.
    quota: HashMap<&'a str, usize>,
    /// Candidate occurrences of each type at index >= i.
    remaining: Vec<HashMap<&'a str, usize>>,
    used: Vec<bool>,
    best: Option<usize>,
    nodes: usize,
}

impl AlignSearch<'_> {
    fn run(&mut self, i: usize, prev: Option<usize>, chunks: usize, filled: &mut HashMap<String, usize>) {
        self.nodes += 1;
        if self.best.is_some_and(|b| chunks >= b) {
            return;
        }
        if i == self.cand.len() {
            self.best = Some(chunks);
            return;
        }
        let tok = self.cand[i].as_str();
        let quota = self.quota.get(tok).copied().unwrap_or(0);
        let done = filled.get(tok).copied().unwrap_or(0);

        if done < quota {
            // Try continuing the current chunk first, then leftmost free
            // positions; the first complete path is the greedy alignment.
            let mut options: Vec<usize> = self.positions[tok]
                .iter()
                .copied()
                .filter(|&j| !self.used[j])
                .collect();
            if let Some(p) = prev {
                if let Some(k) = options.iter().position(|&j| j == p + 1) {
                    let next = options.remove(k);
                    options.insert(0, next);
                }
            }
            for j in options {
                if self.nodes > METEOR_SEARCH_BUDGET && self.best.is_some() {
                    return;
                }
                let extends = prev.is_some_and(|p| j == p + 1);
                self.used[j] = true;
                *filled.entry(tok.to_owned()).or_default() += 1;
                self.run(i + 1, Some(j), chunks + usize::from(!extends), filled);
                *filled.get_mut(tok).expect("just inserted") -= 1;
                self.used[j] = false;
            }
        }
        // Leave this token unmatched only if later occurrences can still
        // fill the quota.
        let later = self.remaining.get(i + 1).and_then(|m| m.get(tok)).copied().unwrap_or(0);
        if done + later >= quota && !(self.nodes > METEOR_SEARCH_BUDGET && self.best.is_some()) {
            self.run(i + 1, None, chunks, filled);
        }
    }
}

pub fn meteor_alignment(candidate: &[String], reference: &[String]) -> MeteorAlignment {
    let mut positions: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, tok) in reference.iter().enumerate() {
        positions.entry(tok.as_str()).or_default().push(j);
    }
    let mut cand_counts: HashMap<&str, usize> = HashMap::new();
    for tok in candidate {
        *cand_counts.entry(tok.as_str()).or_default() += 1;
    }
    let quota: HashMap<&str, usize> = cand_counts
        .iter()
        .filter_map(|(tok, &c)| positions.get(tok).map(|p| (*tok, c.min(p.len()))))
        .collect();
    let matches: usize = quota.values().sum();
    if matches == 0 {
        return MeteorAlignment { matches: 0, chunks: 0 };
    }
    let mut remaining = vec![HashMap::new(); candidate.len() + 1];
    for i in (0..candidate.len()).rev() {
        let mut m = remaining[i + 1].clone();
        *m.entry(candidate[i].as_str()).or_insert(0) += 1;
        remaining[i] = m;
    }
    let mut search = AlignSearch {
        cand: candidate,
        positions,
        quota,
        remaining,
        used: vec![false; reference.len()],
        best: None,
        nodes: 0,
    };
    search.run(0, None, 0, &mut HashMap::new());
    MeteorAlignment {
        matches,
        chunks: search.best.expect("a maximum matching always exists"),
    }
}

/// Exact-match METEOR: `Fmean * (1 - penalty)` with
/// `Fmean = P R / (alpha P + (1 - alpha) R)` and
/// `penalty = gamma (chunks / matches)^beta`.
pub fn meteor(candidate: &str, reference: &str) -> f64 {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let MeteorAlignment { matches, chunks } = meteor_alignment(&cand, &refr);
    if matches == 0 {
        return 0.0;
    }
    let m = matches as f64;
    let p = m / cand.len() as f64;
    let r = m / refr.len() as f64;
    let fmean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / m).powf(METEOR_BETA);
    fmean * (1.0 - penalty)
}

/// Cosine of the two sentence embeddings, negative values reported as 0.
/// Text with no tokens scores 0.
pub fn embed_similarity(candidate: &str, reference: &str, embedder: &dyn Embedder) -> Result<f64> {
    if tokenize(candidate).is_empty() || tokenize(reference).is_empty() {
        return Ok(0.0);
    }
    let vectors = embedder.embed_batch(&[candidate, reference])?;
    let sim = cosine_similarity(&vectors[0], &vectors[1])?;
    Ok(sim.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMode {
    /// Exact match over {-1, 0, +1}.
    #[default]
    ThreeClass,
    /// {-1} versus {0, +1}.
    TwoClass,
}

pub fn polarity_accuracy(predictions: &[Polarity], golds: &[Polarity], mode: AccuracyMode) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions vs {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidInput("no predictions to score".into()));
    }
    let collapse = |p: Polarity| match mode {
        AccuracyMode::ThreeClass => p.value(),
        AccuracyMode::TwoClass => i8::from(p == Polarity::Negative),
    };
    let correct = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| collapse(**p) == collapse(**g))
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Column order of a serialized [`EvalReport`].
pub const EVAL_REPORT_COLUMNS: [&str; 9] = [
    "feedback",
    "bleu1",
    "bleu3",
    "rougeL",
    "meteor",
    "acc",
    "embed_sim",
    "n_total",
    "n_contextualized",
];

/// Metric bundle for one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Corpus size the run used.
    #[serde(rename = "feedback")]
    pub feedback_count: usize,
    pub bleu1: f64,
    pub bleu3: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub meteor: f64,
    #[serde(rename = "acc")]
    pub polarity_acc: f64,
    pub embed_sim: f64,
    pub n_total: usize,
    pub n_contextualized: usize,
}

/// Side numbers that do not belong in the report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDiagnostics {
    /// Accuracy with neutral and positive merged.
    pub acc_two_class: f64,
    /// Rows with the right polarity but BLEU-1 below 0.5: usually a yes/no
    /// prefix that disagrees with the reference wording on negated questions.
    pub negative_question_rows: usize,
    pub low_confidence_rows: usize,
}

/// Per-row scores, exposed so callers can recompute aggregates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowScores {
    pub bleu1: f64,
    pub bleu3: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub embed_sim: f64,
}

pub fn score_row(candidate: &str, reference: &str, embedder: &dyn Embedder) -> Result<RowScores> {
    Ok(RowScores {
        bleu1: bleu_n(candidate, reference, 1),
        bleu3: bleu_n(candidate, reference, 3),
        rouge_l: rouge_l(candidate, reference),
        meteor: meteor(candidate, reference),
        embed_sim: embed_similarity(candidate, reference, embedder)?,
    })
}

pub fn evaluate(
    records: &[InteractionRecord],
    golds: &[LabeledExample],
    embedder: &dyn Embedder,
    feedback_count: usize,
) -> Result<EvalReport> {
    evaluate_detailed(records, golds, embedder, feedback_count).map(|(report, _)| report)
}

pub fn evaluate_detailed(
    records: &[InteractionRecord],
    golds: &[LabeledExample],
    embedder: &dyn Embedder,
    feedback_count: usize,
) -> Result<(EvalReport, EvalDiagnostics)> {
    if records.len() != golds.len() {
        return Err(Error::InvalidInput(format!(
            "{} records vs {} gold rows",
            records.len(),
            golds.len()
        )));
    }
    if records.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    let n = records.len() as f64;
    let mut sums = [0.0f64; 5];
    let mut negative_question_rows = 0;
    for (rec, gold) in records.iter().zip(golds) {
        let s = score_row(&rec.generated_answer, &gold.gold_answer, embedder)?;
        for (acc, v) in sums.iter_mut().zip([s.bleu1, s.bleu3, s.rouge_l, s.meteor, s.embed_sim]) {
            *acc += v;
        }
        if rec.predicted_polarity == gold.gold_polarity && s.bleu1 < 0.5 {
            negative_question_rows += 1;
        }
    }
    let preds: Vec<Polarity> = records.iter().map(|r| r.predicted_polarity).collect();
    let gold_pol: Vec<Polarity> = golds.iter().map(|g| g.gold_polarity).collect();
    let report = EvalReport {
        feedback_count,
        bleu1: sums[0] / n,
        bleu3: sums[1] / n,
        rouge_l: sums[2] / n,
        meteor: sums[3] / n,
        polarity_acc: polarity_accuracy(&preds, &gold_pol, AccuracyMode::ThreeClass)?,
        embed_sim: sums[4] / n,
        n_total: records.len(),
        n_contextualized: records.iter().filter(|r| r.is_contextualized()).count(),
    };
    let diagnostics = EvalDiagnostics {
        acc_two_class: polarity_accuracy(&preds, &gold_pol, AccuracyMode::TwoClass)?,
        negative_question_rows,
        low_confidence_rows: records.iter().filter(|r| r.low_confidence_polarity).count(),
    };
    Ok((report, diagnostics))
}
