//! Relevance judgment by answer containment and Recall@K computation.
//!
//! A passage is relevant to a question iff the tokenized answer occurs as a
//! contiguous subsequence of the passage's tokenized title ++ body, for any
//! answer alias. Matching over normalized tokens keeps the judgment
//! case- and punctuation-insensitive.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Corpus, Passage, QaPair, Token};
use crate::error::{Error, Result};
use crate::index::{Candidate, CandidateSet};

/// Default evaluation cutoffs.
pub const DEFAULT_KS: [usize; 4] = [1, 5, 20, 100];

/// One line of a retrieval run file: the question id and its ranked
/// candidates, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub qid: u32,
    pub candidates: Vec<Candidate>,
}

fn contains_subsequence(haystack: &[Token], needle: &[Token]) -> bool {
    if needle.is_empty() || needle.len() > haystack.len() {
        return false;
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// True iff any answer alias tokenizes to a non-empty contiguous subsequence
/// of the passage's title ++ body tokens.
pub fn is_relevant(p: &Passage, answers: &[String]) -> bool {
    let text = p.text_tokens();
    answers.iter().any(|a| {
        let needle = tokenize(a);
        contains_subsequence(&text, &needle)
    })
}

/// Recall@K over a set of questions, plus the per-question rank of the first
/// relevant candidate (1-based; `None` = miss).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub dataset: String,
    pub n: usize,
    pub recall: BTreeMap<usize, f64>,
    pub hit_ranks: Vec<Option<usize>>,
}

/// Compute R@K for each cutoff: the fraction of questions with at least one
/// relevant passage among their top-K candidates. Questions with fewer than K
/// candidates (or none at all) simply count as misses beyond their ranking.
pub fn recall_at_k(
    pairs: &[QaPair],
    runs: &[CandidateSet],
    corpus: &Corpus,
    ks: &[usize],
    dataset: &str,
) -> Result<EvalResult> {
    if pairs.is_empty() {
        return Err(Error::EmptyEval);
    }
    if pairs.len() != runs.len() {
        return Err(Error::InvalidArg(format!(
            "{} questions but {} candidate sets",
            pairs.len(),
            runs.len()
        )));
    }
    if ks.is_empty() {
        return Err(Error::InvalidArg("at least one K required".into()));
    }
    let mut hit_ranks = Vec::with_capacity(pairs.len());
    for (pair, run) in pairs.iter().zip(runs) {
        let rank = run
            .entries()
            .iter()
            .position(|c| is_relevant(corpus.passage(c.pid), &pair.answers))
            .map(|i| i + 1);
        hit_ranks.push(rank);
    }
    let n = pairs.len();
    let mut recall = BTreeMap::new();
    for &k in ks {
        if k == 0 {
            return Err(Error::InvalidArg("K must be at least 1".into()));
        }
        let hits = hit_ranks.iter().filter(|r| matches!(r, Some(r) if *r <= k)).count();
        recall.insert(k, hits as f64 / n as f64);
    }
    Ok(EvalResult {
        dataset: dataset.to_string(),
        n,
        recall,
        hit_ranks,
    })
}

impl EvalResult {
    /// JSON form: {"dataset": str, "n": int, "recall": {"1": f, "5": f, ...}}.
    pub fn to_json(&self) -> serde_json::Value {
        let recall: serde_json::Map<String, serde_json::Value> = self
            .recall
            .iter()
            .map(|(k, v)| (k.to_string(), serde_json::json!(v)))
            .collect();
        serde_json::json!({
            "dataset": self.dataset,
            "n": self.n,
            "recall": recall,
        })
    }

    /// Aligned plain-text table, one row per dataset.
    pub fn table(&self) -> String {
        let mut header = format!("{:<24} {:>6}", "dataset", "n");
        let mut row = format!("{:<24} {:>6}", self.dataset, self.n);
        for (k, v) in &self.recall {
            header.push_str(&format!(" {:>8}", format!("R@{k}")));
            row.push_str(&format!(" {:>8.4}", v));
        }
        format!("{header}\n{row}\n")
    }
}
