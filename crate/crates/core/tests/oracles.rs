//! Dual-route oracle tests: every fast path (inverted index, top-K
//! selection, analytic gradients, recall bookkeeping) is checked against an
//! independent exhaustive implementation on seeded random instances.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retlab_core::corpus::{tokenize, Corpus, DocumentRecord, Question, Token};
use retlab_core::encoder::{DualEncoder, EncoderConfig, TokenMap};
use retlab_core::eval::{is_relevant, recall_at_k, DEFAULT_KS};
use retlab_core::gradcheck::{check_batch_gradients, FD_TOL};
use retlab_core::index::{build_dense_index, search_dense, Candidate, CandidateSet};
use retlab_core::sparse::{
    search_sparse, InvertedIndex, SparseScorer, Vocabulary, BM25_B, BM25_K1,
};
use retlab_core::training::{BatchData, Objective};

fn word(i: usize) -> String {
    format!("w{i}")
}

/// A random corpus of single-passage documents over a bounded vocabulary.
fn random_corpus(rng: &mut ChaCha8Rng, max_passages: usize, max_vocab: usize) -> Corpus {
    let n = rng.gen_range(2..=max_passages);
    let pool = rng.gen_range(5..=max_vocab);
    let docs: Vec<DocumentRecord> = (0..n)
        .map(|i| {
            let title_len = rng.gen_range(1..=3);
            let body_len = rng.gen_range(1..=30);
            let mut draw = |len: usize| {
                (0..len)
                    .map(|_| word(rng.gen_range(0..pool)))
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            DocumentRecord {
                id: format!("d{i}"),
                title: draw(title_len),
                text: draw(body_len),
            }
        })
        .collect();
    Corpus::from_documents(&docs, 100).unwrap()
}

fn random_query(rng: &mut ChaCha8Rng, max_vocab: usize) -> Vec<Token> {
    let len = rng.gen_range(1..=8);
    let text: Vec<String> = (0..len)
        .map(|_| {
            if rng.gen_bool(0.1) {
                // Sometimes a term no document contains.
                "zzabsent".to_string()
            } else {
                word(rng.gen_range(0..max_vocab))
            }
        })
        .collect();
    tokenize(&text.join(" "))
}

/// Exhaustive TF-IDF oracle: dense weight vectors over the whole
/// vocabulary, document frequencies recounted from scratch.
struct TfidfOracle {
    terms: Vec<String>,
    idf: Vec<f64>,
}

impl TfidfOracle {
    fn build(corpus: &Corpus) -> TfidfOracle {
        let terms: Vec<String> = corpus.terms().iter().map(|t| t.to_string()).collect();
        let n = corpus.len() as f64;
        let idf = terms
            .iter()
            .map(|t| {
                let df = corpus
                    .passages()
                    .iter()
                    .filter(|p| {
                        p.title
                            .iter()
                            .chain(p.body.iter())
                            .any(|tok| tok.as_str() == t.as_str())
                    })
                    .count() as f64;
                ((n + 1.0) / (df + 1.0)).ln() + 1.0
            })
            .collect();
        TfidfOracle { terms, idf }
    }

    /// Dense tf·idf vector, L2-normalized.
    fn vector(&self, tokens: &[Token]) -> Vec<f64> {
        let mut counts: HashMap<&str, f64> = HashMap::new();
        for t in tokens {
            *counts.entry(t.as_str()).or_insert(0.0) += 1.0;
        }
        let mut v: Vec<f64> = self
            .terms
            .iter()
            .zip(&self.idf)
            .map(|(term, idf)| counts.get(term.as_str()).copied().unwrap_or(0.0) * idf)
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        v
    }

    fn score(&self, q: &[Token], p_tokens: &[Token]) -> f64 {
        let qv = self.vector(q);
        let pv = self.vector(p_tokens);
        qv.iter().zip(&pv).map(|(a, b)| a * b).sum()
    }
}

/// Scalar BM25 oracle computed straight from the formula, with tf, df, and
/// lengths recounted from the corpus.
fn bm25_oracle(corpus: &Corpus, q: &[Token], pid: u32, k1: f64, b: f64) -> f64 {
    let n = corpus.len() as f64;
    let all_tokens = |pid: u32| -> Vec<&Token> {
        let p = corpus.passage(pid);
        p.title.iter().chain(p.body.iter()).collect()
    };
    let len_of = |pid: u32| all_tokens(pid).len() as f64;
    let avg = (0..corpus.len() as u32).map(len_of).sum::<f64>() / n;
    let mut acc = 0.0;
    for t in q {
        let df = (0..corpus.len() as u32)
            .filter(|&p| all_tokens(p).iter().any(|x| x.as_str() == t.as_str()))
            .count() as f64;
        if df == 0.0 {
            continue;
        }
        let tf = all_tokens(pid)
            .iter()
            .filter(|x| x.as_str() == t.as_str())
            .count() as f64;
        let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
        acc += idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * len_of(pid) / avg));
    }
    acc
}

/// Full-sort ranking oracle: score every passage, sort by (score desc,
/// pid asc), truncate.
fn ranking_oracle(scores: &[f64], k: usize) -> Vec<u32> {
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    order.sort_by(|&a, &b| {
        scores[b as usize]
            .total_cmp(&scores[a as usize])
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

#[test]
fn sparse_routes_match_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
    for round in 0..20 {
        let corpus = random_corpus(&mut rng, 100, 500);
        let index = InvertedIndex::build(&corpus).unwrap();
        let oracle = TfidfOracle::build(&corpus);
        let q = random_query(&mut rng, 500);
        let n = corpus.len();

        // TF-IDF: per-passage scores within 1e-9 of the dense oracle.
        let hits = search_sparse(&q, &index, n, SparseScorer::Tfidf).unwrap();
        let mut tfidf_scores = vec![0.0; n];
        for c in hits.entries() {
            tfidf_scores[c.pid as usize] = c.score;
        }
        for pid in 0..n as u32 {
            let p = corpus.passage(pid);
            let toks: Vec<Token> = p.title.iter().chain(p.body.iter()).cloned().collect();
            let want = oracle.score(&q, &toks);
            let got = tfidf_scores[pid as usize];
            assert!(
                (got - want).abs() <= 1e-9,
                "round {round} tfidf pid {pid}: index {got} vs oracle {want}"
            );
        }
        assert_eq!(
            hits.ids(),
            ranking_oracle(&tfidf_scores, n),
            "round {round}: tfidf ranking"
        );

        // BM25 with default parameters: same checks.
        let hits = search_sparse(&q, &index, n, SparseScorer::bm25_default()).unwrap();
        let mut bm25_scores = vec![0.0; n];
        for c in hits.entries() {
            bm25_scores[c.pid as usize] = c.score;
        }
        for pid in 0..n as u32 {
            let want = bm25_oracle(&corpus, &q, pid, BM25_K1, BM25_B);
            let got = bm25_scores[pid as usize];
            assert!(
                (got - want).abs() <= 1e-9,
                "round {round} bm25 pid {pid}: index {got} vs oracle {want}"
            );
        }
        assert_eq!(
            hits.ids(),
            ranking_oracle(&bm25_scores, n),
            "round {round}: bm25 ranking"
        );
    }
}

#[test]
fn dense_search_matches_full_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0002);
    for round in 0..50 {
        let corpus = random_corpus(&mut rng, 500.min(20 + round * 10), 200);
        let tmap = TokenMap::build(&Vocabulary::build(&corpus));
        let mut cfg = EncoderConfig::new(tmap.n_ids());
        cfg.dim = rng.gen_range(2..=64);
        cfg.max_len = 64;
        let de = DualEncoder::init(cfg, round as u64).unwrap();
        let index = build_dense_index(&corpus, &de).unwrap();

        let qe: Vec<f64> = (0..cfg.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k = rng.gen_range(1..=corpus.len());
        let got = search_dense(&index, &qe, k).unwrap();

        // Oracle: score all rows, full sort, truncate.
        let scores: Vec<f64> = (0..corpus.len())
            .map(|i| {
                let row = index.row(i);
                let mut acc = 0.0;
                for (d, &x) in row.iter().enumerate() {
                    acc += qe[d] * x as f64;
                }
                acc
            })
            .collect();
        assert_eq!(
            got.ids(),
            ranking_oracle(&scores, k),
            "round {round}: dense top-{k} id sequence"
        );
    }
}

#[test]
fn gradient_suite_over_random_configurations() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0003);
    let objectives = [
        (Objective::Dpr, false),
        (Objective::Stopgrad, false),
        (Objective::Stopgrad, true),
        (Objective::Flipped, false),
    ];
    for round in 0..10u64 {
        for (tied, use_positions) in [(false, true), (false, false), (true, true), (true, false)] {
            let vocab = rng.gen_range(8..40);
            let mut cfg = EncoderConfig::new(vocab);
            cfg.dim = rng.gen_range(2..=8);
            cfg.max_len = rng.gen_range(8..=24);
            cfg.tied = tied;
            cfg.use_positions = use_positions;
            let de = DualEncoder::init(cfg, 1000 + round).unwrap();
            let b = rng.gen_range(2..=4);
            for &(objective, literal) in &objectives {
                let n_passages = match objective {
                    Objective::Flipped => b,
                    Objective::Stopgrad if literal => b,
                    _ => 2 * b,
                };
                let mut seq = |max: usize| -> Vec<u32> {
                    let len = rng.gen_range(1..=max);
                    (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
                };
                let batch = BatchData {
                    queries: (0..b).map(|_| seq(6)).collect(),
                    passages: (0..n_passages).map(|_| seq(12)).collect(),
                };
                let report =
                    check_batch_gradients(&de, objective, literal, &batch, 4, &mut rng).unwrap();
                assert!(
                    report.max_rel_error < FD_TOL,
                    "round {round} {objective:?} literal={literal} tied={tied} pos={use_positions}: {}",
                    report.worst
                );
            }
        }
    }
}

#[test]
fn recall_matches_hit_rank_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0004);
    for round in 0..20 {
        let corpus = random_corpus(&mut rng, 60, 40);
        let n_q = rng.gen_range(1..=12);
        let mut pairs = Vec::new();
        let mut runs = Vec::new();
        for qi in 0..n_q {
            let question = Question::new(qi as u32, format!("find w{}", rng.gen_range(0..40)))
                .unwrap();
            // Answers sometimes match nothing, sometimes a random passage
            // fragment (guaranteed present).
            let answer = if rng.gen_bool(0.3) {
                "zzabsent".to_string()
            } else {
                let pid = rng.gen_range(0..corpus.len() as u32);
                let p = corpus.passage(pid);
                let toks: Vec<Token> = p.title.iter().chain(p.body.iter()).cloned().collect();
                let start = rng.gen_range(0..toks.len());
                let end = (start + rng.gen_range(1..=3)).min(toks.len());
                toks[start..end]
                    .iter()
                    .map(|t| t.as_str())
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let pair = retlab_core::corpus::QaPair::new(question, vec![answer]).unwrap();
            pairs.push(pair);

            // A random ranked run over a random subset of passages.
            let mut pids: Vec<u32> = (0..corpus.len() as u32).collect();
            pids.shuffle(&mut rng);
            pids.truncate(rng.gen_range(1..=corpus.len()));
            let entries: Vec<Candidate> = pids
                .iter()
                .enumerate()
                .map(|(r, &pid)| Candidate {
                    pid,
                    score: 100.0 - r as f64,
                })
                .collect();
            runs.push(CandidateSet::from_ranked(entries).unwrap());
        }

        let result = recall_at_k(&pairs, &runs, &corpus, &DEFAULT_KS, "oracle").unwrap();

        // Oracle: first relevant rank per run, then recall from scratch.
        for (k_i, &k) in DEFAULT_KS.iter().enumerate() {
            let mut hits = 0usize;
            for (pair, run) in pairs.iter().zip(&runs) {
                let hit_rank = run
                    .entries()
                    .iter()
                    .position(|c| is_relevant(corpus.passage(c.pid), &pair.answers))
                    .map(|p| p + 1);
                if hit_rank.is_some_and(|r| r <= k) {
                    hits += 1;
                }
            }
            let want = hits as f64 / pairs.len() as f64;
            let got = result.recall[&k];
            assert_eq!(got, want, "round {round} k={k}");
            if k_i > 0 {
                assert!(
                    result.recall[&DEFAULT_KS[k_i - 1]] <= got,
                    "round {round}: recall must be monotone in k"
                );
            }
        }
    }
}
