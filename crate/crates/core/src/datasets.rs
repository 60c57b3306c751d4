//! QA dataset tooling: template-based question generation from knowledge-base
//! triples, stratified seen/unseen splits, entity/relation 4-way evaluation
//! subsets, grouped question-per-passage sampling, and the word-shuffling
//! data transforms.
//!
//! All sampling is seeded; with the same inputs (in the same order) and the
//! same seed, every function here produces identical output, down to the
//! bytes of the files written from it.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_jsonl, write_jsonl, Corpus, QaPair, Question};
use crate::encoder::fnv1a64;
use crate::error::{Error, Result};
use crate::eval::is_relevant;
use crate::index::CandidateSet;
use crate::sparse::{search_sparse, InvertedIndex, SparseScorer};

/// A (subject, relation, object) knowledge-base triple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripleRecord {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl TripleRecord {
    pub fn new(subject: &str, relation: &str, object: &str) -> Result<TripleRecord> {
        if subject.is_empty() || relation.is_empty() || object.is_empty() {
            return Err(Error::InvalidArg(
                "triple fields must all be non-empty".into(),
            ));
        }
        Ok(TripleRecord {
            subject: subject.to_string(),
            relation: relation.to_string(),
            object: object.to_string(),
        })
    }
}

/// Read tab-separated triples: subject, relation, object.
pub fn read_triples_tsv(path: &Path) -> Result<Vec<TripleRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (s, r, o) = (fields.next(), fields.next(), fields.next());
        match (s, r, o, fields.next()) {
            (Some(s), Some(r), Some(o), None) => {
                out.push(TripleRecord::new(s, r, o).map_err(|e| Error::Format {
                    kind: "triples",
                    msg: format!("line {}: {e}", i + 1),
                })?);
            }
            _ => {
                return Err(Error::Format {
                    kind: "triples",
                    msg: format!("line {}: expected 3 tab-separated fields", i + 1),
                })
            }
        }
    }
    Ok(out)
}

pub fn write_triples_tsv(path: &Path, triples: &[TripleRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in triples {
        writeln!(w, "{}\t{}\t{}", t.subject, t.relation, t.object)?;
    }
    w.flush()?;
    Ok(())
}

/// A question template for one relation; `[X]` is the subject slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationTemplate {
    pub relation: String,
    pub label: String,
    pub template: String,
    pub unseen: bool,
}

/// The fourteen built-in relation templates: seven seen (used for training)
/// and seven unseen (test-only).
pub fn builtin_templates() -> Vec<RelationTemplate> {
    let rows: [(&str, &str, &str, bool); 14] = [
        ("P19", "place of birth", "Where was [X] born?", false),
        ("P159", "headquarters location", "Where is the headquarter of [X]?", false),
        ("P176", "manufacturer", "Which company is [X] produced by?", false),
        ("P264", "record label", "What music label is [X] represented by?", false),
        ("P407", "language of work or name", "Which language was [X] written in?", false),
        ("P413", "position played on team / speciality", "What position does [X] play?", false),
        ("P740", "location of formation", "Where was [X] founded?", false),
        ("P17", "country", "Which country is [X] located in?", true),
        ("P20", "place of death", "Where did [X] die?", true),
        ("P30", "continent", "Which continent is [X] located?", true),
        ("P127", "owned by", "Who owns [X]?", true),
        ("P136", "genre", "What type of music does [X] play?", true),
        ("P276", "location", "Where is [X] located?", true),
        ("P495", "country of origin", "Which country was [X] created in?", true),
    ];
    rows.iter()
        .map(|&(relation, label, template, unseen)| RelationTemplate {
            relation: relation.to_string(),
            label: label.to_string(),
            template: template.to_string(),
            unseen,
        })
        .collect()
}

fn template_for<'a>(
    templates: &'a [RelationTemplate],
    relation: &str,
) -> Result<&'a RelationTemplate> {
    templates
        .iter()
        .find(|t| t.relation == relation)
        .ok_or_else(|| Error::UnknownRelation(relation.to_string()))
}

/// Rewrite one triple into a question whose subject is part of the question
/// and whose object is the answer.
pub fn generate_qa(
    triple: &TripleRecord,
    templates: &[RelationTemplate],
    qid: u32,
) -> Result<QaPair> {
    let tpl = template_for(templates, &triple.relation)?;
    let text = tpl.template.replacen("[X]", &triple.subject, 1);
    let question = Question::new(qid, text)?;
    let mut pair = QaPair::new(question, vec![triple.object.clone()])?;
    pair.relation = Some(triple.relation.clone());
    pair.subject = Some(triple.subject.clone());
    Ok(pair)
}

/// Generate pairs for every triple, assigning sequential question ids.
pub fn generate_all(
    triples: &[TripleRecord],
    templates: &[RelationTemplate],
) -> Result<Vec<QaPair>> {
    triples
        .iter()
        .enumerate()
        .map(|(i, t)| generate_qa(t, templates, i as u32))
        .collect()
}

/// Outcome of positive-passage assignment and hard-negative mining.
#[derive(Debug)]
pub struct PositiveAssignment {
    pub pairs: Vec<QaPair>,
    /// Pairs dropped because no passage contains any answer.
    pub dropped_no_positive: usize,
    /// Kept pairs for which every passage was relevant, so no hard negative
    /// exists (can only happen on degenerate corpora).
    pub missing_hard_negative: usize,
}

/// For each pair: positive = highest-BM25 passage containing an answer
/// (pairs with none are dropped and counted); hard negative = highest-BM25
/// passage containing no answer.
pub fn assign_positives_and_negatives(
    pairs: Vec<QaPair>,
    corpus: &Corpus,
    index: &InvertedIndex,
    scorer: SparseScorer,
) -> Result<PositiveAssignment> {
    let mut kept = Vec::with_capacity(pairs.len());
    let mut dropped = 0usize;
    let mut missing_hn = 0usize;
    for mut pair in pairs {
        let ranked: CandidateSet =
            search_sparse(&pair.question.tokens, index, corpus.len(), scorer)?;
        let mut positive = None;
        let mut negative = None;
        for c in ranked.entries() {
            let relevant = is_relevant(corpus.passage(c.pid), &pair.answers);
            if positive.is_none() && relevant {
                positive = Some(c.pid);
            }
            if negative.is_none() && !relevant {
                negative = Some(c.pid);
            }
            if positive.is_some() && negative.is_some() {
                break;
            }
        }
        match positive {
            None => dropped += 1,
            Some(pid) => {
                pair.positive_passage = Some(pid);
                match negative {
                    Some(n) => pair.hard_negatives = vec![n],
                    None => missing_hn += 1,
                }
                kept.push(pair);
            }
        }
    }
    Ok(PositiveAssignment {
        pairs: kept,
        dropped_no_positive: dropped,
        missing_hard_negative: missing_hn,
    })
}

/// Split ratios plus the sampling seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, dev: f64, test: f64, seed: u64) -> Result<SplitSpec> {
        if train < 0.0 || dev < 0.0 || test < 0.0 || (train + dev + test - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArg(format!(
                "split ratios must be non-negative and sum to 1, got {train}/{dev}/{test}"
            )));
        }
        Ok(SplitSpec {
            train,
            dev,
            test,
            seed,
        })
    }
}

/// The four outputs of the T-REx split. Unseen relations contribute only a
/// test sample; their remaining pairs are discarded.
#[derive(Debug, Clone)]
pub struct TrexSplits {
    pub seen_train: Vec<QaPair>,
    pub seen_dev: Vec<QaPair>,
    pub seen_test: Vec<QaPair>,
    pub unseen_test: Vec<QaPair>,
}

fn relation_rng(seed: u64, purpose: &str, relation: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a64(format!("{purpose}:{relation}").as_bytes()));
    rng
}

/// Per-relation stratified seeded split. Seen relations split
/// train/dev/test with dev and test floored (train takes the remainder);
/// unseen relations keep a floored test fraction and discard the rest.
pub fn split_trex(
    pairs: &[QaPair],
    templates: &[RelationTemplate],
    spec: &SplitSpec,
) -> Result<TrexSplits> {
    let mut by_relation: BTreeMap<&str, Vec<&QaPair>> = BTreeMap::new();
    for pair in pairs {
        let relation = pair.relation.as_deref().ok_or_else(|| {
            Error::InvalidArg(format!(
                "pair {} has no relation tag and cannot be split",
                pair.question.id
            ))
        })?;
        by_relation.entry(relation).or_default().push(pair);
    }
    let mut splits = TrexSplits {
        seen_train: Vec::new(),
        seen_dev: Vec::new(),
        seen_test: Vec::new(),
        unseen_test: Vec::new(),
    };
    for (relation, members) in by_relation {
        let unseen = template_for(templates, relation)?.unseen;
        let mut shuffled: Vec<&QaPair> = members;
        let mut rng = relation_rng(spec.seed, "split", relation);
        shuffled.shuffle(&mut rng);
        let n = shuffled.len();
        let n_test = (n as f64 * spec.test).floor() as usize;
        if unseen {
            splits
                .unseen_test
                .extend(shuffled[..n_test].iter().map(|p| (*p).clone()));
        } else {
            let n_dev = (n as f64 * spec.dev).floor() as usize;
            let n_train = n - n_dev - n_test;
            splits
                .seen_train
                .extend(shuffled[..n_train].iter().map(|p| (*p).clone()));
            splits
                .seen_dev
                .extend(shuffled[n_train..n_train + n_dev].iter().map(|p| (*p).clone()));
            splits
                .seen_test
                .extend(shuffled[n_train + n_dev..].iter().map(|p| (*p).clone()));
        }
    }
    Ok(splits)
}

/// Default per-relation cap for the entity/relation evaluation subsets.
pub const ER_CAP: usize = 300;

/// A relation that could not fill its per-relation quota.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Shortfall {
    pub subset: &'static str,
    pub relation: String,
    pub wanted: usize,
    pub got: usize,
}

pub const ER_SUBSET_NAMES: [&str; 4] = [
    "seenE_seenR",
    "seenE_unseenR",
    "unseenE_seenR",
    "unseenE_unseenR",
];

/// The four entity/relation evaluation subsets, keyed by whether the
/// question's subject entity appeared in training and whether its relation
/// is a training relation.
#[derive(Debug, Clone)]
pub struct ErSubsets {
    /// Indexed as [seenE_seenR, seenE_unseenR, unseenE_seenR, unseenE_unseenR].
    pub subsets: [Vec<QaPair>; 4],
    pub shortfalls: Vec<Shortfall>,
}

/// Classify every candidate pair by (entity seen, relation seen), then per
/// subset and relation sample up to `cap` pairs. Training pairs themselves
/// are excluded; shortfalls are recorded, not errors. "Seen entity" means
/// the subject string occurs as a subject in `seen_train`.
pub fn build_er_subsets(
    pairs: &[QaPair],
    seen_train: &[QaPair],
    cap: usize,
    seed: u64,
) -> ErSubsets {
    let train_subjects: BTreeSet<&str> = seen_train
        .iter()
        .filter_map(|p| p.subject.as_deref())
        .collect();
    let train_relations: BTreeSet<&str> = seen_train
        .iter()
        .filter_map(|p| p.relation.as_deref())
        .collect();
    let train_qids: HashSet<u32> = seen_train.iter().map(|p| p.question.id).collect();

    // subset index -> relation -> candidates, deduplicated by triple.
    let mut buckets: [BTreeMap<&str, Vec<&QaPair>>; 4] = Default::default();
    let mut seen_triples: HashSet<(&str, &str, &str)> = HashSet::new();
    for pair in pairs {
        if train_qids.contains(&pair.question.id) {
            continue;
        }
        let (Some(subject), Some(relation)) = (pair.subject.as_deref(), pair.relation.as_deref())
        else {
            continue;
        };
        if !seen_triples.insert((subject, relation, &pair.answers[0])) {
            continue;
        }
        let e_seen = train_subjects.contains(subject);
        let r_seen = train_relations.contains(relation);
        let idx = match (e_seen, r_seen) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        buckets[idx].entry(relation).or_default().push(pair);
    }

    let mut subsets: [Vec<QaPair>; 4] = Default::default();
    let mut shortfalls = Vec::new();
    for (idx, bucket) in buckets.iter().enumerate() {
        let name = ER_SUBSET_NAMES[idx];
        for (relation, members) in bucket {
            let mut chosen: Vec<&QaPair> = members.clone();
            let mut rng = relation_rng(seed, name, relation);
            chosen.shuffle(&mut rng);
            if chosen.len() > cap {
                chosen.truncate(cap);
            } else if chosen.len() < cap {
                shortfalls.push(Shortfall {
                    subset: name,
                    relation: relation.to_string(),
                    wanted: cap,
                    got: chosen.len(),
                });
            }
            subsets[idx].extend(chosen.into_iter().cloned());
        }
    }
    ErSubsets {
        subsets,
        shortfalls,
    }
}

/// Shuffle the whitespace-split words of a string with the given rng.
pub fn shuffle_words(text: &str, rng: &mut ChaCha8Rng) -> String {
    let mut words: Vec<&str> = text.split_whitespace().collect();
    words.shuffle(rng);
    words.join(" ")
}

/// Apply the word-shuffling ablation to training data: questions get their
/// words reordered (shuffle_q) and/or the bodies of their positive and
/// hard-negative passages do (shuffle_p). Returns the transformed pairs and
/// a corpus with the affected bodies replaced. Evaluation data must never
/// pass through this transform.
pub fn shuffle_transform(
    pairs: &[QaPair],
    corpus: &Corpus,
    shuffle_q: bool,
    shuffle_p: bool,
    seed: u64,
) -> Result<(Vec<QaPair>, Corpus)> {
    let mut out_pairs = Vec::with_capacity(pairs.len());
    if shuffle_q {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(fnv1a64(b"shuffle:questions"));
        for pair in pairs {
            let text = shuffle_words(&pair.question.text, &mut rng);
            let question = Question::new(pair.question.id, text)?;
            out_pairs.push(QaPair {
                question,
                ..pair.clone()
            });
        }
    } else {
        out_pairs.extend(pairs.iter().cloned());
    }

    let corpus = if shuffle_p {
        let mut touched: BTreeSet<u32> = BTreeSet::new();
        for pair in pairs {
            touched.extend(pair.positive_passage);
            touched.extend(pair.hard_negatives.iter().copied());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(fnv1a64(b"shuffle:passages"));
        let mut passages = corpus.passages().to_vec();
        for pid in touched {
            passages[pid as usize].body.shuffle(&mut rng);
        }
        Corpus::from_passages(passages, corpus.passage_len())?
    } else {
        corpus.clone()
    };
    Ok((out_pairs, corpus))
}

/// One generated question about a passage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaqRecord {
    pub question: String,
    pub answer: String,
    pub pid: u32,
}

pub fn read_paq_jsonl(path: &Path) -> Result<Vec<PaqRecord>> {
    read_jsonl(path)
}

#[derive(Debug, Clone)]
pub struct PaqSplits {
    pub train: Vec<QaPair>,
    pub dev: Vec<QaPair>,
    pub test: Vec<QaPair>,
}

/// Full-scale defaults from the source procedure: 100K passages split
/// 70K/15K/15K with a minimum of 3 questions per passage.
pub const PAQ_MIN_Q: usize = 3;
pub const PAQ_N_PASSAGES: usize = 100_000;
pub const PAQ_SPLIT: (f64, f64, f64) = (0.7, 0.15, 0.15);

/// Group records by passage, drop passages with fewer than `min_q`
/// questions, sample `n_passages` of the survivors, keep one seeded question
/// each, and split by the given ratios (train and dev rounded, test takes
/// the remainder).
pub fn paq_group_filter(
    records: &[PaqRecord],
    min_q: usize,
    n_passages: usize,
    split: (f64, f64, f64),
    seed: u64,
) -> Result<PaqSplits> {
    let (r_train, r_dev, r_test) = split;
    if r_train < 0.0 || r_dev < 0.0 || r_test < 0.0 || (r_train + r_dev + r_test - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidArg(format!(
            "split ratios must be non-negative and sum to 1, got {r_train}/{r_dev}/{r_test}"
        )));
    }
    let mut groups: BTreeMap<u32, Vec<&PaqRecord>> = BTreeMap::new();
    for rec in records {
        groups.entry(rec.pid).or_default().push(rec);
    }
    let mut qualifying: Vec<(u32, Vec<&PaqRecord>)> = groups
        .into_iter()
        .filter(|(_, v)| v.len() >= min_q)
        .collect();
    if qualifying.len() < n_passages {
        return Err(Error::NotEnoughGroups {
            have: qualifying.len(),
            need: n_passages,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a64(b"paq"));
    qualifying.shuffle(&mut rng);
    qualifying.truncate(n_passages);

    let mut dataset = Vec::with_capacity(n_passages);
    for (qid, (pid, members)) in qualifying.into_iter().enumerate() {
        let rec = members[rng.gen_range(0..members.len())];
        let question = Question::new(qid as u32, rec.question.clone())?;
        let mut pair = QaPair::new(question, vec![rec.answer.clone()])?;
        pair.positive_passage = Some(pid);
        dataset.push(pair);
    }

    let n = dataset.len();
    let n_train = (n as f64 * r_train).round() as usize;
    let n_dev = (n as f64 * r_dev).round() as usize;
    if n_train + n_dev > n {
        return Err(Error::InvalidArg(
            "rounded train+dev sizes exceed the dataset".into(),
        ));
    }
    let test = dataset.split_off(n_train + n_dev);
    let dev = dataset.split_off(n_train);
    Ok(PaqSplits {
        train: dataset,
        dev,
        test,
    })
}

/// Serialized form of a QA pair.
#[derive(Debug, Serialize, Deserialize)]
struct QaRecord {
    qid: u32,
    question: String,
    answers: Vec<String>,
    relation: Option<String>,
    subject: Option<String>,
    positive_pid: Option<u32>,
    hard_negative_pids: Vec<u32>,
}

pub fn write_qa_jsonl(path: &Path, pairs: &[QaPair]) -> Result<()> {
    let records: Vec<QaRecord> = pairs
        .iter()
        .map(|p| QaRecord {
            qid: p.question.id,
            question: p.question.text.clone(),
            answers: p.answers.clone(),
            relation: p.relation.clone(),
            subject: p.subject.clone(),
            positive_pid: p.positive_passage,
            hard_negative_pids: p.hard_negatives.clone(),
        })
        .collect();
    write_jsonl(path, &records)
}

pub fn read_qa_jsonl(path: &Path) -> Result<Vec<QaPair>> {
    let records: Vec<QaRecord> = read_jsonl(path)?;
    records
        .into_iter()
        .map(|r| {
            let question = Question::new(r.qid, r.question)?;
            let mut pair = QaPair::new(question, r.answers)?;
            pair.relation = r.relation;
            pair.subject = r.subject;
            pair.positive_passage = r.positive_pid;
            pair.hard_negatives = r.hard_negative_pids;
            Ok(pair)
        })
        .collect()
}
