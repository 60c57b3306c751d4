//! TF-IDF and BM25 encodings, inverted-index construction, and sparse top-K
//! search.
//!
//! Sparse passage text is title ++ body (no sentinel). Document frequency
//! counts unique passages. Smoothed formulas keep idf strictly positive on
//! tiny corpora:
//!
//! * plain idf(t) = ln((N+1)/(df+1)) + 1
//! * BM25 idf(t)  = ln((N-df+0.5)/(df+0.5) + 1)
//!
//! Ties are broken by ascending passage id everywhere, and every summation
//! runs in a fixed order (term ids ascending for TF-IDF, query order for
//! BM25) so the posting-list route and the per-passage scoring route agree
//! bitwise.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::corpus::{Corpus, QaPair, Token};
use crate::error::{Error, Result};
use crate::eval::is_relevant;
use crate::index::{Candidate, CandidateSet};

/// Bijective term → term-id map over all corpus passage tokens, ids assigned
/// in sorted term order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    terms: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn build(corpus: &Corpus) -> Vocabulary {
        let terms: Vec<String> = corpus.terms().into_iter().map(str::to_string).collect();
        let ids = terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { terms, ids }
    }

    pub fn from_terms(terms: Vec<String>) -> Result<Vocabulary> {
        let mut ids = HashMap::with_capacity(terms.len());
        for (i, t) in terms.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format {
                    kind: "vocabulary",
                    msg: format!("duplicate term {t:?}"),
                });
            }
        }
        Ok(Vocabulary { terms, ids })
    }

    pub fn id(&self, term: &str) -> Option<u32> {
        self.ids.get(term).copied()
    }

    pub fn term(&self, id: u32) -> &str {
        &self.terms[id as usize]
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }
}

/// Per-term inverse document frequency plus the document frequency BM25
/// weights from.
#[derive(Debug, Clone, PartialEq)]
pub struct IdfTable {
    doc_count: usize,
    df: Vec<u32>,
    idf: Vec<f64>,
}

/// Smoothed plain idf for a given document frequency.
pub fn idf_for_df(df: u32, doc_count: usize) -> f64 {
    ((doc_count as f64 + 1.0) / (df as f64 + 1.0)).ln() + 1.0
}

/// Smoothed BM25 idf for a given document frequency.
pub fn bm25_idf_for_df(df: u32, doc_count: usize) -> f64 {
    let n = doc_count as f64;
    let d = df as f64;
    ((n - d + 0.5) / (d + 0.5) + 1.0).ln()
}

impl IdfTable {
    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn df(&self, term_id: u32) -> u32 {
        self.df[term_id as usize]
    }

    /// Plain idf by term id.
    pub fn idf(&self, term_id: u32) -> f64 {
        self.idf[term_id as usize]
    }

    /// Plain idf for an arbitrary term string; unknown terms fall back to the
    /// df = 0 formula.
    pub fn idf_of(&self, vocab: &Vocabulary, term: &str) -> f64 {
        match vocab.id(term) {
            Some(id) => self.idf(id),
            None => idf_for_df(0, self.doc_count),
        }
    }

    pub fn bm25_idf(&self, term_id: u32) -> f64 {
        bm25_idf_for_df(self.df[term_id as usize], self.doc_count)
    }

    fn from_df(df: Vec<u32>, doc_count: usize) -> IdfTable {
        let idf = df.iter().map(|&d| idf_for_df(d, doc_count)).collect();
        IdfTable {
            doc_count,
            df,
            idf,
        }
    }
}

/// Count unique-passage document frequency for every vocabulary term.
pub fn build_idf(corpus: &Corpus, vocab: &Vocabulary) -> Result<IdfTable> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut df = vec![0u32; vocab.len()];
    let mut seen: Vec<u32> = Vec::new();
    for p in corpus.passages() {
        seen.clear();
        for t in p.title.iter().chain(p.body.iter()) {
            let id = vocab
                .id(t.as_str())
                .expect("vocabulary must cover every corpus term");
            if !seen.contains(&id) {
                seen.push(id);
                df[id as usize] += 1;
            }
        }
    }
    Ok(IdfTable::from_df(df, corpus.len()))
}

/// Sorted sparse term-id → weight map with no explicit zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVector {
    entries: Vec<(u32, f64)>,
}

impl SparseVector {
    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn l2_norm(&self) -> f64 {
        let mut acc = 0.0;
        for &(_, w) in &self.entries {
            acc += w * w;
        }
        acc.sqrt()
    }
}

/// Term frequencies of a token sequence restricted to the vocabulary, as
/// sorted (term id, count) pairs.
fn term_counts(x: &[Token], vocab: &Vocabulary) -> Vec<(u32, u32)> {
    let mut counts: HashMap<u32, u32> = HashMap::new();
    for t in x {
        if let Some(id) = vocab.id(t.as_str()) {
            *counts.entry(id).or_insert(0) += 1;
        }
    }
    let mut pairs: Vec<(u32, u32)> = counts.into_iter().collect();
    pairs.sort_unstable_by_key(|&(id, _)| id);
    pairs
}

/// tf·idf weights, L2-normalized. Tokens outside the vocabulary have no
/// coordinate in the |V|-dimensional term space and are dropped. An input
/// with no in-vocabulary token yields the zero vector.
pub fn encode_tfidf(x: &[Token], vocab: &Vocabulary, idf: &IdfTable) -> SparseVector {
    let counts = term_counts(x, vocab);
    let mut entries: Vec<(u32, f64)> = Vec::with_capacity(counts.len());
    let mut norm_sq = 0.0;
    for (id, tf) in counts {
        let w = tf as f64 * idf.idf(id);
        norm_sq += w * w;
        entries.push((id, w));
    }
    if norm_sq > 0.0 {
        let norm = norm_sq.sqrt();
        for e in &mut entries {
            e.1 /= norm;
        }
    }
    SparseVector { entries }
}

/// Dot product over intersecting terms, accumulated in ascending term-id
/// order.
pub fn score_tfidf(q: &SparseVector, p: &SparseVector) -> f64 {
    let (mut i, mut j) = (0, 0);
    let mut acc = 0.0;
    while i < q.entries.len() && j < p.entries.len() {
        let (qi, qw) = q.entries[i];
        let (pj, pw) = p.entries[j];
        match qi.cmp(&pj) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += qw * pw;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

/// One posting: a passage containing the term, with its in-passage frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub pid: u32,
    pub tf: u32,
}

/// Term-id → posting lists, plus the per-passage statistics both scorers
/// need.
#[derive(Debug, Clone)]
pub struct InvertedIndex {
    vocab: Vocabulary,
    idf: IdfTable,
    postings: Vec<Vec<Posting>>,
    doc_len: Vec<u32>,
    avg_len: f64,
    tfidf_norm: Vec<f64>,
}

/// BM25 defaults matching the cited toolkit's.
pub const BM25_K1: f64 = 0.9;
pub const BM25_B: f64 = 0.4;

/// Which sparse scoring function a search uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SparseScorer {
    Tfidf,
    Bm25 { k1: f64, b: f64 },
}

impl SparseScorer {
    pub fn bm25_default() -> SparseScorer {
        SparseScorer::Bm25 {
            k1: BM25_K1,
            b: BM25_B,
        }
    }
}

impl InvertedIndex {
    pub fn build(corpus: &Corpus) -> Result<InvertedIndex> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let vocab = Vocabulary::build(corpus);
        let idf = build_idf(corpus, &vocab)?;
        let mut postings = vec![Vec::new(); vocab.len()];
        let mut doc_len = Vec::with_capacity(corpus.len());
        let mut tfidf_norm = Vec::with_capacity(corpus.len());
        for p in corpus.passages() {
            let tokens = p.text_tokens();
            doc_len.push(tokens.len() as u32);
            let counts = term_counts(&tokens, &vocab);
            let mut norm_sq = 0.0;
            for (id, tf) in counts {
                postings[id as usize].push(Posting { pid: p.id, tf });
                let w = tf as f64 * idf.idf(id);
                norm_sq += w * w;
            }
            tfidf_norm.push(norm_sq.sqrt());
        }
        let mut len_sum = 0.0;
        for &l in &doc_len {
            len_sum += l as f64;
        }
        let avg_len = len_sum / doc_len.len() as f64;
        Ok(InvertedIndex {
            vocab,
            idf,
            postings,
            doc_len,
            avg_len,
            tfidf_norm,
        })
    }

    pub fn doc_count(&self) -> usize {
        self.doc_len.len()
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn idf(&self) -> &IdfTable {
        &self.idf
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn doc_len(&self, pid: u32) -> u32 {
        self.doc_len[pid as usize]
    }

    pub fn postings(&self, term_id: u32) -> &[Posting] {
        &self.postings[term_id as usize]
    }

    /// L2 norm of the passage's unnormalized tf·idf weight vector.
    pub fn tfidf_norm(&self, pid: u32) -> f64 {
        self.tfidf_norm[pid as usize]
    }

    fn tf_in(&self, term_id: u32, pid: u32) -> u32 {
        let list = &self.postings[term_id as usize];
        match list.binary_search_by_key(&pid, |p| p.pid) {
            Ok(i) => list[i].tf,
            Err(_) => 0,
        }
    }
}

/// BM25 score of a passage for a query token sequence; query term
/// multiplicity counts each occurrence. Terms absent from the passage (or the
/// whole corpus) contribute zero.
pub fn score_bm25(q: &[Token], pid: u32, index: &InvertedIndex, k1: f64, b: f64) -> f64 {
    assert!(k1 >= 0.0, "k1 must be non-negative");
    assert!((0.0..=1.0).contains(&b), "b must lie in [0, 1]");
    let len_norm = 1.0 - b + b * index.doc_len(pid) as f64 / index.avg_len();
    let mut acc = 0.0;
    for t in q {
        let Some(id) = index.vocab.id(t.as_str()) else {
            continue;
        };
        let tf = index.tf_in(id, pid) as f64;
        if tf == 0.0 {
            continue;
        }
        let idf = index.idf.bm25_idf(id);
        acc += idf * tf * (k1 + 1.0) / (tf + k1 * len_norm);
    }
    acc
}

/// Rank every passage for the query and keep the top K (score descending,
/// ties by ascending passage id).
pub fn search_sparse(
    q: &[Token],
    index: &InvertedIndex,
    k: usize,
    scorer: SparseScorer,
) -> Result<CandidateSet> {
    if k == 0 {
        return Err(Error::InvalidArg("K must be at least 1".into()));
    }
    let scores = score_all_sparse(q, index, scorer);
    Ok(CandidateSet::top_k(&scores, k))
}

/// Scores for every passage id, in one pass over the relevant postings. The
/// accumulation order per passage matches the per-passage scorers exactly:
/// ascending term id for TF-IDF (as in `score_tfidf`'s merge), query order
/// for BM25 (as in `score_bm25`).
fn score_all_sparse(q: &[Token], index: &InvertedIndex, scorer: SparseScorer) -> Vec<f64> {
    let mut scores = vec![0.0; index.doc_count()];
    match scorer {
        SparseScorer::Tfidf => {
            let qv = encode_tfidf(q, &index.vocab, &index.idf);
            for &(id, qw) in qv.entries() {
                let idf = index.idf.idf(id);
                for post in index.postings(id) {
                    let norm = index.tfidf_norm[post.pid as usize];
                    if norm > 0.0 {
                        let pw = (post.tf as f64 * idf) / norm;
                        scores[post.pid as usize] += qw * pw;
                    }
                }
            }
        }
        SparseScorer::Bm25 { k1, b } => {
            assert!(k1 >= 0.0, "k1 must be non-negative");
            assert!((0.0..=1.0).contains(&b), "b must lie in [0, 1]");
            for t in q {
                let Some(id) = index.vocab.id(t.as_str()) else {
                    continue;
                };
                let idf = index.idf.bm25_idf(id);
                for post in index.postings(id) {
                    let tf = post.tf as f64;
                    let len_norm =
                        1.0 - b + b * index.doc_len[post.pid as usize] as f64 / index.avg_len;
                    scores[post.pid as usize] += idf * tf * (k1 + 1.0) / (tf + k1 * len_norm);
                }
            }
        }
    }
    scores
}

/// Highest-scoring passage that does not contain any answer; errors if every
/// passage is relevant.
pub fn mine_hard_negative(
    pair: &QaPair,
    corpus: &Corpus,
    index: &InvertedIndex,
    scorer: SparseScorer,
) -> Result<u32> {
    let ranked = search_sparse(&pair.question.tokens, index, corpus.len(), scorer)?;
    for c in ranked.entries() {
        if !is_relevant(corpus.passage(c.pid), &pair.answers) {
            return Ok(c.pid);
        }
    }
    Err(Error::NoHardNegative {
        qid: pair.question.id,
    })
}

/// Convenience wrapper: full BM25 ranking of the corpus for a query.
pub fn rank_bm25(q: &[Token], index: &InvertedIndex, k1: f64, b: f64) -> Vec<Candidate> {
    let scores = score_all_sparse(q, index, SparseScorer::Bm25 { k1, b });
    CandidateSet::top_k(&scores, scores.len()).into_entries()
}

const SPARSE_MAGIC: &[u8; 8] = b"RLSPIDX\0";
const SPARSE_VERSION: u32 = 1;

impl InvertedIndex {
    /// Binary layout (all integers little-endian):
    ///
    /// ```text
    /// magic            8  bytes  "RLSPIDX\0"
    /// version          u32
    /// N                u64       passage count
    /// |V|              u64       vocabulary size
    /// avg_len          f64
    /// doc_len          N   u32
    /// tfidf_norm       N   f64
    /// vocab            |V| entries: u32 byte-length, UTF-8 term, u32 df
    /// postings         |V| lists:   u64 count, then (u32 pid, u32 tf) pairs
    /// ```
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(SPARSE_MAGIC)?;
        w.write_u32::<LittleEndian>(SPARSE_VERSION)?;
        w.write_u64::<LittleEndian>(self.doc_count() as u64)?;
        w.write_u64::<LittleEndian>(self.vocab.len() as u64)?;
        w.write_f64::<LittleEndian>(self.avg_len)?;
        for &l in &self.doc_len {
            w.write_u32::<LittleEndian>(l)?;
        }
        for &n in &self.tfidf_norm {
            w.write_f64::<LittleEndian>(n)?;
        }
        for (i, term) in self.vocab.terms().iter().enumerate() {
            w.write_u32::<LittleEndian>(term.len() as u32)?;
            w.write_all(term.as_bytes())?;
            w.write_u32::<LittleEndian>(self.idf.df[i])?;
        }
        for list in &self.postings {
            w.write_u64::<LittleEndian>(list.len() as u64)?;
            for p in list {
                w.write_u32::<LittleEndian>(p.pid)?;
                w.write_u32::<LittleEndian>(p.tf)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<InvertedIndex> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != SPARSE_MAGIC {
            return Err(Error::Format {
                kind: "sparse index",
                msg: "bad magic".into(),
            });
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != SPARSE_VERSION {
            return Err(Error::Format {
                kind: "sparse index",
                msg: format!("unsupported version {version}"),
            });
        }
        let n = r.read_u64::<LittleEndian>()? as usize;
        let v = r.read_u64::<LittleEndian>()? as usize;
        let avg_len = r.read_f64::<LittleEndian>()?;
        let mut doc_len = Vec::with_capacity(n);
        for _ in 0..n {
            doc_len.push(r.read_u32::<LittleEndian>()?);
        }
        let mut tfidf_norm = Vec::with_capacity(n);
        for _ in 0..n {
            tfidf_norm.push(r.read_f64::<LittleEndian>()?);
        }
        let mut terms = Vec::with_capacity(v);
        let mut df = Vec::with_capacity(v);
        for _ in 0..v {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            let term = String::from_utf8(buf).map_err(|e| Error::Format {
                kind: "sparse index",
                msg: format!("non-UTF-8 term: {e}"),
            })?;
            terms.push(term);
            df.push(r.read_u32::<LittleEndian>()?);
        }
        let mut postings = Vec::with_capacity(v);
        for _ in 0..v {
            let count = r.read_u64::<LittleEndian>()? as usize;
            let mut list = Vec::with_capacity(count);
            for _ in 0..count {
                let pid = r.read_u32::<LittleEndian>()?;
                let tf = r.read_u32::<LittleEndian>()?;
                list.push(Posting { pid, tf });
            }
            postings.push(list);
        }
        let vocab = Vocabulary::from_terms(terms)?;
        let idf = IdfTable::from_df(df, n);
        Ok(InvertedIndex {
            vocab,
            idf,
            postings,
            doc_len,
            avg_len,
            tfidf_norm,
        })
    }
}
