//! Dense embedding index and exact top-K maximum-inner-product search.
//!
//! Search is an exhaustive scan: at desk scale exactness beats cleverness,
//! and it turns every downstream retrieval test into an equality test. The
//! index stores f32 rows (matching its on-disk format, so save/load cannot
//! change scores) and records a fingerprint of the passage encoder that
//! produced it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::corpus::Corpus;
use crate::encoder::{DualEncoder, TokenMap};
use crate::error::{Error, Result};
use crate::sparse::Vocabulary;

/// One retrieved passage with its score.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Candidate {
    pub pid: u32,
    pub score: f64,
}

/// Ranked retrieval results: scores non-increasing, ids unique, score ties
/// ordered by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    entries: Vec<Candidate>,
}

impl CandidateSet {
    /// Rank a full score array (index = passage id) and keep the top `k`.
    pub fn top_k(scores: &[f64], k: usize) -> CandidateSet {
        let mut order: Vec<u32> = (0..scores.len() as u32).collect();
        order.sort_by(|&a, &b| {
            scores[b as usize]
                .total_cmp(&scores[a as usize])
                .then(a.cmp(&b))
        });
        order.truncate(k);
        CandidateSet {
            entries: order
                .into_iter()
                .map(|pid| Candidate {
                    pid,
                    score: scores[pid as usize],
                })
                .collect(),
        }
    }

    /// Wrap an already-ranked list, validating the ordering invariants.
    pub fn from_ranked(entries: Vec<Candidate>) -> Result<CandidateSet> {
        for w in entries.windows(2) {
            let ordered = w[0].score > w[1].score
                || (w[0].score == w[1].score && w[0].pid < w[1].pid);
            if !ordered {
                return Err(Error::InvalidArg(format!(
                    "candidates out of order: ({}, {}) before ({}, {})",
                    w[0].pid, w[0].score, w[1].pid, w[1].score
                )));
            }
        }
        Ok(CandidateSet { entries })
    }

    pub fn entries(&self) -> &[Candidate] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<Candidate> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.entries.iter().map(|c| c.pid).collect()
    }
}

/// N×d matrix of passage embeddings plus the id of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    dim: usize,
    ids: Vec<u32>,
    rows: Vec<f32>,
    fingerprint: u64,
}

impl DenseIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }
}

/// Embed every passage with the encoder's passage side. The corpus-derived
/// token map must match the encoder's embedding table size.
pub fn build_dense_index(corpus: &Corpus, de: &DualEncoder) -> Result<DenseIndex> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let tmap = TokenMap::build(&Vocabulary::build(corpus));
    if tmap.n_ids() != de.cfg().vocab_size {
        return Err(Error::VocabMismatch {
            expected: de.cfg().vocab_size,
            got: tmap.n_ids(),
        });
    }
    let dim = de.cfg().dim;
    let mut ids = Vec::with_capacity(corpus.len());
    let mut rows = Vec::with_capacity(corpus.len() * dim);
    for p in corpus.passages() {
        let emb = de.encode_passage(p, &tmap)?;
        ids.push(p.id);
        rows.extend(emb.iter().map(|&x| x as f32));
    }
    Ok(DenseIndex {
        dim,
        ids,
        rows,
        fingerprint: de.passage_fingerprint(),
    })
}

/// Exact top-K by inner product over all rows; ties broken by ascending
/// passage id.
pub fn search_dense(index: &DenseIndex, qe: &[f64], k: usize) -> Result<CandidateSet> {
    if k == 0 {
        return Err(Error::InvalidArg("K must be at least 1".into()));
    }
    if qe.len() != index.dim {
        return Err(Error::DimMismatch {
            expected: index.dim,
            got: qe.len(),
        });
    }
    let mut scores = vec![0.0; index.len()];
    for i in 0..index.len() {
        let row = index.row(i);
        let mut acc = 0.0;
        for d in 0..index.dim {
            acc += qe[d] * row[d] as f64;
        }
        scores[i] = acc;
    }
    // Rows are stored in passage-id order (build walks the corpus), so the
    // score array index doubles as the passage id.
    debug_assert!(index.ids.iter().enumerate().all(|(i, &id)| i as u32 == id));
    Ok(CandidateSet::top_k(&scores, k))
}

const DENSE_MAGIC: &[u8; 8] = b"RLDIDX\0\0";
const DENSE_VERSION: u32 = 1;

impl DenseIndex {
    /// Binary layout (little-endian):
    ///
    /// ```text
    /// magic        8 bytes "RLDIDX\0\0"
    /// version      u32
    /// N            u64
    /// dim          u32
    /// fingerprint  u64     (passage-encoder content hash)
    /// ids          N × u32
    /// rows         N × dim × f32, row-major
    /// ```
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(DENSE_MAGIC)?;
        w.write_u32::<LittleEndian>(DENSE_VERSION)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u64::<LittleEndian>(self.fingerprint)?;
        for &id in &self.ids {
            w.write_u32::<LittleEndian>(id)?;
        }
        for &x in &self.rows {
            w.write_f32::<LittleEndian>(x)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DenseIndex> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DENSE_MAGIC {
            return Err(Error::Format {
                kind: "dense index",
                msg: "bad magic".into(),
            });
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != DENSE_VERSION {
            return Err(Error::Format {
                kind: "dense index",
                msg: format!("unsupported version {version}"),
            });
        }
        let n = r.read_u64::<LittleEndian>()? as usize;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let fingerprint = r.read_u64::<LittleEndian>()?;
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(r.read_u32::<LittleEndian>()?);
        }
        let mut rows = Vec::with_capacity(n * dim);
        for _ in 0..n * dim {
            rows.push(r.read_f32::<LittleEndian>()?);
        }
        Ok(DenseIndex {
            dim,
            ids,
            rows,
            fingerprint,
        })
    }
}

/// Detect which kind of index a file holds by its magic bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexKind {
    Sparse,
    Dense,
}

pub fn sniff_index_kind(path: &Path) -> Result<IndexKind> {
    let mut r = File::open(path)?;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    match &magic {
        m if m == b"RLSPIDX\0" => Ok(IndexKind::Sparse),
        m if m == DENSE_MAGIC => Ok(IndexKind::Dense),
        _ => Err(Error::Format {
            kind: "index",
            msg: "unrecognized magic bytes".into(),
        }),
    }
}
