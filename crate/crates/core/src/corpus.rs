//! Tokenization, document segmentation into fixed-length passages, and
//! immutable corpus storage.
//!
//! Text is normalized once, up front: lowercase, Unicode punctuation
//! stripped, whitespace split. Everything downstream (sparse vectors, the
//! dense encoder, relevance judgments) works on these tokens, which keeps the
//! answer-containment relevance rule deterministic.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::error::{Error, Result};

/// Marker token separating title from body in encoder inputs. The angle
/// brackets are Unicode punctuation, so `tokenize` can never produce this
/// string from raw text; it exists only where the code inserts it.
pub const SEP_TEXT: &str = "⟨sep⟩";

/// A single normalized token: non-empty, lowercase, no internal whitespace.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(String);

impl Token {
    /// Validating constructor for tokens that do not come out of `tokenize`
    /// (e.g. loaded from a passage file).
    pub fn new(text: impl Into<String>) -> Result<Token> {
        let text = text.into();
        if text == SEP_TEXT {
            return Ok(Token(text));
        }
        if text.is_empty() {
            return Err(Error::InvalidArg("empty token".into()));
        }
        if text.chars().any(|c| c.is_whitespace()) {
            return Err(Error::InvalidArg(format!(
                "token {text:?} contains whitespace"
            )));
        }
        if text.chars().any(|c| c.is_uppercase()) {
            return Err(Error::InvalidArg(format!("token {text:?} is not lowercase")));
        }
        Ok(Token(text))
    }

    /// The title/body separator sentinel.
    pub fn sep() -> Token {
        Token(SEP_TEXT.to_string())
    }

    pub fn is_sep(&self) -> bool {
        self.0 == SEP_TEXT
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for Token {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

/// Lowercase, strip Unicode punctuation, split on whitespace, drop empties.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(Token(std::mem::take(&mut cur)));
            }
        } else if !is_punctuation(c) {
            cur.extend(c.to_lowercase());
        }
    }
    if !cur.is_empty() {
        out.push(Token(cur));
    }
    out
}

/// Join tokens back into a space-separated string (the inverse of `tokenize`
/// on already-normalized text).
pub fn join_tokens(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(Token::as_str)
        .collect::<Vec<_>>()
        .join(" ")
}

/// A fixed-length window of a source document.
#[derive(Debug, Clone, PartialEq)]
pub struct Passage {
    pub id: u32,
    pub title: Vec<Token>,
    pub body: Vec<Token>,
    pub source_doc: String,
}

impl Passage {
    /// Title and body tokens in order, without the sentinel. This is the text
    /// that sparse indexing and relevance judgments see.
    pub fn text_tokens(&self) -> Vec<Token> {
        let mut t = self.title.clone();
        t.extend(self.body.iter().cloned());
        t
    }
}

/// Encoder input: title ++ ⟨sep⟩ ++ body.
pub fn passage_input_sequence(p: &Passage) -> Vec<Token> {
    let mut seq = Vec::with_capacity(p.title.len() + 1 + p.body.len());
    seq.extend(p.title.iter().cloned());
    seq.push(Token::sep());
    seq.extend(p.body.iter().cloned());
    seq
}

/// Cut a document into consecutive non-overlapping `passage_len`-token
/// windows; a final partial window is kept if non-empty. Passage ids are
/// local (0-based); [`Corpus::from_documents`] assigns global ids.
pub fn segment_document(title: &str, text: &str, passage_len: usize) -> Vec<Passage> {
    assert!(passage_len >= 1, "passage_len must be at least 1");
    let title_tokens = tokenize(title);
    let body_tokens = tokenize(text);
    body_tokens
        .chunks(passage_len)
        .enumerate()
        .map(|(i, chunk)| Passage {
            id: i as u32,
            title: title_tokens.clone(),
            body: chunk.to_vec(),
            source_doc: String::new(),
        })
        .collect()
}

/// A raw input document, one JSON object per line in the docs file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub id: String,
    pub title: String,
    pub text: String,
}

/// A question with its normalized token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Question {
    pub id: u32,
    pub text: String,
    pub tokens: Vec<Token>,
}

impl Question {
    pub fn new(id: u32, text: impl Into<String>) -> Result<Question> {
        let text = text.into();
        let tokens = tokenize(&text);
        if tokens.is_empty() {
            return Err(Error::InvalidArg(format!(
                "question {id} tokenizes to nothing: {text:?}"
            )));
        }
        Ok(Question { id, text, tokens })
    }
}

/// A supervision record: question, answer aliases, optional origin fields
/// (relation, subject), and (once assigned) a positive passage and mined
/// hard negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct QaPair {
    pub question: Question,
    pub answers: Vec<String>,
    pub relation: Option<String>,
    pub subject: Option<String>,
    pub positive_passage: Option<u32>,
    pub hard_negatives: Vec<u32>,
}

impl QaPair {
    pub fn new(question: Question, answers: Vec<String>) -> Result<QaPair> {
        if answers.is_empty() {
            return Err(Error::InvalidArg(format!(
                "question {} has no answers",
                question.id
            )));
        }
        Ok(QaPair {
            question,
            answers,
            relation: None,
            subject: None,
            positive_passage: None,
            hard_negatives: Vec::new(),
        })
    }
}

/// Immutable passage collection with dense ids `0..N-1`.
#[derive(Debug, Clone)]
pub struct Corpus {
    passages: Vec<Passage>,
    passage_len: usize,
}

/// Default passage window length in tokens.
pub const DEFAULT_PASSAGE_LEN: usize = 100;

impl Corpus {
    /// Segment every document and assign global passage ids in document
    /// order.
    pub fn from_documents(docs: &[DocumentRecord], passage_len: usize) -> Result<Corpus> {
        if passage_len < 1 {
            return Err(Error::InvalidArg("passage_len must be at least 1".into()));
        }
        let mut passages = Vec::new();
        for doc in docs {
            for mut p in segment_document(&doc.title, &doc.text, passage_len) {
                p.id = passages.len() as u32;
                p.source_doc = doc.id.clone();
                passages.push(p);
            }
        }
        Ok(Corpus {
            passages,
            passage_len,
        })
    }

    pub fn from_passages(passages: Vec<Passage>, passage_len: usize) -> Result<Corpus> {
        for (i, p) in passages.iter().enumerate() {
            if p.id as usize != i {
                return Err(Error::Format {
                    kind: "corpus",
                    msg: format!("passage ids must be dense 0..N-1; slot {i} has id {}", p.id),
                });
            }
            if p.body.is_empty() {
                return Err(Error::Format {
                    kind: "corpus",
                    msg: format!("passage {} has an empty body", p.id),
                });
            }
            if p.body.len() > passage_len {
                return Err(Error::Format {
                    kind: "corpus",
                    msg: format!(
                        "passage {} body has {} tokens, exceeding passage_len {}",
                        p.id,
                        p.body.len(),
                        passage_len
                    ),
                });
            }
        }
        Ok(Corpus {
            passages,
            passage_len,
        })
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn passage(&self, id: u32) -> &Passage {
        &self.passages[id as usize]
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn passage_len(&self) -> usize {
        self.passage_len
    }

    /// All distinct terms over titles and bodies, sorted. The ⟨sep⟩ sentinel
    /// never appears here because it is never part of stored passage text.
    pub fn terms(&self) -> BTreeSet<&str> {
        let mut terms = BTreeSet::new();
        for p in &self.passages {
            for t in p.title.iter().chain(p.body.iter()) {
                terms.insert(t.as_str());
            }
        }
        terms
    }

    /// Clone with one passage's body replaced (used by the shuffling
    /// transform, which otherwise never mutates a corpus).
    pub fn with_replaced_body(&self, id: u32, body: Vec<Token>) -> Result<Corpus> {
        if body.is_empty() || body.len() > self.passage_len {
            return Err(Error::InvalidArg(format!(
                "replacement body for passage {id} must have 1..={} tokens",
                self.passage_len
            )));
        }
        let mut c = self.clone();
        c.passages[id as usize].body = body;
        Ok(c)
    }
}

#[derive(Serialize, Deserialize)]
struct PassageRecord {
    pid: u32,
    title: String,
    body: Vec<String>,
}

/// Read a documents JSONL file ({"id","title","text"} per line).
pub fn read_documents_jsonl(path: &Path) -> Result<Vec<DocumentRecord>> {
    read_jsonl(path)
}

/// Write the persisted corpus form: one passage per line,
/// {"pid","title","body"}. The title round-trips through `tokenize` exactly
/// because tokens are already normalized.
pub fn write_corpus_jsonl(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in corpus.passages() {
        let rec = PassageRecord {
            pid: p.id,
            title: join_tokens(&p.title),
            body: p.body.iter().map(|t| t.as_str().to_string()).collect(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::Format {
            kind: "corpus",
            msg: e.to_string(),
        })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Load a persisted corpus. `passage_len` is not stored in the file and must
/// be supplied (bodies are validated against it).
pub fn read_corpus_jsonl(path: &Path, passage_len: usize) -> Result<Corpus> {
    let records: Vec<PassageRecord> = read_jsonl(path)?;
    let mut passages = Vec::with_capacity(records.len());
    for rec in records {
        let mut body = Vec::with_capacity(rec.body.len());
        for s in rec.body {
            body.push(Token::new(s)?);
        }
        passages.push(Passage {
            id: rec.pid,
            title: tokenize(&rec.title),
            body,
            source_doc: String::new(),
        });
    }
    Corpus::from_passages(passages, passage_len)
}

/// Generic JSONL reader that reports the 1-based line number of the first
/// malformed line.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::JsonLine {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Generic JSONL writer; one compact JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| Error::Format {
            kind: "jsonl",
            msg: e.to_string(),
        })?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
