//! Synthetic fact corpus for end-to-end sanity runs.
//!
//! Generates a small world of pseudo-word entities: each fact document
//! states one (subject, relation, object) triple in a fixed marker sentence
//! ("Velka Doran was born in Tarnips.") plus a few filler tokens, and each
//! triple instantiates one of the seen question templates. Subjects are
//! (first, last) pseudo-word pairs drawn from small shared pools, and each
//! subject states two facts in two different relations. Held-out questions
//! therefore involve subjects whose name tokens were trained — through the
//! subject's other fact and through other subjects sharing a name — paired
//! with relation phrasings trained across the rest of the split, so a
//! retriever that aligns token embeddings can compose the two; objects are
//! reused by a couple of facts each, so untrained retrieval sits near
//! chance. Distractor documents are built from disjoint word pools and
//! never contain an answer.
//!
//! Everything is drawn from one seeded stream: the same spec always yields
//! byte-identical documents and triples.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::DocumentRecord;
use crate::datasets::TripleRecord;
use crate::encoder::fnv1a64;
use crate::error::{Error, Result};

/// Shape of the synthetic world.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSpec {
    /// Fact documents (one triple each). Subjects carry
    /// [`FACTS_PER_SUBJECT`] facts apiece, so this must be at most
    /// `FACTS_PER_SUBJECT * 400` (the number of unique 20×20 name pairs).
    pub n_facts: usize,
    /// Distractor documents containing no subjects, objects, or markers.
    pub n_distractors: usize,
    /// Filler tokens appended to each fact document (default none: fact
    /// documents then differ only in their names and object, which keeps
    /// ranking about token alignment rather than memorizable padding).
    pub filler_per_fact: usize,
    /// Tokens per distractor document body.
    pub distractor_len: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> SynthSpec {
        SynthSpec {
            n_facts: 400,
            n_distractors: 100,
            filler_per_fact: 0,
            distractor_len: 24,
            seed: 7,
        }
    }
}

/// Generated world: documents for corpus building, triples for question
/// generation.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub documents: Vec<DocumentRecord>,
    pub triples: Vec<TripleRecord>,
}

const FIRST_NAMES: usize = 12;
const LAST_NAMES: usize = 12;
/// Facts stated by each subject, in distinct relations.
pub const FACTS_PER_SUBJECT: usize = 3;
/// Objects per relation ≈ facts per relation / OBJECT_REUSE, so each object
/// answers about this many facts.
const OBJECT_REUSE: usize = 4;
const FILLER_POOL: usize = 30;
const DISTRACTOR_NAME_POOL: usize = 25;

/// The seen relations and the declarative sentence each fact document uses.
/// `{S}`/`{O}` are replaced by the subject and object surface forms.
const MARKERS: [(&str, &str); 7] = [
    ("P19", "{S} was born in {O}."),
    ("P159", "{S} has its headquarter in {O}."),
    ("P176", "{S} is produced by {O}."),
    ("P264", "{S} is represented by the music label {O}."),
    ("P407", "{S} was written in the {O} language."),
    ("P413", "{S} plays the position of {O}."),
    ("P740", "{S} was founded in {O}."),
];

/// Words that appear in questions or marker sentences; pseudo-words must
/// avoid them so entity tokens never collide with carrier phrases.
const RESERVED_WORDS: [&str; 33] = [
    "where", "was", "born", "is", "the", "headquarter", "of", "which", "company", "produced",
    "by", "what", "music", "label", "represented", "language", "written", "in", "position",
    "does", "play", "founded", "has", "its", "plays", "country", "located", "die", "continent",
    "owns", "type", "created", "who",
];

/// One pseudo-word: one or two onset+vowel syllables plus an optional coda,
/// e.g. "bakin", "velkor". Lowercase letters only, so tokenization keeps
/// each word intact.
fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    const ONSETS: [&str; 16] = [
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr",
    ];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    const CODAS: [&str; 8] = ["", "n", "r", "s", "l", "k", "m", "t"];
    let mut w = String::new();
    let syllables = 2 + rng.gen_range(0..2usize);
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
        w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
    }
    w.push_str(CODAS[rng.gen_range(0..CODAS.len())]);
    w
}

/// Draw `n` pseudo-words that are new (not reserved, not in `used`),
/// registering them in `used`.
fn fresh_words(rng: &mut ChaCha8Rng, n: usize, used: &mut BTreeSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(rng);
        if RESERVED_WORDS.contains(&w.as_str()) || used.contains(&w) {
            continue;
        }
        used.insert(w.clone());
        out.push(w);
    }
    out
}

fn capitalize(w: &str) -> String {
    let mut cs = w.chars();
    match cs.next() {
        Some(c) => c.to_uppercase().collect::<String>() + cs.as_str(),
        None => String::new(),
    }
}

/// Generate the synthetic world.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    if spec.n_facts < MARKERS.len() {
        return Err(Error::InvalidArg(format!(
            "need at least {} facts (one per relation)",
            MARKERS.len()
        )));
    }
    if spec.n_facts > FACTS_PER_SUBJECT * FIRST_NAMES * LAST_NAMES {
        return Err(Error::InvalidArg(format!(
            "at most {} facts supported ({} per unique subject pair)",
            FACTS_PER_SUBJECT * FIRST_NAMES * LAST_NAMES,
            FACTS_PER_SUBJECT
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(fnv1a64(b"synth"));
    let mut used = BTreeSet::new();

    let first = fresh_words(&mut rng, FIRST_NAMES, &mut used);
    let last = fresh_words(&mut rng, LAST_NAMES, &mut used);
    let filler = fresh_words(&mut rng, FILLER_POOL, &mut used);
    let distractor_names = fresh_words(&mut rng, DISTRACTOR_NAME_POOL, &mut used);

    // Every (first, last) combination, shuffled; the leading ones become
    // subjects, each stating FACTS_PER_SUBJECT facts.
    let mut subject_pairs: Vec<(usize, usize)> = (0..FIRST_NAMES)
        .flat_map(|i| (0..LAST_NAMES).map(move |j| (i, j)))
        .collect();
    subject_pairs.shuffle(&mut rng);
    let n_subjects = spec.n_facts.div_ceil(FACTS_PER_SUBJECT);

    // Fact f belongs to subject f / FACTS_PER_SUBJECT and takes relation
    // f mod |MARKERS|: a subject's relations are consecutive counters, hence
    // distinct (|MARKERS| is larger than FACTS_PER_SUBJECT), and every
    // relation receives an even share. Objects within a relation are reused
    // by roughly OBJECT_REUSE facts each.
    let relation_of: Vec<usize> = (0..spec.n_facts).map(|f| f % MARKERS.len()).collect();
    let per_relation: Vec<usize> = (0..MARKERS.len())
        .map(|r| relation_of.iter().filter(|&&x| x == r).count())
        .collect();
    let objects: Vec<Vec<String>> = per_relation
        .iter()
        .map(|&n| fresh_words(&mut rng, n.div_ceil(OBJECT_REUSE).max(1), &mut used))
        .collect();

    let mut documents = Vec::with_capacity(spec.n_facts + spec.n_distractors);
    let mut triples = Vec::with_capacity(spec.n_facts);
    let mut next_object = vec![0usize; MARKERS.len()];
    for (fact_idx, &r) in relation_of.iter().enumerate() {
        let (fi, li) = subject_pairs[fact_idx / FACTS_PER_SUBJECT];
        debug_assert!(fact_idx / FACTS_PER_SUBJECT < n_subjects);
        let (relation, marker) = MARKERS[r];
        let subject = format!("{} {}", capitalize(&first[fi]), capitalize(&last[li]));
        let object = capitalize(&objects[r][next_object[r] % objects[r].len()]);
        next_object[r] += 1;
        let sentence = marker.replace("{S}", &subject).replace("{O}", &object);
        let tail: Vec<&str> = (0..spec.filler_per_fact)
            .map(|_| filler[rng.gen_range(0..filler.len())].as_str())
            .collect();
        let text = if tail.is_empty() {
            sentence
        } else {
            format!("{sentence} {}.", tail.join(" "))
        };
        documents.push(DocumentRecord {
            id: format!("fact-{fact_idx:04}"),
            title: subject.clone(),
            text,
        });
        triples.push(TripleRecord::new(&subject, relation, &object)?);
    }

    for d in 0..spec.n_distractors {
        let a = &distractor_names[d % DISTRACTOR_NAME_POOL];
        let b = &distractor_names[(d / DISTRACTOR_NAME_POOL + d + 1) % DISTRACTOR_NAME_POOL];
        let title = format!("{} {}", capitalize(a), capitalize(b));
        let body: Vec<&str> = (0..spec.distractor_len.max(1))
            .map(|_| filler[rng.gen_range(0..filler.len())].as_str())
            .collect();
        documents.push(DocumentRecord {
            id: format!("distractor-{d:03}"),
            title,
            text: format!("{}.", body.join(" ")),
        });
    }

    Ok(SynthData { documents, triples })
}
