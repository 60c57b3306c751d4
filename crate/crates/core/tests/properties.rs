//! Property-based invariants over random inputs.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use retlab_core::corpus::{join_tokens, tokenize, Corpus, DocumentRecord, Question, QaPair};
use retlab_core::datasets::{shuffle_transform, shuffle_words};
use retlab_core::encoder::{encode, DualEncoder, EncoderConfig, TokenMap};
use retlab_core::index::build_dense_index;
use retlab_core::sparse::{
    build_idf, encode_tfidf, search_sparse, InvertedIndex, SparseScorer, Vocabulary,
};

/// Strategy: a corpus of 2..12 documents over a tiny word pool, so terms
/// repeat across documents.
fn corpus_strategy() -> impl Strategy<Value = Corpus> {
    let word = prop_oneof![
        Just("ash"), Just("bay"), Just("cod"), Just("dew"), Just("elm"),
        Just("fir"), Just("gum"), Just("hay"), Just("ivy"), Just("jay"),
        Just("kit"), Just("log"), Just("moss"), Just("newt"), Just("oak"),
    ];
    let text = prop::collection::vec(word, 1..25).prop_map(|ws| ws.join(" "));
    prop::collection::vec(text, 2..12).prop_map(|texts| {
        let docs: Vec<DocumentRecord> = texts
            .into_iter()
            .enumerate()
            .map(|(i, text)| DocumentRecord {
                id: format!("d{i}"),
                title: format!("doc {i}"),
                text,
            })
            .collect();
        Corpus::from_documents(&docs, 100).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Tokenization is idempotent: re-tokenizing the joined token text
    /// changes nothing.
    #[test]
    fn tokenize_is_idempotent(s in "\\PC{0,60}") {
        let once = tokenize(&s);
        let twice = tokenize(&join_tokens(&once));
        prop_assert_eq!(once, twice);
    }

    /// Tokens are fixed points of lowercasing (some uppercase-classified
    /// characters, like mathematical capitals, have no lowercase mapping and
    /// pass through unchanged) and never contain whitespace.
    #[test]
    fn tokens_are_normalized(s in "\\PC{0,60}") {
        for t in tokenize(&s) {
            prop_assert!(!t.as_str().is_empty());
            let lowered: String = t.as_str().chars().flat_map(|c| c.to_lowercase()).collect();
            prop_assert_eq!(t.as_str(), lowered.as_str());
            prop_assert!(!t.as_str().chars().any(|c| c.is_whitespace()));
        }
    }

    /// Every in-vocabulary TF-IDF vector has unit L2 norm.
    #[test]
    fn tfidf_vectors_are_unit_norm(corpus in corpus_strategy()) {
        let vocab = Vocabulary::build(&corpus);
        let idf = build_idf(&corpus, &vocab).unwrap();
        for p in corpus.passages() {
            let toks: Vec<_> = p.title.iter().chain(p.body.iter()).cloned().collect();
            let v = encode_tfidf(&toks, &vocab, &idf);
            let norm: f64 = v.entries().iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12, "norm {}", norm);
        }
    }

    /// Top-K is a prefix of top-K′ for K ≤ K′.
    #[test]
    fn sparse_topk_is_prefix_of_larger_k(corpus in corpus_strategy(), qseed in 0u64..50) {
        let index = InvertedIndex::build(&corpus).unwrap();
        let q = tokenize(&format!("ash bay q{qseed} moss"));
        let n = corpus.len();
        let small = search_sparse(&q, &index, n / 2 + 1, SparseScorer::bm25_default()).unwrap();
        let large = search_sparse(&q, &index, n, SparseScorer::bm25_default()).unwrap();
        let small_ids = small.ids();
        let large_ids = large.ids();
        prop_assert_eq!(small_ids.as_slice(), &large_ids[..small.len()]);
    }

    /// Candidate sets are sorted by (score desc, pid asc) with unique pids.
    #[test]
    fn sparse_candidates_are_ordered(corpus in corpus_strategy()) {
        let index = InvertedIndex::build(&corpus).unwrap();
        let q = tokenize("oak elm fir");
        let hits = search_sparse(&q, &index, corpus.len(), SparseScorer::Tfidf).unwrap();
        let entries = hits.entries();
        for w in entries.windows(2) {
            let better = w[0].score > w[1].score
                || (w[0].score == w[1].score && w[0].pid < w[1].pid);
            prop_assert!(better, "order violated: {:?} then {:?}", w[0], w[1]);
        }
    }

    /// Word shuffling preserves the word multiset.
    #[test]
    fn shuffle_words_preserves_multiset(s in "[a-z ]{0,50}", seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shuffled = shuffle_words(&s, &mut rng);
        let mut a: Vec<&str> = s.split_whitespace().collect();
        let mut b: Vec<&str> = shuffled.split_whitespace().collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }

    /// Without positions, encoding is invariant to input order; the corpus
    /// transform that shuffles passage bodies therefore cannot change any
    /// embedding.
    #[test]
    fn position_free_encoding_survives_body_shuffles(corpus in corpus_strategy(), seed in 0u64..100) {
        let tmap = TokenMap::build(&Vocabulary::build(&corpus));
        let mut cfg = EncoderConfig::new(tmap.n_ids());
        cfg.dim = 4;
        cfg.use_positions = false;
        let de = DualEncoder::init(cfg, 5).unwrap();

        let mut pairs = Vec::new();
        for pid in 0..corpus.len() as u32 {
            let q = Question::new(pid, format!("q {pid} ash")).unwrap();
            let mut pair = QaPair::new(q, vec!["ash".into()]).unwrap();
            pair.positive_passage = Some(pid);
            pairs.push(pair);
        }
        let (_, shuffled) = shuffle_transform(&pairs, &corpus, false, true, seed).unwrap();
        for pid in 0..corpus.len() as u32 {
            let a = de.encode_passage(corpus.passage(pid), &tmap).unwrap();
            let b = de.encode_passage(shuffled.passage(pid), &tmap).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    /// The dense index fingerprint is stable across rebuilds and sensitive
    /// to the encoder seed.
    #[test]
    fn dense_fingerprint_tracks_encoder(corpus in corpus_strategy(), seed in 0u64..20) {
        let tmap = TokenMap::build(&Vocabulary::build(&corpus));
        let cfg = EncoderConfig::new(tmap.n_ids());
        let de = DualEncoder::init(cfg, seed).unwrap();
        let a = build_dense_index(&corpus, &de).unwrap();
        let b = build_dense_index(&corpus, &de).unwrap();
        prop_assert_eq!(a.fingerprint(), b.fingerprint());
        let other = DualEncoder::init(cfg, seed + 1).unwrap();
        let c = build_dense_index(&corpus, &other).unwrap();
        prop_assert_ne!(a.fingerprint(), c.fingerprint());
    }

    /// Mean pooling bounds: the embedding of a repeated single token equals
    /// the embedding of that token alone (mean collapses repetition),
    /// regardless of position use only when positions are off.
    #[test]
    fn repeated_token_collapses_without_positions(reps in 1usize..10, id in 0u32..5) {
        let mut cfg = EncoderConfig::new(8);
        cfg.dim = 4;
        cfg.use_positions = false;
        let de = DualEncoder::init(cfg, 9).unwrap();
        let once = encode(de.query_params(), &cfg, &[id]).unwrap();
        let many = encode(de.query_params(), &cfg, &vec![id; reps]).unwrap();
        for (a, b) in once.iter().zip(&many) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

/// Splits partition their input: no pair lost, none duplicated.
#[test]
fn split_partition_is_exact() {
    use retlab_core::datasets::{builtin_templates, generate_all, split_trex, SplitSpec, TripleRecord};

    let mut triples = Vec::new();
    for r in ["P19", "P740", "P17"] {
        for i in 0..37 {
            triples.push(TripleRecord::new(&format!("Entity {r}{i}"), r, &format!("Place {i}")).unwrap());
        }
    }
    let pairs = generate_all(&triples, &builtin_templates()).unwrap();
    let spec = SplitSpec::new(0.8, 0.1, 0.1, 13).unwrap();
    let splits = split_trex(&pairs, &builtin_templates(), &spec).unwrap();

    let mut seen: BTreeMap<u32, usize> = BTreeMap::new();
    for (part, list) in [
        (0usize, &splits.seen_train),
        (1, &splits.seen_dev),
        (2, &splits.seen_test),
        (3, &splits.unseen_test),
    ] {
        for p in list {
            assert!(
                seen.insert(p.question.id, part).is_none(),
                "qid {} appears in two splits",
                p.question.id
            );
        }
    }
    // Seen relations: floor(37·0.1)=3 dev, 3 test, 31 train. Unseen: 3 test.
    assert_eq!(splits.seen_train.len(), 62);
    assert_eq!(splits.seen_dev.len(), 6);
    assert_eq!(splits.seen_test.len(), 6);
    assert_eq!(splits.unseen_test.len(), 3);
}
