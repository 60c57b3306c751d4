//! Implementations of the workbench subcommands. Each function receives the
//! fully resolved [`RunConfig`] (defaults, then config file, then flags) and
//! the paths from the command line; progress and diagnostics go to stderr,
//! primary results to stdout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use retlab_core::corpus::{
    read_corpus_jsonl, read_documents_jsonl, read_jsonl, write_corpus_jsonl, write_jsonl, Corpus,
};
use retlab_core::datasets::{
    assign_positives_and_negatives, build_er_subsets, builtin_templates, generate_all,
    paq_group_filter, read_paq_jsonl, read_qa_jsonl, read_triples_tsv, split_trex,
    write_qa_jsonl, write_triples_tsv, SplitSpec, ER_SUBSET_NAMES,
};
use retlab_core::encoder::{DualEncoder, EncoderConfig, TokenMap};
use retlab_core::eval::{recall_at_k, RunRecord};
use retlab_core::index::{
    build_dense_index, sniff_index_kind, CandidateSet, DenseIndex, IndexKind,
};
use retlab_core::sparse::{search_sparse, InvertedIndex, SparseScorer, Vocabulary};
use retlab_core::synth::{self, SynthSpec};
use retlab_core::training::{
    self, qsft_train, Freeze, Objective, QsftConfig, TrainConfig,
};

use crate::config::RunConfig;

/// Derived artifact path: `base` plus an extra dotted suffix, so
/// `enc.bin` gets the sidecars `enc.bin.opt` and `enc.bin.log.jsonl`.
fn sidecar(base: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}.{suffix}", base.display()))
}

fn write_meta(dir: &Path, passage_len: usize) -> Result<()> {
    let meta = serde_json::json!({ "passage_len": passage_len });
    fs::write(dir.join("meta.json"), format!("{meta}\n"))
        .with_context(|| format!("cannot write {}", dir.join("meta.json").display()))?;
    Ok(())
}

/// Load a corpus directory produced by `corpus-build` (passages.jsonl plus
/// meta.json carrying the passage length it was chunked with).
fn load_corpus(dir: &Path) -> Result<Corpus> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path)
        .with_context(|| format!("cannot read {} (not a corpus directory?)", meta_path.display()))?;
    let meta: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("malformed {}", meta_path.display()))?;
    let passage_len = meta
        .get("passage_len")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| anyhow!("{} lacks a passage_len field", meta_path.display()))?;
    let corpus = read_corpus_jsonl(&dir.join("passages.jsonl"), passage_len as usize)?;
    Ok(corpus)
}

fn token_map(corpus: &Corpus) -> TokenMap {
    TokenMap::build(&Vocabulary::build(corpus))
}

fn scorer_from_cfg(cfg: &RunConfig) -> Result<SparseScorer> {
    match cfg.scorer.as_str() {
        "bm25" => Ok(SparseScorer::Bm25 { k1: cfg.k1, b: cfg.b }),
        "tfidf" => Ok(SparseScorer::Tfidf),
        other => bail!("unknown sparse scorer {other:?} (expected bm25 or tfidf)"),
    }
}

pub fn corpus_build(cfg: &RunConfig, docs: &Path, out: &Path) -> Result<()> {
    let records = read_documents_jsonl(docs)?;
    let corpus = Corpus::from_documents(&records, cfg.passage_len)?;
    fs::create_dir_all(out)?;
    write_corpus_jsonl(&corpus, &out.join("passages.jsonl"))?;
    write_meta(out, cfg.passage_len)?;
    println!(
        "{} passages from {} documents (passage_len {}) -> {}",
        corpus.len(),
        records.len(),
        cfg.passage_len,
        out.display()
    );
    Ok(())
}

pub fn index_build(
    _cfg: &RunConfig,
    corpus_dir: &Path,
    kind: &str,
    encoder: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let corpus = load_corpus(corpus_dir)?;
    match kind {
        "sparse" => {
            if encoder.is_some() {
                bail!("--encoder only applies to dense indexes");
            }
            let index = InvertedIndex::build(&corpus)?;
            index.save(out)?;
            println!(
                "sparse index: {} passages, {} terms -> {}",
                corpus.len(),
                index.vocab().len(),
                out.display()
            );
        }
        "dense" => {
            let enc_path =
                encoder.ok_or_else(|| anyhow!("a dense index requires --encoder FILE"))?;
            let de = DualEncoder::load(enc_path)?;
            let index = build_dense_index(&corpus, &de)?;
            index.save(out)?;
            println!(
                "dense index: {} passages, dim {} -> {}",
                index.len(),
                index.dim(),
                out.display()
            );
        }
        other => bail!("unknown index kind {other:?} (expected sparse or dense)"),
    }
    Ok(())
}

pub struct TrainArgs {
    pub corpus: PathBuf,
    pub data: PathBuf,
    pub init: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn train(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let pairs = read_qa_jsonl(&args.data)?;
    let tcfg = TrainConfig {
        objective: Objective::parse(&cfg.objective)?,
        tied: cfg.tied,
        freeze: Freeze::parse(&cfg.freeze)?,
        shuffle_q: cfg.shuffle_q,
        shuffle_p: cfg.shuffle_p,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        lr: cfg.lr,
        warmup_steps: cfg.warmup_steps,
        weight_decay: cfg.weight_decay,
        seed: cfg.seed,
        stopgrad_literal: cfg.stopgrad_literal,
    };
    tcfg.validate()?;
    let init = match &args.init {
        Some(path) => DualEncoder::load(path)?,
        None => {
            let tmap = token_map(&corpus);
            let ecfg = EncoderConfig {
                dim: cfg.dim,
                max_len: cfg.max_len,
                use_positions: cfg.use_positions,
                vocab_size: tmap.n_ids(),
                tied: tcfg.tied,
            };
            DualEncoder::init(ecfg, cfg.seed)?
        }
    };
    let outcome = training::train(&tcfg, &corpus, &pairs, init)?;
    outcome.encoder.save(&args.out)?;
    outcome
        .optimizer
        .save(&sidecar(&args.out, "opt"), outcome.encoder.cfg())?;
    write_jsonl(&sidecar(&args.out, "log.jsonl"), &outcome.log)?;
    let final_loss = outcome.log.last().map_or(f64::NAN, |e| e.loss);
    println!(
        "trained {} steps on {} pairs ({}), final loss {:.6}, skipped {} batches",
        outcome.log.len(),
        pairs.len(),
        tcfg.objective.as_str(),
        final_loss,
        outcome.skipped
    );
    println!("encoder -> {}", args.out.display());
    Ok(())
}

pub fn qsft(
    cfg: &RunConfig,
    corpus_dir: &Path,
    data: &Path,
    encoder: &Path,
    index: &Path,
    out: &Path,
) -> Result<()> {
    let corpus = load_corpus(corpus_dir)?;
    let pairs = read_qa_jsonl(data)?;
    let de = DualEncoder::load(encoder)?;
    let idx = DenseIndex::load(index)?;
    let qcfg = QsftConfig {
        epochs: cfg.qsft_epochs,
        lr: cfg.qsft_lr,
        warmup_steps: cfg.qsft_warmup_steps,
        weight_decay: cfg.qsft_weight_decay,
        k: cfg.retrieve_k,
        seed: cfg.seed,
    };
    let outcome = qsft_train(&qcfg, &corpus, &pairs, de, &idx)?;
    outcome.encoder.save(out)?;
    outcome
        .optimizer
        .save(&sidecar(out, "opt"), outcome.encoder.cfg())?;
    write_jsonl(&sidecar(out, "log.jsonl"), &outcome.log)?;
    println!(
        "query-side fine-tuned on {} questions for {} epochs (top {} candidates), skipped {} with no relevant candidate",
        pairs.len(),
        qcfg.epochs,
        qcfg.k,
        outcome.skipped
    );
    println!("encoder -> {}", out.display());
    Ok(())
}

pub struct RetrieveArgs {
    pub index: PathBuf,
    pub encoder: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub questions: PathBuf,
    pub out: PathBuf,
}

pub fn retrieve(cfg: &RunConfig, args: &RetrieveArgs) -> Result<()> {
    let pairs = read_qa_jsonl(&args.questions)?;
    let k = cfg.retrieve_k;
    let mut runs = Vec::with_capacity(pairs.len());
    let kind = sniff_index_kind(&args.index)?;
    match kind {
        IndexKind::Sparse => {
            let index = InvertedIndex::load(&args.index)?;
            let scorer = scorer_from_cfg(cfg)?;
            for pair in &pairs {
                let cands = search_sparse(&pair.question.tokens, &index, k, scorer)?;
                runs.push(RunRecord {
                    qid: pair.question.id,
                    candidates: cands.entries().to_vec(),
                });
            }
        }
        IndexKind::Dense => {
            let enc_path = args
                .encoder
                .as_deref()
                .ok_or_else(|| anyhow!("dense retrieval requires --encoder FILE"))?;
            let corpus_dir = args.corpus.as_deref().ok_or_else(|| {
                anyhow!("dense retrieval requires --corpus DIR (the token map is rebuilt from the corpus vocabulary)")
            })?;
            let de = DualEncoder::load(enc_path)?;
            let index = DenseIndex::load(&args.index)?;
            if index.fingerprint() != de.passage_fingerprint() {
                bail!(
                    "index {} was built by a different passage encoder (fingerprint {:016x} vs {:016x}); rebuild it",
                    args.index.display(),
                    index.fingerprint(),
                    de.passage_fingerprint()
                );
            }
            let corpus = load_corpus(corpus_dir)?;
            let tmap = token_map(&corpus);
            if tmap.n_ids() != de.cfg().vocab_size {
                bail!(
                    "corpus vocabulary ({} ids) does not match the encoder ({} ids); was the encoder trained on this corpus?",
                    tmap.n_ids(),
                    de.cfg().vocab_size
                );
            }
            for pair in &pairs {
                let qe = de.encode_query(&pair.question, &tmap)?;
                let cands = retlab_core::index::search_dense(&index, &qe, k)?;
                runs.push(RunRecord {
                    qid: pair.question.id,
                    candidates: cands.entries().to_vec(),
                });
            }
        }
    }
    write_jsonl(&args.out, &runs)?;
    println!("{} runs (top {}) -> {}", runs.len(), k, args.out.display());
    Ok(())
}

pub fn eval(
    cfg: &RunConfig,
    runs_path: &Path,
    data: &Path,
    corpus_dir: &Path,
    out: Option<&Path>,
) -> Result<()> {
    let pairs = read_qa_jsonl(data)?;
    let records: Vec<RunRecord> = read_jsonl(runs_path)?;
    let mut by_qid: BTreeMap<u32, CandidateSet> = BTreeMap::new();
    for rec in records {
        let set = CandidateSet::from_ranked(rec.candidates)
            .with_context(|| format!("run for qid {}", rec.qid))?;
        if by_qid.insert(rec.qid, set).is_some() {
            bail!("duplicate run for qid {} in {}", rec.qid, runs_path.display());
        }
    }
    let mut runs = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let set = by_qid.get(&pair.question.id).cloned().ok_or_else(|| {
            anyhow!(
                "{} has no run for qid {} from {}",
                runs_path.display(),
                pair.question.id,
                data.display()
            )
        })?;
        runs.push(set);
    }
    let corpus = load_corpus(corpus_dir)?;
    let dataset = data
        .file_stem()
        .map_or_else(|| "dataset".to_string(), |s| s.to_string_lossy().into_owned());
    let result = recall_at_k(&pairs, &runs, &corpus, &cfg.ks, &dataset)?;
    let json = serde_json::to_string(&result.to_json())?;
    println!("{json}");
    eprint!("{}", result.table());
    if let Some(path) = out {
        fs::write(path, format!("{json}\n"))
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

pub fn trex_gen(
    cfg: &RunConfig,
    triples_path: &Path,
    corpus_dir: &Path,
    out_dir: &Path,
    er_subsets: bool,
) -> Result<()> {
    let triples = read_triples_tsv(triples_path)?;
    let templates = builtin_templates();
    let generated = generate_all(&triples, &templates)?;
    let n_generated = generated.len();
    let corpus = load_corpus(corpus_dir)?;
    let index = InvertedIndex::build(&corpus)?;
    let scorer = scorer_from_cfg(cfg)?;
    let assigned = assign_positives_and_negatives(generated, &corpus, &index, scorer)?;
    let spec = SplitSpec::new(cfg.train_ratio, cfg.dev_ratio, cfg.test_ratio, cfg.seed)?;
    let splits = split_trex(&assigned.pairs, &templates, &spec)?;
    fs::create_dir_all(out_dir)?;
    write_qa_jsonl(&out_dir.join("seen_train.jsonl"), &splits.seen_train)?;
    write_qa_jsonl(&out_dir.join("seen_dev.jsonl"), &splits.seen_dev)?;
    write_qa_jsonl(&out_dir.join("seen_test.jsonl"), &splits.seen_test)?;
    write_qa_jsonl(&out_dir.join("unseen_test.jsonl"), &splits.unseen_test)?;
    println!(
        "{} pairs from {} triples ({} dropped with no positive passage, {} without a hard negative)",
        assigned.pairs.len(),
        n_generated,
        assigned.dropped_no_positive,
        assigned.missing_hard_negative
    );
    println!(
        "seen train/dev/test = {}/{}/{}, unseen test = {} -> {}",
        splits.seen_train.len(),
        splits.seen_dev.len(),
        splits.seen_test.len(),
        splits.unseen_test.len(),
        out_dir.display()
    );
    if er_subsets {
        let er = build_er_subsets(&assigned.pairs, &splits.seen_train, cfg.er_cap, cfg.seed);
        for (name, subset) in ER_SUBSET_NAMES.iter().zip(&er.subsets) {
            write_qa_jsonl(&out_dir.join(format!("er_{name}.jsonl")), subset)?;
        }
        let shortfalls = serde_json::to_string_pretty(&er.shortfalls)?;
        fs::write(out_dir.join("er_shortfalls.json"), format!("{shortfalls}\n"))?;
        let sizes: Vec<String> = er.subsets.iter().map(|s| s.len().to_string()).collect();
        println!(
            "entity/relation subsets (cap {} per relation): {}",
            cfg.er_cap,
            sizes.join("/")
        );
        for s in &er.shortfalls {
            eprintln!(
                "note: subset {} relation {} wanted {} pairs, got {}",
                s.subset, s.relation, s.wanted, s.got
            );
        }
    }
    Ok(())
}

pub fn paq_prep(cfg: &RunConfig, records_path: &Path, out_dir: &Path) -> Result<()> {
    let records = read_paq_jsonl(records_path)?;
    let splits = paq_group_filter(
        &records,
        cfg.paq_min_q,
        cfg.paq_n_passages,
        cfg.paq_split,
        cfg.seed,
    )?;
    fs::create_dir_all(out_dir)?;
    write_qa_jsonl(&out_dir.join("paq_train.jsonl"), &splits.train)?;
    write_qa_jsonl(&out_dir.join("paq_dev.jsonl"), &splits.dev)?;
    write_qa_jsonl(&out_dir.join("paq_test.jsonl"), &splits.test)?;
    println!(
        "{} records -> {} kept passages, train/dev/test = {}/{}/{} -> {}",
        records.len(),
        splits.train.len() + splits.dev.len() + splits.test.len(),
        splits.train.len(),
        splits.dev.len(),
        splits.test.len(),
        out_dir.display()
    );
    Ok(())
}

pub fn synth(cfg: &RunConfig, out_dir: &Path, facts: usize, distractors: usize) -> Result<()> {
    let spec = SynthSpec {
        n_facts: facts,
        n_distractors: distractors,
        seed: cfg.seed,
        ..SynthSpec::default()
    };
    let data = synth::generate(&spec)?;
    fs::create_dir_all(out_dir)?;
    write_jsonl(&out_dir.join("docs.jsonl"), &data.documents)?;
    write_triples_tsv(&out_dir.join("triples.tsv"), &data.triples)?;
    println!(
        "{} documents ({} facts, {} distractors), {} triples -> {}",
        data.documents.len(),
        spec.n_facts,
        spec.n_distractors,
        data.triples.len(),
        out_dir.display()
    );
    Ok(())
}
