//! `retlab` — a seeded, single-core retrieval workbench.
//!
//! One binary with subcommands covering the full pipeline: chunk documents
//! into passages, build sparse/dense indexes, train a dual encoder, fine-tune
//! its query side against a frozen index, retrieve, and evaluate Recall@K.
//! Every command accepts `--config FILE` (plain-text sections of
//! `key = value`) and `--seed N`; flags override the file, the file overrides
//! built-in defaults, and the fully resolved configuration is echoed to
//! stderr before any work happens, so a run can always be reproduced.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "retlab",
    version,
    about = "Seeded retrieval workbench: passage corpora, sparse/dense indexes, dual-encoder training, Recall@K evaluation"
)]
struct Cli {
    /// Plain-text run configuration file (flags override its values).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Master seed for every derived random stream.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk documents into fixed-length passages and write a corpus directory.
    CorpusBuild {
        /// Documents as JSONL: {"id","title","text"} per line.
        #[arg(long, value_name = "FILE")]
        docs: PathBuf,
        /// Output corpus directory (passages.jsonl + meta.json).
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Passage length in body tokens.
        #[arg(long, value_name = "N")]
        passage_len: Option<usize>,
    },
    /// Build a sparse inverted index or a dense exhaustive index.
    IndexBuild {
        /// Corpus directory from corpus-build.
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
        /// Index kind: sparse or dense.
        #[arg(long, value_name = "KIND")]
        kind: String,
        /// Encoder checkpoint (dense only).
        #[arg(long, value_name = "FILE")]
        encoder: Option<PathBuf>,
        /// Output index file.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Train a dual encoder with in-batch negatives.
    Train {
        /// Corpus directory from corpus-build.
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
        /// Training pairs as QA JSONL (positives already assigned).
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Training objective: dpr, stopgrad, or flipped.
        #[arg(long, value_name = "NAME")]
        objective: Option<String>,
        /// Share one parameter set between the query and passage encoders.
        #[arg(long)]
        tied: bool,
        /// Freeze one side: fixQ or fixP.
        #[arg(long, value_name = "SIDE")]
        freeze: Option<String>,
        /// Shuffle the words of every question (seeded, once per epoch use).
        #[arg(long)]
        shuffle_q: bool,
        /// Shuffle the words of every passage body (seeded).
        #[arg(long)]
        shuffle_p: bool,
        /// Resume from an existing encoder checkpoint instead of seeded init.
        #[arg(long, value_name = "FILE")]
        init: Option<PathBuf>,
        /// Output encoder checkpoint (sidecars: .opt, .log.jsonl).
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Query-side fine-tuning against a frozen passage index.
    Qsft {
        /// Corpus directory from corpus-build.
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
        /// Fine-tuning questions as QA JSONL.
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Encoder checkpoint to start from.
        #[arg(long, value_name = "FILE")]
        encoder: PathBuf,
        /// Dense index built from the same encoder (fingerprint-checked).
        #[arg(long, value_name = "FILE")]
        index: PathBuf,
        /// Output encoder checkpoint (sidecars: .opt, .log.jsonl).
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Rank passages for every question and write a run file.
    Retrieve {
        /// Index file (kind is detected from the file header).
        #[arg(long, value_name = "FILE")]
        index: PathBuf,
        /// Encoder checkpoint (dense indexes only).
        #[arg(long, value_name = "FILE")]
        encoder: Option<PathBuf>,
        /// Corpus directory (dense indexes only; rebuilds the token map).
        #[arg(long, value_name = "DIR")]
        corpus: Option<PathBuf>,
        /// Questions as QA JSONL.
        #[arg(long, value_name = "FILE")]
        questions: PathBuf,
        /// Candidates to keep per question.
        #[arg(long, value_name = "N")]
        k: Option<usize>,
        /// Output run file: {"qid","candidates":[{"pid","score"},...]} per line.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Compute Recall@K for a run file against gold answers.
    Eval {
        /// Run file from retrieve.
        #[arg(long, value_name = "FILE")]
        runs: PathBuf,
        /// Gold QA JSONL (answer containment defines relevance).
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Corpus directory the runs refer to.
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
        /// Comma-separated cutoffs, strictly increasing.
        #[arg(long, value_name = "K1,K2,..")]
        ks: Option<String>,
        /// Also write the JSON result to this file.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Generate QA pairs from relation triples via the built-in templates.
    TrexGen {
        /// Triples as TSV: subject \t relation \t object.
        #[arg(long, value_name = "FILE")]
        triples: PathBuf,
        /// Corpus directory (positives and hard negatives are mined from it).
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
        /// Output directory for the split JSONL files.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Also emit the four entity/relation generalization subsets.
        #[arg(long)]
        er_subsets: bool,
    },
    /// Group generated questions by passage, filter, sample, and split.
    PaqPrep {
        /// Records as JSONL: {"question","answer","pid"} per line.
        #[arg(long, value_name = "FILE")]
        records: PathBuf,
        /// Minimum questions a passage needs to qualify.
        #[arg(long, value_name = "N")]
        min_q: Option<usize>,
        /// Number of qualifying passages to sample.
        #[arg(long, value_name = "N")]
        n_passages: Option<usize>,
        /// Train,dev,test ratios (must sum to 1).
        #[arg(long, value_name = "R,R,R")]
        split: Option<String>,
        /// Output directory for paq_{train,dev,test}.jsonl.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Generate a synthetic document collection with known single-fact answers.
    Synth {
        /// Output directory for docs.jsonl and triples.tsv.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Number of fact documents (one subject + relation + object each).
        #[arg(long, value_name = "N", default_value_t = 400)]
        facts: usize,
        /// Number of distractor documents containing no answer.
        #[arg(long, value_name = "N", default_value_t = 100)]
        distractors: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

/// Resolve the layered configuration, echo it, and dispatch.
fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.merge_file(path)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    match cli.command {
        Command::CorpusBuild {
            docs,
            out,
            passage_len,
        } => {
            if let Some(n) = passage_len {
                cfg.passage_len = n;
            }
            log_resolved(&cfg, "corpus-build");
            commands::corpus_build(&cfg, &docs, &out)
        }
        Command::IndexBuild {
            corpus,
            kind,
            encoder,
            out,
        } => {
            log_resolved(&cfg, "index-build");
            commands::index_build(&cfg, &corpus, &kind, encoder.as_deref(), &out)
        }
        Command::Train {
            corpus,
            data,
            objective,
            tied,
            freeze,
            shuffle_q,
            shuffle_p,
            init,
            out,
        } => {
            if let Some(o) = objective {
                cfg.objective = o;
            }
            if tied {
                cfg.tied = true;
            }
            if let Some(f) = freeze {
                cfg.freeze = f;
            }
            if shuffle_q {
                cfg.shuffle_q = true;
            }
            if shuffle_p {
                cfg.shuffle_p = true;
            }
            log_resolved(&cfg, "train");
            commands::train(
                &cfg,
                &commands::TrainArgs {
                    corpus,
                    data,
                    init,
                    out,
                },
            )
        }
        Command::Qsft {
            corpus,
            data,
            encoder,
            index,
            out,
        } => {
            log_resolved(&cfg, "qsft");
            commands::qsft(&cfg, &corpus, &data, &encoder, &index, &out)
        }
        Command::Retrieve {
            index,
            encoder,
            corpus,
            questions,
            k,
            out,
        } => {
            if let Some(k) = k {
                cfg.retrieve_k = k;
            }
            log_resolved(&cfg, "retrieve");
            commands::retrieve(
                &cfg,
                &commands::RetrieveArgs {
                    index,
                    encoder,
                    corpus,
                    questions,
                    out,
                },
            )
        }
        Command::Eval {
            runs,
            data,
            corpus,
            ks,
            out,
        } => {
            if let Some(ks) = ks {
                cfg.ks = config::parse_ks(&ks)?;
            }
            log_resolved(&cfg, "eval");
            commands::eval(&cfg, &runs, &data, &corpus, out.as_deref())
        }
        Command::TrexGen {
            triples,
            corpus,
            out,
            er_subsets,
        } => {
            log_resolved(&cfg, "trex-gen");
            commands::trex_gen(&cfg, &triples, &corpus, &out, er_subsets)
        }
        Command::PaqPrep {
            records,
            min_q,
            n_passages,
            split,
            out,
        } => {
            if let Some(n) = min_q {
                cfg.paq_min_q = n;
            }
            if let Some(n) = n_passages {
                cfg.paq_n_passages = n;
            }
            if let Some(s) = split {
                cfg.paq_split = config::parse_split3(&s)?;
            }
            log_resolved(&cfg, "paq-prep");
            commands::paq_prep(&cfg, &records, &out)
        }
        Command::Synth {
            out,
            facts,
            distractors,
        } => {
            log_resolved(&cfg, "synth");
            commands::synth(&cfg, &out, facts, distractors)
        }
    }
}

/// Echo the fully resolved configuration so every run is reproducible from
/// its log alone.
fn log_resolved(cfg: &RunConfig, command: &str) {
    eprintln!("# resolved configuration ({command})");
    for line in cfg.dump().lines() {
        eprintln!("# {line}");
    }
}
