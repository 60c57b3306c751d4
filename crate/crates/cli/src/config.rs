//! Plain-text run configuration: INI-style sections of `key = value` lines.
//!
//! Precedence is defaults < config file < command-line flags. Unknown
//! sections or keys are rejected (a typo must never silently fall back to a
//! default), and every command logs the fully resolved configuration to the
//! diagnostic stream before doing any work.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

use retlab_core::corpus::DEFAULT_PASSAGE_LEN;
use retlab_core::datasets::{ER_CAP, PAQ_MIN_Q, PAQ_SPLIT};
use retlab_core::encoder::{DEFAULT_DIM, DEFAULT_MAX_LEN};
use retlab_core::sparse::{BM25_B, BM25_K1};
use retlab_core::training::{
    DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS, DEFAULT_LR, DEFAULT_QSFT_EPOCHS, DEFAULT_QSFT_LR,
    DEFAULT_QSFT_WARMUP, DEFAULT_RETRIEVE_K, DEFAULT_WARMUP, DEFAULT_WEIGHT_DECAY,
};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [corpus]
    pub passage_len: usize,
    // [encoder]
    pub dim: usize,
    pub max_len: usize,
    pub use_positions: bool,
    pub tied: bool,
    // [sparse]
    pub k1: f64,
    pub b: f64,
    pub scorer: String,
    // [train]
    pub objective: String,
    pub freeze: String,
    pub shuffle_q: bool,
    pub shuffle_p: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub stopgrad_literal: bool,
    // [qsft]
    pub qsft_epochs: usize,
    pub qsft_lr: f64,
    pub qsft_warmup_steps: usize,
    pub qsft_weight_decay: f64,
    pub retrieve_k: usize,
    // [eval]
    pub ks: Vec<usize>,
    // [data]
    pub train_ratio: f64,
    pub dev_ratio: f64,
    pub test_ratio: f64,
    pub er_cap: usize,
    pub paq_min_q: usize,
    pub paq_n_passages: usize,
    pub paq_split: (f64, f64, f64),
    // [run]
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            passage_len: DEFAULT_PASSAGE_LEN,
            dim: DEFAULT_DIM,
            max_len: DEFAULT_MAX_LEN,
            use_positions: true,
            tied: false,
            k1: BM25_K1,
            b: BM25_B,
            scorer: "bm25".to_string(),
            objective: "dpr".to_string(),
            freeze: "none".to_string(),
            shuffle_q: false,
            shuffle_p: false,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: DEFAULT_EPOCHS,
            lr: DEFAULT_LR,
            warmup_steps: DEFAULT_WARMUP,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            stopgrad_literal: false,
            qsft_epochs: DEFAULT_QSFT_EPOCHS,
            qsft_lr: DEFAULT_QSFT_LR,
            qsft_warmup_steps: DEFAULT_QSFT_WARMUP,
            qsft_weight_decay: 0.0,
            retrieve_k: DEFAULT_RETRIEVE_K,
            ks: retlab_core::eval::DEFAULT_KS.to_vec(),
            train_ratio: 0.8,
            dev_ratio: 0.1,
            test_ratio: 0.1,
            er_cap: ER_CAP,
            paq_min_q: PAQ_MIN_Q,
            paq_n_passages: 100,
            paq_split: PAQ_SPLIT,
            seed: 0,
        }
    }
}

fn parse_bool(section: &str, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => bail!("[{section}] {key}: expected true or false, got {v:?}"),
    }
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| anyhow::anyhow!("[{section}] {key}: cannot parse {v:?} ({e})"))
}

pub fn parse_ks(v: &str) -> Result<Vec<usize>> {
    let ks: Vec<usize> = v
        .split(',')
        .map(|s| s.trim().parse().context("K values must be integers"))
        .collect::<Result<_>>()?;
    if ks.is_empty() || ks.windows(2).any(|w| w[0] >= w[1]) || ks[0] == 0 {
        bail!("ks must be a strictly increasing list of positive integers, got {v:?}");
    }
    Ok(ks)
}

pub fn parse_split3(v: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = v
        .split(',')
        .map(|s| s.trim().parse().context("split ratios must be numbers"))
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        bail!("expected three comma-separated ratios, got {v:?}");
    }
    Ok((parts[0], parts[1], parts[2]))
}

impl RunConfig {
    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        match (section, key) {
            ("corpus", "passage_len") => self.passage_len = parse_num(section, key, value)?,
            ("encoder", "dim") => self.dim = parse_num(section, key, value)?,
            ("encoder", "max_len") => self.max_len = parse_num(section, key, value)?,
            ("encoder", "use_positions") => self.use_positions = parse_bool(section, key, value)?,
            ("encoder", "tied") => self.tied = parse_bool(section, key, value)?,
            ("sparse", "k1") => self.k1 = parse_num(section, key, value)?,
            ("sparse", "b") => self.b = parse_num(section, key, value)?,
            ("sparse", "scorer") => {
                if value != "bm25" && value != "tfidf" {
                    bail!("[sparse] scorer: expected bm25 or tfidf, got {value:?}");
                }
                self.scorer = value.to_string();
            }
            ("train", "objective") => self.objective = value.to_string(),
            ("train", "freeze") => self.freeze = value.to_string(),
            ("train", "shuffle_q") => self.shuffle_q = parse_bool(section, key, value)?,
            ("train", "shuffle_p") => self.shuffle_p = parse_bool(section, key, value)?,
            ("train", "batch_size") => self.batch_size = parse_num(section, key, value)?,
            ("train", "epochs") => self.epochs = parse_num(section, key, value)?,
            ("train", "lr") => self.lr = parse_num(section, key, value)?,
            ("train", "warmup_steps") => self.warmup_steps = parse_num(section, key, value)?,
            ("train", "weight_decay") => self.weight_decay = parse_num(section, key, value)?,
            ("train", "stopgrad_literal") => {
                self.stopgrad_literal = parse_bool(section, key, value)?
            }
            ("qsft", "epochs") => self.qsft_epochs = parse_num(section, key, value)?,
            ("qsft", "lr") => self.qsft_lr = parse_num(section, key, value)?,
            ("qsft", "warmup_steps") => self.qsft_warmup_steps = parse_num(section, key, value)?,
            ("qsft", "weight_decay") => self.qsft_weight_decay = parse_num(section, key, value)?,
            ("qsft", "retrieve_k") => self.retrieve_k = parse_num(section, key, value)?,
            ("eval", "ks") => self.ks = parse_ks(value)?,
            ("data", "train_ratio") => self.train_ratio = parse_num(section, key, value)?,
            ("data", "dev_ratio") => self.dev_ratio = parse_num(section, key, value)?,
            ("data", "test_ratio") => self.test_ratio = parse_num(section, key, value)?,
            ("data", "er_cap") => self.er_cap = parse_num(section, key, value)?,
            ("data", "paq_min_q") => self.paq_min_q = parse_num(section, key, value)?,
            ("data", "paq_n_passages") => self.paq_n_passages = parse_num(section, key, value)?,
            ("data", "paq_split") => self.paq_split = parse_split3(value)?,
            ("run", "seed") => self.seed = parse_num(section, key, value)?,
            _ => bail!("unknown configuration key [{section}] {key}"),
        }
        Ok(())
    }

    /// Parse a config file over `self` (so defaults fill anything the file
    /// omits).
    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!(
                    "{}:{}: expected `key = value` or `[section]`, got {line:?}",
                    path.display(),
                    lineno + 1
                );
            };
            self.apply(&section, key.trim(), value.trim())
                .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        }
        Ok(())
    }

    /// The fully resolved configuration in the same file format, suitable
    /// for logging and for reuse as a config file.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[corpus]");
        let _ = writeln!(s, "passage_len = {}", self.passage_len);
        let _ = writeln!(s, "[encoder]");
        let _ = writeln!(s, "dim = {}", self.dim);
        let _ = writeln!(s, "max_len = {}", self.max_len);
        let _ = writeln!(s, "use_positions = {}", self.use_positions);
        let _ = writeln!(s, "tied = {}", self.tied);
        let _ = writeln!(s, "[sparse]");
        let _ = writeln!(s, "k1 = {}", self.k1);
        let _ = writeln!(s, "b = {}", self.b);
        let _ = writeln!(s, "scorer = {}", self.scorer);
        let _ = writeln!(s, "[train]");
        let _ = writeln!(s, "objective = {}", self.objective);
        let _ = writeln!(s, "freeze = {}", self.freeze);
        let _ = writeln!(s, "shuffle_q = {}", self.shuffle_q);
        let _ = writeln!(s, "shuffle_p = {}", self.shuffle_p);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "warmup_steps = {}", self.warmup_steps);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "stopgrad_literal = {}", self.stopgrad_literal);
        let _ = writeln!(s, "[qsft]");
        let _ = writeln!(s, "epochs = {}", self.qsft_epochs);
        let _ = writeln!(s, "lr = {}", self.qsft_lr);
        let _ = writeln!(s, "warmup_steps = {}", self.qsft_warmup_steps);
        let _ = writeln!(s, "weight_decay = {}", self.qsft_weight_decay);
        let _ = writeln!(s, "retrieve_k = {}", self.retrieve_k);
        let _ = writeln!(s, "[eval]");
        let ks: Vec<String> = self.ks.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "ks = {}", ks.join(","));
        let _ = writeln!(s, "[data]");
        let _ = writeln!(s, "train_ratio = {}", self.train_ratio);
        let _ = writeln!(s, "dev_ratio = {}", self.dev_ratio);
        let _ = writeln!(s, "test_ratio = {}", self.test_ratio);
        let _ = writeln!(s, "er_cap = {}", self.er_cap);
        let _ = writeln!(s, "paq_min_q = {}", self.paq_min_q);
        let _ = writeln!(s, "paq_n_passages = {}", self.paq_n_passages);
        let _ = writeln!(
            s,
            "paq_split = {},{},{}",
            self.paq_split.0, self.paq_split.1, self.paq_split.2
        );
        let _ = writeln!(s, "[run]");
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}
