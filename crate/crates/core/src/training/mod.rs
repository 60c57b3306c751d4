//! Training: the contrastive objectives (in-batch negatives with BM25 hard
//! negatives, the stop-gradient score variant, the flipped passage-centric
//! objective, and query-side fine-tuning), the optimizer loop, encoder
//! freezing, and the gradient plumbing connecting score-level gradients to
//! encoder parameters.
//!
//! Training is single-threaded and completely deterministic for a fixed
//! seed: batch order, shuffling permutations, and all summation orders are
//! fixed, so identical runs produce bitwise-identical parameters.

pub mod loss;
pub mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{passage_input_sequence, tokenize, Corpus, QaPair};
use crate::datasets::shuffle_words;
use crate::encoder::{
    backprop, encode_with_cache, fnv1a64, DualEncoder, DualParams, EncodeCache, EncoderParams,
    TokenMap,
};
use crate::error::{Error, Result};
use crate::eval::is_relevant;
use crate::index::{search_dense, DenseIndex};
use crate::linalg::{axpy, dot};
use crate::sparse::Vocabulary;

use loss::{loss_dpr, loss_flipped, loss_qsft, LossGrad};
use optim::{adam_step, lr_at, AdamConfig, MomentStorage, OptimizerState};

/// Which contrastive loss drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Dpr,
    Stopgrad,
    Flipped,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Dpr => "dpr",
            Objective::Stopgrad => "stopgrad",
            Objective::Flipped => "flipped",
        }
    }

    pub fn parse(s: &str) -> Result<Objective> {
        match s {
            "dpr" => Ok(Objective::Dpr),
            "stopgrad" => Ok(Objective::Stopgrad),
            "flipped" => Ok(Objective::Flipped),
            other => Err(Error::InvalidArg(format!(
                "unknown objective {other:?} (expected dpr|stopgrad|flipped)"
            ))),
        }
    }
}

/// Which encoder side, if any, is frozen during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Freeze {
    None,
    FixQ,
    FixP,
}

impl Freeze {
    pub fn as_str(self) -> &'static str {
        match self {
            Freeze::None => "none",
            Freeze::FixQ => "fixQ",
            Freeze::FixP => "fixP",
        }
    }

    pub fn parse(s: &str) -> Result<Freeze> {
        match s {
            "none" => Ok(Freeze::None),
            "fixQ" | "fixq" => Ok(Freeze::FixQ),
            "fixP" | "fixp" => Ok(Freeze::FixP),
            other => Err(Error::InvalidArg(format!(
                "unknown freeze mode {other:?} (expected none|fixQ|fixP)"
            ))),
        }
    }
}

/// Desk-scale training defaults. The published full-scale settings are kept
/// alongside in [`fullscale`] for reference.
pub const DEFAULT_BATCH_SIZE: usize = 8;
pub const DEFAULT_EPOCHS: usize = 20;
pub const DEFAULT_LR: f64 = 0.02;
pub const DEFAULT_WARMUP: usize = 100;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.005;
pub const DEFAULT_QSFT_EPOCHS: usize = 2;
pub const DEFAULT_QSFT_LR: f64 = 1e-3;
pub const DEFAULT_QSFT_WARMUP: usize = 100;
pub const DEFAULT_RETRIEVE_K: usize = 100;

/// Documented full-scale hyperparameters (not used by the desk-scale
/// defaults; retained for configuration reference).
pub mod fullscale {
    /// Pre-training from scratch: 40 epochs at batch size 128.
    pub const PT_EPOCHS: usize = 40;
    pub const PT_BATCH_SIZE: usize = 128;
    /// Re-training: 20 epochs at batch size 24.
    pub const RT_EPOCHS: usize = 20;
    pub const RT_BATCH_SIZE: usize = 24;
    /// Fine-tuning an already-trained retriever: 10 epochs at batch size 24.
    pub const FT_EPOCHS: usize = 10;
    pub const FT_BATCH_SIZE: usize = 24;
    /// Query-side fine-tuning: 2 epochs at batch size 24.
    pub const QSFT_EPOCHS: usize = 2;
    pub const QSFT_BATCH_SIZE: usize = 24;
    pub const LEARNING_RATE: f64 = 2e-5;
    pub const WARMUP_STEPS: usize = 1237;
    pub const QSFT_WARMUP_STEPS: usize = 100;
    pub const DOCS_RETRIEVED: usize = 100;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub tied: bool,
    pub freeze: Freeze,
    pub shuffle_q: bool,
    pub shuffle_p: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Decoupled weight decay. Unnormalized dot-product scores let a few
    /// passage vectors inflate their norms and dominate every query
    /// ("hubs"); decay keeps ranking driven by alignment instead.
    pub weight_decay: f64,
    pub seed: u64,
    /// Interpret the stop-gradient construction literally — minimize the
    /// mean detached positive-pair score itself rather than substituting it
    /// into the contrastive loss. Kept for comparison; see `Objective`.
    pub stopgrad_literal: bool,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            objective: Objective::Dpr,
            tied: false,
            freeze: Freeze::None,
            shuffle_q: false,
            shuffle_p: false,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: DEFAULT_EPOCHS,
            lr: DEFAULT_LR,
            warmup_steps: DEFAULT_WARMUP,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            seed: 0,
            stopgrad_literal: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::InvalidArg("batch_size must be at least 1".into()));
        }
        if self.tied && self.freeze != Freeze::None {
            return Err(Error::ConfigContradiction(format!(
                "cannot freeze {} of a tied encoder: both sides share one parameter storage",
                self.freeze.as_str()
            )));
        }
        if self.objective == Objective::Flipped && self.batch_size < 2 {
            return Err(Error::ConfigContradiction(
                "the flipped objective needs in-batch negative questions; batch_size must be >= 2"
                    .into(),
            ));
        }
        if self.stopgrad_literal && self.objective != Objective::Stopgrad {
            return Err(Error::ConfigContradiction(
                "stopgrad_literal only applies to the stopgrad objective".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidArg("lr must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidArg(
                "weight_decay must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    fn needs_hard_negatives(&self) -> bool {
        match self.objective {
            Objective::Dpr => true,
            Objective::Stopgrad => !self.stopgrad_literal,
            Objective::Flipped => false,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub skipped: u64,
}

/// Per-side parameter gradients for one batch. Both sides are always
/// populated; freezing decides what gets applied.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub query: EncoderParams,
    pub passage: EncoderParams,
}

impl GradientSet {
    pub fn zeros(cfg: &crate::encoder::EncoderConfig) -> GradientSet {
        GradientSet {
            query: EncoderParams::zeros(cfg),
            passage: EncoderParams::zeros(cfg),
        }
    }
}

fn add_params(acc: &mut EncoderParams, other: &EncoderParams) {
    for block in crate::encoder::PARAM_BLOCKS {
        let a = acc.block_mut(block);
        let b = other.block(block);
        for i in 0..a.len() {
            a[i] += b[i];
        }
    }
}

/// A featurized batch: token-id sequences for the questions and for the
/// passage columns (positives followed by hard negatives for the
/// question-centric objectives; positives only for flipped and the literal
/// stop-gradient form).
#[derive(Debug, Clone)]
pub struct BatchData {
    pub queries: Vec<Vec<u32>>,
    pub passages: Vec<Vec<u32>>,
}

fn encode_all(
    params: &EncoderParams,
    cfg: &crate::encoder::EncoderConfig,
    seqs: &[Vec<u32>],
) -> Result<(Vec<Vec<f64>>, Vec<EncodeCache>)> {
    let mut outs = Vec::with_capacity(seqs.len());
    let mut caches = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let (out, cache) = encode_with_cache(params, cfg, seq)?;
        outs.push(out);
        caches.push(cache);
    }
    Ok((outs, caches))
}

/// Score matrix, loss, and per-embedding gradients for one batch, fully
/// chained into per-parameter gradients for both encoder sides.
pub fn batch_loss_and_grads(
    de: &DualEncoder,
    objective: Objective,
    stopgrad_literal: bool,
    batch: &BatchData,
) -> Result<(f64, GradientSet)> {
    let cfg = de.cfg();
    let b = batch.queries.len();
    if b == 0 {
        return Err(Error::InvalidArg("empty batch".into()));
    }
    let (qe, qcache) = encode_all(de.query_params(), cfg, &batch.queries)?;
    let (pe, pcache) = encode_all(de.passage_params(), cfg, &batch.passages)?;
    let mut dqe = vec![vec![0.0; cfg.dim]; qe.len()];
    let mut dpe = vec![vec![0.0; cfg.dim]; pe.len()];

    let loss = match objective {
        Objective::Dpr | Objective::Stopgrad if !(objective == Objective::Stopgrad && stopgrad_literal) => {
            if batch.passages.len() != 2 * b {
                return Err(Error::InvalidArg(format!(
                    "expected {b} positives + {b} hard negatives, got {} passages",
                    batch.passages.len()
                )));
            }
            let scores: Vec<Vec<f64>> = qe
                .iter()
                .map(|q| pe.iter().map(|p| dot(q, p)).collect())
                .collect();
            let LossGrad { loss, dscores } = loss_dpr(&scores)?;
            // The stop-gradient score ½(q_detached·p) + ½(q·p_detached) has
            // the same forward value but feeds each side only half the
            // ordinary gradient.
            let gain = if objective == Objective::Stopgrad { 0.5 } else { 1.0 };
            for i in 0..b {
                for j in 0..pe.len() {
                    let d = dscores[i][j] * gain;
                    axpy(d, &pe[j], &mut dqe[i]);
                    axpy(d, &qe[i], &mut dpe[j]);
                }
            }
            loss
        }
        Objective::Stopgrad => {
            // Literal reading: minimize the mean detached positive-pair
            // score. Forward equals the plain mean positive score.
            if batch.passages.len() != b {
                return Err(Error::InvalidArg(format!(
                    "literal stopgrad expects one positive per question, got {} passages",
                    batch.passages.len()
                )));
            }
            let mut loss = 0.0;
            for i in 0..b {
                loss += dot(&qe[i], &pe[i]);
            }
            loss /= b as f64;
            let gain = 0.5 / b as f64;
            for i in 0..b {
                axpy(gain, &pe[i], &mut dqe[i]);
                axpy(gain, &qe[i], &mut dpe[i]);
            }
            loss
        }
        Objective::Flipped => {
            if batch.passages.len() != b {
                return Err(Error::InvalidArg(format!(
                    "flipped expects one positive passage per question, got {} passages",
                    batch.passages.len()
                )));
            }
            let scores: Vec<Vec<f64>> = pe
                .iter()
                .map(|p| qe.iter().map(|q| dot(p, q)).collect())
                .collect();
            let LossGrad { loss, dscores } = loss_flipped(&scores)?;
            for i in 0..b {
                for j in 0..b {
                    let d = dscores[i][j];
                    axpy(d, &qe[j], &mut dpe[i]);
                    axpy(d, &pe[i], &mut dqe[j]);
                }
            }
            loss
        }
        Objective::Dpr => unreachable!("guarded above"),
    };

    let mut gs = GradientSet::zeros(cfg);
    for (i, cache) in qcache.iter().enumerate() {
        backprop(de.query_params(), cfg, cache, &dqe[i], &mut gs.query);
    }
    for (j, cache) in pcache.iter().enumerate() {
        backprop(de.passage_params(), cfg, cache, &dpe[j], &mut gs.passage);
    }
    Ok((loss, gs))
}

/// Forward-only loss, for finite-difference probes of the dpr and flipped
/// objectives (and the forward value of stopgrad, which coincides with dpr).
pub fn batch_loss(de: &DualEncoder, objective: Objective, batch: &BatchData) -> Result<f64> {
    batch_loss_and_grads(de, objective, false, batch).map(|(l, _)| l)
}

/// Value and score-level gradients of the stop-gradient score
/// S(q, p) = ½(q_detached · p) + ½(q · p_detached).
#[derive(Debug, Clone, PartialEq)]
pub struct StopgradScore {
    pub value: f64,
    /// ∂S/∂q — flows only through the non-detached ½(q · p_detached) term.
    pub dq: Vec<f64>,
    /// ∂S/∂p — flows only through the non-detached ½(q_detached · p) term.
    pub dp: Vec<f64>,
}

/// The stop-gradient score. The forward value equals the plain inner
/// product exactly (both halves are the same product, and it is computed
/// once). Backward, each operand receives gradient only through the term
/// where it is live; the detached branches contribute exactly zero, so
/// ∂S/∂q = ½p and ∂S/∂p = ½q.
pub fn score_stopgrad(qe: &[f64], pe: &[f64]) -> Result<StopgradScore> {
    if qe.len() != pe.len() {
        return Err(Error::DimMismatch {
            expected: qe.len(),
            got: pe.len(),
        });
    }
    let value = dot(qe, pe);
    let dq: Vec<f64> = pe.iter().map(|x| 0.5 * x).collect();
    let dp: Vec<f64> = qe.iter().map(|x| 0.5 * x).collect();
    Ok(StopgradScore { value, dq, dp })
}

/// Detachment-aware forward pass for the stop-gradient score: detached
/// operands are taken from `frozen` while `live` carries the perturbation.
/// At `live == frozen` this equals the ordinary forward loss; differentiating
/// it with respect to `live` yields exactly the halved stop-gradient
/// gradients.
pub fn stopgrad_detached_loss(
    live: &DualEncoder,
    frozen: &DualEncoder,
    stopgrad_literal: bool,
    batch: &BatchData,
) -> Result<f64> {
    let cfg = live.cfg();
    let b = batch.queries.len();
    let (qe, _) = encode_all(live.query_params(), cfg, &batch.queries)?;
    let (pe, _) = encode_all(live.passage_params(), cfg, &batch.passages)?;
    let (qe_d, _) = encode_all(frozen.query_params(), cfg, &batch.queries)?;
    let (pe_d, _) = encode_all(frozen.passage_params(), cfg, &batch.passages)?;
    if stopgrad_literal {
        let mut loss = 0.0;
        for i in 0..b {
            loss += 0.5 * dot(&qe_d[i], &pe[i]) + 0.5 * dot(&qe[i], &pe_d[i]);
        }
        return Ok(loss / b as f64);
    }
    let scores: Vec<Vec<f64>> = (0..b)
        .map(|i| {
            (0..pe.len())
                .map(|j| 0.5 * dot(&qe_d[i], &pe[j]) + 0.5 * dot(&qe[i], &pe_d[j]))
                .collect()
        })
        .collect();
    loss_dpr(&scores).map(|lg| lg.loss)
}

fn stream_rng(seed: u64, purpose: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a64(purpose.as_bytes()));
    rng
}

fn validate_pairs(cfg: &TrainConfig, corpus: &Corpus, pairs: &[QaPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::InvalidArg("no training pairs".into()));
    }
    let missing_pos: Vec<u32> = pairs
        .iter()
        .filter(|p| p.positive_passage.is_none())
        .map(|p| p.question.id)
        .collect();
    if !missing_pos.is_empty() {
        let count = missing_pos.len();
        return Err(Error::MissingPositives {
            count,
            first: missing_pos.into_iter().take(8).collect(),
        });
    }
    if cfg.needs_hard_negatives() {
        let missing_hn: Vec<u32> = pairs
            .iter()
            .filter(|p| p.hard_negatives.is_empty())
            .map(|p| p.question.id)
            .collect();
        if !missing_hn.is_empty() {
            let count = missing_hn.len();
            return Err(Error::MissingHardNegatives {
                count,
                first: missing_hn.into_iter().take(8).collect(),
            });
        }
    }
    for p in pairs {
        for pid in p.positive_passage.iter().chain(p.hard_negatives.iter()) {
            if *pid as usize >= corpus.len() {
                return Err(Error::InvalidArg(format!(
                    "question {} references passage {pid}, but the corpus has {} passages",
                    p.question.id,
                    corpus.len()
                )));
            }
        }
    }
    Ok(())
}

fn passage_ids_for(
    corpus: &Corpus,
    pid: u32,
    tmap: &TokenMap,
    shuffle_rng: Option<&mut ChaCha8Rng>,
) -> Vec<u32> {
    let p = corpus.passage(pid);
    if let Some(rng) = shuffle_rng {
        let mut body = p.body.clone();
        body.shuffle(rng);
        let mut seq = p.title.clone();
        seq.push(crate::corpus::Token::sep());
        seq.extend(body);
        tmap.ids(&seq)
    } else {
        tmap.ids(&passage_input_sequence(p))
    }
}

fn assemble_batch(
    cfg: &TrainConfig,
    corpus: &Corpus,
    pairs: &[QaPair],
    chunk: &[usize],
    tmap: &TokenMap,
    sq_rng: &mut ChaCha8Rng,
    sp_rng: &mut ChaCha8Rng,
) -> BatchData {
    let mut queries = Vec::with_capacity(chunk.len());
    for &i in chunk {
        let pair = &pairs[i];
        let ids = if cfg.shuffle_q {
            let text = shuffle_words(&pair.question.text, sq_rng);
            tmap.ids(&tokenize(&text))
        } else {
            tmap.ids(&pair.question.tokens)
        };
        queries.push(ids);
    }
    let with_hard_negatives =
        !matches!(cfg.objective, Objective::Flipped) && !cfg.stopgrad_literal;
    let mut passages = Vec::with_capacity(if with_hard_negatives {
        2 * chunk.len()
    } else {
        chunk.len()
    });
    for &i in chunk {
        let pid = pairs[i].positive_passage.expect("validated");
        let rng = cfg.shuffle_p.then_some(&mut *sp_rng);
        passages.push(passage_ids_for(corpus, pid, tmap, rng));
    }
    if with_hard_negatives {
        for &i in chunk {
            let pid = pairs[i].hard_negatives[0];
            let rng = cfg.shuffle_p.then_some(&mut *sp_rng);
            passages.push(passage_ids_for(corpus, pid, tmap, rng));
        }
    }
    BatchData { queries, passages }
}

fn apply_update(
    de: &mut DualEncoder,
    gs: &GradientSet,
    opt: &mut OptimizerState,
    freeze: Freeze,
) {
    let OptimizerState {
        adam,
        step,
        moments,
    } = opt;
    match (de.params_mut(), moments) {
        (DualParams::Tied(params), MomentStorage::Tied(pm)) => {
            // Both paths flow into the single storage: sum the gradients.
            let mut total = gs.query.clone();
            add_params(&mut total, &gs.passage);
            adam_step(params, &total, pm, adam, *step);
        }
        (
            DualParams::Split { query, passage },
            MomentStorage::Split {
                query: mq,
                passage: mp,
            },
        ) => {
            if freeze != Freeze::FixQ {
                adam_step(query, &gs.query, mq, adam, *step);
            }
            if freeze != Freeze::FixP {
                adam_step(passage, &gs.passage, mp, adam, *step);
            }
        }
        _ => unreachable!("moment storage always mirrors parameter storage"),
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub encoder: DualEncoder,
    pub optimizer: OptimizerState,
    pub log: Vec<TrainLogEntry>,
    pub skipped: u64,
}

/// Run the configured objective over the pairs for `cfg.epochs` epochs.
/// Every pair must carry a positive passage; the question-centric
/// objectives additionally require a mined hard negative.
pub fn train(
    cfg: &TrainConfig,
    corpus: &Corpus,
    pairs: &[QaPair],
    init: DualEncoder,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.tied != init.is_tied() {
        return Err(Error::ConfigContradiction(format!(
            "config says tied={} but the encoder is {}",
            cfg.tied,
            if init.is_tied() { "tied" } else { "split" }
        )));
    }
    validate_pairs(cfg, corpus, pairs)?;
    let tmap = TokenMap::build(&Vocabulary::build(corpus));
    if tmap.n_ids() != init.cfg().vocab_size {
        return Err(Error::VocabMismatch {
            expected: init.cfg().vocab_size,
            got: tmap.n_ids(),
        });
    }

    let mut de = init;
    let mut opt = OptimizerState::new(
        AdamConfig::new(cfg.lr, cfg.warmup_steps as u64).with_weight_decay(cfg.weight_decay),
        de.cfg(),
    );
    let mut order_rng = stream_rng(cfg.seed, "train:order");
    let mut sq_rng = stream_rng(cfg.seed, "train:shuffleq");
    let mut sp_rng = stream_rng(cfg.seed, "train:shufflep");
    let mut log = Vec::new();
    let mut skipped = 0u64;

    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.objective == Objective::Flipped && chunk.len() < 2 {
                // A lone trailing example has no in-batch negative question.
                skipped += 1;
                continue;
            }
            let batch = assemble_batch(cfg, corpus, pairs, chunk, &tmap, &mut sq_rng, &mut sp_rng);
            let (loss, gs) =
                batch_loss_and_grads(&de, cfg.objective, cfg.stopgrad_literal, &batch)?;
            opt.step += 1;
            apply_update(&mut de, &gs, &mut opt, cfg.freeze);
            log.push(TrainLogEntry {
                step: opt.step,
                loss,
                lr: lr_at(&opt.adam, opt.step),
                skipped,
            });
        }
    }
    Ok(TrainOutcome {
        encoder: de,
        optimizer: opt,
        log,
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QsftConfig {
    pub epochs: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Decoupled weight decay; defaults to none so fine-tuning stays close
    /// to the trained query encoder.
    pub weight_decay: f64,
    /// Candidates retrieved per question (the "docs retrieved" knob).
    pub k: usize,
    pub seed: u64,
}

impl Default for QsftConfig {
    fn default() -> QsftConfig {
        QsftConfig {
            epochs: DEFAULT_QSFT_EPOCHS,
            lr: DEFAULT_QSFT_LR,
            warmup_steps: DEFAULT_QSFT_WARMUP,
            weight_decay: 0.0,
            k: DEFAULT_RETRIEVE_K,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct QsftOutcome {
    pub encoder: DualEncoder,
    pub optimizer: OptimizerState,
    pub log: Vec<TrainLogEntry>,
    /// Examples whose top-K retrieval contained no relevant passage (their
    /// loss is undefined, −log 0, so they are skipped).
    pub skipped: u64,
}

/// Query-side fine-tuning: per example, retrieve top-K from the frozen
/// index, judge relevance by answer containment, and update only the query
/// encoder with the candidate-reinforcement loss. The index must carry the
/// fingerprint of this encoder's passage side. For a split encoder the
/// passage parameters are bitwise untouched; for a tied encoder the single
/// shared storage trains as the query encoder while the frozen index keeps
/// retrieval fixed.
pub fn qsft_train(
    cfg: &QsftConfig,
    corpus: &Corpus,
    pairs: &[QaPair],
    init: DualEncoder,
    index: &DenseIndex,
) -> Result<QsftOutcome> {
    if cfg.k < 1 {
        return Err(Error::InvalidArg("retrieval K must be at least 1".into()));
    }
    if index.fingerprint() != init.passage_fingerprint() {
        return Err(Error::FingerprintMismatch {
            index: index.fingerprint(),
            encoder: init.passage_fingerprint(),
        });
    }
    let tmap = TokenMap::build(&Vocabulary::build(corpus));
    if tmap.n_ids() != init.cfg().vocab_size {
        return Err(Error::VocabMismatch {
            expected: init.cfg().vocab_size,
            got: tmap.n_ids(),
        });
    }

    let mut de = init;
    let mut opt = OptimizerState::new(
        AdamConfig::new(cfg.lr, cfg.warmup_steps as u64).with_weight_decay(cfg.weight_decay),
        de.cfg(),
    );
    let mut order_rng = stream_rng(cfg.seed, "qsft:order");
    let mut log = Vec::new();
    let mut skipped = 0u64;
    let k = cfg.k.min(index.len());

    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut order_rng);
        for &i in &order {
            let pair = &pairs[i];
            let ids = tmap.ids(&pair.question.tokens);
            let (qe, cache) = encode_with_cache(de.query_params(), de.cfg(), &ids)?;
            let candidates = search_dense(index, &qe, k)?;
            let scores: Vec<f64> = candidates.entries().iter().map(|c| c.score).collect();
            let relevant: Vec<bool> = candidates
                .entries()
                .iter()
                .map(|c| is_relevant(corpus.passage(c.pid), &pair.answers))
                .collect();
            let Some(qg) = loss_qsft(&scores, &relevant)? else {
                skipped += 1;
                continue;
            };
            let mut dqe = vec![0.0; de.cfg().dim];
            for (j, c) in candidates.entries().iter().enumerate() {
                // Rows are stored in passage-id order.
                let row = index.row(c.pid as usize);
                let d = qg.dscores[j];
                for (kk, x) in dqe.iter_mut().enumerate() {
                    *x += d * row[kk] as f64;
                }
            }
            let mut gq = EncoderParams::zeros(de.cfg());
            backprop(de.query_params(), de.cfg(), &cache, &dqe, &mut gq);
            opt.step += 1;
            let OptimizerState {
                adam,
                step,
                moments,
            } = &mut opt;
            match (de.params_mut(), moments) {
                (DualParams::Tied(params), MomentStorage::Tied(pm)) => {
                    adam_step(params, &gq, pm, adam, *step);
                }
                (DualParams::Split { query, .. }, MomentStorage::Split { query: mq, .. }) => {
                    adam_step(query, &gq, mq, adam, *step);
                }
                _ => unreachable!("moment storage always mirrors parameter storage"),
            }
            log.push(TrainLogEntry {
                step: opt.step,
                loss: qg.loss,
                lr: lr_at(&opt.adam, opt.step),
                skipped,
            });
        }
    }
    Ok(QsftOutcome {
        encoder: de,
        optimizer: opt,
        log,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DocumentRecord, Question};
    use crate::encoder::EncoderConfig;
    use crate::index::build_dense_index;

    fn doc(id: &str, title: &str, text: &str) -> DocumentRecord {
        DocumentRecord {
            id: id.to_string(),
            title: title.to_string(),
            text: text.to_string(),
        }
    }

    /// Four single-passage documents, each uniquely answering one question.
    fn tiny_setup() -> (Corpus, Vec<QaPair>) {
        let docs = vec![
            doc("d0", "Alpha", "alpha is red and round like a ball"),
            doc("d1", "Beta", "beta is blue and square like a box"),
            doc("d2", "Gamma", "gamma is green and tall like a tree"),
            doc("d3", "Delta", "delta is yellow and small like a seed"),
        ];
        let corpus = Corpus::from_documents(&docs, 100).unwrap();
        let answers = ["red", "blue", "green", "yellow"];
        let pairs: Vec<QaPair> = (0..4u32)
            .map(|i| {
                let q = Question::new(i, format!("what color is {}", ["alpha", "beta", "gamma", "delta"][i as usize])).unwrap();
                let mut pair = QaPair::new(q, vec![answers[i as usize].to_string()]).unwrap();
                pair.positive_passage = Some(i);
                pair.hard_negatives = vec![(i + 1) % 4];
                pair
            })
            .collect();
        (corpus, pairs)
    }

    fn encoder_for(corpus: &Corpus, tied: bool, seed: u64) -> DualEncoder {
        let tmap = TokenMap::build(&Vocabulary::build(corpus));
        let mut cfg = EncoderConfig::new(tmap.n_ids());
        cfg.dim = 8;
        cfg.max_len = 32;
        cfg.tied = tied;
        DualEncoder::init(cfg, seed).unwrap()
    }

    fn small_train_cfg(objective: Objective) -> TrainConfig {
        TrainConfig {
            objective,
            batch_size: 2,
            epochs: 3,
            lr: 0.01,
            warmup_steps: 2,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn score_stopgrad_forward_matches_plain_dot() {
        let q = vec![0.3, -1.2, 2.5, 0.7];
        let p = vec![1.1, 0.4, -0.9, 2.0];
        let sg = score_stopgrad(&q, &p).unwrap();
        assert_eq!(sg.value, crate::encoder::score_dense(&q, &p).unwrap());
    }

    #[test]
    fn score_stopgrad_detached_branches_are_exactly_zero() {
        // The gradient wrt q comes only from the ½(q·p_d) term; the
        // detached ½(q_d·p) branch must add exactly nothing, leaving ½p.
        let q = vec![0.3, -1.2, 2.5];
        let p = vec![1.1, 0.4, -0.9];
        let sg = score_stopgrad(&q, &p).unwrap();
        for k in 0..3 {
            assert_eq!(sg.dq[k] - 0.5 * p[k], 0.0);
            assert_eq!(sg.dp[k] - 0.5 * q[k], 0.0);
        }
    }

    #[test]
    fn score_stopgrad_dim_mismatch() {
        assert!(score_stopgrad(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn stopgrad_batch_grads_are_exactly_half_of_dpr() {
        let (corpus, pairs) = tiny_setup();
        let de = encoder_for(&corpus, false, 3);
        let tmap = TokenMap::build(&Vocabulary::build(&corpus));
        let cfg = TrainConfig::default();
        let batch = assemble_batch(
            &cfg,
            &corpus,
            &pairs,
            &[0, 1, 2, 3],
            &tmap,
            &mut stream_rng(0, "test"),
            &mut stream_rng(0, "test2"),
        );
        let (l_dpr, g_dpr) = batch_loss_and_grads(&de, Objective::Dpr, false, &batch).unwrap();
        let (l_sg, g_sg) = batch_loss_and_grads(&de, Objective::Stopgrad, false, &batch).unwrap();
        assert_eq!(l_dpr, l_sg, "stopgrad forward must equal the plain loss");
        for block in crate::encoder::PARAM_BLOCKS {
            let full = g_dpr.query.block(block);
            let half = g_sg.query.block(block);
            for i in 0..full.len() {
                assert_eq!(half[i], 0.5 * full[i]);
            }
            let full = g_dpr.passage.block(block);
            let half = g_sg.passage.block(block);
            for i in 0..full.len() {
                assert_eq!(half[i], 0.5 * full[i]);
            }
        }
    }

    #[test]
    fn tied_plus_freeze_is_a_config_contradiction() {
        let cfg = TrainConfig {
            tied: true,
            freeze: Freeze::FixP,
            ..TrainConfig::default()
        };
        match cfg.validate() {
            Err(Error::ConfigContradiction(_)) => {}
            other => panic!("expected ConfigContradiction, got {other:?}"),
        }
    }

    #[test]
    fn flipped_needs_batch_of_two() {
        let cfg = TrainConfig {
            objective: Objective::Flipped,
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn literal_flag_requires_stopgrad() {
        let cfg = TrainConfig {
            stopgrad_literal: true,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fix_p_leaves_passage_params_bitwise_unchanged() {
        let (corpus, pairs) = tiny_setup();
        let de = encoder_for(&corpus, false, 3);
        let before_p = de.passage_params().to_bytes();
        let before_q = de.query_params().to_bytes();
        let cfg = TrainConfig {
            freeze: Freeze::FixP,
            ..small_train_cfg(Objective::Dpr)
        };
        let out = train(&cfg, &corpus, &pairs, de).unwrap();
        assert_eq!(out.encoder.passage_params().to_bytes(), before_p);
        assert_ne!(out.encoder.query_params().to_bytes(), before_q);
    }

    #[test]
    fn fix_q_leaves_query_params_bitwise_unchanged() {
        let (corpus, pairs) = tiny_setup();
        let de = encoder_for(&corpus, false, 3);
        let before_q = de.query_params().to_bytes();
        let cfg = TrainConfig {
            freeze: Freeze::FixQ,
            ..small_train_cfg(Objective::Dpr)
        };
        let out = train(&cfg, &corpus, &pairs, de).unwrap();
        assert_eq!(out.encoder.query_params().to_bytes(), before_q);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let (corpus, pairs) = tiny_setup();
        for objective in [Objective::Dpr, Objective::Stopgrad, Objective::Flipped] {
            let cfg = TrainConfig {
                shuffle_q: true,
                shuffle_p: true,
                ..small_train_cfg(objective)
            };
            let a = train(&cfg, &corpus, &pairs, encoder_for(&corpus, false, 3)).unwrap();
            let b = train(&cfg, &corpus, &pairs, encoder_for(&corpus, false, 3)).unwrap();
            assert_eq!(
                a.encoder.query_params().to_bytes(),
                b.encoder.query_params().to_bytes()
            );
            assert_eq!(
                a.encoder.passage_params().to_bytes(),
                b.encoder.passage_params().to_bytes()
            );
            assert_eq!(a.log, b.log);
        }
    }

    #[test]
    fn tied_training_keeps_sides_identical() {
        let (corpus, pairs) = tiny_setup();
        let cfg = TrainConfig {
            tied: true,
            ..small_train_cfg(Objective::Dpr)
        };
        let out = train(&cfg, &corpus, &pairs, encoder_for(&corpus, true, 3)).unwrap();
        assert_eq!(
            out.encoder.query_params().to_bytes(),
            out.encoder.passage_params().to_bytes()
        );
    }

    #[test]
    fn tied_config_mismatch_is_rejected() {
        let (corpus, pairs) = tiny_setup();
        let cfg = TrainConfig {
            tied: true,
            ..small_train_cfg(Objective::Dpr)
        };
        let err = train(&cfg, &corpus, &pairs, encoder_for(&corpus, false, 3)).unwrap_err();
        assert!(matches!(err, Error::ConfigContradiction(_)));
    }

    #[test]
    fn missing_positive_is_reported_with_qids() {
        let (corpus, mut pairs) = tiny_setup();
        pairs[2].positive_passage = None;
        let cfg = small_train_cfg(Objective::Dpr);
        match train(&cfg, &corpus, &pairs, encoder_for(&corpus, false, 3)) {
            Err(Error::MissingPositives { count, first }) => {
                assert_eq!(count, 1);
                assert_eq!(first, vec![2]);
            }
            other => panic!("expected MissingPositives, got {other:?}"),
        }
    }

    #[test]
    fn missing_hard_negative_is_an_error_for_dpr_but_not_flipped() {
        let (corpus, mut pairs) = tiny_setup();
        for p in &mut pairs {
            p.hard_negatives.clear();
        }
        let cfg = small_train_cfg(Objective::Dpr);
        assert!(matches!(
            train(&cfg, &corpus, &pairs, encoder_for(&corpus, false, 3)),
            Err(Error::MissingHardNegatives { .. })
        ));
        let cfg = small_train_cfg(Objective::Flipped);
        assert!(train(&cfg, &corpus, &pairs, encoder_for(&corpus, false, 3)).is_ok());
    }

    #[test]
    fn flipped_skips_singleton_trailing_batch() {
        let (corpus, pairs) = tiny_setup();
        // 4 pairs with batch_size 3 → chunks of 3 and 1; the singleton has
        // no in-batch negative question and is skipped.
        let cfg = TrainConfig {
            batch_size: 3,
            epochs: 1,
            ..small_train_cfg(Objective::Flipped)
        };
        let out = train(&cfg, &corpus, &pairs, encoder_for(&corpus, false, 3)).unwrap();
        assert_eq!(out.skipped, 1);
        assert_eq!(out.log.len(), 1);
    }

    #[test]
    fn training_loss_decreases_on_tiny_task() {
        let (corpus, pairs) = tiny_setup();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 4,
            lr: 0.05,
            warmup_steps: 5,
            ..small_train_cfg(Objective::Dpr)
        };
        let out = train(&cfg, &corpus, &pairs, encoder_for(&corpus, false, 3)).unwrap();
        let first = out.log.first().unwrap().loss;
        let last = out.log.last().unwrap().loss;
        assert!(
            last < first * 0.5,
            "loss should at least halve: first {first}, last {last}"
        );
    }

    #[test]
    fn stopgrad_detached_loss_equals_plain_loss_at_equal_params() {
        let (corpus, pairs) = tiny_setup();
        let de = encoder_for(&corpus, false, 3);
        let tmap = TokenMap::build(&Vocabulary::build(&corpus));
        let cfg = TrainConfig::default();
        let batch = assemble_batch(
            &cfg,
            &corpus,
            &pairs,
            &[0, 1, 2, 3],
            &tmap,
            &mut stream_rng(0, "a"),
            &mut stream_rng(0, "b"),
        );
        let plain = batch_loss(&de, Objective::Dpr, &batch).unwrap();
        let detached = stopgrad_detached_loss(&de, &de, false, &batch).unwrap();
        assert!((plain - detached).abs() < 1e-12);
    }

    #[test]
    fn qsft_fingerprint_mismatch_is_rejected() {
        let (corpus, pairs) = tiny_setup();
        let de = encoder_for(&corpus, false, 3);
        let other = encoder_for(&corpus, false, 4);
        let index = build_dense_index(&corpus, &other).unwrap();
        let err = qsft_train(&QsftConfig::default(), &corpus, &pairs, de, &index).unwrap_err();
        assert!(matches!(err, Error::FingerprintMismatch { .. }));
    }

    #[test]
    fn qsft_zero_epochs_leaves_params_unchanged() {
        let (corpus, pairs) = tiny_setup();
        let de = encoder_for(&corpus, false, 3);
        let before = de.query_params().to_bytes();
        let index = build_dense_index(&corpus, &de).unwrap();
        let cfg = QsftConfig {
            epochs: 0,
            ..QsftConfig::default()
        };
        let out = qsft_train(&cfg, &corpus, &pairs, de, &index).unwrap();
        assert_eq!(out.encoder.query_params().to_bytes(), before);
    }

    #[test]
    fn qsft_touches_only_the_query_side() {
        let (corpus, pairs) = tiny_setup();
        let de = encoder_for(&corpus, false, 3);
        let before_p = de.passage_params().to_bytes();
        let before_q = de.query_params().to_bytes();
        let index = build_dense_index(&corpus, &de).unwrap();
        let index_bytes_before = {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("idx.bin");
            index.save(&p).unwrap();
            std::fs::read(&p).unwrap()
        };
        let cfg = QsftConfig {
            epochs: 3,
            k: 4,
            lr: 0.01,
            ..QsftConfig::default()
        };
        let out = qsft_train(&cfg, &corpus, &pairs, de, &index).unwrap();
        assert_eq!(out.encoder.passage_params().to_bytes(), before_p);
        assert_ne!(out.encoder.query_params().to_bytes(), before_q);
        let index_bytes_after = {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("idx.bin");
            index.save(&p).unwrap();
            std::fs::read(&p).unwrap()
        };
        assert_eq!(index_bytes_before, index_bytes_after);
    }

    #[test]
    fn qsft_skips_examples_with_no_relevant_candidate() {
        let (corpus, mut pairs) = tiny_setup();
        // An answer that appears in no passage: every candidate list lacks a
        // positive, so every example is skipped and params stay put.
        for p in &mut pairs {
            p.answers = vec!["zebra".to_string()];
        }
        let de = encoder_for(&corpus, false, 3);
        let before = de.query_params().to_bytes();
        let index = build_dense_index(&corpus, &de).unwrap();
        let cfg = QsftConfig {
            epochs: 1,
            k: 4,
            ..QsftConfig::default()
        };
        let out = qsft_train(&cfg, &corpus, &pairs, de, &index).unwrap();
        assert_eq!(out.skipped, 4);
        assert_eq!(out.encoder.query_params().to_bytes(), before);
    }

    #[test]
    fn qsft_is_deterministic() {
        let (corpus, pairs) = tiny_setup();
        let run = || {
            let de = encoder_for(&corpus, false, 3);
            let index = build_dense_index(&corpus, &de).unwrap();
            let cfg = QsftConfig {
                epochs: 2,
                k: 4,
                ..QsftConfig::default()
            };
            qsft_train(&cfg, &corpus, &pairs, de, &index).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.encoder.query_params().to_bytes(),
            b.encoder.query_params().to_bytes()
        );
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn objective_and_freeze_parse_round_trip() {
        for o in [Objective::Dpr, Objective::Stopgrad, Objective::Flipped] {
            assert_eq!(Objective::parse(o.as_str()).unwrap(), o);
        }
        for f in [Freeze::None, Freeze::FixQ, Freeze::FixP] {
            assert_eq!(Freeze::parse(f.as_str()).unwrap(), f);
        }
        assert!(Objective::parse("bm25").is_err());
        assert!(Freeze::parse("both").is_err());
    }
}
