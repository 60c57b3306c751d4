//! The desk-scale dense encoder standing in for a large pretrained model:
//! token embeddings, optional positional embeddings, mean-pool reduction, and
//! a linear projection, in dual (separate query/passage) or tied (single)
//! configurations.
//!
//! Per-position hidden states are `h_i = E[x_i] ⊙ (1 + P[i])` when positions
//! are enabled. The positional factor is bound multiplicatively because an
//! additive term would cancel under mean pooling — `mean_i(E[x_i] + P[i])`
//! separates into `mean(E[x_i]) + mean(P[i])`, both order-free, which would
//! make the word-order ablations vacuous. With positions disabled the hidden
//! state is just `E[x_i]` and the sum runs in sorted-token-id order, so
//! permuting the input provably cannot change even the floating-point result.
//!
//! Output: `out = W · mean_i(h_i) + bias`. All gradients are hand-derived and
//! checked against central finite differences in the test suite.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{passage_input_sequence, Passage, Question, Token};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::sparse::Vocabulary;

/// Reserved token ids: everything out-of-vocabulary folds to UNK, and the
/// title/body sentinel has its own id (it is excluded from the sparse
/// vocabulary, so it cannot collide with a corpus term).
pub const UNK_ID: u32 = 0;
pub const SEP_ID: u32 = 1;
pub const RESERVED_IDS: usize = 2;

/// Corpus term → encoder token id (vocabulary id shifted past the reserved
/// ids).
#[derive(Debug, Clone)]
pub struct TokenMap {
    ids: std::collections::HashMap<String, u32>,
}

impl TokenMap {
    pub fn build(vocab: &Vocabulary) -> TokenMap {
        let ids = vocab
            .terms()
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), (i + RESERVED_IDS) as u32))
            .collect();
        TokenMap { ids }
    }

    pub fn id_of(&self, token: &Token) -> u32 {
        if token.is_sep() {
            return SEP_ID;
        }
        self.ids.get(token.as_str()).copied().unwrap_or(UNK_ID)
    }

    pub fn ids(&self, tokens: &[Token]) -> Vec<u32> {
        tokens.iter().map(|t| self.id_of(t)).collect()
    }

    /// Total number of token ids (reserved + corpus terms); the encoder's
    /// embedding table must have exactly this many rows.
    pub fn n_ids(&self) -> usize {
        self.ids.len() + RESERVED_IDS
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub max_len: usize,
    pub use_positions: bool,
    pub vocab_size: usize,
    pub tied: bool,
}

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_MAX_LEN: usize = 128;

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            dim: DEFAULT_DIM,
            max_len: DEFAULT_MAX_LEN,
            use_positions: true,
            vocab_size,
            tied: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 1 {
            return Err(Error::InvalidArg("encoder dim must be at least 1".into()));
        }
        if self.max_len < 1 {
            return Err(Error::InvalidArg("max_len must be at least 1".into()));
        }
        if self.vocab_size < RESERVED_IDS {
            return Err(Error::InvalidArg(format!(
                "vocab_size must be at least {RESERVED_IDS}"
            )));
        }
        Ok(())
    }
}

/// One encoder's parameters: token embeddings E, positional embeddings P,
/// projection W, bias.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub embed: Mat,
    pub pos: Mat,
    pub proj: Mat,
    pub bias: Vec<f64>,
}

/// Names of the four trainable blocks, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamBlock {
    Embed,
    Pos,
    Proj,
    Bias,
}

pub const PARAM_BLOCKS: [ParamBlock; 4] = [
    ParamBlock::Embed,
    ParamBlock::Pos,
    ParamBlock::Proj,
    ParamBlock::Bias,
];

impl EncoderParams {
    pub fn zeros(cfg: &EncoderConfig) -> EncoderParams {
        EncoderParams {
            embed: Mat::zeros(cfg.vocab_size, cfg.dim),
            pos: Mat::zeros(cfg.max_len, cfg.dim),
            proj: Mat::zeros(cfg.dim, cfg.dim),
            bias: vec![0.0; cfg.dim],
        }
    }

    /// Seeded initialization: E, P ~ U(-0.05, 0.05); W = I + U(-0.01, 0.01);
    /// bias = 0. Draw order is fixed (E rows, P rows, W rows).
    pub fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> EncoderParams {
        let mut p = EncoderParams::zeros(cfg);
        let wide = Uniform::from(-0.05..0.05);
        let narrow = Uniform::from(-0.01..0.01);
        for x in p.embed.data_mut() {
            *x = wide.sample(rng);
        }
        for x in p.pos.data_mut() {
            *x = wide.sample(rng);
        }
        for r in 0..cfg.dim {
            for c in 0..cfg.dim {
                let eye = if r == c { 1.0 } else { 0.0 };
                p.proj.row_mut(r)[c] = eye + narrow.sample(rng);
            }
        }
        p
    }

    pub fn block(&self, b: ParamBlock) -> &[f64] {
        match b {
            ParamBlock::Embed => self.embed.data(),
            ParamBlock::Pos => self.pos.data(),
            ParamBlock::Proj => self.proj.data(),
            ParamBlock::Bias => &self.bias,
        }
    }

    pub fn block_mut(&mut self, b: ParamBlock) -> &mut [f64] {
        match b {
            ParamBlock::Embed => self.embed.data_mut(),
            ParamBlock::Pos => self.pos.data_mut(),
            ParamBlock::Proj => self.proj.data_mut(),
            ParamBlock::Bias => &mut self.bias,
        }
    }

    /// Serialized little-endian bytes of all blocks, used for fingerprinting
    /// and bitwise comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        for block in PARAM_BLOCKS {
            for &x in self.block(block) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        buf
    }
}

/// 64-bit FNV-1a over a byte slice; stable, dependency-free content hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Which half of the dual encoder an operation targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Query,
    Passage,
}

/// Parameter storage: one set when tied, two when split.
#[derive(Debug, Clone, PartialEq)]
pub enum DualParams {
    Tied(EncoderParams),
    Split {
        query: EncoderParams,
        passage: EncoderParams,
    },
}

/// Query and passage encoders. When tied there is a single underlying
/// parameter set; both sides are views of it by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    cfg: EncoderConfig,
    seed: u64,
    params: DualParams,
}

impl DualEncoder {
    pub fn init(cfg: EncoderConfig, seed: u64) -> Result<DualEncoder> {
        cfg.validate()?;
        let params = if cfg.tied {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(0);
            DualParams::Tied(EncoderParams::init(&cfg, &mut rng))
        } else {
            let mut qrng = ChaCha8Rng::seed_from_u64(seed);
            qrng.set_stream(0);
            let mut prng = ChaCha8Rng::seed_from_u64(seed);
            prng.set_stream(1);
            DualParams::Split {
                query: EncoderParams::init(&cfg, &mut qrng),
                passage: EncoderParams::init(&cfg, &mut prng),
            }
        };
        Ok(DualEncoder { cfg, seed, params })
    }

    pub fn from_parts(cfg: EncoderConfig, seed: u64, params: DualParams) -> Result<DualEncoder> {
        cfg.validate()?;
        match (&params, cfg.tied) {
            (DualParams::Tied(_), true) | (DualParams::Split { .. }, false) => {}
            _ => {
                return Err(Error::ConfigContradiction(
                    "tied flag does not match parameter storage".into(),
                ))
            }
        }
        Ok(DualEncoder { cfg, seed, params })
    }

    pub fn cfg(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_tied(&self) -> bool {
        self.cfg.tied
    }

    pub fn params(&self) -> &DualParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut DualParams {
        &mut self.params
    }

    pub fn side(&self, side: Side) -> &EncoderParams {
        match (&self.params, side) {
            (DualParams::Tied(p), _) => p,
            (DualParams::Split { query, .. }, Side::Query) => query,
            (DualParams::Split { passage, .. }, Side::Passage) => passage,
        }
    }

    pub fn query_params(&self) -> &EncoderParams {
        self.side(Side::Query)
    }

    pub fn passage_params(&self) -> &EncoderParams {
        self.side(Side::Passage)
    }

    pub fn encode_query(&self, q: &Question, tmap: &TokenMap) -> Result<Vec<f64>> {
        encode(self.query_params(), &self.cfg, &tmap.ids(&q.tokens))
    }

    pub fn encode_passage(&self, p: &Passage, tmap: &TokenMap) -> Result<Vec<f64>> {
        let seq = passage_input_sequence(p);
        encode(self.passage_params(), &self.cfg, &tmap.ids(&seq))
    }

    /// Content hash of the passage-side parameters; a dense index records
    /// this so a drifted encoder cannot be silently mixed with a stale index.
    pub fn passage_fingerprint(&self) -> u64 {
        fnv1a64(&self.passage_params().to_bytes())
    }
}

/// Inputs the backward pass needs, captured by the forward pass. `ids` holds
/// the truncated token ids in the exact order the forward sum used them
/// (original order with positions, sorted without).
#[derive(Debug, Clone)]
pub struct EncodeCache {
    pub ids: Vec<u32>,
    pub mean: Vec<f64>,
}

/// Forward pass; see module docs for the formula.
pub fn encode(params: &EncoderParams, cfg: &EncoderConfig, ids: &[u32]) -> Result<Vec<f64>> {
    encode_with_cache(params, cfg, ids).map(|(out, _)| out)
}

pub fn encode_with_cache(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    ids: &[u32],
) -> Result<(Vec<f64>, EncodeCache)> {
    if ids.is_empty() {
        return Err(Error::EmptySequence);
    }
    let n = ids.len().min(cfg.max_len);
    let mut used: Vec<u32> = ids[..n].to_vec();
    if !cfg.use_positions {
        used.sort_unstable();
    }
    let d = cfg.dim;
    let mut acc = vec![0.0; d];
    if cfg.use_positions {
        for (i, &id) in used.iter().enumerate() {
            let e = params.embed.row(id as usize);
            let p = params.pos.row(i);
            for k in 0..d {
                acc[k] += e[k] * (1.0 + p[k]);
            }
        }
    } else {
        for &id in &used {
            let e = params.embed.row(id as usize);
            for k in 0..d {
                acc[k] += e[k];
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    let mut mean = acc;
    for m in &mut mean {
        *m *= inv_n;
    }
    let mut out = params.proj.matvec(&mean);
    for k in 0..d {
        out[k] += params.bias[k];
    }
    Ok((out, EncodeCache { ids: used, mean }))
}

/// Accumulate `dLoss/dparams` given `g = dLoss/dout`, reusing the forward
/// cache. Derivation: with m = (Σ h_i)/n and out = W·m + bias,
///
/// ```text
/// dbias += g            dW += g ⊗ m           dm = Wᵀ g
/// dh_i = dm / n
/// positions on:  dE[x_i] += dh_i ⊙ (1 + P[i]);  dP[i] += dh_i ⊙ E[x_i]
/// positions off: dE[x_i] += dh_i
/// ```
pub fn backprop(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    cache: &EncodeCache,
    g: &[f64],
    grads: &mut EncoderParams,
) {
    let d = cfg.dim;
    assert_eq!(g.len(), d, "gradient has wrong dimension");
    for k in 0..d {
        grads.bias[k] += g[k];
    }
    for j in 0..d {
        let gj = g[j];
        let row = grads.proj.row_mut(j);
        for k in 0..d {
            row[k] += gj * cache.mean[k];
        }
    }
    let mut dm = vec![0.0; d];
    for j in 0..d {
        let gj = g[j];
        let row = params.proj.row(j);
        for k in 0..d {
            dm[k] += row[k] * gj;
        }
    }
    let inv_n = 1.0 / cache.ids.len() as f64;
    if cfg.use_positions {
        for (i, &id) in cache.ids.iter().enumerate() {
            let e = params.embed.row(id as usize).to_vec();
            let p = params.pos.row(i).to_vec();
            let erow = grads.embed.row_mut(id as usize);
            for k in 0..d {
                erow[k] += dm[k] * inv_n * (1.0 + p[k]);
            }
            let prow = grads.pos.row_mut(i);
            for k in 0..d {
                prow[k] += dm[k] * inv_n * e[k];
            }
        }
    } else {
        for &id in &cache.ids {
            let erow = grads.embed.row_mut(id as usize);
            for k in 0..d {
                erow[k] += dm[k] * inv_n;
            }
        }
    }
}

/// Inner product of two embeddings.
pub fn score_dense(qe: &[f64], pe: &[f64]) -> Result<f64> {
    if qe.len() != pe.len() {
        return Err(Error::DimMismatch {
            expected: qe.len(),
            got: pe.len(),
        });
    }
    Ok(crate::linalg::dot(qe, pe))
}

const ENC_MAGIC: &[u8; 8] = b"RLENC\0\0\0";
const ENC_VERSION: u32 = 1;

impl DualEncoder {
    /// Binary layout (little-endian):
    ///
    /// ```text
    /// magic            8 bytes "RLENC\0\0\0"
    /// version          u32
    /// tied             u8
    /// use_positions    u8
    /// padding          u16 (zero)
    /// dim              u32
    /// max_len          u32
    /// vocab_size       u32
    /// seed             u64
    /// blocks           1 (tied) or 2 (query then passage) parameter sets,
    ///                  each E, P, W, bias as row-major f64
    /// ```
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(ENC_MAGIC)?;
        w.write_u32::<LittleEndian>(ENC_VERSION)?;
        w.write_u8(self.cfg.tied as u8)?;
        w.write_u8(self.cfg.use_positions as u8)?;
        w.write_u16::<LittleEndian>(0)?;
        w.write_u32::<LittleEndian>(self.cfg.dim as u32)?;
        w.write_u32::<LittleEndian>(self.cfg.max_len as u32)?;
        w.write_u32::<LittleEndian>(self.cfg.vocab_size as u32)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        let write_params = |w: &mut BufWriter<File>, p: &EncoderParams| -> Result<()> {
            for block in PARAM_BLOCKS {
                for &x in p.block(block) {
                    w.write_f64::<LittleEndian>(x)?;
                }
            }
            Ok(())
        };
        match &self.params {
            DualParams::Tied(p) => write_params(&mut w, p)?,
            DualParams::Split { query, passage } => {
                write_params(&mut w, query)?;
                write_params(&mut w, passage)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DualEncoder> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != ENC_MAGIC {
            return Err(Error::Format {
                kind: "encoder",
                msg: "bad magic".into(),
            });
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != ENC_VERSION {
            return Err(Error::Format {
                kind: "encoder",
                msg: format!("unsupported version {version}"),
            });
        }
        let tied = r.read_u8()? != 0;
        let use_positions = r.read_u8()? != 0;
        let _pad = r.read_u16::<LittleEndian>()?;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let max_len = r.read_u32::<LittleEndian>()? as usize;
        let vocab_size = r.read_u32::<LittleEndian>()? as usize;
        let seed = r.read_u64::<LittleEndian>()?;
        let cfg = EncoderConfig {
            dim,
            max_len,
            use_positions,
            vocab_size,
            tied,
        };
        cfg.validate().map_err(|e| Error::Format {
            kind: "encoder",
            msg: e.to_string(),
        })?;
        let read_params = |r: &mut BufReader<File>| -> Result<EncoderParams> {
            let mut p = EncoderParams::zeros(&cfg);
            for block in PARAM_BLOCKS {
                for x in p.block_mut(block) {
                    *x = r.read_f64::<LittleEndian>()?;
                }
            }
            Ok(p)
        };
        let params = if tied {
            DualParams::Tied(read_params(&mut r)?)
        } else {
            let query = read_params(&mut r)?;
            let passage = read_params(&mut r)?;
            DualParams::Split { query, passage }
        };
        DualEncoder::from_parts(cfg, seed, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn small_cfg(use_positions: bool, tied: bool) -> EncoderConfig {
        EncoderConfig {
            dim: 4,
            max_len: 8,
            use_positions,
            vocab_size: 10,
            tied,
        }
    }

    #[test]
    fn zero_params_encode_to_zero() {
        let cfg = small_cfg(true, false);
        let p = EncoderParams::zeros(&cfg);
        let out = encode(&p, &cfg, &[2, 3, 4]).unwrap();
        assert_eq!(out, vec![0.0; 4]);
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let cfg = small_cfg(true, false);
        let p = EncoderParams::zeros(&cfg);
        assert!(matches!(encode(&p, &cfg, &[]), Err(Error::EmptySequence)));
    }

    #[test]
    fn no_positions_output_is_permutation_invariant_bitwise() {
        let cfg = small_cfg(false, false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = EncoderParams::init(&cfg, &mut rng);
        let a = encode(&p, &cfg, &[5, 2, 9, 2, 7]).unwrap();
        let b = encode(&p, &cfg, &[2, 7, 5, 2, 9]).unwrap();
        assert_eq!(a, b, "sorted-order summation makes this exact");
    }

    #[test]
    fn positions_make_output_order_sensitive() {
        let cfg = small_cfg(true, false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = EncoderParams::init(&cfg, &mut rng);
        let a = encode(&p, &cfg, &[5, 2, 9]).unwrap();
        let b = encode(&p, &cfg, &[9, 2, 5]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn single_token_identity_projection_returns_embedding_row() {
        let cfg = small_cfg(false, false);
        let mut p = EncoderParams::zeros(&cfg);
        for (k, x) in p.embed.row_mut(3).iter_mut().enumerate() {
            *x = k as f64 + 0.5;
        }
        for k in 0..cfg.dim {
            p.proj.row_mut(k)[k] = 1.0;
        }
        let out = encode(&p, &cfg, &[3]).unwrap();
        assert_eq!(out, vec![0.5, 1.5, 2.5, 3.5]);
    }

    #[test]
    fn sequences_truncate_at_max_len() {
        let cfg = EncoderConfig {
            max_len: 2,
            ..small_cfg(true, false)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = EncoderParams::init(&cfg, &mut rng);
        let a = encode(&p, &cfg, &[1, 2]).unwrap();
        let b = encode(&p, &cfg, &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(a, b, "tokens past max_len are ignored");
    }

    #[test]
    fn tied_encoder_shares_storage() {
        let de = DualEncoder::init(small_cfg(true, true), 11).unwrap();
        let ids = [2, 5, 3];
        let q = encode(de.query_params(), de.cfg(), &ids).unwrap();
        let p = encode(de.passage_params(), de.cfg(), &ids).unwrap();
        assert_eq!(q, p, "tied sides view the same parameters");
    }

    #[test]
    fn untied_encoders_differ_after_random_init() {
        let de = DualEncoder::init(small_cfg(true, false), 11).unwrap();
        let ids = [2, 5, 3];
        let q = encode(de.query_params(), de.cfg(), &ids).unwrap();
        let p = encode(de.passage_params(), de.cfg(), &ids).unwrap();
        assert_ne!(q, p, "independent initializations should not coincide");
    }

    #[test]
    fn score_dense_basic_identities() {
        assert_eq!(score_dense(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(score_dense(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert!(matches!(
            score_dense(&[1.0], &[1.0, 2.0]),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn score_dense_is_symmetric_and_homogeneous() {
        let a = vec![0.3, -1.2, 0.7];
        let b = vec![2.0, 0.25, -0.5];
        let ab = score_dense(&a, &b).unwrap();
        let ba = score_dense(&b, &a).unwrap();
        assert_eq!(ab, ba);
        let scaled: Vec<f64> = a.iter().map(|x| 2.0 * x).collect();
        assert!((score_dense(&scaled, &b).unwrap() - 2.0 * ab).abs() < 1e-12);
    }

    #[test]
    fn token_map_reserves_unk_and_sep() {
        use crate::corpus::{Corpus, DocumentRecord};
        let docs = vec![DocumentRecord {
            id: "d".into(),
            title: "Alpha".into(),
            text: "beta gamma".into(),
        }];
        let corpus = Corpus::from_documents(&docs, 100).unwrap();
        let vocab = Vocabulary::build(&corpus);
        let tmap = TokenMap::build(&vocab);
        assert_eq!(tmap.n_ids(), 5);
        assert_eq!(tmap.id_of(&Token::sep()), SEP_ID);
        let toks = tokenize("beta unknownword");
        let ids = tmap.ids(&toks);
        assert_eq!(ids[1], UNK_ID);
        assert!(ids[0] >= RESERVED_IDS as u32);
    }

    #[test]
    fn save_load_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        for tied in [false, true] {
            let de = DualEncoder::init(small_cfg(true, tied), 42).unwrap();
            let path = dir.path().join(format!("enc_{tied}.bin"));
            de.save(&path).unwrap();
            let loaded = DualEncoder::load(&path).unwrap();
            assert_eq!(loaded, de);
            let path2 = dir.path().join(format!("enc2_{tied}.bin"));
            loaded.save(&path2).unwrap();
            assert_eq!(
                std::fs::read(&path).unwrap(),
                std::fs::read(&path2).unwrap(),
                "re-saving must be byte-identical"
            );
        }
    }

    #[test]
    fn same_seed_same_params_different_seed_different_params() {
        let cfg = small_cfg(true, false);
        let a = DualEncoder::init(cfg, 7).unwrap();
        let b = DualEncoder::init(cfg, 7).unwrap();
        let c = DualEncoder::init(cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn fingerprint_tracks_passage_params_only() {
        let cfg = small_cfg(true, false);
        let mut de = DualEncoder::init(cfg, 7).unwrap();
        let before = de.passage_fingerprint();
        if let DualParams::Split { query, .. } = de.params_mut() {
            query.bias[0] += 1.0;
        }
        assert_eq!(de.passage_fingerprint(), before, "query-side change is invisible");
        if let DualParams::Split { passage, .. } = de.params_mut() {
            passage.bias[0] += 1.0;
        }
        assert_ne!(de.passage_fingerprint(), before);
    }

    #[test]
    fn backprop_bias_and_proj_gradients_are_exact() {
        // out = W m + bias, so dout/dbias = I and dW = g ⊗ m; check on a
        // hand-built case. ids = [2], embed row 2 = (1, 2, 0, 0), no
        // positions, so m = (1, 2, 0, 0).
        let cfg = small_cfg(false, false);
        let mut p = EncoderParams::zeros(&cfg);
        p.embed.row_mut(2)[0] = 1.0;
        p.embed.row_mut(2)[1] = 2.0;
        let (_, cache) = encode_with_cache(&p, &cfg, &[2]).unwrap();
        let mut grads = EncoderParams::zeros(&cfg);
        let g = [1.0, 0.0, 0.0, 0.0];
        backprop(&p, &cfg, &cache, &g, &mut grads);
        assert_eq!(grads.bias, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(grads.proj.row(0), &[1.0, 2.0, 0.0, 0.0]);
        assert_eq!(grads.proj.row(1), &[0.0; 4]);
        // W is all zero, so nothing flows back to the embedding.
        assert_eq!(grads.embed.row(2), &[0.0; 4]);
    }
}
