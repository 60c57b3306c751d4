//! Adam-style optimizer with linear learning-rate warmup, plus its
//! persistence sidecar.
//!
//! Frozen parameter sets are simply never passed through `adam_step`: their
//! values and their moment accumulators stay bitwise untouched, which is what
//! the freezing contracts require.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::encoder::{EncoderConfig, EncoderParams, PARAM_BLOCKS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    /// Decoupled weight decay: applied inside the update as
    /// `lr * weight_decay * theta`, never through the gradients (loss
    /// gradients stay exactly the analytic ones the checks verify).
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, warmup_steps: u64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> AdamConfig {
        self.weight_decay = weight_decay;
        self
    }
}

/// Learning rate at a 1-based step: linear ramp over the warmup window, then
/// constant.
pub fn lr_at(cfg: &AdamConfig, step: u64) -> f64 {
    if cfg.warmup_steps > 0 && step <= cfg.warmup_steps {
        cfg.lr * step as f64 / cfg.warmup_steps as f64
    } else {
        cfg.lr
    }
}

/// First and second moment accumulators for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMoments {
    pub m: EncoderParams,
    pub v: EncoderParams,
}

impl ParamMoments {
    pub fn zeros(cfg: &EncoderConfig) -> ParamMoments {
        ParamMoments {
            m: EncoderParams::zeros(cfg),
            v: EncoderParams::zeros(cfg),
        }
    }
}

/// Moment storage mirrors the encoder's parameter storage: one set when
/// tied, two when split.
#[derive(Debug, Clone, PartialEq)]
pub enum MomentStorage {
    Tied(ParamMoments),
    Split {
        query: ParamMoments,
        passage: ParamMoments,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub adam: AdamConfig,
    pub step: u64,
    pub moments: MomentStorage,
}

impl OptimizerState {
    pub fn new(adam: AdamConfig, enc_cfg: &EncoderConfig) -> OptimizerState {
        let moments = if enc_cfg.tied {
            MomentStorage::Tied(ParamMoments::zeros(enc_cfg))
        } else {
            MomentStorage::Split {
                query: ParamMoments::zeros(enc_cfg),
                passage: ParamMoments::zeros(enc_cfg),
            }
        };
        OptimizerState {
            adam,
            step: 0,
            moments,
        }
    }
}

/// One Adam update over every block of one parameter set. `step` is the
/// 1-based global step used for both bias correction and warmup.
pub fn adam_step(
    params: &mut EncoderParams,
    grads: &EncoderParams,
    moments: &mut ParamMoments,
    adam: &AdamConfig,
    step: u64,
) {
    let lr_t = lr_at(adam, step);
    let bc1 = 1.0 - adam.beta1.powi(step as i32);
    let bc2 = 1.0 - adam.beta2.powi(step as i32);
    for block in PARAM_BLOCKS {
        let theta = params.block_mut(block);
        let g = grads.block(block);
        let m = moments.m.block_mut(block);
        let v = moments.v.block_mut(block);
        for i in 0..theta.len() {
            m[i] = adam.beta1 * m[i] + (1.0 - adam.beta1) * g[i];
            v[i] = adam.beta2 * v[i] + (1.0 - adam.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= lr_t * (m_hat / (v_hat.sqrt() + adam.eps) + adam.weight_decay * theta[i]);
        }
    }
}

const OPT_MAGIC: &[u8; 8] = b"RLOPT\0\0\0";
const OPT_VERSION: u32 = 1;

impl OptimizerState {
    /// Binary sidecar layout (little-endian): magic, version, step, Adam
    /// scalars, encoder dims, then the moment blocks (m then v per side).
    pub fn save(&self, path: &Path, enc_cfg: &EncoderConfig) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(OPT_MAGIC)?;
        w.write_u32::<LittleEndian>(OPT_VERSION)?;
        w.write_u64::<LittleEndian>(self.step)?;
        w.write_f64::<LittleEndian>(self.adam.lr)?;
        w.write_f64::<LittleEndian>(self.adam.beta1)?;
        w.write_f64::<LittleEndian>(self.adam.beta2)?;
        w.write_f64::<LittleEndian>(self.adam.eps)?;
        w.write_u64::<LittleEndian>(self.adam.warmup_steps)?;
        w.write_f64::<LittleEndian>(self.adam.weight_decay)?;
        w.write_u8(matches!(self.moments, MomentStorage::Tied(_)) as u8)?;
        w.write_u32::<LittleEndian>(enc_cfg.dim as u32)?;
        w.write_u32::<LittleEndian>(enc_cfg.max_len as u32)?;
        w.write_u32::<LittleEndian>(enc_cfg.vocab_size as u32)?;
        let write_moments = |w: &mut BufWriter<File>, pm: &ParamMoments| -> Result<()> {
            for set in [&pm.m, &pm.v] {
                for block in PARAM_BLOCKS {
                    for &x in set.block(block) {
                        w.write_f64::<LittleEndian>(x)?;
                    }
                }
            }
            Ok(())
        };
        match &self.moments {
            MomentStorage::Tied(pm) => write_moments(&mut w, pm)?,
            MomentStorage::Split { query, passage } => {
                write_moments(&mut w, query)?;
                write_moments(&mut w, passage)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<OptimizerState> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != OPT_MAGIC {
            return Err(Error::Format {
                kind: "optimizer state",
                msg: "bad magic".into(),
            });
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != OPT_VERSION {
            return Err(Error::Format {
                kind: "optimizer state",
                msg: format!("unsupported version {version}"),
            });
        }
        let step = r.read_u64::<LittleEndian>()?;
        let lr = r.read_f64::<LittleEndian>()?;
        let beta1 = r.read_f64::<LittleEndian>()?;
        let beta2 = r.read_f64::<LittleEndian>()?;
        let eps = r.read_f64::<LittleEndian>()?;
        let warmup_steps = r.read_u64::<LittleEndian>()?;
        let weight_decay = r.read_f64::<LittleEndian>()?;
        let tied = r.read_u8()? != 0;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let max_len = r.read_u32::<LittleEndian>()? as usize;
        let vocab_size = r.read_u32::<LittleEndian>()? as usize;
        let enc_cfg = EncoderConfig {
            dim,
            max_len,
            use_positions: true,
            vocab_size,
            tied,
        };
        let read_moments = |r: &mut BufReader<File>| -> Result<ParamMoments> {
            let mut pm = ParamMoments::zeros(&enc_cfg);
            for set in [&mut pm.m, &mut pm.v] {
                for block in PARAM_BLOCKS {
                    for x in set.block_mut(block) {
                        *x = r.read_f64::<LittleEndian>()?;
                    }
                }
            }
            Ok(pm)
        };
        let moments = if tied {
            MomentStorage::Tied(read_moments(&mut r)?)
        } else {
            let query = read_moments(&mut r)?;
            let passage = read_moments(&mut r)?;
            MomentStorage::Split { query, passage }
        };
        Ok(OptimizerState {
            adam: AdamConfig {
                lr,
                beta1,
                beta2,
                eps,
                warmup_steps,
                weight_decay,
            },
            step,
            moments,
        })
    }
}
