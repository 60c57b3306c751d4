//! Central finite-difference gradient checking over the dual encoder's
//! parameter storage.
//!
//! The probes perturb one stored coordinate at a time. A tied encoder has a
//! single storage set that both sides read, so its true gradient is the sum
//! of the query-side and passage-side flows; a split encoder has two
//! independently perturbable sets. The stop-gradient objective needs a
//! detachment-aware probe: the detached operands are pinned to the
//! unperturbed parameters while the live copy carries the wiggle, which is
//! exactly what differentiation of the detached forward computes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{DualEncoder, DualParams, EncoderParams, ParamBlock, PARAM_BLOCKS};
use crate::error::Result;
use crate::training::{
    batch_loss, batch_loss_and_grads, stopgrad_detached_loss, BatchData, GradientSet, Objective,
};

/// Step size for central differences.
pub const FD_H: f64 = 1e-5;
/// Largest acceptable relative error between analytic and numeric values.
pub const FD_TOL: f64 = 1e-4;

/// Relative error |a − n| / max(|a|, |n|, 1e-6).
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// One independently perturbable parameter storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StorageSet {
    /// The single set of a tied encoder (both sides flow into it).
    Shared,
    Query,
    Passage,
}

/// The storage sets the given encoder actually has.
pub fn storage_sets(de: &DualEncoder) -> &'static [StorageSet] {
    if de.is_tied() {
        &[StorageSet::Shared]
    } else {
        &[StorageSet::Query, StorageSet::Passage]
    }
}

fn set_mut(de: &mut DualEncoder, set: StorageSet) -> &mut EncoderParams {
    match (de.params_mut(), set) {
        (DualParams::Tied(p), StorageSet::Shared) => p,
        (DualParams::Split { query, .. }, StorageSet::Query) => query,
        (DualParams::Split { passage, .. }, StorageSet::Passage) => passage,
        _ => panic!("storage set does not match encoder layout"),
    }
}

/// Analytic dLoss/dθ for one stored coordinate. Shared storage sums both
/// sides' contributions.
pub fn analytic_coord(gs: &GradientSet, set: StorageSet, block: ParamBlock, idx: usize) -> f64 {
    match set {
        StorageSet::Shared => gs.query.block(block)[idx] + gs.passage.block(block)[idx],
        StorageSet::Query => gs.query.block(block)[idx],
        StorageSet::Passage => gs.passage.block(block)[idx],
    }
}

/// Numeric dLoss/dθ for one stored coordinate by central differences.
pub fn numeric_coord(
    de: &DualEncoder,
    objective: Objective,
    stopgrad_literal: bool,
    batch: &BatchData,
    set: StorageSet,
    block: ParamBlock,
    idx: usize,
    h: f64,
) -> Result<f64> {
    let eval = |live: &DualEncoder| -> Result<f64> {
        match objective {
            Objective::Stopgrad => stopgrad_detached_loss(live, de, stopgrad_literal, batch),
            _ => batch_loss(live, objective, batch),
        }
    };
    let mut live = de.clone();
    set_mut(&mut live, set).block_mut(block)[idx] += h;
    let plus = eval(&live)?;
    set_mut(&mut live, set).block_mut(block)[idx] -= 2.0 * h;
    let minus = eval(&live)?;
    Ok((plus - minus) / (2.0 * h))
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Human-readable description of the worst coordinate.
    pub worst: String,
}

/// Compare analytic gradients against central differences on
/// `samples_per_block` random coordinates of every block of every storage
/// set, plus coordinate 0 of every block so small blocks are always hit.
pub fn check_batch_gradients(
    de: &DualEncoder,
    objective: Objective,
    stopgrad_literal: bool,
    batch: &BatchData,
    samples_per_block: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport> {
    let (_, gs) = batch_loss_and_grads(de, objective, stopgrad_literal, batch)?;
    let mut checked = 0usize;
    let mut max_rel_error = 0.0f64;
    let mut worst = String::from("none");
    for &set in storage_sets(de) {
        for block in PARAM_BLOCKS {
            let len = gs.query.block(block).len();
            let mut idxs = vec![0usize];
            for _ in 0..samples_per_block {
                idxs.push(rng.gen_range(0..len));
            }
            for idx in idxs {
                let a = analytic_coord(&gs, set, block, idx);
                let n = numeric_coord(
                    de,
                    objective,
                    stopgrad_literal,
                    batch,
                    set,
                    block,
                    idx,
                    FD_H,
                )?;
                let e = rel_error(a, n);
                checked += 1;
                if e > max_rel_error {
                    max_rel_error = e;
                    worst = format!(
                        "{set:?}/{block:?}[{idx}]: analytic {a:.6e}, numeric {n:.6e}"
                    );
                }
            }
        }
    }
    Ok(GradCheckReport {
        checked,
        max_rel_error,
        worst,
    })
}
