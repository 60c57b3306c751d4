//! Contrastive loss functions and their score-level gradients.
//!
//! Everything is expressed over a score matrix so the losses stay independent
//! of how scores were produced; the training loop chains these gradients into
//! the encoders. Softmax rows are computed with the usual max-shift for
//! stability, and every reduction runs in ascending index order.

use crate::error::{Error, Result};

/// A loss value with dLoss/dScores of the same shape as the input matrix.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub dscores: Vec<Vec<f64>>,
}

fn check_finite(rows: &[Vec<f64>]) -> Result<()> {
    for row in rows {
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteScore);
        }
    }
    Ok(())
}

/// Mean over rows of −log softmax(row)[positive]. Gradient per row is
/// (softmax − one-hot) / #rows.
pub fn softmax_nll(scores: &[Vec<f64>], positives: &[usize]) -> Result<LossGrad> {
    if scores.is_empty() {
        return Err(Error::InvalidArg("score matrix has no rows".into()));
    }
    if scores.len() != positives.len() {
        return Err(Error::InvalidArg(format!(
            "{} rows but {} positive indices",
            scores.len(),
            positives.len()
        )));
    }
    let cols = scores[0].len();
    if cols == 0 {
        return Err(Error::InvalidArg("score matrix has no columns".into()));
    }
    for (i, row) in scores.iter().enumerate() {
        if row.len() != cols {
            return Err(Error::InvalidArg("ragged score matrix".into()));
        }
        if positives[i] >= cols {
            return Err(Error::InvalidArg(format!(
                "positive index {} out of range for {cols} columns",
                positives[i]
            )));
        }
    }
    check_finite(scores)?;

    let b = scores.len() as f64;
    let mut loss = 0.0;
    let mut dscores = Vec::with_capacity(scores.len());
    for (row, &pos) in scores.iter().zip(positives) {
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x));
        let mut z = 0.0;
        for &s in row {
            z += (s - max).exp();
        }
        loss += max + z.ln() - row[pos];
        let mut drow = Vec::with_capacity(row.len());
        for (j, &s) in row.iter().enumerate() {
            let sigma = (s - max).exp() / z;
            let onehot = if j == pos { 1.0 } else { 0.0 };
            drow.push((sigma - onehot) / b);
        }
        dscores.push(drow);
    }
    Ok(LossGrad {
        loss: loss / b,
        dscores,
    })
}

/// The in-batch contrastive loss: B rows (questions) over 2B columns — the
/// B in-batch positives followed by the B hard negatives; each question's
/// own positive sits at its row index.
pub fn loss_dpr(scores: &[Vec<f64>]) -> Result<LossGrad> {
    let b = scores.len();
    if b == 0 || scores[0].len() != 2 * b {
        return Err(Error::InvalidArg(format!(
            "expected a B x 2B score matrix, got {b} x {}",
            scores.first().map_or(0, Vec::len)
        )));
    }
    let positives: Vec<usize> = (0..b).collect();
    softmax_nll(scores, &positives)
}

/// The contrastive loss with question and passage roles swapped: B rows
/// (passages) over B columns (questions), positives on the diagonal, no hard
/// negatives.
pub fn loss_flipped(scores: &[Vec<f64>]) -> Result<LossGrad> {
    let b = scores.len();
    if b < 2 || scores[0].len() != b {
        return Err(Error::InvalidArg(format!(
            "expected a square score matrix with at least one negative question, got {b} x {}",
            scores.first().map_or(0, Vec::len)
        )));
    }
    let positives: Vec<usize> = (0..b).collect();
    softmax_nll(scores, &positives)
}

/// Query-side fine-tuning loss over one candidate list.
#[derive(Debug, Clone)]
pub struct QsftGrad {
    pub loss: f64,
    pub dscores: Vec<f64>,
}

/// L = −log Σ_{positive c} softmax(scores)[c]. Returns `None` when no
/// candidate is relevant (the loss would be −log 0; such examples are
/// skipped and counted by the caller).
pub fn loss_qsft(scores: &[f64], relevant: &[bool]) -> Result<Option<QsftGrad>> {
    if scores.is_empty() {
        return Err(Error::InvalidArg("no candidates".into()));
    }
    if scores.len() != relevant.len() {
        return Err(Error::InvalidArg(format!(
            "{} scores but {} relevance flags",
            scores.len(),
            relevant.len()
        )));
    }
    if scores.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteScore);
    }
    if !relevant.iter().any(|&r| r) {
        return Ok(None);
    }
    let max = scores.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x));
    let mut z = 0.0;
    for &s in scores {
        z += (s - max).exp();
    }
    let sigma: Vec<f64> = scores.iter().map(|&s| (s - max).exp() / z).collect();
    let mut pos_mass = 0.0;
    for (j, &r) in relevant.iter().enumerate() {
        if r {
            pos_mass += sigma[j];
        }
    }
    let loss = -pos_mass.ln();
    // dL/ds_k = σ_k − [k relevant] σ_k / pos_mass.
    let dscores = sigma
        .iter()
        .zip(relevant)
        .map(|(&s, &r)| if r { s - s / pos_mass } else { s })
        .collect();
    Ok(Some(QsftGrad { loss, dscores }))
}
