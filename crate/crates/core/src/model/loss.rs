//! Reconstruction and concordance losses, in plain-value and on-tape forms.

use std::sync::atomic::{AtomicU64, Ordering};

use super::ModelError;
use crate::stats;
use crate::tensor::{Tape, Tensor, Var};

static DEGENERATE_CCC: AtomicU64 = AtomicU64::new(0);

/// How many concordance evaluations hit a zero denominator so far.
pub fn degenerate_ccc_count() -> u64 {
    DEGENERATE_CCC.load(Ordering::Relaxed)
}

fn flag_degenerate() {
    DEGENERATE_CCC.fetch_add(1, Ordering::Relaxed);
    log::warn!("concordance denominator is zero (both series constant and equal); using rho = 0");
}

/// Loss weights `alpha * L2D + beta * L1D + gamma * LRec`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.01,
        }
    }
}

/// A concordance value and whether it came from the zero-denominator rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ccc {
    pub rho: f64,
    pub degenerate: bool,
}

/// Concordance correlation coefficient with population statistics:
/// `2 cov / (var_p + var_t + (mean_p - mean_t)^2)`.
///
/// A zero denominator (both series constant with equal means) yields
/// `rho = 0` flagged as degenerate.
pub fn ccc(pred: &[f64], truth: &[f64]) -> Result<Ccc, ModelError> {
    if pred.len() != truth.len() {
        return Err(ModelError::LengthMismatch {
            what: "ccc",
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.len() < 2 {
        return Err(ModelError::TooShort {
            what: "ccc",
            min: 2,
            got: pred.len(),
        });
    }
    let (mp, mt) = (stats::mean(pred), stats::mean(truth));
    let denom = stats::variance(pred) + stats::variance(truth) + (mp - mt) * (mp - mt);
    if denom == 0.0 {
        flag_degenerate();
        return Ok(Ccc {
            rho: 0.0,
            degenerate: true,
        });
    }
    Ok(Ccc {
        rho: 2.0 * stats::covariance(pred, truth) / denom,
        degenerate: false,
    })
}

/// `1 - (rho_a + rho_v) / 2`, in `[0, 2]`.
pub fn loss_rec(a_hat: &[f64], a: &[f64], v_hat: &[f64], v: &[f64]) -> Result<f64, ModelError> {
    if a_hat.len() != v_hat.len() {
        return Err(ModelError::LengthMismatch {
            what: "loss_rec",
            left: a_hat.len(),
            right: v_hat.len(),
        });
    }
    let ra = ccc(a_hat, a)?.rho;
    let rv = ccc(v_hat, v)?.rho;
    Ok(1.0 - 0.5 * (ra + rv))
}

/// Sum over the batch of squared reconstruction error.
pub fn loss_recon(recon: &[Tensor], target: &[Tensor]) -> Result<f64, ModelError> {
    if recon.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if recon.len() != target.len() {
        return Err(ModelError::LengthMismatch {
            what: "loss_recon",
            left: recon.len(),
            right: target.len(),
        });
    }
    let mut total = 0.0;
    for (r, t) in recon.iter().zip(target) {
        if r.shape() != t.shape() {
            return Err(ModelError::InputShape {
                what: "reconstruction",
                expected: t.shape().to_vec(),
                got: r.shape().to_vec(),
            });
        }
        total += stats::sum(r.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)));
    }
    Ok(total)
}

pub fn total_loss(w: LossWeights, l2d: f64, l1d: f64, lrec: f64) -> f64 {
    w.alpha * l2d + w.beta * l1d + w.gamma * lrec
}

// ---- on-tape forms ------------------------------------------------------

/// `sum((recon - target)^2)` as a scalar node.
pub fn recon_loss_var(tape: &mut Tape, recon: Var, target: Var) -> Result<Var, ModelError> {
    let d = tape.sub(recon, target)?;
    let sq = tape.square(d);
    Ok(tape.sum(sq))
}

/// Concordance of two equal-length series as a differentiable scalar.
/// Returns the node and whether the zero-denominator rule fired.
pub fn ccc_var(tape: &mut Tape, pred: Var, truth: Var) -> Result<(Var, bool), ModelError> {
    let n = tape.value(pred).numel();
    if n != tape.value(truth).numel() {
        return Err(ModelError::LengthMismatch {
            what: "ccc",
            left: n,
            right: tape.value(truth).numel(),
        });
    }
    if n < 2 {
        return Err(ModelError::TooShort {
            what: "ccc",
            min: 2,
            got: n,
        });
    }
    let cov = tape.covariance(pred, truth)?;
    let vp = tape.variance(pred)?;
    let vt = tape.variance(truth)?;
    let mp = tape.mean(pred)?;
    let mt = tape.mean(truth)?;
    let dm = tape.sub(mp, mt)?;
    let dm2 = tape.square(dm);
    let s = tape.add(vp, vt)?;
    let denom = tape.add(s, dm2)?;
    if tape.value(denom).item() == 0.0 {
        flag_degenerate();
        return Ok((tape.constant(Tensor::scalar(0.0)), true));
    }
    let num = tape.scale(cov, 2.0);
    Ok((tape.div(num, denom)?, false))
}

/// Batch concordance loss for `[B, 2]` predictions against `[B, 2]` labels
/// (column 0 arousal, column 1 valence).
pub fn loss_rec_var(tape: &mut Tape, pred: Var, labels: Var) -> Result<(Var, usize), ModelError> {
    let a_hat = tape.slice_cols(pred, 0, 1)?;
    let v_hat = tape.slice_cols(pred, 1, 1)?;
    let a = tape.slice_cols(labels, 0, 1)?;
    let v = tape.slice_cols(labels, 1, 1)?;
    let (ra, da) = ccc_var(tape, a_hat, a)?;
    let (rv, dv) = ccc_var(tape, v_hat, v)?;
    let s = tape.add(ra, rv)?;
    let half = tape.scale(s, 0.5);
    Ok((tape.rsub_scalar(1.0, half), usize::from(da) + usize::from(dv)))
}
