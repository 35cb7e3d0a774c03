//! Loss heads shared by both training stages.

use crate::tensor::{Tape, Var};
use crate::{RgfmError, Result};

/// Normalized-temperature cross entropy over a batch of paired views.
///
/// `z1[i]` and `z2[i]` are two views of sample `i`. The 2B rows are
/// L2-normalized, every anchor's positive is its paired view, and the
/// denominator ranges over the other `2B - 1` rows at temperature `tau`.
pub fn nt_xent_loss(tape: &Tape, z1: Var, z2: Var, tau: f64) -> Result<Var> {
    let (b, d) = tape.shape(z1);
    if tape.shape(z2) != (b, d) {
        return Err(RgfmError::InvalidArgument(format!(
            "nt_xent view shapes differ: {:?} vs {:?}",
            (b, d),
            tape.shape(z2)
        )));
    }
    if b < 2 {
        return Err(RgfmError::InvalidArgument(
            "nt_xent needs a batch of at least 2 (no negatives otherwise)".into(),
        ));
    }
    if tau <= 0.0 {
        return Err(RgfmError::InvalidArgument(format!(
            "nt_xent temperature must be positive, got {tau}"
        )));
    }
    let z = tape.stack_rows(&[tape.row_normalize(z1), tape.row_normalize(z2)]);
    let sims = tape.scale(tape.matmul_nt(z, z), 1.0 / tau);
    // Self-similarity must not appear in any denominator.
    let masked = tape.mask_diag(sims, -1.0e30);
    let logp = tape.log_softmax_rows(masked);
    let positives: Vec<usize> = (0..2 * b).map(|i| if i < b { b + i } else { i - b }).collect();
    let picked = tape.select_entries(logp, &positives);
    Ok(tape.scale(tape.mean_pool(picked), -1.0))
}

/// Mean negative log-softmax at the true class.
pub fn cross_entropy(tape: &Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, c) = tape.shape(logits);
    if labels.len() != b {
        return Err(RgfmError::InvalidArgument(format!(
            "cross_entropy: {b} logit rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(RgfmError::InvalidArgument(format!(
            "cross_entropy: label {bad} out of range for {c} classes"
        )));
    }
    let logp = tape.log_softmax_rows(logits);
    let picked = tape.select_entries(logp, labels);
    Ok(tape.scale(tape.mean_pool(picked), -1.0))
}

/// Binary cross entropy on raw scores `[n x 1]` with targets in `{0, 1}`,
/// computed as `mean(softplus(s) - y * s)`.
pub fn bce_with_logits_loss(tape: &Tape, scores: Var, targets: &[f64]) -> Result<Var> {
    let (n, c) = tape.shape(scores);
    if c != 1 || n != targets.len() {
        return Err(RgfmError::InvalidArgument(format!(
            "bce: scores must be [{} x 1], got [{n} x {c}]",
            targets.len()
        )));
    }
    let y = tape.constant(crate::tensor::Matrix::col_vector(targets));
    let per = tape.sub(tape.softplus(scores), tape.mul(scores, y));
    Ok(tape.mean_pool(per))
}
