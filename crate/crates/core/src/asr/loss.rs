use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compute::{softmax_rows, Graph, Tensor, Var};
use crate::corpus::{TokenId, TokenSequence, PAD};
use crate::error::{ClsrError, Result};

use super::metrics::edit_distance;

/// Mean token cross-entropy over non-pad targets, with uniform label smoothing `eps`:
/// `−(1−eps)·log p[y] − eps/|V| · Σ_v log p[v]`.
pub fn ce_loss(g: &mut Graph, logits: Var, targets: &[TokenId], label_smoothing: f64) -> Result<Var> {
    let (n, v) = g.shape(logits);
    if targets.len() != n {
        return Err(ClsrError::Shape(format!(
            "{n} logit rows for {} targets",
            targets.len()
        )));
    }
    if !(0.0..1.0).contains(&label_smoothing) {
        return Err(ClsrError::Config(format!(
            "label smoothing {label_smoothing} outside [0, 1)"
        )));
    }
    let live = targets.iter().filter(|&&t| t != PAD).count();
    if live == 0 {
        return Err(ClsrError::DegenerateTarget("every target position is padding".into()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(ClsrError::Data(format!("target id {bad} outside {v} classes")));
    }
    let mask = Tensor::from_vec(n, 1, targets.iter().map(|&t| f64::from(u8::from(t != PAD))).collect())?;
    let lp = g.log_softmax_rows(logits);
    let picked = g.pick(lp, targets);
    let mut per_pos = g.scale(picked, -(1.0 - label_smoothing));
    if label_smoothing > 0.0 {
        let ones = g.constant(Tensor::full(v, 1, 1.0));
        let row_sums = g.matmul(lp, ones);
        let smooth = g.scale(row_sums, -label_smoothing / v as f64);
        per_pos = g.add(per_pos, smooth);
    }
    let masked = g.mul_const(per_pos, mask);
    let total = g.sum(masked);
    Ok(g.scale(total, 1.0 / live as f64))
}

/// `count` sequences drawn by independent per-position sampling from `softmax(logits)`.
pub fn sample_candidates(logits: &Tensor, count: usize, seed: u64) -> Vec<TokenSequence> {
    let probs = softmax_rows(logits, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            (0..probs.rows())
                .map(|r| {
                    let u: f64 = rng.random();
                    let row = probs.row(r);
                    let mut acc = 0.0;
                    for (j, &p) in row.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            return j;
                        }
                    }
                    row.len() - 1
                })
                .collect()
        })
        .collect()
}

/// Minimum-WER loss over `n_candidates` sampled hypotheses.
pub fn mwer_loss(g: &mut Graph, logits: Var, reference: &[TokenId], n_candidates: usize, seed: u64) -> Result<Var> {
    if n_candidates < 2 {
        return Err(ClsrError::Config(format!(
            "mwer needs at least 2 candidates, got {n_candidates}"
        )));
    }
    let candidates = sample_candidates(g.value(logits), n_candidates, seed);
    mwer_loss_with_candidates(g, logits, reference, &candidates)
}

/// `Σ_j p̂_j · (W_j − W̄)` where `p̂` renormalises the candidates' sequence
/// probabilities over the set and `W̄ = Σ_j p̂_j W_j` is held constant. The
/// value is zero up to rounding; the gradient moves mass toward low-error candidates.
pub fn mwer_loss_with_candidates(
    g: &mut Graph,
    logits: Var,
    reference: &[TokenId],
    candidates: &[TokenSequence],
) -> Result<Var> {
    let n = g.shape(logits).0;
    if candidates.is_empty() || candidates.iter().any(|c| c.len() != n) {
        return Err(ClsrError::Shape(format!("candidates must all have {n} positions")));
    }
    let lp = g.log_softmax_rows(logits);
    let seq_lp: Vec<Var> = candidates
        .iter()
        .map(|c| {
            let picked = g.pick(lp, c);
            g.sum(picked)
        })
        .collect();
    let row = g.concat_cols(&seq_lp);
    let p_hat = g.softmax_rows(row);
    let errors: Vec<f64> = candidates.iter().map(|c| edit_distance(c, reference) as f64).collect();
    let w_bar: f64 = g.value(p_hat).data().iter().zip(&errors).map(|(p, w)| p * w).sum();
    let centered = Tensor::from_vec(1, errors.len(), errors.iter().map(|w| w - w_bar).collect())?;
    let weighted = g.mul_const(p_hat, centered);
    Ok(g.sum(weighted))
}
