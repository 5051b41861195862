//! Cosine similarity, the symmetric in-batch contrastive loss and total-loss composition.

use crate::compute::{Graph, Var};
use crate::error::{ClsrError, Result};

pub const DEFAULT_TAU: f64 = 0.05;

/// Norms below this are treated as zero vectors.
const MIN_NORM: f64 = 1e-12;

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(ClsrError::Shape(format!(
            "vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu < MIN_NORM {
        return Err(ClsrError::DegenerateVector { index: 0 });
    }
    if nv < MIN_NORM {
        return Err(ClsrError::DegenerateVector { index: 1 });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(dot / (nu * nv))
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// `S[i][j] = cosine(Q_i, C_j)`; rows may outnumber or undercount columns (retrieval pools).
pub fn similarity_matrix(g: &mut Graph, questions: Var, contexts: Var) -> Result<Var> {
    let (bq, dq) = g.shape(questions);
    let dc = g.shape(contexts).1;
    if dq != dc {
        return Err(ClsrError::Shape(format!("question width {dq} vs context width {dc}")));
    }
    check_rows(g, questions, 0)?;
    check_rows(g, contexts, bq)?;
    let qn = g.l2_normalize_rows(questions);
    let cn = g.l2_normalize_rows(contexts);
    Ok(g.matmul_t(qn, cn))
}

/// Index of the first zero row, offset so contexts follow questions.
fn check_rows(g: &Graph, x: Var, offset: usize) -> Result<()> {
    let v = g.value(x);
    for r in 0..v.rows() {
        if norm(v.row(r)) < MIN_NORM {
            return Err(ClsrError::DegenerateVector { index: offset + r });
        }
    }
    Ok(())
}

/// `0.5 · (CE over rows of S/τ + CE over columns of S/τ)` with diagonal targets.
pub fn nll_symmetric(g: &mut Graph, s: Var, tau: f64) -> Result<Var> {
    let (b, c) = g.shape(s);
    if b != c || b == 0 {
        return Err(ClsrError::Shape(format!(
            "similarity matrix must be square, got {b}x{c}"
        )));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(ClsrError::Config(format!("temperature {tau} must be positive")));
    }
    let diag: Vec<usize> = (0..b).collect();
    let logits = g.scale(s, 1.0 / tau);
    let row_term = diagonal_ce(g, logits, &diag);
    let t = g.transpose(logits);
    let col_term = diagonal_ce(g, t, &diag);
    let both = g.add(row_term, col_term);
    Ok(g.scale(both, 0.5))
}

fn diagonal_ce(g: &mut Graph, logits: Var, diag: &[usize]) -> Var {
    let lp = g.log_softmax_rows(logits);
    let picked = g.pick(lp, diag);
    let m = g.mean(picked);
    g.scale(m, -1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0 / 3.0,
            beta: 1.0 / 3.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w > 0.0 && w < 1.0;
        if !ok(self.alpha) || !ok(self.beta) || self.alpha + self.beta >= 1.0 {
            return Err(ClsrError::Config(format!(
                "loss weights alpha={} beta={} must lie in (0,1) with alpha+beta < 1",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    pub fn asr_weight(&self) -> f64 {
        1.0 - self.alpha - self.beta
    }

    /// The same weighted sum on plain numbers, in the order used by [`total_loss`].
    pub fn combine(&self, l_asr: f64, l_mae: f64, l_nll: f64) -> f64 {
        self.asr_weight() * l_asr + self.alpha * l_mae + self.beta * l_nll
    }
}

/// `(1−α−β)·L_ASR + α·L_MAE + β·L_NLL`.
pub fn total_loss(g: &mut Graph, l_asr: Var, l_mae: Var, l_nll: Var, weights: LossWeights) -> Result<Var> {
    weights.validate()?;
    let a = g.scale(l_asr, weights.asr_weight());
    let m = g.scale(l_mae, weights.alpha);
    let n = g.scale(l_nll, weights.beta);
    let am = g.add(a, m);
    Ok(g.add(am, n))
}
