//! Continuous integrate-and-fire.
//!
//! A predictor assigns every frame a weight in `[0, 1]`. Weights are accumulated
//! left to right; whenever the running sum crosses a multiple of `beta` a token
//! fires, the boundary frame's weight is split between the two neighbouring
//! tokens, and each token embedding is the weighted sum of its frames. The
//! contribution matrix is built by [`Graph::cif_weights`], so every fired token
//! integrates exactly `beta` of weight.

use rand::Rng;

use crate::compute::encoder::DepthwiseConv3;
use crate::compute::{Graph, Linear, ParamGroup, ParamStore, Tensor, Var};
use crate::error::{ClsrError, Result};

/// Tolerance when counting full accumulations, so `Σα = 2.0` (up to rounding) fires twice.
const COUNT_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CifConfig {
    pub beta: f64,
    /// At inference a trailing residue of at least `tail_fraction * beta` fires one more token.
    pub tail_fraction: f64,
}

impl Default for CifConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            tail_fraction: 0.5,
        }
    }
}

impl CifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(ClsrError::Config(format!(
                "cif threshold {} must be positive",
                self.beta
            )));
        }
        if !(0.0..=1.0).contains(&self.tail_fraction) {
            return Err(ClsrError::Config(format!(
                "tail fraction {} outside [0, 1]",
                self.tail_fraction
            )));
        }
        Ok(())
    }
}

/// Weight predictor: depthwise conv (kernel 3) → GELU → linear to one scalar → sigmoid.
#[derive(Clone, Debug)]
pub struct CifPredictor {
    pub conv: DepthwiseConv3,
    pub proj: Linear,
}

impl CifPredictor {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d_model: usize, rng: &mut R) -> Self {
        Self {
            conv: DepthwiseConv3::new(store, "cif.conv", ParamGroup::Cif, d_model, rng),
            proj: Linear::new(store, "cif.proj", ParamGroup::Cif, d_model, 1, rng),
        }
    }

    /// `t x d_m` frame representations to a `t x 1` weight column.
    pub fn predict_weights(&self, g: &mut Graph, store: &ParamStore, hs: Var) -> Result<Var> {
        let (t, d) = g.shape(hs);
        if t == 0 {
            return Err(ClsrError::Shape("cannot predict weights for zero frames".into()));
        }
        if d != self.proj.in_dim(store) {
            return Err(ClsrError::Shape(format!(
                "frame width {d} does not match predictor width {}",
                self.proj.in_dim(store)
            )));
        }
        let c = self.conv.forward(g, store, hs);
        let c = g.gelu(c);
        let logits = self.proj.forward(g, store, c);
        Ok(g.sigmoid(logits))
    }
}

/// Token-aligned acoustic embeddings `E^a` with their frame contribution matrix.
#[derive(Clone, Copy, Debug)]
pub struct FiredTokens {
    /// `n x d_m`.
    pub embeddings: Var,
    /// `n x t`; row `k` holds the weight each frame contributes to token `k`.
    pub contributions: Var,
    pub count: usize,
}

/// Rescales `alpha` so that it sums to `n_target`.
pub fn scale_weights(g: &mut Graph, alpha: Var, n_target: usize) -> Result<Var> {
    scale_weights_to(g, alpha, n_target as f64)
}

fn scale_weights_to(g: &mut Graph, alpha: Var, total: f64) -> Result<Var> {
    let sum = g.value(alpha).sum();
    if !(sum > 0.0 && sum.is_finite()) {
        return Err(ClsrError::DegenerateWeights(format!("weights sum to {sum}")));
    }
    let s = g.sum(alpha);
    let inv = g.recip(s);
    let unit = g.mul_scalar_var(alpha, inv);
    Ok(g.scale(unit, total))
}

/// Number of complete accumulations of `beta` in `alpha`.
pub fn fired_count(alpha: &Tensor, beta: f64) -> usize {
    (alpha.sum() / beta + COUNT_EPS).floor().max(0.0) as usize
}

/// Fires every complete accumulation; any residue below `beta` is dropped.
pub fn fire(g: &mut Graph, hs: Var, alpha: Var, beta: f64) -> Result<FiredTokens> {
    let count = fired_count(g.value(alpha), beta);
    fire_n(g, hs, alpha, beta, count)
}

/// Inference firing: complete accumulations plus one tail token when the residue
/// reaches `tail_fraction * beta`.
pub fn fire_inference(g: &mut Graph, hs: Var, alpha: Var, config: &CifConfig) -> Result<FiredTokens> {
    let total = g.value(alpha).sum();
    let mut count = fired_count(g.value(alpha), config.beta);
    let residue = total - count as f64 * config.beta;
    if residue >= config.tail_fraction * config.beta && residue > COUNT_EPS {
        count += 1;
    }
    fire_n(g, hs, alpha, config.beta, count)
}

/// Training firing: scales `alpha` to `n_target * beta` so exactly `n_target` tokens fire.
pub fn fire_training(g: &mut Graph, hs: Var, alpha: Var, n_target: usize, beta: f64) -> Result<FiredTokens> {
    if n_target == 0 {
        return Err(ClsrError::DegenerateTarget("training target has no tokens".into()));
    }
    let scaled = scale_weights_to(g, alpha, n_target as f64 * beta)?;
    fire_n(g, hs, scaled, beta, n_target)
}

fn fire_n(g: &mut Graph, hs: Var, alpha: Var, beta: f64, count: usize) -> Result<FiredTokens> {
    if !(beta > 0.0) {
        return Err(ClsrError::Config(format!("cif threshold {beta} must be positive")));
    }
    let (t, one) = g.shape(alpha);
    if one != 1 || t != g.shape(hs).0 {
        return Err(ClsrError::Shape(format!(
            "weights {t}x{one} do not match {} frames",
            g.shape(hs).0
        )));
    }
    let contributions = g.cif_weights(alpha, beta, count);
    let embeddings = g.matmul(contributions, hs);
    Ok(FiredTokens {
        embeddings,
        contributions,
        count,
    })
}

/// `|Σα − n_target|` on the unscaled weights.
pub fn mae_length_loss(g: &mut Graph, alpha: Var, n_target: usize) -> Var {
    let s = g.sum(alpha);
    let d = g.add_scalar(s, -(n_target as f64));
    g.abs(d)
}

/// For each frame, the token receiving most of its weight (`None` if it fed no token).
pub fn frame_owners(contributions: &Tensor) -> Vec<Option<usize>> {
    (0..contributions.cols())
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for k in 0..contributions.rows() {
                let w = contributions.get(k, i);
                if w > 0.0 && best.is_none_or(|(_, bw)| w > bw) {
                    best = Some((k, w));
                }
            }
            best.map(|(k, _)| k)
        })
        .collect()
}
