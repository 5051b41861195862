//! Vocabulary-simplex quantization of decoder outputs.
//!
//! Each logit row is snapped to the one-hot of its argmax while gradients follow
//! `softmax(d / gamma)`; multiplying by the text embedding table then yields rows
//! that are exact table lookups in the forward pass.

use crate::compute::{Graph, Var};
use crate::corpus::TokenSequence;
use crate::error::{ClsrError, Result};

pub const DEFAULT_GAMMA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientPath {
    /// Straight-through: gradients flow through the tempered softmax.
    StraightThrough,
    /// One-hot constants; no gradient reaches the logits.
    Blocked,
    /// Forward and gradient both follow `softmax(d / gamma)`. Makes a composite
    /// containing the quantizer checkable by finite differences.
    Relaxed,
}

#[derive(Clone, Debug)]
pub struct QuantizedTokens {
    /// `n x |V|` one-hot rows in the forward pass.
    pub q: Var,
    pub hard_indices: TokenSequence,
}

pub fn quantize_st(g: &mut Graph, d: Var, gamma: f64) -> Result<QuantizedTokens> {
    quantize(g, d, gamma, GradientPath::StraightThrough)
}

pub fn quantize(g: &mut Graph, d: Var, gamma: f64, path: GradientPath) -> Result<QuantizedTokens> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(ClsrError::Config(format!(
            "quantizer temperature {gamma} must be positive"
        )));
    }
    let q = match path {
        GradientPath::StraightThrough => g.straight_through(d, gamma),
        GradientPath::Blocked => {
            let q = g.straight_through(d, gamma);
            g.detach(q)
        }
        GradientPath::Relaxed => {
            let s = g.scale(d, 1.0 / gamma);
            g.softmax_rows(s)
        }
    };
    let v = g.value(d);
    let hard_indices = (0..v.rows()).map(|r| v.row_argmax(r)).collect();
    Ok(QuantizedTokens { q, hard_indices })
}

/// `E^{Y'} = Q^st · W^te` with `W^te` of shape `|V| x d_e`.
pub fn map_to_text_space(g: &mut Graph, quantized: &QuantizedTokens, table: Var) -> Result<Var> {
    let (_, v) = g.shape(quantized.q);
    let (tv, _) = g.shape(table);
    if v != tv {
        return Err(ClsrError::Shape(format!(
            "quantized rows have {v} classes but the embedding table has {tv} rows"
        )));
    }
    Ok(g.matmul(quantized.q, table))
}
