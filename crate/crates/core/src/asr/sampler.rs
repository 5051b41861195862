use rand::seq::index;
use rand::Rng;

use crate::compute::{Graph, Var};
use crate::corpus::{TokenId, PAD};
use crate::error::{ClsrError, Result};

/// Second-pass decoder input `E^s` and where it deviates from `E^a`.
#[derive(Clone, Debug)]
pub struct SamplerMix {
    pub embeddings: Var,
    pub replaced: Vec<usize>,
    pub erroneous: Vec<usize>,
}

/// Positions where the first-pass transcription misses the (non-pad) target.
pub fn erroneous_positions(y_asr: &[TokenId], y_con: &[TokenId]) -> Vec<usize> {
    y_asr
        .iter()
        .zip(y_con)
        .enumerate()
        .filter(|(_, (a, c))| **c != PAD && a != c)
        .map(|(i, _)| i)
        .collect()
}

/// `⌈λ · errors⌉`, robust to products like `0.3 · 10` landing just above an integer.
pub fn replacement_count(errors: usize, lambda: f64) -> usize {
    ((lambda * errors as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Replaces `⌈λ · #errors⌉` uniformly chosen erroneous rows of `e_a` with the rows of `e_c`.
pub fn sampler_mix<R: Rng + ?Sized>(
    g: &mut Graph,
    e_a: Var,
    e_c: Var,
    y_asr: &[TokenId],
    y_con: &[TokenId],
    lambda: f64,
    rng: &mut R,
) -> Result<SamplerMix> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(ClsrError::Config(format!("mixing ratio {lambda} outside (0, 1)")));
    }
    let n = g.shape(e_a).0;
    if g.shape(e_c) != g.shape(e_a) || y_asr.len() != n || y_con.len() != n {
        return Err(ClsrError::Shape(format!(
            "sampler inputs disagree: E^a {:?}, E^c {:?}, {} hypotheses, {} targets",
            g.shape(e_a),
            g.shape(e_c),
            y_asr.len(),
            y_con.len()
        )));
    }
    let erroneous = erroneous_positions(y_asr, y_con);
    let k = replacement_count(erroneous.len(), lambda);
    if k == 0 {
        return Ok(SamplerMix {
            embeddings: e_a,
            replaced: Vec::new(),
            erroneous,
        });
    }
    let mut replaced: Vec<usize> = index::sample(rng, erroneous.len(), k)
        .into_iter()
        .map(|j| erroneous[j])
        .collect();
    replaced.sort_unstable();
    let mut take = vec![false; n];
    for &i in &replaced {
        take[i] = true;
    }
    let embeddings = g.select_rows(e_a, e_c, &take);
    Ok(SamplerMix {
        embeddings,
        replaced,
        erroneous,
    })
}
