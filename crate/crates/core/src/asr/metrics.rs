use crate::corpus::TokenId;
use crate::error::{ClsrError, Result};

/// Token Levenshtein distance (unit-cost insert, delete, substitute).
pub fn edit_distance(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `edit_distance(hyp, reference) / |reference|`.
pub fn wer(hyp: &[TokenId], reference: &[TokenId]) -> Result<f64> {
    if reference.is_empty() {
        return Err(ClsrError::Metric("word error rate needs a non-empty reference".into()));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

/// Corpus WER: total edits over total reference tokens.
pub fn corpus_wer<'a>(pairs: impl IntoIterator<Item = (&'a [TokenId], &'a [TokenId])>) -> Result<f64> {
    let (mut edits, mut tokens) = (0usize, 0usize);
    for (hyp, reference) in pairs {
        if reference.is_empty() {
            return Err(ClsrError::Metric("empty reference in corpus".into()));
        }
        edits += edit_distance(hyp, reference);
        tokens += reference.len();
    }
    if tokens == 0 {
        return Err(ClsrError::Metric("corpus has no references".into()));
    }
    Ok(edits as f64 / tokens as f64)
}
