//! Long-audio retrieval: segmentation, segment/query embedding, a persistent
//! index with top-k search, and frame-by-token similarity heatmaps.

pub mod index;
pub mod segment;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub use index::{
    load_index, rank_order, save_index, Hit, IndexEntry, IndexMetadata, RetrievalIndex, INDEX_MAGIC, INDEX_VERSION,
};
pub use segment::{segment, segment_count, Segment};

use crate::cif::frame_owners;
use crate::compute::Tensor;
use crate::contrastive::cosine;
use crate::corpus::{SpeechFeatures, TokenId, Vocabulary};
use crate::error::{ClsrError, Result};
use crate::model::Model;

#[derive(Clone, Copy, Debug)]
pub enum Query<'a> {
    Text(&'a [TokenId]),
    Speech(&'a SpeechFeatures),
}

fn unit(v: &Tensor) -> Option<Vec<f64>> {
    let n = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 0.0 && n.is_finite()).then(|| v.data().iter().map(|x| x / n).collect())
}

/// Speech-branch sentence vector, L2-normalised. `None` is the empty-segment
/// sentinel: no token fired (or the vector is degenerate).
pub fn embed_segment(model: &Model, features: &SpeechFeatures) -> Result<Option<Vec<f64>>> {
    Ok(model.speech_inference(features)?.and_then(|inf| unit(&inf.sentence)))
}

pub fn embed_query(model: &Model, query: Query<'_>) -> Result<Option<Vec<f64>>> {
    match query {
        Query::Text(tokens) => Ok(unit(&model.embed_text(tokens)?)),
        Query::Speech(s) => embed_segment(model, s),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BuildReport {
    pub segments: usize,
    /// `(doc_id, segment_index)` of segments excluded as sentinels.
    pub sentinels: Vec<(u64, u32)>,
}

/// Embeds every segment in order; sentinels are logged and left out.
pub fn build_index(
    model: &Model,
    segments: &[Segment],
    metadata: IndexMetadata,
) -> Result<(RetrievalIndex, BuildReport)> {
    if segments.is_empty() {
        return Err(ClsrError::Data("cannot build an index from zero segments".into()));
    }
    let mut entries = Vec::with_capacity(segments.len());
    let mut report = BuildReport {
        segments: segments.len(),
        ..BuildReport::default()
    };
    for seg in segments {
        match embed_segment(model, &seg.features)? {
            Some(v) => entries.push(IndexEntry {
                doc_id: seg.doc_id,
                segment_index: seg.segment_index,
                vector: v.iter().map(|&x| x as f32).collect(),
            }),
            None => {
                log::warn!(
                    "segment ({}, {}) fired no tokens; excluded from the index",
                    seg.doc_id,
                    seg.segment_index
                );
                report.sentinels.push((seg.doc_id, seg.segment_index));
            }
        }
    }
    if entries.is_empty() {
        return Err(ClsrError::Data("every segment was empty; nothing to index".into()));
    }
    Ok((RetrievalIndex::new(model.config.d_model, metadata, entries)?, report))
}

/// `t x m` cosine similarities between frame-aligned speech token representations
/// and the question's text token representations. Each frame takes the token
/// that consumed most of its weight, or the nearest fired token when it fed none.
pub fn heatmap(model: &Model, question: &[TokenId], context: &SpeechFeatures) -> Result<Tensor> {
    if question.is_empty() {
        return Err(ClsrError::Data("heatmap needs a nonempty question".into()));
    }
    let inf = model
        .speech_inference(context)?
        .ok_or_else(|| ClsrError::Data("no token fired on the context; nothing to align".into()))?;
    let text = model.text_token_reps(question)?;
    let owners = nearest_owners(&frame_owners(&inf.contributions));
    let t = owners.len();
    let m = question.len();
    let mut token_sims = Tensor::zeros(inf.token_reps.rows(), m);
    for k in 0..inf.token_reps.rows() {
        for j in 0..m {
            token_sims.set(
                k,
                j,
                cosine(inf.token_reps.row(k), text.row(j))
                    .unwrap_or(0.0)
                    .clamp(-1.0, 1.0),
            );
        }
    }
    let mut out = Tensor::zeros(t, m);
    for (f, owner) in owners.iter().enumerate() {
        out.row_mut(f).copy_from_slice(token_sims.row(*owner));
    }
    Ok(out)
}

/// Fills unowned frames with the closest owned frame's token (earlier frame on ties).
fn nearest_owners(owners: &[Option<usize>]) -> Vec<usize> {
    (0..owners.len())
        .map(|i| {
            (0..owners.len())
                .flat_map(|d| [i.checked_sub(d), Some(i + d)])
                .flatten()
                .find_map(|j| owners.get(j).copied().flatten())
                .unwrap_or(0)
        })
        .collect()
}

/// Writes the heatmap as CSV: a header of question token labels, then one row per frame.
pub fn export_heatmap(
    model: &Model,
    vocab: &Vocabulary,
    question: &[TokenId],
    context: &SpeechFeatures,
    path: &Path,
) -> Result<Tensor> {
    let h = heatmap(model, question, context)?;
    let header: Vec<&str> = question.iter().map(|&t| vocab.token_of(t).unwrap_or("<?>")).collect();
    let mut csv = header.join(",");
    csv.push('\n');
    for r in 0..h.rows() {
        let row: Vec<String> = h.row(r).iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(csv, "{}", row.join(","));
    }
    fs::write(path, csv).map_err(|e| ClsrError::io(path, e))?;
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unowned_frames_take_the_nearest_owner() {
        let owners = [None, Some(0), None, None, Some(1), None];
        assert_eq!(nearest_owners(&owners), vec![0, 0, 0, 1, 1, 1]);
    }
}
