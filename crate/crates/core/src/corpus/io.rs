//! JSON-lines corpus files: one pair per line,
//! `{"pair_id", "question", "context", "context_speech", "question_speech"}` where
//! speech is `{"shape": [frames, dim], "data": [row-major floats]}` or `null`.
//! Long-form document files use the same speech encoding, one document per line:
//! `{"doc_id", "question", "gold_pair_id", "segments_gold", "window_frames", "speech"}`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::acoustic::SpeechFeatures;
use super::generate::QaPair;
use super::longform::LongFormDocument;
use super::vocab::TokenSequence;
use crate::compute::Tensor;
use crate::error::{ClsrError, Result};

#[derive(Serialize, Deserialize)]
struct SpeechRecord {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    pair_id: u64,
    question: TokenSequence,
    context: TokenSequence,
    context_speech: SpeechRecord,
    question_speech: Option<SpeechRecord>,
}

impl From<&SpeechFeatures> for SpeechRecord {
    fn from(s: &SpeechFeatures) -> Self {
        Self {
            shape: [s.num_frames(), s.feature_dim()],
            data: s.frames().data().to_vec(),
        }
    }
}

impl SpeechRecord {
    fn into_features(self) -> Result<SpeechFeatures> {
        SpeechFeatures::new(Tensor::from_vec(self.shape[0], self.shape[1], self.data)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocRecord {
    doc_id: u64,
    question: TokenSequence,
    gold_pair_id: u64,
    segments_gold: usize,
    window_frames: usize,
    speech: SpeechRecord,
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl Iterator<Item = T>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| ClsrError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(&rec).map_err(|e| ClsrError::Internal(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| ClsrError::io(path, e))?;
    }
    out.flush().map_err(|e| ClsrError::io(path, e))
}

/// Blank lines are skipped; line numbers in errors are 1-based.
fn parse_jsonl<R, T>(text: &str, convert: impl Fn(R) -> Result<T>) -> Result<Vec<T>>
where
    R: for<'de> Deserialize<'de>,
{
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| ClsrError::Parse { line: n + 1, message };
        let rec: R = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        out.push(convert(rec).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, pairs: &[QaPair]) -> Result<()> {
    write_jsonl(
        path,
        pairs.iter().map(|p| PairRecord {
            pair_id: p.pair_id,
            question: p.question.clone(),
            context: p.context.clone(),
            context_speech: (&p.context_speech).into(),
            question_speech: p.question_speech.as_ref().map(Into::into),
        }),
    )
}

pub fn read_corpus(path: &Path) -> Result<Vec<QaPair>> {
    let text = fs::read_to_string(path).map_err(|e| ClsrError::io(path, e))?;
    parse_corpus(&text)
}

pub fn parse_corpus(text: &str) -> Result<Vec<QaPair>> {
    parse_jsonl(text, |rec: PairRecord| {
        Ok(QaPair {
            pair_id: rec.pair_id,
            question: rec.question,
            context: rec.context,
            context_speech: rec.context_speech.into_features()?,
            question_speech: rec.question_speech.map(SpeechRecord::into_features).transpose()?,
        })
    })
}

pub fn write_longform(path: &Path, docs: &[LongFormDocument]) -> Result<()> {
    write_jsonl(
        path,
        docs.iter().map(|d| DocRecord {
            doc_id: d.doc_id,
            question: d.question.clone(),
            gold_pair_id: d.gold_pair_id,
            segments_gold: d.segments_gold,
            window_frames: d.window_frames,
            speech: (&d.speech).into(),
        }),
    )
}

pub fn read_longform(path: &Path) -> Result<Vec<LongFormDocument>> {
    let text = fs::read_to_string(path).map_err(|e| ClsrError::io(path, e))?;
    parse_jsonl(&text, |rec: DocRecord| {
        if rec.window_frames == 0 {
            return Err(ClsrError::Data("window_frames must be positive".into()));
        }
        Ok(LongFormDocument {
            doc_id: rec.doc_id,
            question: rec.question,
            gold_pair_id: rec.gold_pair_id,
            segments_gold: rec.segments_gold,
            window_frames: rec.window_frames,
            speech: rec.speech.into_features()?,
        })
    })
}
