//! Retrieval and recognition metrics, and experiment reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::asr::corpus_wer;
use crate::compute::Tensor;
use crate::corpus::{
    compose_longform_with, generate_pairs, CorpusConfig, LongFormConfig, LongFormDocument, QaPair, SyntheticCorpus,
    TokenSequence,
};
use crate::error::{ClsrError, Result};
use crate::model::Model;
use crate::retriever::{build_index, embed_query, segment, IndexMetadata, Query};

pub const REPORT_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Direction {
    /// Questions query the context pool.
    #[serde(rename = "Q->C")]
    QuestionToContext,
    /// Contexts query the question pool.
    #[serde(rename = "C->Q")]
    ContextToQuestion,
}

impl Direction {
    pub fn label(self) -> &'static str {
        match self {
            Direction::QuestionToContext => "Q->C",
            Direction::ContextToQuestion => "C->Q",
        }
    }
}

/// Full rankings of candidate ids per query, with the gold id of each query.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalRun {
    pub direction: Direction,
    pub rankings: Vec<Vec<usize>>,
    pub gold: Vec<usize>,
}

impl RetrievalRun {
    pub fn universe(&self) -> usize {
        self.rankings.first().map_or(0, Vec::len)
    }
}

/// Fraction of queries whose gold id is among the first `k` candidates.
/// `k` beyond the universe is clamped.
pub fn recall_at_k(run: &RetrievalRun, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(ClsrError::Metric("recall needs k >= 1".into()));
    }
    if run.rankings.is_empty() {
        return Err(ClsrError::Metric("retrieval run has no queries".into()));
    }
    let universe = run.universe();
    let k = if k > universe {
        log::warn!("k={k} exceeds the {universe}-candidate universe; clamping");
        universe
    } else {
        k
    };
    let hits = run
        .rankings
        .iter()
        .zip(&run.gold)
        .filter(|(ranking, gold)| ranking[..k].contains(gold))
        .count();
    Ok(hits as f64 / run.rankings.len() as f64)
}

/// Ranks every row of `targets` for every row of `queries` by dot product
/// (rows are unit vectors), ties broken by lower id. Gold of query `i` is `i`.
pub fn rank_by_similarity(queries: &Tensor, targets: &Tensor, direction: Direction) -> Result<RetrievalRun> {
    if queries.rows() == 0 || targets.rows() == 0 {
        return Err(ClsrError::Metric("cannot rank an empty split".into()));
    }
    if queries.cols() != targets.cols() {
        return Err(ClsrError::Shape("query and target widths differ".into()));
    }
    let scores = queries.matmul(&targets.transpose());
    let rankings = (0..scores.rows())
        .map(|i| {
            let row = scores.row(i);
            let mut ids: Vec<usize> = (0..row.len()).collect();
            ids.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            ids
        })
        .collect();
    Ok(RetrievalRun {
        direction,
        rankings,
        gold: (0..queries.rows()).collect(),
    })
}

/// Unit-normalised question and context embeddings of a split.
#[derive(Clone, Debug)]
pub struct SplitEmbeddings {
    pub questions: Tensor,
    pub contexts: Tensor,
    /// Contexts for which no token fired (embedded as the zero vector).
    pub empty_contexts: usize,
    /// Greedy transcripts of the speech contexts (empty for text contexts).
    pub transcripts: Vec<TokenSequence>,
}

impl SplitEmbeddings {
    /// Corpus WER of the transcripts against the clean contexts.
    pub fn wer(&self, pairs: &[QaPair]) -> Result<f64> {
        if self.transcripts.len() != pairs.len() {
            return Err(ClsrError::Metric("split has no speech transcripts".into()));
        }
        corpus_wer(
            self.transcripts
                .iter()
                .zip(pairs)
                .map(|(h, p)| (h.as_slice(), p.context.as_slice())),
        )
    }
}

pub fn unit_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

fn stack(rows: Vec<Tensor>, dim: usize) -> Result<Tensor> {
    let n = rows.len();
    Tensor::from_vec(n, dim, rows.into_iter().flat_map(Tensor::into_data).collect())
}

/// Text questions (or speech questions when present and `speech_questions` is set)
/// against speech contexts.
pub fn embed_split(model: &Model, pairs: &[QaPair], speech_questions: bool) -> Result<SplitEmbeddings> {
    if pairs.is_empty() {
        return Err(ClsrError::Metric("evaluation split is empty".into()));
    }
    let d = model.config.d_model;
    let mut empty = 0;
    let mut speech_vec = |s| -> Result<(Tensor, TokenSequence)> {
        Ok(match model.speech_inference(s)? {
            Some(inf) => (inf.sentence, inf.tokens),
            None => {
                empty += 1;
                (Tensor::zeros(1, d), Vec::new())
            }
        })
    };
    let mut contexts = Vec::with_capacity(pairs.len());
    let mut questions = Vec::with_capacity(pairs.len());
    let mut transcripts = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (c, t) = speech_vec(&p.context_speech)?;
        contexts.push(c);
        transcripts.push(t);
        questions.push(match (&p.question_speech, speech_questions) {
            (Some(s), true) => speech_vec(s)?.0,
            _ => model.embed_text(&p.question)?,
        });
    }
    Ok(SplitEmbeddings {
        questions: unit_rows(&stack(questions, d)?),
        contexts: unit_rows(&stack(contexts, d)?),
        empty_contexts: empty,
        transcripts,
    })
}

/// Text questions against the clean text of the contexts.
pub fn embed_split_text(model: &Model, pairs: &[QaPair]) -> Result<SplitEmbeddings> {
    if pairs.is_empty() {
        return Err(ClsrError::Metric("evaluation split is empty".into()));
    }
    let d = model.config.d_model;
    let questions = pairs
        .iter()
        .map(|p| model.embed_text(&p.question))
        .collect::<Result<Vec<_>>>()?;
    let contexts = pairs
        .iter()
        .map(|p| model.embed_text(&p.context))
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitEmbeddings {
        questions: unit_rows(&stack(questions, d)?),
        contexts: unit_rows(&stack(contexts, d)?),
        empty_contexts: 0,
        transcripts: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalMetrics {
    pub direction: Direction,
    /// `(k, R@k)` for each reported k.
    pub recall: Vec<(usize, f64)>,
}

impl RetrievalMetrics {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }
}

pub fn metrics_of(run: &RetrievalRun) -> Result<RetrievalMetrics> {
    Ok(RetrievalMetrics {
        direction: run.direction,
        recall: REPORT_KS
            .iter()
            .map(|&k| Ok((k, recall_at_k(run, k.min(run.universe()))?)))
            .collect::<Result<_>>()?,
    })
}

/// Both directions over embedded splits.
pub fn evaluate_embeddings(emb: &SplitEmbeddings) -> Result<[(RetrievalRun, RetrievalMetrics); 2]> {
    let qc = rank_by_similarity(&emb.questions, &emb.contexts, Direction::QuestionToContext)?;
    let cq = rank_by_similarity(&emb.contexts, &emb.questions, Direction::ContextToQuestion)?;
    let (mq, mc) = (metrics_of(&qc)?, metrics_of(&cq)?);
    Ok([(qc, mq), (cq, mc)])
}

/// Embeds the split and ranks it. Refuses models that never took an optimizer step.
pub fn evaluate_retrieval(
    model: &Model,
    pairs: &[QaPair],
    direction: Direction,
) -> Result<(RetrievalRun, RetrievalMetrics)> {
    if model.training_steps == 0 {
        return Err(ClsrError::Config(
            "model has not been trained; refusing to evaluate".into(),
        ));
    }
    let emb = embed_split(model, pairs, false)?;
    let [qc, cq] = evaluate_embeddings(&emb)?;
    Ok(match direction {
        Direction::QuestionToContext => qc,
        Direction::ContextToQuestion => cq,
    })
}

/// Corpus WER of greedy transcripts of the split's contexts.
pub fn evaluate_wer(model: &Model, pairs: &[QaPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(ClsrError::Metric("evaluation split is empty".into()));
    }
    let hyps = pairs
        .iter()
        .map(|p| model.transcribe_speech(&p.context_speech))
        .collect::<Result<Vec<_>>>()?;
    corpus_wer(
        hyps.iter()
            .zip(pairs)
            .map(|(h, p)| (h.as_slice(), p.context.as_slice())),
    )
}

/// Fresh identifiable pairs (same vocabulary and acoustics as `corpus`, seeded
/// separately) composed into long-form documents.
pub fn longform_documents(
    corpus: &SyntheticCorpus,
    corpus_config: &CorpusConfig,
    documents: usize,
    config: &LongFormConfig,
) -> Result<Vec<LongFormDocument>> {
    let cfg = CorpusConfig {
        pairs: documents,
        ..*corpus_config
    };
    let pairs = generate_pairs(&corpus.vocab, &corpus.bank, &cfg, config.seed)?;
    compose_longform_with(&pairs, config)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LongFormReport {
    pub documents: usize,
    pub hits: usize,
    pub accuracy: f64,
    /// Segments excluded because no token fired.
    pub sentinel_segments: usize,
}

/// Top-1 segment of each document for its question; a hit when the chosen
/// window's midpoint lies inside the planted region.
pub fn evaluate_longform(
    model: &Model,
    docs: &[LongFormDocument],
    window: usize,
    hop: usize,
) -> Result<LongFormReport> {
    if docs.is_empty() {
        return Err(ClsrError::Metric("no long-form documents".into()));
    }
    let mut hits = 0;
    let mut sentinels = 0;
    for doc in docs {
        let segments = segment(doc.doc_id, &doc.speech, window, hop)?;
        let meta = IndexMetadata {
            model_hash: String::new(),
            window: window as u32,
            hop: hop as u32,
        };
        let (index, report) = match build_index(model, &segments, meta) {
            Ok(built) => built,
            Err(ClsrError::Data(_)) => {
                sentinels += segments.len();
                continue;
            }
            Err(e) => return Err(e),
        };
        sentinels += report.sentinels.len();
        let Some(q) = embed_query(model, Query::Text(&doc.question))? else {
            continue;
        };
        if let Some(top) = index.search_topk(&q, 1)?.first() {
            let seg = &segments[top.segment_index as usize];
            let mid = (seg.start + seg.end) / 2;
            let gold = doc.segments_gold * doc.window_frames..(doc.segments_gold + 1) * doc.window_frames;
            hits += usize::from(gold.contains(&mid));
        }
    }
    Ok(LongFormReport {
        documents: docs.len(),
        hits,
        accuracy: hits as f64 / docs.len() as f64,
        sentinel_segments: sentinels,
    })
}

/// One table row of a report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub stage: String,
    pub direction: String,
    pub k: usize,
    pub recall: Option<f64>,
    pub wer: Option<f64>,
}

/// Final metrics of one stage, as fed to [`emit_report`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageSummary {
    pub stage: String,
    pub wer: Option<f64>,
    pub retrieval: Vec<RetrievalMetrics>,
}

/// Writes `<path>` (text table) and `<path>.jsonl` (one record per row).
/// Rows cover every (stage, direction, k); missing values print as `n/a`.
pub fn emit_report(summaries: &[StageSummary], path: &Path) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for s in summaries {
        for dir in [Direction::QuestionToContext, Direction::ContextToQuestion] {
            let m = s.retrieval.iter().find(|m| m.direction == dir);
            for k in REPORT_KS {
                rows.push(ReportRow {
                    stage: s.stage.clone(),
                    direction: dir.label().to_string(),
                    k,
                    recall: m.and_then(|m| m.at(k)),
                    wer: s.wer,
                });
            }
        }
    }
    let cell = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
    let mut text = format!("{:<14} {:<5} {:>3} {:>8} {:>8}\n", "stage", "dir", "k", "recall", "wer");
    for r in &rows {
        let _ = writeln!(
            text,
            "{:<14} {:<5} {:>3} {:>8} {:>8}",
            r.stage,
            r.direction,
            r.k,
            cell(r.recall),
            cell(r.wer)
        );
    }
    fs::write(path, text).map_err(|e| ClsrError::io(path, e))?;
    let mut jsonl = String::new();
    for r in &rows {
        jsonl.push_str(&serde_json::to_string(r).map_err(|e| ClsrError::Internal(e.to_string()))?);
        jsonl.push('\n');
    }
    let jpath = path.with_extension("jsonl");
    fs::write(&jpath, jsonl).map_err(|e| ClsrError::io(&jpath, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn perfect(n: usize) -> RetrievalRun {
        RetrievalRun {
            direction: Direction::QuestionToContext,
            rankings: (0..n)
                .map(|i| {
                    let mut r: Vec<usize> = vec![i];
                    r.extend((0..n).filter(|&j| j != i));
                    r
                })
                .collect(),
            gold: (0..n).collect(),
        }
    }

    #[test]
    fn perfect_run_has_unit_recall() {
        let run = perfect(8);
        assert_eq!(recall_at_k(&run, 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(&run, 100).unwrap(), 1.0);
        assert!(recall_at_k(&run, 0).is_err());
    }

    #[test]
    fn random_rankings_hit_chance_within_three_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n_queries = 10_000;
        let universe = 64;
        let rankings = (0..n_queries)
            .map(|_| {
                let mut r: Vec<usize> = (0..universe).collect();
                r.shuffle(&mut rng);
                r
            })
            .collect();
        let run = RetrievalRun {
            direction: Direction::QuestionToContext,
            rankings,
            gold: vec![0; n_queries],
        };
        let p = 1.0 / universe as f64;
        let sigma = (p * (1.0 - p) / n_queries as f64).sqrt();
        let r1 = recall_at_k(&run, 1).unwrap();
        assert!((r1 - p).abs() <= 3.0 * sigma, "{r1}");
        let mut last = 0.0;
        for k in 1..=universe {
            let r = recall_at_k(&run, k).unwrap();
            assert!(r >= last);
            last = r;
        }
        assert_eq!(last, 1.0);
    }

    #[test]
    fn similarity_ranking_breaks_ties_by_id() {
        let q = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let t = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let run = rank_by_similarity(&q, &t, Direction::QuestionToContext).unwrap();
        assert_eq!(run.rankings[0], vec![1, 2, 0]);
        assert!(rank_by_similarity(&Tensor::zeros(0, 2), &t, Direction::QuestionToContext).is_err());
    }

    #[test]
    fn report_is_complete_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.txt");
        let summaries = vec![
            StageSummary {
                stage: "joint".into(),
                wer: Some(0.05),
                retrieval: vec![metrics_of(&perfect(4)).unwrap()],
            },
            StageSummary {
                stage: "post_train".into(),
                ..StageSummary::default()
            },
        ];
        let rows = emit_report(&summaries, &path).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 3);
        let first = fs::read(&path).unwrap();
        emit_report(&summaries, &path).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
        let text = String::from_utf8(first).unwrap();
        assert!(text.contains("n/a"));
        assert_eq!(
            fs::read_to_string(path.with_extension("jsonl"))
                .unwrap()
                .lines()
                .count(),
            12
        );
    }
}
