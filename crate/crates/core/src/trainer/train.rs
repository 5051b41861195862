//! Staged optimisation loop.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::config::{ExperimentConfig, Stage, TrainConfig};
use super::optim::{clip_global_norm, Adam};
use crate::compute::{Graph, ParamGroup, Tensor, Var};
use crate::contrastive::{nll_symmetric, similarity_matrix, total_loss};
use crate::corpus::generate::derive_seed;
use crate::corpus::{generate_text_pairs, CorpusConfig, QaPair, SpeechFeatures, TokenId, TokenSequence, Vocabulary};
use crate::error::{ClsrError, Result};
use crate::eval::{embed_split, embed_split_text, evaluate_embeddings};
use crate::model::{Model, SpeechTrainOptions};
use crate::vq::GradientPath;

const STREAM_SHUFFLE: u64 = 101;
const STREAM_SAMPLER: u64 = 102;
const STREAM_MWER: u64 = 103;
const STREAM_TEXT_PAIRS: u64 = 104;

/// One training item; text-only items carry no speech.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub question: &'a [TokenId],
    pub context: &'a [TokenId],
    pub speech: Option<&'a SpeechFeatures>,
}

impl<'a> From<&'a QaPair> for BatchItem<'a> {
    fn from(p: &'a QaPair) -> Self {
        Self {
            question: &p.question,
            context: &p.context,
            speech: Some(&p.context_speech),
        }
    }
}

impl Stage {
    /// Parameter groups held fixed during the stage.
    pub fn frozen_groups(self) -> Vec<ParamGroup> {
        match self {
            Stage::PretrainAsr => vec![ParamGroup::TextEncoder, ParamGroup::Projection],
            Stage::PretrainText => {
                let mut g = ParamGroup::ASR.to_vec();
                g.push(ParamGroup::Projection);
                g
            }
            Stage::Joint => vec![ParamGroup::TextEncoder],
            Stage::PostTrain => ParamGroup::ASR.to_vec(),
        }
    }

    fn uses_speech(self) -> bool {
        self != Stage::PretrainText
    }

    fn uses_contrastive(self) -> bool {
        self != Stage::PretrainAsr
    }

    fn optimises_asr(self) -> bool {
        matches!(self, Stage::PretrainAsr | Stage::Joint)
    }

    fn index(self) -> u64 {
        Stage::ALL.iter().position(|s| *s == self).unwrap() as u64
    }
}

/// One line of the metric log. Losses are epoch means over batches.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub steps: u64,
    pub loss_total: f64,
    pub l_asr: Option<f64>,
    pub l_ce: Option<f64>,
    pub l_mwer: Option<f64>,
    pub l_mae: Option<f64>,
    pub l_nll: Option<f64>,
    /// Held-out corpus WER of greedy transcripts.
    pub wer: Option<f64>,
    /// Held-out Q->C R@1 (text contexts in the text pre-training stage).
    pub r_at_1: Option<f64>,
    /// Held-out C->Q R@1.
    pub r_at_1_cq: Option<f64>,
    /// Mean in-batch R@1 over the epoch's training batches.
    pub batch_r_at_1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricHistory {
    pub records: Vec<EpochRecord>,
}

impl MetricHistory {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("metric records serialise") + "\n")
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| ClsrError::io(path, e))
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn extend(&mut self, other: MetricHistory) {
        self.records.extend(other.records);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub history: MetricHistory,
    /// Epoch whose parameters were kept (the best held-out R@1 when early stopping).
    pub kept_epoch: usize,
    pub stopped_early: bool,
    pub seconds: f64,
}

#[derive(Default)]
struct Accumulator {
    batches: usize,
    asr: f64,
    ce: f64,
    mwer: f64,
    mae: f64,
    nll: f64,
    batch_r1: f64,
    contrastive_batches: usize,
}

/// Batch-mean loss values; a term is `None` when the stage does not use it.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLosses {
    pub asr: Option<f64>,
    pub ce: Option<f64>,
    pub mwer: Option<f64>,
    pub mae: Option<f64>,
    pub nll: Option<f64>,
    pub batch_r1: Option<f64>,
}

/// Model plus optimizer state across stages.
pub struct Trainer {
    pub config: ExperimentConfig,
    pub model: Model,
    pub optimizer: Adam,
}

impl Trainer {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model, config.train.seed)?;
        let optimizer = fresh_optimizer(&config, config.train.stage);
        Ok(Self {
            config,
            model,
            optimizer,
        })
    }

    /// Resumes from a checkpoint; its architecture wins over `config.model`.
    pub fn from_checkpoint(mut config: ExperimentConfig, ckpt: &Checkpoint) -> Result<Self> {
        let model = ckpt.restore_model()?;
        if model.config != config.model {
            log::warn!("checkpoint architecture differs from the config; using the checkpoint's");
            config.model = model.config;
        }
        let optimizer = ckpt.restore_optimizer(&model)?;
        Ok(Self {
            config,
            model,
            optimizer,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, &self.config, Some(&self.optimizer))
    }

    /// Runs one stage with a fresh optimizer. Contrastive stages stop early on the
    /// held-out R@1 averaged over both directions and keep the best epoch.
    pub fn run_stage(&mut self, stage: Stage, train: &[QaPair], held_out: &[QaPair]) -> Result<StageOutcome> {
        if train.is_empty() || held_out.is_empty() {
            return Err(ClsrError::Data("training and held-out splits must be nonempty".into()));
        }
        let started = Instant::now();
        let cfg = self.config.clone();
        let tc = cfg.train;
        self.model.store.set_frozen(&stage.frozen_groups());
        self.optimizer = fresh_optimizer(&cfg, stage);
        let frozen_before = self.frozen_snapshot();

        let mut history = MetricHistory::default();
        let mut best: Option<(f64, usize, crate::compute::ParamStore)> = None;
        let mut waited = 0;
        let mut stopped_early = false;
        let max_epochs = tc.epochs.of(stage);
        for epoch in 1..=max_epochs {
            let epoch_key = stage.index() * 1_000_000 + epoch as u64;
            let synthetic = self.synthetic_text_pairs(stage, epoch_key)?;
            let examples: Vec<BatchItem> = match &synthetic {
                Some(text) => text
                    .iter()
                    .map(|(q, c)| BatchItem {
                        question: q,
                        context: c,
                        speech: None,
                    })
                    .collect(),
                None => train.iter().map(BatchItem::from).collect(),
            };
            let mut order: Vec<usize> = (0..examples.len()).collect();
            let shuffle_seed = derive_seed(tc.seed, STREAM_SHUFFLE, epoch_key);
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));

            let mut acc = Accumulator::default();
            for chunk in order.chunks(tc.batch_size) {
                if stage.uses_contrastive() && chunk.len() < 2 {
                    continue;
                }
                let batch: Vec<&BatchItem> = chunk.iter().map(|&i| &examples[i]).collect();
                let losses = self.step(stage, &batch, epoch)?;
                acc.add(&losses);
            }
            let record = self.epoch_record(stage, epoch, &acc, held_out)?;
            log::info!(
                "{stage} epoch {epoch}: total={:.4} wer={} r@1={}",
                record.loss_total,
                fmt_opt(record.wer),
                fmt_opt(record.r_at_1)
            );
            let r1 = record.r_at_1.zip(record.r_at_1_cq).map(|(a, b)| 0.5 * (a + b));
            history.records.push(record);

            if let (Some(r1), true) = (r1, tc.patience > 0 && stage != Stage::PretrainAsr) {
                if best.as_ref().is_none_or(|(b, _, _)| r1 > *b) {
                    best = Some((r1, epoch, self.model.store.clone()));
                    waited = 0;
                } else {
                    waited += 1;
                    if waited >= tc.patience {
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
        let kept_epoch = match best {
            Some((_, epoch, store)) => {
                self.model.store = store;
                epoch
            }
            None => history.records.len(),
        };
        self.check_frozen_unchanged(&frozen_before)?;
        self.model.store.unfreeze_all();
        Ok(StageOutcome {
            stage,
            history,
            kept_epoch,
            stopped_early,
            seconds: started.elapsed().as_secs_f64(),
        })
    }

    pub fn run_pipeline(
        &mut self,
        stages: &[Stage],
        train: &[QaPair],
        held_out: &[QaPair],
    ) -> Result<Vec<StageOutcome>> {
        stages.iter().map(|&s| self.run_stage(s, train, held_out)).collect()
    }

    /// Fresh clean text pairs for text pre-training, drawn from the corpus law
    /// with an epoch-specific seed; `None` means train on the corpus itself.
    fn synthetic_text_pairs(
        &self,
        stage: Stage,
        epoch_key: u64,
    ) -> Result<Option<Vec<(TokenSequence, TokenSequence)>>> {
        let n = self.config.train.text_pretrain_pairs;
        if stage != Stage::PretrainText || n == 0 {
            return Ok(None);
        }
        let corpus: &CorpusConfig = &self.config.corpus;
        let vocab = Vocabulary::build(corpus.vocab_size, corpus.seed)?;
        let seed = derive_seed(self.config.train.seed, STREAM_TEXT_PAIRS, epoch_key);
        generate_text_pairs(&vocab, corpus, n, seed).map(Some)
    }

    /// Forward, backward and one Adam update over a batch.
    fn step(&mut self, stage: Stage, batch: &[&BatchItem], epoch: usize) -> Result<BatchLosses> {
        let tc = self.config.train;
        let step = self.model.training_steps;
        let mut g = Graph::new();
        let (total, losses) = batch_objective(
            &self.model,
            &tc,
            stage,
            &mut g,
            batch,
            step,
            GradientPath::StraightThrough,
        )?;
        let total_value = g.scalar(total);
        if !total_value.is_finite() {
            return Err(ClsrError::NonFinite(format!(
                "stage {stage} epoch {epoch} step {step}: total={total_value} asr={:?} mae={:?} nll={:?}; first non-finite node {:?}",
                losses.asr,
                losses.mae,
                losses.nll,
                g.first_nonfinite()
            )));
        }

        let mut grads = g.backward(total).param_grads(&g);
        if let Some((id, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
            return Err(ClsrError::NonFinite(format!(
                "stage {stage} epoch {epoch} step {step}: gradient of {} is not finite",
                self.model.store.param(*id).name
            )));
        }
        if let Some((id, t)) = grads.iter().find(|(id, _)| self.model.store.is_frozen(*id)) {
            if t.max_abs() != 0.0 {
                return Err(ClsrError::Internal(format!(
                    "frozen parameter {} received a nonzero gradient",
                    self.model.store.param(*id).name
                )));
            }
        }
        grads.retain(|(id, _)| !self.model.store.is_frozen(*id));
        clip_global_norm(&mut grads, tc.grad_clip);
        self.optimizer.apply(&mut self.model.store, &grads)?;
        self.model.training_steps += 1;
        Ok(losses)
    }

    fn epoch_record(&self, stage: Stage, epoch: usize, acc: &Accumulator, held_out: &[QaPair]) -> Result<EpochRecord> {
        let tc = &self.config.train;
        let n = acc.batches.max(1) as f64;
        let mean = |x: f64, present: bool| present.then_some(x / n);
        let asr_present = stage.optimises_asr();
        let l_asr = mean(acc.asr, asr_present);
        let l_mae = mean(acc.mae, asr_present);
        let l_nll = mean(acc.nll, stage.uses_contrastive());
        let loss_total = match stage {
            Stage::Joint => tc
                .loss
                .combine(l_asr.unwrap_or(0.0), l_mae.unwrap_or(0.0), l_nll.unwrap_or(0.0)),
            Stage::PretrainAsr => tc.loss.combine(l_asr.unwrap_or(0.0), l_mae.unwrap_or(0.0), 0.0),
            Stage::PretrainText | Stage::PostTrain => l_nll.unwrap_or(0.0),
        };
        let (wer, r_at_1, r_at_1_cq) = match stage {
            Stage::PretrainText => {
                let emb = embed_split_text(&self.model, held_out)?;
                let [(_, qc), (_, cq)] = evaluate_embeddings(&emb)?;
                (None, qc.at(1), cq.at(1))
            }
            Stage::PretrainAsr => {
                let hyps = held_out
                    .iter()
                    .map(|p| self.model.transcribe_speech(&p.context_speech))
                    .collect::<Result<Vec<_>>>()?;
                let wer = crate::asr::corpus_wer(
                    hyps.iter()
                        .zip(held_out)
                        .map(|(h, p)| (h.as_slice(), p.context.as_slice())),
                )?;
                (Some(wer), None, None)
            }
            Stage::Joint | Stage::PostTrain => {
                let emb = embed_split(&self.model, held_out, false)?;
                let [(_, qc), (_, cq)] = evaluate_embeddings(&emb)?;
                (Some(emb.wer(held_out)?), qc.at(1), cq.at(1))
            }
        };
        Ok(EpochRecord {
            stage: stage.name().to_string(),
            epoch,
            steps: self.model.training_steps,
            loss_total,
            l_asr,
            l_ce: mean(acc.ce, asr_present),
            l_mwer: mean(acc.mwer, asr_present && tc.n_mwer >= 2),
            l_mae,
            l_nll,
            wer,
            r_at_1,
            r_at_1_cq,
            batch_r_at_1: (acc.contrastive_batches > 0).then(|| acc.batch_r1 / acc.contrastive_batches as f64),
        })
    }

    fn frozen_snapshot(&self) -> Vec<(usize, Tensor)> {
        self.model
            .store
            .iter()
            .filter(|(id, _)| self.model.store.is_frozen(*id))
            .map(|(id, p)| (id.index(), (*p.value).clone()))
            .collect()
    }

    fn check_frozen_unchanged(&self, before: &[(usize, Tensor)]) -> Result<()> {
        for (id, (idx, t)) in self
            .model
            .store
            .ids()
            .filter(|id| self.model.store.is_frozen(*id))
            .zip(before)
        {
            if id.index() != *idx || self.model.store.value(id) != t {
                return Err(ClsrError::Internal(format!(
                    "frozen parameter {} changed during training",
                    self.model.store.param(id).name
                )));
            }
        }
        Ok(())
    }
}

impl Accumulator {
    fn add(&mut self, l: &BatchLosses) {
        self.batches += 1;
        self.asr += l.asr.unwrap_or(0.0);
        self.ce += l.ce.unwrap_or(0.0);
        self.mwer += l.mwer.unwrap_or(0.0);
        self.mae += l.mae.unwrap_or(0.0);
        self.nll += l.nll.unwrap_or(0.0);
        if let Some(r) = l.batch_r1 {
            self.batch_r1 += r;
            self.contrastive_batches += 1;
        }
    }
}

fn speech_options(
    tc: &TrainConfig,
    stage: Stage,
    step: u64,
    item: usize,
    quantizer: GradientPath,
) -> SpeechTrainOptions {
    let asr = stage.optimises_asr();
    SpeechTrainOptions {
        sampler_lambda: (asr && tc.sampler).then_some(tc.lambda),
        label_smoothing: tc.label_smoothing,
        mwer_candidates: if asr { tc.n_mwer } else { 0 },
        mwer_seed: derive_seed(tc.seed, STREAM_MWER, step * 4096 + item as u64),
        sentence: stage.uses_contrastive(),
        quantizer,
    }
}

/// The stage's training loss over `batch`, recorded on `g`. `step` seeds the
/// sampler and MWER draws, so equal inputs give an identical graph. Training
/// uses the straight-through quantizer.
pub fn batch_objective(
    model: &Model,
    tc: &TrainConfig,
    stage: Stage,
    g: &mut Graph,
    batch: &[&BatchItem],
    step: u64,
    quantizer: GradientPath,
) -> Result<(Var, BatchLosses)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, STREAM_SAMPLER, step));
    let inv = 1.0 / batch.len() as f64;

    let mut asr_terms = Vec::new();
    let mut ce_terms = Vec::new();
    let mut mwer_terms = Vec::new();
    let mut mae_terms = Vec::new();
    let mut contexts = Vec::new();
    for (i, pair) in batch.iter().enumerate() {
        if let (true, Some(speech)) = (stage.uses_speech(), pair.speech) {
            let opts = speech_options(tc, stage, step, i, quantizer);
            let out = model.speech_train(g, speech, pair.context, &opts, &mut rng)?;
            if stage.optimises_asr() {
                let ce = g.scale(out.ce, tc.ce_weight);
                let asr = match out.mwer {
                    Some(m) => {
                        mwer_terms.push(m);
                        g.add(ce, m)
                    }
                    None => ce,
                };
                ce_terms.push(out.ce);
                asr_terms.push(asr);
                mae_terms.push(out.mae);
            }
            if let Some(s) = out.sentence {
                contexts.push(s);
            }
        } else if stage.uses_speech() {
            return Err(ClsrError::Internal(format!("stage {stage} needs speech contexts")));
        } else {
            contexts.push(model.text_sentence(g, pair.context)?);
        }
    }
    let mean = |g: &mut Graph, terms: &[Var]| -> Option<Var> {
        if terms.is_empty() {
            return None;
        }
        let stacked = g.concat_rows(terms);
        let s = g.sum(stacked);
        Some(g.scale(s, inv))
    };
    let l_asr = mean(g, &asr_terms);
    let l_ce = mean(g, &ce_terms);
    let l_mwer = mean(g, &mwer_terms);
    let l_mae = mean(g, &mae_terms);

    let (l_nll, batch_r1) = if stage.uses_contrastive() {
        let questions: Vec<Var> = batch
            .iter()
            .map(|p| model.text_sentence(g, p.question))
            .collect::<Result<_>>()?;
        let q = g.concat_rows(&questions);
        let c = g.concat_rows(&contexts);
        let s = similarity_matrix(g, q, c)?;
        let r1 = diagonal_hit_rate(g.value(s));
        (Some(nll_symmetric(g, s, tc.tau)?), Some(r1))
    } else {
        (None, None)
    };

    let total = match (stage, l_asr, l_mae, l_nll) {
        (Stage::Joint, Some(a), Some(m), Some(n)) => total_loss(g, a, m, n, tc.loss)?,
        (Stage::PretrainAsr, Some(a), Some(m), None) => {
            let z = g.constant(Tensor::scalar(0.0));
            total_loss(g, a, m, z, tc.loss)?
        }
        (Stage::PretrainText | Stage::PostTrain, None, None, Some(n)) => n,
        _ => {
            return Err(ClsrError::Internal(format!(
                "inconsistent loss terms for stage {stage}"
            )))
        }
    };
    let value = |v: Option<Var>| v.map(|v| g.scalar(v));
    let losses = BatchLosses {
        asr: value(l_asr),
        ce: value(l_ce),
        mwer: value(l_mwer),
        mae: value(l_mae),
        nll: value(l_nll),
        batch_r1,
    };
    Ok((total, losses))
}

fn fresh_optimizer(cfg: &ExperimentConfig, stage: Stage) -> Adam {
    let t = &cfg.train;
    Adam::new(t.learning_rate_for(stage), t.adam_beta1, t.adam_beta2, t.adam_eps)
}

/// Fraction of rows whose maximum sits on the diagonal (ties to the lower column).
fn diagonal_hit_rate(s: &Tensor) -> f64 {
    let hits = (0..s.rows()).filter(|&r| s.row_argmax(r) == r).count();
    hits as f64 / s.rows() as f64
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

/// Trains one stage from `init` (or a fresh model) and returns the result.
pub fn train_stage(
    config: &ExperimentConfig,
    stage: Stage,
    train: &[QaPair],
    held_out: &[QaPair],
    init: Option<&Checkpoint>,
) -> Result<(Checkpoint, MetricHistory)> {
    let mut trainer = match init {
        Some(ckpt) => Trainer::from_checkpoint(config.clone(), ckpt)?,
        None => Trainer::new(config.clone())?,
    };
    let outcome = trainer.run_stage(stage, train, held_out)?;
    Ok((trainer.checkpoint(), outcome.history))
}
