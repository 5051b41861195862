//! Flat `key = value` experiment configuration.
//!
//! One file carries corpus, model, training and retrieval settings. Unknown keys
//! and duplicate keys are rejected; `#` starts a comment. [`ExperimentConfig::to_text`]
//! is canonical (every key, fixed order), so its SHA-256 identifies a run.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::cif::CifConfig;
use crate::contrastive::{LossWeights, DEFAULT_TAU};
use crate::corpus::{CorpusConfig, LongFormConfig, DEFAULT_WINDOW_FRAMES};
use crate::error::{ClsrError, Result};
use crate::model::{ModelConfig, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    PretrainAsr,
    PretrainText,
    Joint,
    PostTrain,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::PretrainAsr, Stage::PretrainText, Stage::Joint, Stage::PostTrain];

    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainAsr => "pretrain_asr",
            Stage::PretrainText => "pretrain_text",
            Stage::Joint => "joint",
            Stage::PostTrain => "post_train",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| ClsrError::Config(format!("unknown stage '{s}'")))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageEpochs {
    pub pretrain_asr: usize,
    pub pretrain_text: usize,
    pub joint: usize,
    pub post_train: usize,
}

impl StageEpochs {
    pub fn of(&self, stage: Stage) -> usize {
        match stage {
            Stage::PretrainAsr => self.pretrain_asr,
            Stage::PretrainText => self.pretrain_text,
            Stage::Joint => self.joint,
            Stage::PostTrain => self.post_train,
        }
    }
}

/// Per-stage learning rates; `None` inherits [`TrainConfig::learning_rate`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageRates {
    pub pretrain_asr: Option<f64>,
    pub pretrain_text: Option<f64>,
    pub joint: Option<f64>,
    pub post_train: Option<f64>,
}

impl StageRates {
    fn slot(&mut self, stage: Stage) -> &mut Option<f64> {
        match stage {
            Stage::PretrainAsr => &mut self.pretrain_asr,
            Stage::PretrainText => &mut self.pretrain_text,
            Stage::Joint => &mut self.joint,
            Stage::PostTrain => &mut self.post_train,
        }
    }

    fn get(&self, stage: Stage) -> Option<f64> {
        match stage {
            Stage::PretrainAsr => self.pretrain_asr,
            Stage::PretrainText => self.pretrain_text,
            Stage::Joint => self.joint,
            Stage::PostTrain => self.post_train,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Maximum epochs per stage; early stopping may end a stage sooner.
    pub epochs: StageEpochs,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub stage_learning_rates: StageRates,
    pub seed: u64,
    pub loss: LossWeights,
    /// Sampler mixing ratio; `sampler = false` runs a single decoder pass.
    pub lambda: f64,
    pub sampler: bool,
    pub tau: f64,
    pub ce_weight: f64,
    /// MWER candidates per utterance; below 2 disables MWER.
    pub n_mwer: usize,
    pub label_smoothing: f64,
    /// Fresh synthetic text pairs per text pre-training epoch; 0 uses the corpus pairs.
    pub text_pretrain_pairs: usize,
    /// Epochs without held-out R@1 improvement before stopping; 0 disables.
    pub patience: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Joint,
            epochs: StageEpochs {
                pretrain_asr: 30,
                pretrain_text: 20,
                joint: 40,
                post_train: 10,
            },
            batch_size: 16,
            learning_rate: 5e-5,
            stage_learning_rates: StageRates::default(),
            seed: 7,
            loss: LossWeights::default(),
            lambda: 0.75,
            sampler: true,
            tau: DEFAULT_TAU,
            ce_weight: 1.0,
            n_mwer: 4,
            label_smoothing: 0.0,
            text_pretrain_pairs: 2048,
            patience: 5,
            grad_clip: 5.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate_for(&self, stage: Stage) -> f64 {
        self.stage_learning_rates.get(stage).unwrap_or(self.learning_rate)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let err = |m: String| Err(ClsrError::Config(m));
        for stage in Stage::ALL {
            let lr = self.learning_rate_for(stage);
            if !(lr > 0.0 && lr.is_finite()) {
                return err(format!("learning rate {lr} for {stage} must be positive"));
            }
        }
        if self.batch_size < 2 {
            return err(format!(
                "batch_size {} must be at least 2 for in-batch negatives",
                self.batch_size
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return err(format!("lambda {} must lie in (0, 1]", self.lambda));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return err(format!("tau {} must be positive", self.tau));
        }
        if !(self.ce_weight >= 0.0) || !(0.0..1.0).contains(&self.label_smoothing) {
            return err("ce_weight must be >= 0 and label_smoothing in [0, 1)".into());
        }
        if !(self.grad_clip >= 0.0) || !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2)
        {
            return err("grad_clip must be >= 0 and Adam betas in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return err("adam_eps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalConfig {
    pub window: usize,
    pub hop: usize,
    pub k: usize,
    pub longform_docs: usize,
    pub longform: LongFormConfig,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW_FRAMES,
            hop: DEFAULT_WINDOW_FRAMES,
            k: 1,
            longform_docs: 100,
            longform: LongFormConfig {
                seed: 29,
                ..LongFormConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    /// Trailing pairs of the corpus held out for evaluation.
    pub held_out: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub retrieval: RetrievalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            held_out: 64,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            retrieval: RetrievalConfig::default(),
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str, line: usize) -> Result<T> {
    raw.parse().map_err(|_| ClsrError::Parse {
        line,
        message: format!("invalid value '{raw}' for '{key}'"),
    })
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.vocab_size != self.corpus.vocab_size || self.model.feature_dim != self.corpus.feature_dim {
            return Err(ClsrError::Config(
                "model vocab_size/feature_dim are taken from the corpus keys".into(),
            ));
        }
        if self.held_out == 0 || self.held_out >= self.corpus.pairs {
            return Err(ClsrError::Config(format!(
                "held_out {} must lie in [1, pairs={})",
                self.held_out, self.corpus.pairs
            )));
        }
        let r = &self.retrieval;
        if r.window == 0 || r.hop == 0 || r.hop > r.window || r.k == 0 {
            return Err(ClsrError::Config(
                "retrieval needs window >= 1, 1 <= hop <= window, k >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Parses the flat format on top of the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line.split_once('=').ok_or_else(|| ClsrError::Parse {
                line: line_no,
                message: format!("expected 'key = value', got '{line}'"),
            })?;
            let (key, raw) = (key.trim(), raw.trim());
            if !seen.insert(key.to_string()) {
                return Err(ClsrError::Parse {
                    line: line_no,
                    message: format!("duplicate key '{key}'"),
                });
            }
            cfg.set(key, raw, line_no)?;
        }
        cfg.model.vocab_size = cfg.corpus.vocab_size;
        cfg.model.feature_dim = cfg.corpus.feature_dim;
        cfg.retrieval.longform.window_frames = cfg.retrieval.window;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ClsrError::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one `key = value` assignment (also used for command-line overrides).
    pub fn set(&mut self, key: &str, raw: &str, line: usize) -> Result<()> {
        let c = &mut self.corpus;
        let m = &mut self.model;
        let t = &mut self.train;
        let r = &mut self.retrieval;
        match key {
            "pairs" => c.pairs = value(key, raw, line)?,
            "vocab_size" => c.vocab_size = value(key, raw, line)?,
            "feature_dim" => c.feature_dim = value(key, raw, line)?,
            "context_len_min" => c.context_len.0 = value(key, raw, line)?,
            "context_len_max" => c.context_len.1 = value(key, raw, line)?,
            "question_len_min" => c.question_len.0 = value(key, raw, line)?,
            "question_len_max" => c.question_len.1 = value(key, raw, line)?,
            "noise_sigma" => c.noise_sigma = value(key, raw, line)?,
            "edge_silence" => c.edge_silence = value(key, raw, line)?,
            "speech_questions" => c.speech_questions = value(key, raw, line)?,
            "corpus_seed" => c.seed = value(key, raw, line)?,
            "held_out" => self.held_out = value(key, raw, line)?,
            "d_model" => m.d_model = value(key, raw, line)?,
            "heads" => m.heads = value(key, raw, line)?,
            "ff_dim" => m.ff_dim = value(key, raw, line)?,
            "speech_layers" => m.speech_layers = value(key, raw, line)?,
            "text_layers" => m.text_layers = value(key, raw, line)?,
            "decoder_layers" => m.decoder_layers = value(key, raw, line)?,
            "conv_branch" => m.conv_branch = value(key, raw, line)?,
            "cif_beta" => m.cif.beta = value(key, raw, line)?,
            "tail_fraction" => m.cif.tail_fraction = value(key, raw, line)?,
            "gamma_quant" => m.gamma = value(key, raw, line)?,
            "variant" => {
                m.variant = Variant::parse(raw).map_err(|e| ClsrError::Parse {
                    line,
                    message: e.to_string(),
                })?
            }
            "stage" => {
                t.stage = Stage::parse(raw).map_err(|e| ClsrError::Parse {
                    line,
                    message: e.to_string(),
                })?
            }
            "epochs_pretrain_asr" => t.epochs.pretrain_asr = value(key, raw, line)?,
            "epochs_pretrain_text" => t.epochs.pretrain_text = value(key, raw, line)?,
            "epochs_joint" => t.epochs.joint = value(key, raw, line)?,
            "epochs_post_train" => t.epochs.post_train = value(key, raw, line)?,
            "batch_size" => t.batch_size = value(key, raw, line)?,
            "learning_rate" => t.learning_rate = value(key, raw, line)?,
            "seed" => t.seed = value(key, raw, line)?,
            _ if key.starts_with("learning_rate_") => {
                let stage = Stage::parse(&key["learning_rate_".len()..]).map_err(|_| ClsrError::Parse {
                    line,
                    message: format!("unknown key '{key}'"),
                })?;
                *t.stage_learning_rates.slot(stage) = match raw {
                    "inherit" => None,
                    _ => Some(value(key, raw, line)?),
                };
            }
            "alpha" => t.loss.alpha = value(key, raw, line)?,
            "beta" => t.loss.beta = value(key, raw, line)?,
            "lambda" => t.lambda = value(key, raw, line)?,
            "sampler" => t.sampler = value(key, raw, line)?,
            "tau" => t.tau = value(key, raw, line)?,
            "ce_weight" => t.ce_weight = value(key, raw, line)?,
            "n_mwer" => t.n_mwer = value(key, raw, line)?,
            "label_smoothing" => t.label_smoothing = value(key, raw, line)?,
            "text_pretrain_pairs" => t.text_pretrain_pairs = value(key, raw, line)?,
            "patience" => t.patience = value(key, raw, line)?,
            "grad_clip" => t.grad_clip = value(key, raw, line)?,
            "adam_beta1" => t.adam_beta1 = value(key, raw, line)?,
            "adam_beta2" => t.adam_beta2 = value(key, raw, line)?,
            "adam_eps" => t.adam_eps = value(key, raw, line)?,
            "window" => r.window = value(key, raw, line)?,
            "hop" => r.hop = value(key, raw, line)?,
            "k" => r.k = value(key, raw, line)?,
            "longform_docs" => r.longform_docs = value(key, raw, line)?,
            "filler_segments" => r.longform.filler_segments = value(key, raw, line)?,
            "longform_noise_sigma" => r.longform.noise_sigma = value(key, raw, line)?,
            "max_lead" => r.longform.max_lead = value(key, raw, line)?,
            "longform_seed" => r.longform.seed = value(key, raw, line)?,
            _ => {
                return Err(ClsrError::Parse {
                    line,
                    message: format!("unknown key '{key}'"),
                })
            }
        }
        Ok(())
    }

    /// Canonical text: every key in fixed order; floats in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let c = &self.corpus;
        let m = &self.model;
        let t = &self.train;
        let r = &self.retrieval;
        let rate = |v: Option<f64>| v.map_or_else(|| "inherit".to_string(), |x| x.to_string());
        let entries: Vec<(&str, String)> = vec![
            ("pairs", c.pairs.to_string()),
            ("vocab_size", c.vocab_size.to_string()),
            ("feature_dim", c.feature_dim.to_string()),
            ("context_len_min", c.context_len.0.to_string()),
            ("context_len_max", c.context_len.1.to_string()),
            ("question_len_min", c.question_len.0.to_string()),
            ("question_len_max", c.question_len.1.to_string()),
            ("noise_sigma", c.noise_sigma.to_string()),
            ("edge_silence", c.edge_silence.to_string()),
            ("speech_questions", c.speech_questions.to_string()),
            ("corpus_seed", c.seed.to_string()),
            ("held_out", self.held_out.to_string()),
            ("d_model", m.d_model.to_string()),
            ("heads", m.heads.to_string()),
            ("ff_dim", m.ff_dim.to_string()),
            ("speech_layers", m.speech_layers.to_string()),
            ("text_layers", m.text_layers.to_string()),
            ("decoder_layers", m.decoder_layers.to_string()),
            ("conv_branch", m.conv_branch.to_string()),
            ("cif_beta", m.cif.beta.to_string()),
            ("tail_fraction", m.cif.tail_fraction.to_string()),
            ("gamma_quant", m.gamma.to_string()),
            ("variant", m.variant.name().to_string()),
            ("stage", t.stage.name().to_string()),
            ("epochs_pretrain_asr", t.epochs.pretrain_asr.to_string()),
            ("epochs_pretrain_text", t.epochs.pretrain_text.to_string()),
            ("epochs_joint", t.epochs.joint.to_string()),
            ("epochs_post_train", t.epochs.post_train.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("learning_rate_pretrain_asr", rate(t.stage_learning_rates.pretrain_asr)),
            (
                "learning_rate_pretrain_text",
                rate(t.stage_learning_rates.pretrain_text),
            ),
            ("learning_rate_joint", rate(t.stage_learning_rates.joint)),
            ("learning_rate_post_train", rate(t.stage_learning_rates.post_train)),
            ("seed", t.seed.to_string()),
            ("alpha", t.loss.alpha.to_string()),
            ("beta", t.loss.beta.to_string()),
            ("lambda", t.lambda.to_string()),
            ("sampler", t.sampler.to_string()),
            ("tau", t.tau.to_string()),
            ("ce_weight", t.ce_weight.to_string()),
            ("n_mwer", t.n_mwer.to_string()),
            ("label_smoothing", t.label_smoothing.to_string()),
            ("text_pretrain_pairs", t.text_pretrain_pairs.to_string()),
            ("patience", t.patience.to_string()),
            ("grad_clip", t.grad_clip.to_string()),
            ("adam_beta1", t.adam_beta1.to_string()),
            ("adam_beta2", t.adam_beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("window", r.window.to_string()),
            ("hop", r.hop.to_string()),
            ("k", r.k.to_string()),
            ("longform_docs", r.longform_docs.to_string()),
            ("filler_segments", r.longform.filler_segments.to_string()),
            ("longform_noise_sigma", r.longform.noise_sigma.to_string()),
            ("max_lead", r.longform.max_lead.to_string()),
            ("longform_seed", r.longform.seed.to_string()),
        ];
        entries.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cif(&self) -> CifConfig {
        self.model.cif
    }
}
