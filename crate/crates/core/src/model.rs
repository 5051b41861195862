//! The full retriever: speech encoder → CIF → NAR decoder → quantizer → text
//! encoder, and the text branch (embedding table → text encoder). Both branches
//! end in a CLS-pooled sentence vector in the text encoder's space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::asr::{ce_loss, mwer_loss, sampler_mix, text_embeds_from_output_layer, transcribe, Decoder, DecoderConfig};
use crate::cif::{fire_inference, fire_training, mae_length_loss, CifConfig, CifPredictor};
use crate::compute::{
    pool, Encoder, EncoderConfig, Graph, Linear, ParamGroup, ParamId, ParamStore, PoolingMode, Tensor, Var,
};
use crate::corpus::{SpeechFeatures, TokenId, TokenSequence};
use crate::error::{ClsrError, Result};
use crate::vq::{map_to_text_space, quantize, GradientPath, DEFAULT_GAMMA};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Quantize decoder outputs onto the vocabulary and look up text embeddings.
    Full,
    /// Ablation: a linear projection of `E^a` feeds the text encoder directly.
    NoVq,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_vq" => Ok(Variant::NoVq),
            other => Err(ClsrError::Config(format!(
                "unknown variant '{other}' (expected full or no_vq)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoVq => "no_vq",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub speech_layers: usize,
    pub text_layers: usize,
    pub decoder_layers: usize,
    pub conv_branch: bool,
    pub cif: CifConfig,
    pub gamma: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 50,
            feature_dim: 24,
            d_model: 64,
            heads: 4,
            ff_dim: 128,
            speech_layers: 2,
            text_layers: 2,
            decoder_layers: 2,
            conv_branch: true,
            cif: CifConfig::default(),
            gamma: DEFAULT_GAMMA,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.cif.validate()?;
        if !(self.gamma > 0.0) {
            return Err(ClsrError::Config(format!(
                "quantizer temperature {} must be positive",
                self.gamma
            )));
        }
        if self.vocab_size < crate::corpus::vocab::MIN_VOCAB || self.feature_dim == 0 {
            return Err(ClsrError::Config("vocabulary and feature dims must be positive".into()));
        }
        Ok(())
    }

    fn speech_encoder(&self) -> EncoderConfig {
        EncoderConfig {
            input_dim: self.feature_dim,
            d_model: self.d_model,
            heads: self.heads,
            ff_dim: self.ff_dim,
            layers: self.speech_layers,
            conv_branch: self.conv_branch,
            positional: true,
            project_input: true,
            cls: false,
        }
    }

    fn text_encoder(&self) -> EncoderConfig {
        EncoderConfig {
            input_dim: self.d_model,
            d_model: self.d_model,
            heads: self.heads,
            ff_dim: self.ff_dim,
            layers: self.text_layers,
            conv_branch: false,
            positional: true,
            project_input: false,
            cls: true,
        }
    }

    fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            d_model: self.d_model,
            heads: self.heads,
            ff_dim: self.ff_dim,
            layers: self.decoder_layers,
            vocab_size: self.vocab_size,
            positional: true,
        }
    }
}

/// Knobs of one speech-branch training forward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeechTrainOptions {
    /// Mixing ratio of the two-pass sampler; `None` runs a single pass.
    pub sampler_lambda: Option<f64>,
    pub label_smoothing: f64,
    /// `0` disables the MWER term.
    pub mwer_candidates: usize,
    pub mwer_seed: u64,
    /// Build the sentence vector (needed by contrastive stages).
    pub sentence: bool,
    pub quantizer: GradientPath,
}

impl Default for SpeechTrainOptions {
    fn default() -> Self {
        Self {
            sampler_lambda: Some(0.75),
            label_smoothing: 0.0,
            mwer_candidates: 4,
            mwer_seed: 0,
            sentence: true,
            quantizer: GradientPath::StraightThrough,
        }
    }
}

/// Graph handles produced by a training forward of one utterance.
#[derive(Clone, Debug)]
pub struct SpeechTrainOutput {
    pub ce: Var,
    pub mwer: Option<Var>,
    pub mae: Var,
    pub sentence: Option<Var>,
    /// Second-pass logits `D'`.
    pub logits: Var,
    /// First-pass logits, recorded without a tape (exposed for gradient taps).
    pub first_logits: Option<Var>,
    pub first_pass: TokenSequence,
    pub replaced: usize,
}

/// Values from an inference pass over one utterance.
#[derive(Clone, Debug)]
pub struct SpeechInference {
    pub alpha: Tensor,
    /// `n x t` frame contributions of the fired tokens.
    pub contributions: Tensor,
    pub tokens: TokenSequence,
    /// Text-encoder outputs for the fired tokens (CLS row excluded), `n x d_m`.
    pub token_reps: Tensor,
    /// Pooled sentence vector, `1 x d_m`.
    pub sentence: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub speech_encoder: Encoder,
    pub cif: CifPredictor,
    pub decoder: Decoder,
    /// `W^te`, `|V| x d_m`.
    pub text_embedding: ParamId,
    pub text_encoder: Encoder,
    pub no_vq_projection: Option<Linear>,
    /// Optimizer steps applied so far; zero marks an untrained model.
    pub training_steps: u64,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let speech_encoder = Encoder::new(
            &mut store,
            "speech",
            ParamGroup::SpeechEncoder,
            config.speech_encoder(),
            &mut rng,
        )?;
        let cif = CifPredictor::new(&mut store, config.d_model, &mut rng);
        let decoder = Decoder::new(&mut store, config.decoder(), &mut rng)?;
        let text_embedding = store.add(
            "text.embedding",
            ParamGroup::TextEncoder,
            Tensor::randn(config.vocab_size, config.d_model, 1.0, &mut rng),
        );
        let text_encoder = Encoder::new(
            &mut store,
            "text",
            ParamGroup::TextEncoder,
            config.text_encoder(),
            &mut rng,
        )?;
        let no_vq_projection = (config.variant == Variant::NoVq).then(|| {
            Linear::new(
                &mut store,
                "no_vq.proj",
                ParamGroup::Projection,
                config.d_model,
                config.d_model,
                &mut rng,
            )
        });
        Ok(Self {
            config,
            store,
            speech_encoder,
            cif,
            decoder,
            text_embedding,
            text_encoder,
            no_vq_projection,
            training_steps: 0,
        })
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            Some(&bad) => Err(ClsrError::Data(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// The same parameters under another variant; parameters the source lacks
    /// (the no-VQ projection) are freshly initialised from `seed`.
    pub fn with_variant(&self, variant: Variant, seed: u64) -> Result<Model> {
        let mut out = Model::new(ModelConfig { variant, ..self.config }, seed)?;
        for (_, p) in self.store.iter() {
            if let Some(id) = out.store.find(&p.name) {
                out.store.assign(id, (*p.value).clone())?;
            }
        }
        out.training_steps = self.training_steps;
        Ok(out)
    }

    /// Token-level text representations (`(m+1) x d_m`, CLS first) for embedded rows.
    pub fn encode_text_rows(&self, g: &mut Graph, rows: Var) -> Result<Var> {
        self.text_encoder.forward(g, &self.store, rows)
    }

    /// CLS-pooled text vector for a token sequence (`1 x d_m`).
    pub fn text_sentence(&self, g: &mut Graph, tokens: &[TokenId]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let table = g.param(&self.store, self.text_embedding);
        let e = g.gather_rows(table, tokens);
        let reps = self.encode_text_rows(g, e)?;
        pool(g, reps, PoolingMode::Cls)
    }

    fn encode_speech(&self, g: &mut Graph, speech: &SpeechFeatures) -> Result<Var> {
        let x = g.constant(speech.frames().clone());
        self.speech_encoder.forward(g, &self.store, x)
    }

    /// Text-like rows fed to the text encoder from decoder logits (full) or `E^a` (no-VQ).
    fn text_like(&self, g: &mut Graph, logits: Var, e_a: Var, path: GradientPath) -> Result<Var> {
        match (self.config.variant, &self.no_vq_projection) {
            (Variant::Full, _) => {
                let q = quantize(g, logits, self.config.gamma, path)?;
                let table = g.param(&self.store, self.text_embedding);
                map_to_text_space(g, &q, table)
            }
            (Variant::NoVq, Some(proj)) => Ok(proj.forward(g, &self.store, e_a)),
            (Variant::NoVq, None) => Err(ClsrError::Internal("no-VQ model without projection".into())),
        }
    }

    /// Training forward of one utterance: scaled firing to `target.len()` tokens,
    /// optional two-pass sampler, CE/MWER/MAE and optionally the sentence vector.
    pub fn speech_train<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        speech: &SpeechFeatures,
        target: &[TokenId],
        opts: &SpeechTrainOptions,
        rng: &mut R,
    ) -> Result<SpeechTrainOutput> {
        self.check_tokens(target)?;
        let hs = self.encode_speech(g, speech)?;
        let alpha = self.cif.predict_weights(g, &self.store, hs)?;
        let mae = mae_length_loss(g, alpha, target.len());
        let fired = fire_training(g, hs, alpha, target.len(), self.config.cif.beta)?;
        let e_a = fired.embeddings;

        let (decoder_input, first_logits, first_pass, replaced) = match opts.sampler_lambda {
            Some(lambda) => {
                let first = g.no_grad(|g| self.decoder.decode(g, &self.store, hs, e_a))?;
                let y_asr = transcribe(g.value(first));
                let e_c = text_embeds_from_output_layer(target, self.decoder.output_weight(&self.store))?;
                let e_c = g.constant(e_c);
                let mix = sampler_mix(g, e_a, e_c, &y_asr, target, lambda, rng)?;
                (mix.embeddings, Some(first), y_asr, mix.replaced.len())
            }
            None => (e_a, None, Vec::new(), 0),
        };
        let logits = self.decoder.decode(g, &self.store, hs, decoder_input)?;
        let ce = ce_loss(g, logits, target, opts.label_smoothing)?;
        let mwer = if opts.mwer_candidates >= 2 {
            Some(mwer_loss(g, logits, target, opts.mwer_candidates, opts.mwer_seed)?)
        } else {
            None
        };
        let sentence = if opts.sentence {
            let rows = self.text_like(g, logits, e_a, opts.quantizer)?;
            let reps = self.encode_text_rows(g, rows)?;
            Some(pool(g, reps, PoolingMode::Cls)?)
        } else {
            None
        };
        Ok(SpeechTrainOutput {
            ce,
            mwer,
            mae,
            sentence,
            logits,
            first_logits,
            first_pass,
            replaced,
        })
    }

    /// Inference over one utterance with raw (unscaled) firing. `None` when no token fires.
    pub fn speech_inference(&self, speech: &SpeechFeatures) -> Result<Option<SpeechInference>> {
        let mut g = Graph::new();
        g.no_grad(|g| {
            let hs = self.encode_speech(g, speech)?;
            let alpha = self.cif.predict_weights(g, &self.store, hs)?;
            let fired = fire_inference(g, hs, alpha, &self.config.cif)?;
            if fired.count == 0 {
                return Ok(None);
            }
            let logits = self.decoder.decode(g, &self.store, hs, fired.embeddings)?;
            let tokens = transcribe(g.value(logits));
            let rows = self.text_like(g, logits, fired.embeddings, GradientPath::Blocked)?;
            let reps = self.encode_text_rows(g, rows)?;
            let sentence = pool(g, reps, PoolingMode::Cls)?;
            let n = fired.count;
            Ok(Some(SpeechInference {
                alpha: g.value(alpha).clone(),
                contributions: g.value(fired.contributions).clone(),
                tokens,
                token_reps: g.value(reps).slice_rows(1, n),
                sentence: g.value(sentence).clone(),
            }))
        })
    }

    /// Greedy transcription with inference firing; empty when nothing fires.
    pub fn transcribe_speech(&self, speech: &SpeechFeatures) -> Result<TokenSequence> {
        let mut g = Graph::new();
        g.no_grad(|g| {
            let hs = self.encode_speech(g, speech)?;
            let alpha = self.cif.predict_weights(g, &self.store, hs)?;
            let fired = fire_inference(g, hs, alpha, &self.config.cif)?;
            if fired.count == 0 {
                return Ok(Vec::new());
            }
            let logits = self.decoder.decode(g, &self.store, hs, fired.embeddings)?;
            Ok(transcribe(g.value(logits)))
        })
    }

    /// Sentence vector for a text query (`1 x d_m`), computed without a tape.
    pub fn embed_text(&self, tokens: &[TokenId]) -> Result<Tensor> {
        let mut g = Graph::new();
        g.no_grad(|g| {
            let s = self.text_sentence(g, tokens)?;
            Ok(g.value(s).clone())
        })
    }

    /// Token-level text representations of a question (CLS row excluded).
    pub fn text_token_reps(&self, tokens: &[TokenId]) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        let mut g = Graph::new();
        g.no_grad(|g| {
            let table = g.param(&self.store, self.text_embedding);
            let e = g.gather_rows(table, tokens);
            let reps = self.encode_text_rows(g, e)?;
            Ok(g.value(reps).slice_rows(1, tokens.len()))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};

    fn tiny_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            feature_dim: 6,
            d_model: 8,
            heads: 2,
            ff_dim: 16,
            speech_layers: 1,
            text_layers: 1,
            decoder_layers: 1,
            variant,
            ..ModelConfig::default()
        }
    }

    fn tiny_corpus() -> crate::corpus::SyntheticCorpus {
        generate_corpus(&CorpusConfig {
            pairs: 4,
            vocab_size: 12,
            feature_dim: 6,
            context_len: (3, 5),
            question_len: (2, 2),
            edge_silence: 1,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn text_and_speech_vectors_share_a_space() {
        let c = tiny_corpus();
        let m = Model::new(tiny_config(Variant::Full), 1).unwrap();
        let t = m.embed_text(&c.pairs[0].question).unwrap();
        assert_eq!(t.shape(), (1, 8));
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = m
            .speech_train(
                &mut g,
                &c.pairs[0].context_speech,
                &c.pairs[0].context,
                &SpeechTrainOptions::default(),
                &mut rng,
            )
            .unwrap();
        assert_eq!(g.shape(out.sentence.unwrap()), (1, 8));
        assert_eq!(g.shape(out.logits), (c.pairs[0].context.len(), 12));
    }

    #[test]
    fn first_pass_contributes_no_gradient() {
        let c = tiny_corpus();
        let m = Model::new(tiny_config(Variant::Full), 2).unwrap();
        let p = &c.pairs[1];
        let opts = SpeechTrainOptions {
            mwer_candidates: 0,
            sentence: false,
            ..SpeechTrainOptions::default()
        };
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = m
            .speech_train(&mut g, &p.context_speech, &p.context, &opts, &mut rng)
            .unwrap();
        let first = out.first_logits.unwrap();
        assert!(!g.requires_grad(first));
        let grads = g.backward(out.ce);
        assert!(grads.wrt(first).is_none());
        assert!(!grads.param_grads(&g).is_empty());
    }

    #[test]
    fn no_vq_variant_has_projection() {
        let m = Model::new(tiny_config(Variant::NoVq), 3).unwrap();
        assert!(m.no_vq_projection.is_some());
        let c = tiny_corpus();
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = m
            .speech_train(
                &mut g,
                &c.pairs[0].context_speech,
                &c.pairs[0].context,
                &SpeechTrainOptions::default(),
                &mut rng,
            )
            .unwrap();
        let total = g.sum(out.sentence.unwrap());
        let grads = g.backward(total);
        let ids: Vec<_> = grads.param_grads(&g).into_iter().map(|(id, _)| id).collect();
        assert!(ids.contains(&m.no_vq_projection.unwrap().weight));
    }

    #[test]
    fn inference_is_deterministic() {
        let c = tiny_corpus();
        let m = Model::new(tiny_config(Variant::Full), 4).unwrap();
        let a = m.speech_inference(&c.pairs[2].context_speech).unwrap();
        let b = m.speech_inference(&c.pairs[2].context_speech).unwrap();
        match (a, b) {
            (Some(a), Some(b)) => assert_eq!(a.sentence, b.sentence),
            (None, None) => {}
            _ => panic!("nondeterministic firing"),
        }
    }
}
