//! Deterministic QA corpora with planted, identifiable question/context pairs.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::acoustic::{render_silence, render_speech, AcousticPrototypeBank, SpeechFeatures};
use super::vocab::{TokenId, TokenSequence, Vocabulary};
use crate::error::{ClsrError, Result};

const MAX_ATTEMPTS_PER_PAIR: usize = 5_000;

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub pairs: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub context_len: (usize, usize),
    pub question_len: (usize, usize),
    pub noise_sigma: f64,
    /// Up to this many silence frames are added before and after each context.
    pub edge_silence: usize,
    pub speech_questions: bool,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            pairs: 500,
            vocab_size: 50,
            feature_dim: 24,
            context_len: (8, 16),
            question_len: (3, 6),
            noise_sigma: 0.2,
            edge_silence: 4,
            speech_questions: false,
            seed: 13,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let (cmin, cmax) = self.context_len;
        let (qmin, qmax) = self.question_len;
        if cmin == 0 || cmin > cmax {
            return Err(ClsrError::Config(format!("bad context length range {cmin}..{cmax}")));
        }
        if qmin == 0 || qmin > qmax || qmax > cmax {
            return Err(ClsrError::Config(format!("bad question length range {qmin}..{qmax}")));
        }
        if self.pairs == 0 {
            return Err(ClsrError::Config("corpus needs at least one pair".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaPair {
    pub pair_id: u64,
    pub question: TokenSequence,
    pub context: TokenSequence,
    pub context_speech: SpeechFeatures,
    pub question_speech: Option<SpeechFeatures>,
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub vocab: Vocabulary,
    pub bank: AcousticPrototypeBank,
    pub pairs: Vec<QaPair>,
}

impl SyntheticCorpus {
    /// Splits off the last `held_out` pairs.
    pub fn split(&self, held_out: usize) -> (&[QaPair], &[QaPair]) {
        let cut = self.pairs.len().saturating_sub(held_out);
        self.pairs.split_at(cut)
    }
}

/// Bitset over token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSet(Vec<u64>);

impl TokenSet {
    pub fn from_tokens(vocab_size: usize, tokens: &[TokenId]) -> Self {
        let mut words = vec![0u64; vocab_size.div_ceil(64)];
        for &t in tokens {
            words[t / 64] |= 1 << (t % 64);
        }
        Self(words)
    }

    pub fn is_subset_of(&self, other: &TokenSet) -> bool {
        self.0.iter().zip(&other.0).all(|(a, b)| a & !b == 0)
    }

    pub fn intersection_len(&self, other: &TokenSet) -> usize {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    pub fn len(&self) -> usize {
        self.0.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Number of distinct content tokens shared by `a` and `b`.
pub fn shared_content_tokens(vocab: &Vocabulary, a: &[TokenId], b: &[TokenId]) -> usize {
    let filter = |s: &[TokenId]| s.iter().copied().filter(|&t| vocab.is_content(t)).collect::<Vec<_>>();
    TokenSet::from_tokens(vocab.size(), &filter(a)).intersection_len(&TokenSet::from_tokens(vocab.size(), &filter(b)))
}

pub(crate) fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 over the combined key
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED69));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Vocabulary, prototype bank and pairs, all a pure function of `config`.
pub fn generate_corpus(config: &CorpusConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let vocab = Vocabulary::build(config.vocab_size, config.seed)?;
    let bank = AcousticPrototypeBank::build(&vocab, config.feature_dim, config.seed)?;
    let pairs = generate_pairs(&vocab, &bank, config, config.seed)?;
    Ok(SyntheticCorpus { vocab, bank, pairs })
}

/// Samples `config.pairs` question/context pairs such that each question's token
/// set is contained in its own context and in no other context, so the gold
/// context shares strictly more content tokens with the question than any other.
pub fn generate_pairs(
    vocab: &Vocabulary,
    bank: &AcousticPrototypeBank,
    config: &CorpusConfig,
    seed: u64,
) -> Result<Vec<QaPair>> {
    let text = generate_text_pairs(vocab, config, config.pairs, seed)?;
    text.into_iter()
        .enumerate()
        .map(|(i, (question, context))| {
            let pair_id = i as u64;
            let context_speech = render_with_silence(&context, bank, config, derive_seed(seed, 2, pair_id))?;
            let question_speech = if config.speech_questions {
                Some(render_with_silence(
                    &question,
                    bank,
                    config,
                    derive_seed(seed, 3, pair_id),
                )?)
            } else {
                None
            };
            Ok(QaPair {
                pair_id,
                question,
                context,
                context_speech,
                question_speech,
            })
        })
        .collect()
}

/// The token side of [`generate_pairs`]: `count` identifiable `(question, context)` pairs.
pub fn generate_text_pairs(
    vocab: &Vocabulary,
    config: &CorpusConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<(TokenSequence, TokenSequence)>> {
    config.validate()?;
    let content: Vec<TokenId> = vocab.content_ids().collect();
    if content.len() < config.question_len.1 {
        return Err(ClsrError::Config(format!(
            "{} content tokens cannot form questions of {} distinct tokens",
            content.len(),
            config.question_len.1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, 0));
    let vsize = vocab.size();
    let mut contexts: Vec<(TokenSequence, TokenSet)> = Vec::with_capacity(count);
    let mut questions: Vec<(TokenSequence, TokenSet)> = Vec::with_capacity(count);
    for i in 0..count {
        let mut accepted = false;
        for _ in 0..MAX_ATTEMPTS_PER_PAIR {
            let len = rng.random_range(config.context_len.0..=config.context_len.1);
            let ctx: TokenSequence = (0..len).map(|_| content[rng.random_range(0..content.len())]).collect();
            let ctx_set = TokenSet::from_tokens(vsize, &ctx);
            let mut distinct: Vec<TokenId> = ctx.clone();
            distinct.sort_unstable();
            distinct.dedup();
            let qlen = rng.random_range(config.question_len.0..=config.question_len.1);
            if distinct.len() < qlen {
                continue;
            }
            let mut question: TokenSequence = index::sample(&mut rng, distinct.len(), qlen)
                .into_iter()
                .map(|j| distinct[j])
                .collect();
            question.shuffle(&mut rng);
            let q_set = TokenSet::from_tokens(vsize, &question);
            let clashes = contexts.iter().any(|(_, c)| q_set.is_subset_of(c))
                || questions.iter().any(|(_, q)| q.is_subset_of(&ctx_set));
            if clashes {
                continue;
            }
            contexts.push((ctx, ctx_set));
            questions.push((question, q_set));
            accepted = true;
            break;
        }
        if !accepted {
            return Err(ClsrError::Config(format!(
                "vocabulary of {vsize} tokens is too small to keep {count} contexts distinguishable (failed at pair {i})"
            )));
        }
    }
    Ok(questions
        .into_iter()
        .zip(contexts)
        .map(|((q, _), (c, _))| (q, c))
        .collect())
}

fn render_with_silence(
    tokens: &[TokenId],
    bank: &AcousticPrototypeBank,
    config: &CorpusConfig,
    seed: u64,
) -> Result<SpeechFeatures> {
    let body = render_speech(tokens, bank, config.noise_sigma, seed)?;
    if config.edge_silence == 0 {
        return Ok(body);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 4, 0));
    let lead = rng.random_range(0..=config.edge_silence);
    let trail = rng.random_range(0..=config.edge_silence);
    let mut parts = Vec::with_capacity(3);
    let lead_s;
    let trail_s;
    if lead > 0 {
        lead_s = render_silence(lead, bank.feature_dim(), config.noise_sigma, derive_seed(seed, 5, 0))?;
        parts.push(&lead_s);
    }
    parts.push(&body);
    if trail > 0 {
        trail_s = render_silence(trail, bank.feature_dim(), config.noise_sigma, derive_seed(seed, 6, 0))?;
        parts.push(&trail_s);
    }
    SpeechFeatures::concat(&parts)
}
