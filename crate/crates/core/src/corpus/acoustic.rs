//! Toy acoustics: every token owns a short random prototype of feature frames,
//! and utterances are prototype concatenations plus Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::vocab::{TokenId, Vocabulary, CLS, PAD};
use crate::compute::Tensor;
use crate::error::{ClsrError, Result};

/// Synthetic frames per second of "audio"; a 40 s interval is 200 frames.
pub const FRAME_RATE: f64 = 5.0;
pub const MIN_PROTOTYPE_FRAMES: usize = 2;
pub const MAX_PROTOTYPE_FRAMES: usize = 5;

/// A `t x d_f` feature matrix, `t >= 1`, all values finite.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeechFeatures {
    frames: Tensor,
}

impl SpeechFeatures {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.rows() == 0 {
            return Err(ClsrError::Data("speech must contain at least one frame".into()));
        }
        if !frames.all_finite() {
            return Err(ClsrError::Data("speech contains non-finite values".into()));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.num_frames() as f64 / FRAME_RATE
    }

    /// Frames `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.num_frames() {
            return Err(ClsrError::Data(format!(
                "frame range [{start}, {end}) outside 0..{}",
                self.num_frames()
            )));
        }
        Ok(Self {
            frames: self.frames.slice_rows(start, end - start),
        })
    }

    pub fn concat(parts: &[&SpeechFeatures]) -> Result<Self> {
        let dim = parts
            .first()
            .ok_or_else(|| ClsrError::Data("nothing to concatenate".into()))?
            .feature_dim();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.feature_dim() != dim {
                return Err(ClsrError::Shape("feature dims differ".into()));
            }
            data.extend_from_slice(p.frames.data());
            rows += p.num_frames();
        }
        Self::new(Tensor::from_vec(rows, dim, data)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcousticPrototypeBank {
    feature_dim: usize,
    seed: u64,
    prototypes: Vec<Option<Tensor>>,
}

impl AcousticPrototypeBank {
    /// One prototype per token except pad and cls (unk gets one as well).
    pub fn build(vocab: &Vocabulary, feature_dim: usize, seed: u64) -> Result<Self> {
        if feature_dim == 0 {
            return Err(ClsrError::Config("feature dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAC05_71C5);
        let prototypes = (0..vocab.size())
            .map(|id| {
                if id == PAD || id == CLS {
                    return None;
                }
                let len = rng.random_range(MIN_PROTOTYPE_FRAMES..=MAX_PROTOTYPE_FRAMES);
                Some(Tensor::randn(len, feature_dim, 1.0, &mut rng))
            })
            .collect();
        Ok(Self {
            feature_dim,
            seed,
            prototypes,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn prototype(&self, id: TokenId) -> Option<&Tensor> {
        self.prototypes.get(id).and_then(Option::as_ref)
    }

    pub fn prototype_len(&self, id: TokenId) -> Option<usize> {
        self.prototype(id).map(Tensor::rows)
    }
}

/// Concatenates token prototypes and adds N(0, sigma^2) noise.
pub fn render_speech(
    tokens: &[TokenId],
    bank: &AcousticPrototypeBank,
    noise_sigma: f64,
    seed: u64,
) -> Result<SpeechFeatures> {
    if tokens.is_empty() {
        return Err(ClsrError::Data("cannot render an empty token sequence".into()));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(ClsrError::Config(format!("noise sigma {noise_sigma} must be >= 0")));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for &tok in tokens {
        let proto = bank
            .prototype(tok)
            .ok_or_else(|| ClsrError::Data(format!("token {tok} has no acoustic prototype")))?;
        data.extend_from_slice(proto.data());
        rows += proto.rows();
    }
    if noise_sigma > 0.0 {
        add_noise(&mut data, noise_sigma, seed);
    }
    SpeechFeatures::new(Tensor::from_vec(rows, bank.feature_dim(), data)?)
}

/// Low-energy background frames (pure noise).
pub fn render_silence(frames: usize, feature_dim: usize, noise_sigma: f64, seed: u64) -> Result<SpeechFeatures> {
    let mut data = vec![0.0; frames * feature_dim];
    if noise_sigma > 0.0 {
        add_noise(&mut data, noise_sigma, seed);
    }
    SpeechFeatures::new(Tensor::from_vec(frames, feature_dim, data)?)
}

fn add_noise(data: &mut [f64], sigma: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    for v in data.iter_mut() {
        *v += normal.sample(&mut rng);
    }
}
