use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::acoustic::{render_silence, SpeechFeatures};
use super::generate::{derive_seed, QaPair};
use super::vocab::TokenSequence;
use crate::error::{ClsrError, Result};

/// Default window: 40 synthetic seconds at the corpus frame rate.
pub const DEFAULT_WINDOW_FRAMES: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct LongFormConfig {
    pub filler_segments: usize,
    pub window_frames: usize,
    /// Std of the background noise filling each window around its utterance.
    pub noise_sigma: f64,
    /// Max silence frames placed before the utterance inside its window.
    pub max_lead: usize,
    pub seed: u64,
}

impl Default for LongFormConfig {
    fn default() -> Self {
        Self {
            filler_segments: 4,
            window_frames: DEFAULT_WINDOW_FRAMES,
            noise_sigma: 0.2,
            max_lead: 4,
            seed: 0,
        }
    }
}

/// A concatenation of `filler_segments + 1` windows, exactly one of which
/// carries the context answering `question`.
#[derive(Clone, Debug, PartialEq)]
pub struct LongFormDocument {
    pub doc_id: u64,
    pub speech: SpeechFeatures,
    /// Index of the relevant window when segmenting with hop == window.
    pub segments_gold: usize,
    pub question: TokenSequence,
    pub gold_pair_id: u64,
    pub window_frames: usize,
}

impl LongFormDocument {
    pub fn num_regions(&self) -> usize {
        self.speech.num_frames() / self.window_frames
    }
}

pub fn compose_longform(
    pairs: &[QaPair],
    filler_segments: usize,
    window_frames: usize,
    seed: u64,
) -> Result<Vec<LongFormDocument>> {
    compose_longform_with(
        pairs,
        &LongFormConfig {
            filler_segments,
            window_frames,
            seed,
            ..LongFormConfig::default()
        },
    )
}

/// One document per pair. Fillers are contexts of the other pairs; with a single
/// pair the fillers are pure background.
pub fn compose_longform_with(pairs: &[QaPair], config: &LongFormConfig) -> Result<Vec<LongFormDocument>> {
    let window = config.window_frames;
    if window == 0 {
        return Err(ClsrError::Config("window must be at least one frame".into()));
    }
    if let Some(p) = pairs.iter().find(|p| p.context_speech.num_frames() > window) {
        return Err(ClsrError::Config(format!(
            "context of pair {} has {} frames, longer than the {window}-frame window",
            p.pair_id,
            p.context_speech.num_frames()
        )));
    }
    let dim = pairs.first().map_or(1, |p| p.context_speech.feature_dim());
    let mut docs = Vec::with_capacity(pairs.len());
    for (d, pair) in pairs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 10, d as u64));
        let gold = rng.random_range(0..=config.filler_segments);
        let mut regions = Vec::with_capacity(config.filler_segments + 1);
        for r in 0..=config.filler_segments {
            let utterance = if r == gold {
                Some(&pair.context_speech)
            } else if pairs.len() > 1 {
                let mut j = rng.random_range(0..pairs.len() - 1);
                if j >= d {
                    j += 1;
                }
                Some(&pairs[j].context_speech)
            } else {
                None
            };
            let region_seed = derive_seed(config.seed, 11, (d * (config.filler_segments + 1) + r) as u64);
            regions.push(region(utterance, dim, window, config, &mut rng, region_seed)?);
        }
        let refs: Vec<&SpeechFeatures> = regions.iter().collect();
        docs.push(LongFormDocument {
            doc_id: d as u64,
            speech: SpeechFeatures::concat(&refs)?,
            segments_gold: gold,
            question: pair.question.clone(),
            gold_pair_id: pair.pair_id,
            window_frames: window,
        });
    }
    Ok(docs)
}

fn region(
    utterance: Option<&SpeechFeatures>,
    dim: usize,
    window: usize,
    config: &LongFormConfig,
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<SpeechFeatures> {
    let Some(u) = utterance else {
        return render_silence(window, dim, config.noise_sigma, seed);
    };
    let slack = window - u.num_frames();
    let lead = rng.random_range(0..=slack.min(config.max_lead));
    let trail = slack - lead;
    let mut parts: Vec<SpeechFeatures> = Vec::with_capacity(3);
    if lead > 0 {
        parts.push(render_silence(lead, dim, config.noise_sigma, seed)?);
    }
    parts.push(u.clone());
    if trail > 0 {
        parts.push(render_silence(trail, dim, config.noise_sigma, seed ^ 1)?);
    }
    let refs: Vec<&SpeechFeatures> = parts.iter().collect();
    SpeechFeatures::concat(&refs)
}
