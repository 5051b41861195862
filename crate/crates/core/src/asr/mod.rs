//! Non-autoregressive decoder, the two-pass sampler and ASR losses/metrics.

pub mod decoder;
pub mod loss;
pub mod metrics;
pub mod sampler;

pub use decoder::{text_embeds_from_output_layer, transcribe, Decoder, DecoderConfig, OutputLayer};
pub use loss::{ce_loss, mwer_loss, mwer_loss_with_candidates, sample_candidates};
pub use metrics::{corpus_wer, edit_distance, wer};
pub use sampler::{erroneous_positions, replacement_count, sampler_mix, SamplerMix};
