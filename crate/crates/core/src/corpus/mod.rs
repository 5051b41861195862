//! Synthetic speech/text corpora.

pub mod acoustic;
pub mod generate;
pub mod io;
pub mod longform;
pub mod vocab;

pub use acoustic::{render_silence, render_speech, AcousticPrototypeBank, SpeechFeatures, FRAME_RATE};
pub use generate::{
    generate_corpus, generate_pairs, generate_text_pairs, shared_content_tokens, CorpusConfig, QaPair, SyntheticCorpus,
    TokenSet,
};
pub use io::{parse_corpus, read_corpus, read_longform, write_corpus, write_longform};
pub use longform::{compose_longform, compose_longform_with, LongFormConfig, LongFormDocument, DEFAULT_WINDOW_FRAMES};
pub use vocab::{TokenId, TokenSequence, Vocabulary, CLS, NUM_SPECIALS, PAD, UNK};
