use std::collections::{BTreeSet, HashMap};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ClsrError, Result};

pub type TokenId = usize;
pub type TokenSequence = Vec<TokenId>;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const NUM_SPECIALS: usize = 3;
pub const MIN_VOCAB: usize = 8;

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "ch",
];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

/// Dense token table: ids `0..size`, with pad/unk/cls in the first three slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn build(size: usize, seed: u64) -> Result<Self> {
        if size < MIN_VOCAB {
            return Err(ClsrError::Config(format!(
                "vocabulary size {size} is below the minimum {MIN_VOCAB}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tokens: Vec<String> = vec!["<pad>".into(), "<unk>".into(), "<cls>".into()];
        let mut seen: BTreeSet<String> = tokens.iter().cloned().collect();
        while tokens.len() < size {
            let syllables = 1 + tokens.len() % 2 + usize::from(seen.len() > 80);
            let word: String = (0..syllables)
                .map(|_| {
                    format!(
                        "{}{}",
                        ONSETS.choose(&mut rng).unwrap(),
                        NUCLEI.choose(&mut rng).unwrap()
                    )
                })
                .collect();
            if seen.insert(word.clone()) {
                tokens.push(word);
            }
        }
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token_of(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn lookup(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    /// Ids of ordinary tokens (everything except the three specials).
    pub fn content_ids(&self) -> std::ops::Range<TokenId> {
        NUM_SPECIALS..self.size()
    }

    pub fn is_content(&self, id: TokenId) -> bool {
        (NUM_SPECIALS..self.size()).contains(&id)
    }

    /// Whitespace-separated token strings to ids; unknown strings map to `<unk>`.
    pub fn encode(&self, text: &str) -> TokenSequence {
        text.split_whitespace().map(|t| self.lookup(t)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token_of(i).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
