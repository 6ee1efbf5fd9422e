use std::collections::HashMap;

use crate::corpus::{Sentence, Vocabulary};

pub const UNK: &str = "<unk>";

/// Token to embedding-row mapping shared by all languages. Row 0 is `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Lexicon {
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut lex = Lexicon {
            tokens: vec![UNK.to_string()],
            index: HashMap::from([(UNK.to_string(), 0)]),
        };
        for t in tokens {
            if !lex.index.contains_key(&t) {
                lex.index.insert(t.clone(), lex.tokens.len() as u32);
                lex.tokens.push(t);
            }
        }
        lex
    }

    /// Keeps vocabulary tokens seen at least `min_count` times.
    pub fn from_vocab(vocab: &Vocabulary, min_count: u64) -> Self {
        Self::from_tokens(
            vocab
                .tokens()
                .iter()
                .zip(vocab.counts())
                .filter(|(_, &c)| c >= min_count)
                .map(|(t, _)| t.clone()),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn encode(&self, sentence: &Sentence) -> Vec<u32> {
        sentence.tokens.iter().map(|t| self.id(t)).collect()
    }
}
