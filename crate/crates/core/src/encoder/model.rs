use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::extract::Span;

use super::{
    encode_context, phrase_rep, seg_head_logits, DropoutMask, EncoderConfig, EncoderParams, HiddenStates, Lexicon,
};
use super::heads::sigmoid;

/// Trained parameters bundled with the token lexicon they were trained on.
/// All methods run the dropout-free forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseEncoder {
    pub params: EncoderParams<f32>,
    pub lexicon: Lexicon,
    /// Whether input text must be lowercased before lookup.
    pub lowercase: bool,
}

impl PhraseEncoder {
    pub fn new(params: EncoderParams<f32>, lexicon: Lexicon, lowercase: bool) -> Result<Self> {
        if params.config.vocab_size != lexicon.len() {
            return Err(Error::DimensionMismatch {
                expected: params.config.vocab_size,
                got: lexicon.len(),
            });
        }
        Ok(PhraseEncoder {
            params,
            lexicon,
            lowercase,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.params.config
    }

    pub fn out_dim(&self) -> usize {
        self.params.config.out_dim
    }

    /// Token ids (lowercased first when the model was trained that way),
    /// truncated to the supported number of positions.
    pub fn ids(&self, sentence: &Sentence) -> Vec<u32> {
        let mut ids: Vec<u32> = if self.lowercase {
            sentence.tokens.iter().map(|t| self.lexicon.id(&t.to_lowercase())).collect()
        } else {
            self.lexicon.encode(sentence)
        };
        let max = self.params.config.max_positions;
        if ids.len() > max {
            log::warn!("sentence {} truncated from {} to {} tokens", sentence.id, ids.len(), max);
            ids.truncate(max);
        }
        ids
    }

    pub fn hidden(&self, sentence: &Sentence) -> Result<HiddenStates> {
        encode_context(&self.ids(sentence), &self.params, &DropoutMask::none())
    }

    pub fn phrase_vector(&self, h: &HiddenStates, span: Span) -> Result<Vec<f32>> {
        phrase_rep(h, span.s, span.e, &self.params)
    }

    /// Phrase vectors for several spans of one sentence from a single forward pass.
    pub fn encode_spans(&self, sentence: &Sentence, spans: &[Span]) -> Result<Vec<Vec<f32>>> {
        let h = self.hidden(sentence)?;
        spans.iter().map(|&sp| self.phrase_vector(&h, sp)).collect()
    }

    /// Segmentation probabilities for the given spans of `h`.
    pub fn span_probs(&self, h: &HiddenStates, spans: &[Span]) -> Result<Vec<f32>> {
        let pairs: Vec<(usize, usize)> = spans.iter().map(|sp| (sp.s, sp.e)).collect();
        Ok(seg_head_logits(h, &pairs, &self.params)?.into_iter().map(sigmoid).collect())
    }
}
