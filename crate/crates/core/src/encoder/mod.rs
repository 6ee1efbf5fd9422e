//! Context encoder and the two span heads.
//!
//! The trunk is a pre-LayerNorm bidirectional Transformer with learned token
//! and position embeddings. On top of it, the phrase head maps the
//! concatenated boundary states `[H_s; H_e]` to an `out_dim` vector, and the
//! segmentation head maps `[H_i; H_j]` to a single logit. Both heads read the
//! same trunk.
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32` for
//! training and inference and in `f64` for gradient checks.

mod checkpoint;
mod dropout;
mod heads;
mod lexicon;
mod model;
mod params;
mod trunk;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FILE};
pub use dropout::DropoutMask;
pub use heads::{
    align_head_backward, align_head_forward, phrase_rep, seg_head_backward, seg_head_logits, span_logit, span_prob,
    AlignHeadCache,
};
pub use lexicon::Lexicon;
pub use model::PhraseEncoder;
pub use params::{EncoderParams, LayerParams};
pub use trunk::{backward_trunk, encode_context, forward_trunk, TrunkCache};

pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub out_dim: usize,
    pub dropout: f64,
    pub max_positions: usize,
    /// Phrase head with one hidden layer (`2d -> 2d -> out_dim`); when false
    /// the head is a single linear map `2d -> out_dim`.
    pub align_hidden: bool,
    /// Width of the segmentation head's hidden layer; 0 makes the head a
    /// single linear map `2d -> 1`.
    pub seg_hidden: usize,
}

impl EncoderConfig {
    /// Small from-scratch model sized for a laptop CPU.
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d_model: 64,
            layers: 2,
            heads: 2,
            ffn_dim: 128,
            out_dim: 32,
            dropout: 0.2,
            max_positions: 128,
            align_hidden: true,
            seg_hidden: 64,
        }
    }

    /// Base-size dimensions (768 hidden, 128-dimensional phrase vectors).
    pub fn base(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d_model: 768,
            layers: 12,
            heads: 12,
            ffn_dim: 3072,
            out_dim: 128,
            dropout: 0.2,
            max_positions: 512,
            align_hidden: true,
            seg_hidden: 768,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return bad("encoder dimensions must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.out_dim == 0 {
            return bad("out_dim must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_positions == 0 {
            return bad("max_positions must be positive".into());
        }
        Ok(())
    }
}

/// Contextual states, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates<F: Scalar = f32>(pub Array2<F>);

impl<F: Scalar> HiddenStates<F> {
    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

pub type PhraseVector<F = f32> = Vec<F>;
