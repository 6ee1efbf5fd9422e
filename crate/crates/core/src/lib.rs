//! Cross-lingual contextualized phrase retrieval.
//!
//! The crate covers the whole offline and online path:
//!
//! * [`corpus`]: tokenization, bitext/monolingual loading, vocabularies.
//! * [`align`]: IBM Model 1 EM, Viterbi decoding and symmetrization.
//! * [`extract`]: consistent phrase-pair extraction, quality filters and
//!   segmentation training spans.
//! * [`encoder`]: a small bidirectional Transformer with a phrase head and a
//!   span-segmentation head, with hand-written backpropagation.
//! * [`trainer`]: the dual-dropout contrastive objective, segmentation loss,
//!   batching and the Adam loop.
//! * [`segmenter`]: threshold-based span selection at inference time.
//! * [`index`]: exact flat inner-product index with on-disk persistence.
//! * [`pipeline`]: retrieval, prompt construction and acc@1 evaluation.
//! * [`synthetic`]: a deterministic cipher bitext used for end-to-end checks.

pub mod align;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod extract;
pub mod index;
pub mod pipeline;
pub mod segmenter;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
