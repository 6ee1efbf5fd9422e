//! Threshold-based span selection with the segmentation head.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Sentence;
use crate::encoder::{HiddenStates, PhraseEncoder};
use crate::error::{Error, Result};
use crate::extract::Span;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentConfig {
    /// Spans kept when building an index.
    pub index_threshold: f64,
    /// Spans kept when segmenting a query; higher, so fewer and surer spans.
    pub query_threshold: f64,
    pub max_span_len: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            index_threshold: 0.7,
            query_threshold: 0.9,
            max_span_len: 8,
        }
    }
}

impl SegmentConfig {
    pub fn validate(&self) -> Result<()> {
        for t in [self.index_threshold, self.query_threshold] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("threshold {t} outside (0, 1)")));
            }
        }
        if self.max_span_len == 0 {
            return Err(Error::Config("max_span_len must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSpan {
    pub span: Span,
    pub score: f32,
}

/// All spans of a length-`n` sentence no longer than `max_len`, by (start, end).
pub fn all_spans(n: usize, max_len: usize) -> Vec<Span> {
    (0..n)
        .flat_map(|s| (s..n.min(s + max_len)).map(move |e| Span::new(s, e)))
        .collect()
}

/// Every span of exactly `n` tokens (shorter sentences yield themselves whole).
pub fn ngram_spans(len: usize, n: usize) -> Vec<Span> {
    if len == 0 || n == 0 {
        return Vec::new();
    }
    if len <= n {
        return vec![Span::new(0, len - 1)];
    }
    (0..=len - n).map(|s| Span::new(s, s + n - 1)).collect()
}

/// Scores every span of `h` up to `max_len` tokens and keeps those above
/// `threshold`, sorted by (start, end). Overlaps are kept.
pub fn segment_states(encoder: &PhraseEncoder, h: &HiddenStates, threshold: f64, max_len: usize) -> Result<Vec<ScoredSpan>> {
    let spans = all_spans(h.rows(), max_len);
    let probs = encoder.span_probs(h, &spans)?;
    Ok(spans
        .into_iter()
        .zip(probs)
        .filter(|&(_, p)| f64::from(p) > threshold)
        .map(|(span, score)| ScoredSpan { span, score })
        .collect())
}

pub fn segment(encoder: &PhraseEncoder, sentence: &Sentence, threshold: f64, max_len: usize) -> Result<Vec<ScoredSpan>> {
    if sentence.is_empty() {
        return Ok(Vec::new());
    }
    let h = encoder.hidden(sentence)?;
    segment_states(encoder, &h, threshold, max_len)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub sent_id: u64,
    pub s: usize,
    pub e: usize,
    pub score: f32,
    pub text: String,
}

pub fn write_segments(path: &Path, segments: &[(&Sentence, Vec<ScoredSpan>)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (sentence, spans) in segments {
        for sp in spans {
            let rec = SegmentRecord {
                sent_id: sentence.id,
                s: sp.span.s,
                e: sp.span.e,
                score: sp.score,
                text: sentence.span_text(sp.span.s, sp.span.e),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Area under the ROC curve of `scores` against `labels` (tied scores count
/// half). `None` when either class is empty.
pub fn ranking_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "one label per score");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    // Mann-Whitney: sum of (average) ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let p = positives as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}
