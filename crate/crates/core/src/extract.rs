//! Consistent phrase-pair extraction from word-aligned sentence pairs, quality
//! filters, and positive/negative spans for segmentation training.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::Alignment;
use crate::corpus::{is_punct, SentencePair, Vocabulary};
use crate::error::{Error, Result};

/// Inclusive, 0-indexed token span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub s: usize,
    pub e: usize,
}

impl Span {
    pub fn new(s: usize, e: usize) -> Self {
        debug_assert!(s <= e);
        Span { s, e }
    }

    pub fn len(&self) -> usize {
        self.e - self.s + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, t: usize) -> bool {
        self.s <= t && t <= self.e
    }

    pub fn check(&self, len: usize) -> Result<()> {
        if self.s > self.e || self.e >= len {
            return Err(Error::SpanOutOfRange {
                s: self.s,
                e: self.e,
                len,
            });
        }
        Ok(())
    }
}

/// A consistently aligned span pair; `pair_index` points into the corpus slice
/// the pair was extracted from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PhrasePair {
    pub pair_id: u64,
    pub pair_index: usize,
    pub src: Span,
    pub tgt: Span,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub max_phrase_len: usize,
    /// Phrases starting or ending with a token more frequent than this are
    /// dropped. 30k was used for a 10M-pair corpus; scale it to the corpus size.
    pub boundary_freq_threshold: u64,
    pub drop_numeric_punct: bool,
    /// Require every token of both spans to carry at least one link.
    pub strict_all_aligned: bool,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            max_phrase_len: 8,
            boundary_freq_threshold: 30_000,
            drop_numeric_punct: true,
            strict_all_aligned: false,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_phrase_len == 0 {
            return Err(Error::Config("max_phrase_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// Every span pair whose links stay inside both spans (with at least one link),
/// both sides at most `max_len` long. Overlapping pairs are all returned.
pub fn enumerate_consistent(align: &Alignment, max_len: usize, strict: bool) -> Vec<(Span, Span)> {
    let (n, m) = (align.src_len(), align.tgt_len());
    let mut src_links: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut tgt_links: Vec<Vec<usize>> = vec![Vec::new(); m];
    for &(i, j) in align.links() {
        src_links[i].push(j);
        tgt_links[j].push(i);
    }
    let mut out = Vec::new();
    for i1 in 0..n {
        let mut tmin = usize::MAX;
        let mut tmax = 0;
        let mut all_aligned = true;
        for i2 in i1..n.min(i1 + max_len) {
            for &j in &src_links[i2] {
                tmin = tmin.min(j);
                tmax = tmax.max(j);
            }
            all_aligned &= !src_links[i2].is_empty();
            if tmin == usize::MAX || tmax - tmin + 1 > max_len {
                continue;
            }
            if strict && !all_aligned {
                continue;
            }
            // Every target token in the hull must link back into [i1, i2].
            let consistent = (tmin..=tmax).all(|j| {
                tgt_links[j].iter().all(|&i| i1 <= i && i <= i2) && (!strict || !tgt_links[j].is_empty())
            });
            if !consistent {
                continue;
            }
            let src = Span::new(i1, i2);
            if strict {
                out.push((src, Span::new(tmin, tmax)));
                continue;
            }
            // Grow over unaligned target tokens on either side.
            let mut u = tmin;
            loop {
                let mut v = tmax;
                loop {
                    if v - u + 1 > max_len {
                        break;
                    }
                    out.push((src, Span::new(u, v)));
                    if v + 1 >= m || !tgt_links[v + 1].is_empty() {
                        break;
                    }
                    v += 1;
                }
                if u == 0 || !tgt_links[u - 1].is_empty() || tmax - (u - 1) + 1 > max_len {
                    break;
                }
                u -= 1;
            }
        }
    }
    out
}

/// [`enumerate_consistent`] for a whole corpus slice.
pub fn extract_pairs(pairs: &[SentencePair], aligns: &[Alignment], cfg: &ExtractionConfig) -> Result<Vec<PhrasePair>> {
    cfg.validate()?;
    if pairs.len() != aligns.len() {
        return Err(Error::LengthMismatch(format!(
            "{} sentence pairs but {} alignments",
            pairs.len(),
            aligns.len()
        )));
    }
    let mut out = Vec::new();
    for (idx, (p, a)) in pairs.iter().zip(aligns).enumerate() {
        if a.src_len() != p.x.len() || a.tgt_len() != p.y.len() {
            return Err(Error::LengthMismatch(format!("alignment {idx} does not match sentence pair {}", p.id)));
        }
        for (src, tgt) in enumerate_consistent(a, cfg.max_phrase_len, cfg.strict_all_aligned) {
            out.push(PhrasePair {
                pair_id: out.len() as u64,
                pair_index: idx,
                src,
                tgt,
            });
        }
    }
    Ok(out)
}

fn numeric_or_punct(token: &str) -> bool {
    token.chars().all(|c| c.is_numeric() || is_punct(c))
}

fn side_rejected(tokens: &[String], vocab: &Vocabulary, cfg: &ExtractionConfig) -> bool {
    let first = &tokens[0];
    let last = &tokens[tokens.len() - 1];
    if vocab.freq(first) > cfg.boundary_freq_threshold || vocab.freq(last) > cfg.boundary_freq_threshold {
        return true;
    }
    cfg.drop_numeric_punct && tokens.iter().all(|t| numeric_or_punct(t))
}

/// Drops pairs with a too-frequent boundary token or a numbers/punctuation-only
/// side. Survivors keep their order and spans.
pub fn apply_filters(
    phrases: Vec<PhrasePair>,
    corpus: &[SentencePair],
    vocab_x: &Vocabulary,
    vocab_y: &Vocabulary,
    cfg: &ExtractionConfig,
) -> Vec<PhrasePair> {
    phrases
        .into_iter()
        .filter(|pp| {
            let pair = &corpus[pp.pair_index];
            !side_rejected(&pair.x.tokens[pp.src.s..=pp.src.e], vocab_x, cfg)
                && !side_rejected(&pair.y.tokens[pp.tgt.s..=pp.tgt.e], vocab_y, cfg)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabeledSpan {
    pub span: Span,
    pub is_phrase: bool,
}

/// All distinct positive spans plus an equally sized uniform sample (without
/// replacement) of the remaining spans of length <= `max_len`.
pub fn segmentation_examples<R: Rng + ?Sized>(
    positives: &[Span],
    sentence_len: usize,
    max_len: usize,
    rng: &mut R,
) -> Vec<LabeledSpan> {
    let pos: BTreeSet<Span> = positives.iter().copied().collect();
    let universe: Vec<Span> = (0..sentence_len)
        .flat_map(|s| (s..sentence_len.min(s + max_len)).map(move |e| Span::new(s, e)))
        .filter(|sp| !pos.contains(sp))
        .collect();
    let take = pos.len().min(universe.len());
    let mut out: Vec<LabeledSpan> = pos
        .iter()
        .map(|&span| LabeledSpan { span, is_phrase: true })
        .collect();
    out.extend(sample(rng, universe.len(), take).into_iter().map(|k| LabeledSpan {
        span: universe[k],
        is_phrase: false,
    }));
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub s: usize,
    pub e: usize,
    pub text: String,
}

/// One line of the phrase-pair JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhrasePairRecord {
    pub pair_id: u64,
    pub sent_id: u64,
    pub src: SpanRecord,
    pub tgt: SpanRecord,
}

pub fn write_phrase_pairs(path: &Path, corpus: &[SentencePair], phrases: &[PhrasePair]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for pp in phrases {
        let pair = &corpus[pp.pair_index];
        let rec = PhrasePairRecord {
            pair_id: pp.pair_id,
            sent_id: pair.id,
            src: SpanRecord {
                s: pp.src.s,
                e: pp.src.e,
                text: pair.x.span_text(pp.src.s, pp.src.e),
            },
            tgt: SpanRecord {
                s: pp.tgt.s,
                e: pp.tgt.e,
                text: pair.y.span_text(pp.tgt.s, pp.tgt.e),
            },
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads phrase pairs back and re-attaches them to `corpus` by sentence id.
pub fn read_phrase_pairs(path: &Path, corpus: &[SentencePair]) -> Result<Vec<PhrasePair>> {
    let by_id: std::collections::HashMap<u64, usize> = corpus.iter().enumerate().map(|(i, p)| (p.id, i)).collect();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let rec: PhrasePairRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let &idx = by_id
            .get(&rec.sent_id)
            .ok_or_else(|| parse_err(format!("unknown sentence id {}", rec.sent_id)))?;
        let (src, tgt) = (Span { s: rec.src.s, e: rec.src.e }, Span { s: rec.tgt.s, e: rec.tgt.e });
        src.check(corpus[idx].x.len()).map_err(|e| parse_err(e.to_string()))?;
        tgt.check(corpus[idx].y.len()).map_err(|e| parse_err(e.to_string()))?;
        out.push(PhrasePair {
            pair_id: rec.pair_id,
            pair_index: idx,
            src,
            tgt,
        });
    }
    Ok(out)
}
