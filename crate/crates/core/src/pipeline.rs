//! Query-time retrieval, translation prompts and acc@1 evaluation.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{detokenize, Sentence};
use crate::encoder::PhraseEncoder;
use crate::error::{Error, Result};
use crate::extract::Span;
use crate::index::{IndexEntry, IndexItem, Metric, PhraseIndex};
use crate::segmenter::{ngram_spans, segment_states};

/// How candidate spans are chosen from a sentence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpanSelection {
    /// Spans the segmentation head scores above `threshold`.
    Learned { threshold: f64, max_len: usize },
    /// Every n-gram, scored 1.0.
    Ngram(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySpan {
    pub s: usize,
    pub e: usize,
    pub text: String,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedHit {
    pub score: f32,
    pub entry: IndexEntry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub query: QuerySpan,
    pub hits: Vec<ResolvedHit>,
}

/// Candidate spans of `sentence` with their scores, from one forward pass.
fn select_spans(
    encoder: &PhraseEncoder,
    sentence: &Sentence,
    selection: SpanSelection,
) -> Result<(crate::encoder::HiddenStates, Vec<(Span, f32)>)> {
    let h = encoder.hidden(sentence)?;
    let spans = match selection {
        SpanSelection::Learned { threshold, max_len } => segment_states(encoder, &h, threshold, max_len)?
            .into_iter()
            .map(|s| (s.span, s.score))
            .collect(),
        SpanSelection::Ngram(n) => ngram_spans(h.rows(), n).into_iter().map(|s| (s, 1.0)).collect(),
    };
    Ok((h, spans))
}

/// Segments `sentence`, encodes every selected span and searches the index.
/// Results come back in span order.
pub fn retrieve(
    encoder: &PhraseEncoder,
    sentence: &Sentence,
    index: &PhraseIndex,
    selection: SpanSelection,
    k: usize,
) -> Result<Vec<RetrievalResult>> {
    if index.dim() != encoder.out_dim() {
        return Err(Error::DimensionMismatch {
            expected: encoder.out_dim(),
            got: index.dim(),
        });
    }
    if sentence.is_empty() {
        return Ok(Vec::new());
    }
    let (h, spans) = select_spans(encoder, sentence, selection)?;
    let vectors = spans
        .iter()
        .map(|&(sp, _)| encoder.phrase_vector(&h, sp))
        .collect::<Result<Vec<_>>>()?;
    let hits = index.search(&vectors, k)?;
    Ok(spans
        .into_iter()
        .zip(hits)
        .map(|((sp, score), hits)| RetrievalResult {
            query: QuerySpan {
                s: sp.s,
                e: sp.e,
                text: sentence.span_text(sp.s, sp.e),
                score,
            },
            hits: hits
                .into_iter()
                .map(|h| ResolvedHit {
                    score: h.score,
                    entry: index.entry(h.id).expect("hit ids come from the index").clone(),
                })
                .collect(),
        })
        .collect())
}

/// Segments and encodes sentences into index items, in sentence then span order.
pub fn index_items(encoder: &PhraseEncoder, sentences: &[Sentence], selection: SpanSelection) -> Result<Vec<IndexItem>> {
    let per_sentence: Vec<Vec<IndexItem>> = sentences
        .par_iter()
        .map(|sentence| {
            if sentence.is_empty() {
                return Ok(Vec::new());
            }
            let (h, spans) = select_spans(encoder, sentence, selection)?;
            let context = sentence.text();
            spans
                .into_iter()
                .map(|(sp, _)| {
                    Ok(IndexItem {
                        phrase: sentence.span_text(sp.s, sp.e),
                        context: context.clone(),
                        s: sp.s,
                        e: sp.e,
                        doc_id: sentence.id,
                        vector: encoder.phrase_vector(&h, sp)?,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_sentence.into_iter().flatten().collect())
}

pub fn build_index(
    encoder: &PhraseEncoder,
    sentences: &[Sentence],
    selection: SpanSelection,
    metric: Metric,
) -> Result<PhraseIndex> {
    PhraseIndex::build(encoder.out_dim(), metric, index_items(encoder, sentences, selection)?)
}

/// A phrase occurrence: whitespace-tokenized context plus inclusive span.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Occurrence {
    pub context: String,
    pub s: usize,
    pub e: usize,
}

impl Occurrence {
    pub fn new(sentence: &Sentence, span: Span) -> Self {
        Occurrence {
            context: sentence.text(),
            s: span.s,
            e: span.e,
        }
    }

    pub fn tokens(&self) -> Vec<&str> {
        self.context.split_whitespace().collect()
    }

    pub fn phrase(&self) -> Result<String> {
        let toks = self.tokens();
        Span::new(self.s.min(self.e), self.e).check(toks.len())?;
        if self.s > self.e {
            return Err(Error::SpanOutOfRange {
                s: self.s,
                e: self.e,
                len: toks.len(),
            });
        }
        Ok(toks[self.s..=self.e].join(" "))
    }
}

/// Encodes occurrences into index items, running the trunk once per distinct
/// context. Output order follows the input.
pub fn encode_occurrences(encoder: &PhraseEncoder, occurrences: &[Occurrence], language: &str) -> Result<Vec<IndexItem>> {
    let mut groups: Vec<(&str, Vec<usize>)> = Vec::new();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (i, occ) in occurrences.iter().enumerate() {
        let g = *seen.entry(occ.context.as_str()).or_insert_with(|| {
            groups.push((occ.context.as_str(), Vec::new()));
            groups.len() - 1
        });
        groups[g].1.push(i);
    }
    let encoded: Vec<Vec<(usize, IndexItem)>> = groups
        .par_iter()
        .enumerate()
        .map(|(doc, (context, members))| {
            let tokens = context.split_whitespace().map(String::from).collect();
            let sentence = Sentence::new(doc as u64, language, tokens);
            let h = encoder.hidden(&sentence)?;
            members
                .iter()
                .map(|&i| {
                    let occ = &occurrences[i];
                    let phrase = occ.phrase()?;
                    let vector = encoder.phrase_vector(&h, Span::new(occ.s, occ.e))?;
                    Ok((
                        i,
                        IndexItem {
                            phrase,
                            context: occ.context.clone(),
                            s: occ.s,
                            e: occ.e,
                            doc_id: doc as u64,
                            vector,
                        },
                    ))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<Option<IndexItem>> = vec![None; occurrences.len()];
    for (i, item) in encoded.into_iter().flatten() {
        out[i] = Some(item);
    }
    Ok(out.into_iter().map(|o| o.expect("every occurrence encoded")).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldQuery {
    pub text_context: String,
    pub s: usize,
    pub e: usize,
    pub lang: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldItem {
    pub query: GoldQuery,
    pub gold: Occurrence,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GoldSet {
    pub items: Vec<GoldItem>,
}

fn identity_map(index: &PhraseIndex) -> HashMap<(&str, usize, usize), usize> {
    index.entries().iter().map(|e| ((e.context.as_str(), e.s, e.e), e.id)).collect()
}

impl GoldSet {
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut items = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let item: GoldItem = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: e.to_string(),
            })?;
            let query_len = item.query.text_context.split_whitespace().count();
            for (s, e, len) in [(item.query.s, item.query.e, query_len), (item.gold.s, item.gold.e, item.gold.tokens().len())] {
                if s > e || e >= len {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: n + 1,
                        msg: format!("span ({s}, {e}) out of range for {len} tokens"),
                    });
                }
            }
            items.push(item);
        }
        Ok(GoldSet { items })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for item in &self.items {
            serde_json::to_writer(&mut w, item)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Index id of every gold target; errors on the first one not indexed.
    pub fn resolve(&self, index: &PhraseIndex) -> Result<Vec<usize>> {
        let ids = identity_map(index);
        self.items
            .iter()
            .map(|item| {
                ids.get(&(item.gold.context.as_str(), item.gold.s, item.gold.e))
                    .copied()
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "gold target ({}, {}) in {:?} is not in the index",
                            item.gold.s, item.gold.e, item.gold.context
                        ))
                    })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// The rank-1 entry must be the gold occurrence itself.
    #[default]
    Occurrence,
    /// Any entry with the gold phrase string counts.
    String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub correct: usize,
    /// Gold targets absent from the index (always counted as misses).
    pub missing: usize,
    pub accuracy: f64,
}

/// Encodes each gold query span directly (no segmentation), takes the top
/// hit and compares it with the gold target.
pub fn eval_acc_at_1(gold: &GoldSet, encoder: &PhraseEncoder, index: &PhraseIndex, mode: MatchMode) -> Result<EvalReport> {
    if gold.is_empty() {
        return Err(Error::Config("gold set is empty".into()));
    }
    if index.dim() != encoder.out_dim() {
        return Err(Error::DimensionMismatch {
            expected: encoder.out_dim(),
            got: index.dim(),
        });
    }
    let queries: Vec<Vec<f32>> = gold
        .items
        .par_iter()
        .map(|item| {
            let q = &item.query;
            let tokens = q.text_context.split_whitespace().map(String::from).collect();
            let h = encoder.hidden(&Sentence::new(0, q.lang.clone(), tokens))?;
            encoder.phrase_vector(&h, Span::new(q.s, q.e))
        })
        .collect::<Result<_>>()?;
    let top = index.search(&queries, 1)?;
    let ids = identity_map(index);
    let mut correct = 0;
    let mut missing = 0;
    for (item, hits) in gold.items.iter().zip(&top) {
        let g = &item.gold;
        let gold_id = ids.get(&(g.context.as_str(), g.s, g.e)).copied();
        if gold_id.is_none() {
            missing += 1;
        }
        let Some(hit) = hits.first() else { continue };
        let ok = match mode {
            MatchMode::Occurrence => gold_id == Some(hit.id),
            MatchMode::String => index.entry(hit.id).map(|e| e.phrase.as_str()) == Some(g.phrase()?.as_str()),
        };
        correct += ok as usize;
    }
    Ok(EvalReport {
        total: gold.len(),
        correct,
        missing,
        accuracy: correct as f64 / gold.len() as f64,
    })
}

/// Builds a fresh index of the gold targets followed by `distractors`, then
/// evaluates. Distractors must not repeat a gold occurrence.
pub fn eval_with_distractors(
    gold: &GoldSet,
    distractors: &[Occurrence],
    encoder: &PhraseEncoder,
    language: &str,
    metric: Metric,
    mode: MatchMode,
) -> Result<EvalReport> {
    let gold_targets: Vec<Occurrence> = gold.items.iter().map(|i| i.gold.clone()).collect();
    let gold_set: HashSet<&Occurrence> = gold_targets.iter().collect();
    if let Some(clash) = distractors.iter().find(|d| gold_set.contains(d)) {
        return Err(Error::Config(format!("distractor ({}, {}) in {:?} is a gold target", clash.s, clash.e, clash.context)));
    }
    let all: Vec<Occurrence> = gold_targets.iter().chain(distractors).cloned().collect();
    let index = PhraseIndex::build(encoder.out_dim(), metric, encode_occurrences(encoder, &all, language)?)?;
    eval_acc_at_1(gold, encoder, &index, mode)
}

/// Display name for a language code (the code itself when unknown).
pub fn language_name(code: &str) -> String {
    let name = match code.to_ascii_lowercase().as_str() {
        "de" => "German",
        "en" => "English",
        "cs" => "Czech",
        "fr" => "French",
        "es" => "Spanish",
        "it" => "Italian",
        "ro" => "Romanian",
        "ru" => "Russian",
        "fi" => "Finnish",
        "tr" => "Turkish",
        "zh" => "Chinese",
        "ja" => "Japanese",
        "pt" => "Portuguese",
        "nl" => "Dutch",
        "pl" => "Polish",
        _ => return code.to_string(),
    };
    name.to_string()
}

pub const PROMPT_DIVIDER: &str = "------------------------------------";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub src_lang_name: String,
    pub tgt_lang_name: String,
    /// Budget for the visible context text, markers and ellipses excluded.
    pub max_context_chars: usize,
    pub max_phrases: usize,
    pub marker_open: String,
    pub marker_close: String,
    /// Text placed above the phrase blocks; omitted when empty.
    pub preamble: String,
    /// Wrap the selected phrases in the source sentence with the markers.
    pub mark_source_inline: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            src_lang_name: "German".into(),
            tgt_lang_name: "English".into(),
            max_context_chars: 100,
            max_phrases: 8,
            marker_open: "[[".into(),
            marker_close: "]]".into(),
            preamble: "Below are phrases from the sentence to translate, each with a candidate translation \
                       found in a target-language corpus and the context it was found in."
                .into(),
            mark_source_inline: false,
        }
    }
}

impl PromptConfig {
    pub fn for_languages(src: &str, tgt: &str) -> Self {
        PromptConfig {
            src_lang_name: language_name(src),
            tgt_lang_name: language_name(tgt),
            ..Self::default()
        }
    }
}

/// Renders `tokens` with `[s, e]` marked, keeping at most `max_chars`
/// visible characters (markers and ellipses not counted) by growing a window
/// around the phrase one token at a time, alternating sides. The phrase is
/// always kept whole.
pub fn context_window(tokens: &[&str], s: usize, e: usize, max_chars: usize, open: &str, close: &str) -> String {
    let owned = |r: std::ops::Range<usize>| tokens[r].iter().map(|t| t.to_string()).collect::<Vec<_>>();
    let visible = |lo: usize, hi: usize| detokenize(&owned(lo..hi)).chars().count();
    let (mut lo, mut hi) = (s, e + 1);
    let (mut left_open, mut right_open) = (lo > 0, hi < tokens.len());
    let mut take_left = true;
    while left_open || right_open {
        if take_left && left_open {
            if visible(lo - 1, hi) <= max_chars {
                lo -= 1;
                left_open = lo > 0;
            } else {
                left_open = false;
            }
        } else if !take_left && right_open {
            if visible(lo, hi + 1) <= max_chars {
                hi += 1;
                right_open = hi < tokens.len();
            } else {
                right_open = false;
            }
        }
        take_left = !take_left;
    }
    let mut marked = owned(lo..hi);
    let (ms, me) = (s - lo, e - lo);
    marked[ms] = format!("{open}{}", marked[ms]);
    marked[me] = format!("{}{close}", marked[me]);
    let mut out = String::new();
    if lo > 0 {
        out.push_str("... ");
    }
    out.push_str(&detokenize(&marked));
    if hi < tokens.len() {
        out.push_str(" ...");
    }
    out
}

/// Retrieval results used in a prompt: the best-scoring span per distinct
/// query text (only spans with at least one hit), capped at `max`, in start
/// order.
pub fn select_for_prompt(results: &[RetrievalResult], max: usize) -> Vec<&RetrievalResult> {
    let mut ranked: Vec<&RetrievalResult> = results.iter().filter(|r| !r.hits.is_empty()).collect();
    ranked.sort_by(|a, b| {
        b.query
            .score
            .total_cmp(&a.query.score)
            .then(a.query.s.cmp(&b.query.s))
            .then(a.query.e.cmp(&b.query.e))
    });
    let mut seen = HashSet::new();
    let mut chosen: Vec<&RetrievalResult> = ranked.into_iter().filter(|r| seen.insert(r.query.text.as_str())).take(max).collect();
    chosen.sort_by_key(|r| (r.query.s, r.query.e));
    chosen
}

fn display_sentence(sentence: &Sentence, marked: &[&RetrievalResult], cfg: &PromptConfig) -> String {
    if !cfg.mark_source_inline {
        return detokenize(&sentence.tokens);
    }
    let mut tokens = sentence.tokens.clone();
    let mut last_end = None;
    for r in marked {
        if last_end.is_some_and(|end| r.query.s <= end) || r.query.e >= tokens.len() {
            continue;
        }
        tokens[r.query.s] = format!("{}{}", cfg.marker_open, tokens[r.query.s]);
        tokens[r.query.e] = format!("{}{}", tokens[r.query.e], cfg.marker_close);
        last_end = Some(r.query.e);
    }
    detokenize(&tokens)
}

/// Translation prompt with one block per selected phrase, or the plain
/// instruction when nothing was retrieved.
pub fn build_prompt(sentence: &Sentence, results: &[RetrievalResult], cfg: &PromptConfig) -> String {
    let src = &cfg.src_lang_name;
    let tgt = &cfg.tgt_lang_name;
    let chosen = select_for_prompt(results, cfg.max_phrases);
    let text = display_sentence(sentence, &chosen, cfg);
    if chosen.is_empty() {
        return format!(
            "Please faithfully translate the following sentence from {src} into {tgt}, and do not alter its meaning:\n\
             {src}: {text}\n\
             {tgt}:\n"
        );
    }
    let mut out = String::new();
    if !cfg.preamble.is_empty() {
        out.push_str(&cfg.preamble);
        out.push('\n');
    }
    out.push_str(PROMPT_DIVIDER);
    out.push('\n');
    let blocks: Vec<String> = chosen
        .iter()
        .map(|r| {
            let hit = &r.hits[0].entry;
            let tokens: Vec<&str> = hit.context.split_whitespace().collect();
            let query_tokens: Vec<String> = r.query.text.split_whitespace().map(String::from).collect();
            let phrase_tokens: Vec<String> = hit.phrase.split_whitespace().map(String::from).collect();
            format!(
                "{src} Phrase: {}\nPotential Translation: {}\nContext: {}\n",
                detokenize(&query_tokens),
                detokenize(&phrase_tokens),
                context_window(&tokens, hit.s, hit.e, cfg.max_context_chars, &cfg.marker_open, &cfg.marker_close)
            )
        })
        .collect();
    out.push_str(&blocks.join("\n"));
    out.push_str(PROMPT_DIVIDER);
    out.push('\n');
    out.push_str(&format!(
        "Based on the provided information of phrase translation, please faithfully translate the following sentence from {src} into {tgt}:\n\n{src}: {text}\n\n{tgt}:\n"
    ));
    out
}
