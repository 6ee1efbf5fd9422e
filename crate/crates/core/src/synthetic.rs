//! Deterministic cipher bitext with known word alignments.
//!
//! Every regular source word has one fixed target word. A small set of
//! "modifier" words swaps with the regular word that follows it on the
//! target side, and a few two-word source collocations translate to a single
//! target word. Because the generating alignment is known, consistent phrase
//! pairs, segmentation labels and retrieval gold data are all exact.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::Alignment;
use crate::corpus::{Sentence, SentencePair};
use crate::extract::{enumerate_consistent, Span};
use crate::pipeline::{GoldItem, GoldQuery, GoldSet, Occurrence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub seed: u64,
    /// One-to-one source words (the first `modifiers` of them reorder).
    pub regular_words: usize,
    pub modifiers: usize,
    /// Two-word source units with a one-word translation.
    pub collocations: usize,
    pub min_units: usize,
    pub max_units: usize,
    /// Probability that a unit is a collocation.
    pub merge_prob: f64,
    pub train_pairs: usize,
    pub gold_pairs: usize,
    pub distractor_sentences: usize,
    pub distractors: usize,
    pub min_gold_len: usize,
    pub max_gold_len: usize,
    pub max_distractor_len: usize,
    pub src_lang: String,
    pub tgt_lang: String,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 7,
            regular_words: 180,
            modifiers: 20,
            collocations: 10,
            min_units: 8,
            max_units: 14,
            merge_prob: 0.06,
            train_pairs: 2_000,
            gold_pairs: 200,
            distractor_sentences: 2_500,
            distractors: 10_000,
            min_gold_len: 2,
            max_gold_len: 4,
            max_distractor_len: 4,
            src_lang: "xs".into(),
            tgt_lang: "xt".into(),
        }
    }
}

impl SyntheticConfig {
    /// Source vocabulary size: regular words plus both halves of every collocation.
    pub fn source_vocab(&self) -> usize {
        self.regular_words + 2 * self.collocations
    }

    pub fn target_vocab(&self) -> usize {
        self.regular_words + self.collocations
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unit {
    Regular(usize),
    Collocation(usize),
}

/// Two-letter-per-digit spelling of `n`, so no word looks numeric.
fn spell(prefix: char, mut n: usize) -> String {
    const CONS: &[u8] = b"bdfgklmnprstvz";
    const VOW: &[u8] = b"aeiou";
    let mut s = String::from(prefix);
    loop {
        s.push(CONS[n % CONS.len()] as char);
        n /= CONS.len();
        s.push(VOW[n % VOW.len()] as char);
        n /= VOW.len();
        if n == 0 {
            break;
        }
    }
    s
}

#[derive(Debug, Clone)]
pub struct Cipher {
    cfg: SyntheticConfig,
    src_words: Vec<String>,
    tgt_words: Vec<String>,
    /// Regular source word -> target word.
    map: Vec<usize>,
}

impl Cipher {
    pub fn new(cfg: &SyntheticConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC1F3);
        let src_words = (0..cfg.source_vocab()).map(|i| spell('s', i)).collect();
        let tgt_words = (0..cfg.target_vocab()).map(|i| spell('t', i)).collect();
        let mut map: Vec<usize> = (0..cfg.regular_words).collect();
        map.shuffle(&mut rng);
        Cipher {
            cfg: cfg.clone(),
            src_words,
            tgt_words,
            map,
        }
    }

    fn is_modifier(&self, u: Unit) -> bool {
        matches!(u, Unit::Regular(w) if w < self.cfg.modifiers)
    }

    /// A random sentence pair and its generating alignment.
    pub fn pair<R: Rng + ?Sized>(&self, id: u64, rng: &mut R) -> (SentencePair, Alignment) {
        let cfg = &self.cfg;
        let n = rng.gen_range(cfg.min_units..=cfg.max_units);
        // A modifier is always followed by a plain word, so every modifier
        // swaps and the reordering can be read off either side alone.
        let mut units: Vec<Unit> = Vec::with_capacity(n);
        for k in 0..n {
            let after_modifier = units.last().is_some_and(|&u| self.is_modifier(u));
            let u = if after_modifier {
                Unit::Regular(rng.gen_range(cfg.modifiers..cfg.regular_words))
            } else if cfg.collocations > 0 && rng.gen_bool(cfg.merge_prob) {
                Unit::Collocation(rng.gen_range(0..cfg.collocations))
            } else if k + 1 == n {
                Unit::Regular(rng.gen_range(cfg.modifiers..cfg.regular_words))
            } else {
                Unit::Regular(rng.gen_range(0..cfg.regular_words))
            };
            units.push(u);
        }

        // Source tokens and the source positions each unit occupies.
        let mut src = Vec::new();
        let mut unit_pos = Vec::new();
        for &u in &units {
            let start = src.len();
            match u {
                Unit::Regular(w) => src.push(self.src_words[w].clone()),
                Unit::Collocation(c) => {
                    src.push(self.src_words[cfg.regular_words + 2 * c].clone());
                    src.push(self.src_words[cfg.regular_words + 2 * c + 1].clone());
                }
            }
            unit_pos.push(start..src.len());
        }

        // Target order: a modifier trades places with a following plain word.
        let mut order = Vec::with_capacity(n);
        let mut i = 0;
        while i < n {
            if i + 1 < n && self.is_modifier(units[i]) && matches!(units[i + 1], Unit::Regular(_)) && !self.is_modifier(units[i + 1]) {
                order.extend([i + 1, i]);
                i += 2;
            } else {
                order.push(i);
                i += 1;
            }
        }
        let mut tgt = Vec::with_capacity(n);
        let mut links = Vec::new();
        for (j, &u) in order.iter().enumerate() {
            tgt.push(match units[u] {
                Unit::Regular(w) => self.tgt_words[self.map[w]].clone(),
                Unit::Collocation(c) => self.tgt_words[cfg.regular_words + c].clone(),
            });
            links.extend(unit_pos[u].clone().map(|i| (i, j)));
        }
        let align = Alignment::from_links(src.len(), tgt.len(), links).expect("links in range");
        let x = Sentence::new(id, cfg.src_lang.clone(), src);
        let y = Sentence::new(id, cfg.tgt_lang.clone(), tgt);
        (SentencePair::new(id, x, y).expect("distinct languages"), align)
    }
}

/// Spans of one side labeled by whether they belong to some consistent pair
/// under `align` (both sides at most `max_len` long).
pub fn phrase_labels(align: &Alignment, target_side: bool, max_len: usize) -> Vec<(Span, bool)> {
    let consistent: HashSet<Span> = enumerate_consistent(align, max_len, false)
        .into_iter()
        .map(|(s, t)| if target_side { t } else { s })
        .collect();
    let n = if target_side { align.tgt_len() } else { align.src_len() };
    (0..n)
        .flat_map(|s| (s..n.min(s + max_len)).map(move |e| Span::new(s, e)))
        .map(|sp| (sp, consistent.contains(&sp)))
        .collect()
}

/// A held-out query phrase and the target occurrence it should retrieve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GoldPhrase {
    pub pair_index: usize,
    pub src: Span,
    pub tgt: Span,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub cipher: Cipher,
    pub train: Vec<SentencePair>,
    pub train_alignments: Vec<Alignment>,
    pub heldout: Vec<SentencePair>,
    pub heldout_alignments: Vec<Alignment>,
    /// One gold phrase per held-out pair.
    pub gold: Vec<GoldPhrase>,
    /// Independent target-language sentences used as distractor contexts.
    pub mono: Vec<Sentence>,
    pub mono_alignments: Vec<Alignment>,
    /// `(index into mono, span)`; every span is a true phrase of its sentence.
    pub distractors: Vec<(usize, Span)>,
}

fn stream(cfg: &SyntheticConfig, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    rng
}

pub fn generate(cfg: &SyntheticConfig) -> SyntheticData {
    let cipher = Cipher::new(cfg);
    let make = |n: usize, id0: u64, rng: &mut ChaCha8Rng| -> (Vec<SentencePair>, Vec<Alignment>) {
        (0..n).map(|i| cipher.pair(id0 + i as u64, rng)).unzip()
    };
    let (train, train_alignments) = make(cfg.train_pairs, 0, &mut stream(cfg, 1));

    let mut rng = stream(cfg, 2);
    let (heldout, heldout_alignments) = make(cfg.gold_pairs, 1_000_000, &mut rng);
    let gold = heldout_alignments
        .iter()
        .enumerate()
        .map(|(pair_index, align)| {
            let candidates: Vec<(Span, Span)> = enumerate_consistent(align, 8, false)
                .into_iter()
                .filter(|(_, t)| (cfg.min_gold_len..=cfg.max_gold_len).contains(&t.len()))
                .collect();
            let &(src, tgt) = candidates.choose(&mut rng).expect("sentences are long enough for a gold phrase");
            GoldPhrase { pair_index, src, tgt }
        })
        .collect();

    let mut rng = stream(cfg, 3);
    let gold_contexts: HashSet<String> = heldout.iter().map(|p| p.y.text()).collect();
    let mut mono = Vec::new();
    let mut mono_alignments = Vec::new();
    let mut distractors = Vec::new();
    let per_sentence = cfg.distractors.div_ceil(cfg.distractor_sentences.max(1)).max(1);
    let mut id = 2_000_000;
    while distractors.len() < cfg.distractors {
        let (pair, align) = cipher.pair(id, &mut rng);
        id += 1;
        if gold_contexts.contains(&pair.y.text()) {
            continue;
        }
        let mut spans: Vec<Span> = enumerate_consistent(&align, cfg.max_distractor_len, false)
            .into_iter()
            .map(|(_, t)| t)
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        spans.sort();
        let take = per_sentence.min(cfg.distractors - distractors.len());
        let m = mono.len();
        distractors.extend(spans.choose_multiple(&mut rng, take).map(|&sp| (m, sp)));
        mono.push(pair.y);
        mono_alignments.push(align);
    }

    SyntheticData {
        cipher,
        train,
        train_alignments,
        heldout,
        heldout_alignments,
        gold,
        mono,
        mono_alignments,
        distractors,
    }
}

impl SyntheticData {
    /// Gold queries (source side of each held-out pair) with their target
    /// occurrences.
    pub fn gold_set(&self) -> GoldSet {
        GoldSet {
            items: self
                .gold
                .iter()
                .map(|g| {
                    let pair = &self.heldout[g.pair_index];
                    GoldItem {
                        query: GoldQuery {
                            text_context: pair.x.text(),
                            s: g.src.s,
                            e: g.src.e,
                            lang: pair.x.language.clone(),
                        },
                        gold: Occurrence::new(&pair.y, g.tgt),
                    }
                })
                .collect(),
        }
    }

    /// The first `n` distractor phrases as occurrences.
    pub fn distractor_occurrences(&self, n: usize) -> Vec<Occurrence> {
        self.distractors
            .iter()
            .take(n)
            .map(|&(m, sp)| Occurrence::new(&self.mono[m], sp))
            .collect()
    }
}
