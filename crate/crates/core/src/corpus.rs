//! Text ingestion: tokenization, bitext and monolingual loaders, vocabularies.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sentences longer than this are truncated before encoding.
pub const MAX_SENTENCE_TOKENS: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: u64,
    pub language: String,
    pub tokens: Vec<String>,
}

impl Sentence {
    pub fn new(id: u64, language: impl Into<String>, tokens: Vec<String>) -> Self {
        Sentence {
            id,
            language: language.into(),
            tokens,
        }
    }

    pub fn from_text(id: u64, language: impl Into<String>, text: &str, lowercase: bool) -> Self {
        Sentence::new(id, language, tokenize(text, lowercase))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens joined by single spaces. Token offsets in this string are the
    /// whitespace-split positions, which is what index entries and gold files use.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn span_text(&self, s: usize, e: usize) -> String {
        self.tokens[s..=e].join(" ")
    }

    /// Truncates to `max` tokens, logging a warning when anything is dropped.
    pub fn truncate(&mut self, max: usize) {
        if self.tokens.len() > max {
            log::warn!(
                "sentence {} has {} tokens; truncating to {}",
                self.id,
                self.tokens.len(),
                max
            );
            self.tokens.truncate(max);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub id: u64,
    pub x: Sentence,
    pub y: Sentence,
}

impl SentencePair {
    /// Builds a pair; both sides must carry different language tags.
    pub fn new(id: u64, x: Sentence, y: Sentence) -> Result<Self> {
        if x.language == y.language {
            return Err(Error::Config(format!(
                "sentence pair {id} has the same language '{}' on both sides",
                x.language
            )));
        }
        Ok(SentencePair { id, x, y })
    }
}

pub(crate) fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '«' | '»'
                | '“'
                | '”'
                | '‘'
                | '’'
                | '„'
                | '‚'
                | '…'
                | '–'
                | '—'
                | '¿'
                | '¡'
                | '·'
                | '‹'
                | '›'
        )
}

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '’'
}

/// `'s`, `'re`, `'ll`: an apostrophe followed by one or two letters.
fn is_clitic(chars: &[char]) -> bool {
    chars.len() >= 2
        && chars.len() <= 3
        && is_apostrophe(chars[0])
        && chars[1..].iter().all(|c| c.is_alphabetic())
}

/// Whitespace split, then punctuation peeled off both ends of every chunk and
/// trailing apostrophe clitics split into their own token.
pub fn tokenize(text: &str, lowercase: bool) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        split_chunk(&chars, &mut out);
    }
    if lowercase {
        for t in &mut out {
            *t = t.to_lowercase();
        }
    }
    out
}

fn split_chunk(chars: &[char], out: &mut Vec<String>) {
    let mut start = 0;
    let mut end = chars.len();

    let mut tail = Vec::new();
    while end > start && is_punct(chars[end - 1]) && !is_clitic(&chars[start..end]) {
        tail.push(chars[end - 1].to_string());
        end -= 1;
    }
    while start < end && is_punct(chars[start]) && !is_clitic(&chars[start..end]) {
        out.push(chars[start].to_string());
        start += 1;
    }
    if start < end {
        let core = &chars[start..end];
        let split = core
            .iter()
            .rposition(|&c| is_apostrophe(c))
            .filter(|&p| p > 0 && is_clitic(&core[p..]));
        match split {
            Some(p) => {
                split_chunk(&core[..p], out);
                out.push(core[p..].iter().collect());
            }
            None => out.push(core.iter().collect()),
        }
    }
    out.extend(tail.into_iter().rev());
}

/// Joins tokens for display, attaching closing punctuation and clitics to the
/// preceding token and opening brackets to the following one.
pub fn detokenize(tokens: &[String]) -> String {
    let mut out = String::new();
    let mut glue_next = false;
    for tok in tokens {
        let closing = matches!(
            tok.as_str(),
            "." | "," | ";" | ":" | "!" | "?" | ")" | "]" | "}" | "%" | "»" | "”"
        ) || is_clitic(&tok.chars().collect::<Vec<_>>());
        if !out.is_empty() && !closing && !glue_next {
            out.push(' ');
        }
        out.push_str(tok);
        glue_next = matches!(tok.as_str(), "(" | "[" | "{" | "«" | "“" | "„");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParallelFormat {
    /// One JSON object per line with `src`, `tgt`, `src_lang`, `tgt_lang`, optional `id`.
    Jsonl,
    /// Moses-style line-aligned files `<prefix>.<src_lang>` and `<prefix>.<tgt_lang>`.
    TwoFile { src_lang: String, tgt_lang: String },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    pub lowercase: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
    /// 1-based line numbers of skipped malformed lines.
    pub skipped_lines: Vec<usize>,
}

impl ParallelCorpus {
    pub fn skipped(&self) -> usize {
        self.skipped_lines.len()
    }
}

#[derive(Deserialize)]
struct JsonlPair {
    src: String,
    tgt: String,
    src_lang: String,
    tgt_lang: String,
    #[serde(default)]
    id: Option<u64>,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// A single bad line is always tolerated; beyond that, more than 10% of
/// malformed lines is fatal.
fn check_malformed(path: &Path, skipped: &[usize], total: usize) -> Result<()> {
    let limit = (total as f64 * 0.1).max(1.0);
    if skipped.len() as f64 > limit {
        return Err(Error::TooManyMalformed {
            path: path.to_path_buf(),
            malformed: skipped.len(),
            total,
            lines: skipped.to_vec(),
        });
    }
    Ok(())
}

pub fn load_parallel(path: &Path, format: &ParallelFormat, opts: LoadOptions) -> Result<ParallelCorpus> {
    match format {
        ParallelFormat::Jsonl => load_parallel_jsonl(path, opts),
        ParallelFormat::TwoFile { src_lang, tgt_lang } => {
            load_parallel_two_file(path, src_lang, tgt_lang, opts)
        }
    }
}

fn load_parallel_jsonl(path: &Path, opts: LoadOptions) -> Result<ParallelCorpus> {
    let reader = open(path)?;
    let mut corpus = ParallelCorpus::default();
    let mut total = 0;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let parsed = serde_json::from_str::<JsonlPair>(&line)
            .ok()
            .filter(|p| p.src_lang != p.tgt_lang);
        let Some(rec) = parsed else {
            log::warn!("{}:{}: malformed bitext line skipped", path.display(), idx + 1);
            corpus.skipped_lines.push(idx + 1);
            continue;
        };
        let id = rec.id.unwrap_or(corpus.pairs.len() as u64);
        let x = Sentence::from_text(id, rec.src_lang, &rec.src, opts.lowercase);
        let y = Sentence::from_text(id, rec.tgt_lang, &rec.tgt, opts.lowercase);
        corpus.pairs.push(SentencePair { id, x, y });
    }
    check_malformed(path, &corpus.skipped_lines, total)?;
    Ok(corpus)
}

fn side_path(prefix: &Path, lang: &str) -> PathBuf {
    let mut name = prefix.as_os_str().to_os_string();
    name.push(".");
    name.push(lang);
    PathBuf::from(name)
}

fn load_parallel_two_file(prefix: &Path, src_lang: &str, tgt_lang: &str, opts: LoadOptions) -> Result<ParallelCorpus> {
    if src_lang == tgt_lang {
        return Err(Error::Config(format!("source and target language are both '{src_lang}'")));
    }
    let src_path = side_path(prefix, src_lang);
    let tgt_path = side_path(prefix, tgt_lang);
    let src: Vec<_> = open(&src_path)?.lines().collect();
    let tgt: Vec<_> = open(&tgt_path)?.lines().collect();
    if src.len() != tgt.len() {
        return Err(Error::LengthMismatch(format!(
            "{} has {} lines but {} has {}",
            src_path.display(),
            src.len(),
            tgt_path.display(),
            tgt.len()
        )));
    }
    let mut corpus = ParallelCorpus::default();
    for (idx, (s, t)) in src.into_iter().zip(tgt).enumerate() {
        // Invalid UTF-8 on either side is the only malformation this format has.
        let (Ok(s), Ok(t)) = (s, t) else {
            corpus.skipped_lines.push(idx + 1);
            continue;
        };
        let id = corpus.pairs.len() as u64;
        corpus.pairs.push(SentencePair {
            id,
            x: Sentence::from_text(id, src_lang, &s, opts.lowercase),
            y: Sentence::from_text(id, tgt_lang, &t, opts.lowercase),
        });
    }
    let total = corpus.pairs.len() + corpus.skipped();
    check_malformed(prefix, &corpus.skipped_lines, total)?;
    Ok(corpus)
}

/// One sentence per line; blank lines are dropped but still consume an id so
/// that ids remain line numbers (0-based).
pub fn load_monolingual(path: &Path, language: &str, opts: LoadOptions) -> Result<Vec<Sentence>> {
    let reader = open(path)?;
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let sent = Sentence::from_text(idx as u64, language, &line, opts.lowercase);
        if !sent.is_empty() {
            out.push(sent);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    total: u64,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Ids are assigned by descending frequency, ties broken by token string,
    /// so the result does not depend on input order.
    pub fn from_counts(counts: HashMap<String, u64>) -> Self {
        let mut entries: Vec<(String, u64)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let total = entries.iter().map(|(_, c)| c).sum();
        let mut vocab = Vocabulary {
            tokens: Vec::with_capacity(entries.len()),
            counts: Vec::with_capacity(entries.len()),
            total,
            index: HashMap::with_capacity(entries.len()),
        };
        for (i, (tok, c)) in entries.into_iter().enumerate() {
            vocab.index.insert(tok.clone(), i as u32);
            vocab.tokens.push(tok);
            vocab.counts.push(c);
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn freq(&self, token: &str) -> u64 {
        self.id(token).map_or(0, |i| self.counts[i as usize])
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn merge(&self, other: &Vocabulary) -> Vocabulary {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for v in [self, other] {
            for (t, c) in v.tokens.iter().zip(&v.counts) {
                *counts.entry(t.clone()).or_default() += c;
            }
        }
        Vocabulary::from_counts(counts)
    }
}

pub fn build_vocab<'a, I>(sentences: I) -> Vocabulary
where
    I: IntoIterator<Item = &'a Sentence>,
{
    let mut counts: HashMap<String, u64> = HashMap::new();
    for s in sentences {
        for t in &s.tokens {
            *counts.entry(t.clone()).or_default() += 1;
        }
    }
    Vocabulary::from_counts(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn toks(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Character-class scanner: every punctuation character at a chunk edge is
    /// its own token, everything between the outermost letters stays together.
    fn reference_tokenize(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for chunk in text.split_whitespace() {
            let chars: Vec<char> = chunk.chars().collect();
            let first = chars.iter().position(|c| !is_punct(*c));
            let last = chars.iter().rposition(|c| !is_punct(*c));
            match (first, last) {
                (Some(f), Some(l)) => {
                    out.extend(chars[..f].iter().map(|c| c.to_string()));
                    out.push(chars[f..=l].iter().collect());
                    out.extend(chars[l + 1..].iter().map(|c| c.to_string()));
                }
                _ => out.extend(chars.iter().map(|c| c.to_string())),
            }
        }
        out
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("a minute 's silence", false), toks(&["a", "minute", "'s", "silence"]));
        assert_eq!(tokenize("a minute's silence", false), toks(&["a", "minute", "'s", "silence"]));
        assert!(tokenize("", false).is_empty());
        assert!(tokenize("   \t ", false).is_empty());
        assert_eq!(tokenize("Tokio.", false), reference_tokenize("Tokio."));
        assert_eq!(tokenize("Tokio.", false), toks(&["Tokio", "."]));
        assert_eq!(tokenize("(1994),", false), toks(&["(", "1994", ")", ","]));
        assert_eq!(tokenize("Die Premierminister", true), toks(&["die", "premierminister"]));
    }

    #[test]
    fn tokenize_matches_reference_without_apostrophes() {
        for text in ["Hello, world!", "\"quoted\" text...", "e-mail re-use", "¿Qué? ¡Sí!", "...", "x"] {
            assert_eq!(tokenize(text, false), reference_tokenize(text), "{text}");
        }
    }

    #[test]
    fn detokenize_attaches_punctuation() {
        let t = toks(&["Die", "Premierminister", "trafen", "sich", "in", "Tokio", "."]);
        assert_eq!(detokenize(&t), "Die Premierminister trafen sich in Tokio.");
        assert_eq!(detokenize(&toks(&["a", "minute", "'s", "silence"])), "a minute's silence");
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent(text in "[a-zA-Z0-9 .,!?'\"()-]{0,40}") {
            let first = tokenize(&text, false);
            let again = tokenize(&first.join(" "), false);
            prop_assert_eq!(&first, &again);
            prop_assert_eq!(tokenize(&text, false), first.clone());
            for t in &first {
                prop_assert!(!t.is_empty() && !t.chars().any(char::is_whitespace));
            }
        }

        #[test]
        fn vocab_counts_are_permutation_invariant(
            words in proptest::collection::vec(proptest::collection::vec("[a-d]{1,2}", 1..6), 0..20),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let sents: Vec<Sentence> = words.into_iter().enumerate()
                .map(|(i, w)| Sentence::new(i as u64, "xx", w)).collect();
            let mut shuffled = sents.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = build_vocab(&sents);
            let b = build_vocab(&shuffled);
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.counts().iter().sum::<u64>(), a.total());
        }
    }

    #[test]
    fn vocab_examples() {
        let v = build_vocab(&[Sentence::new(0, "xx", toks(&["a", "a", "b"]))]);
        assert_eq!(v.freq("a"), 2);
        assert_eq!(v.freq("b"), 1);
        assert_eq!(v.total(), 3);
        assert_eq!(v.id("a"), Some(0));

        let empty = build_vocab(std::iter::empty());
        assert!(empty.is_empty());
        assert_eq!(empty.total(), 0);
    }

    #[test]
    fn vocab_matches_recount_on_synthetic_stream() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let sents: Vec<Sentence> = (0..1000)
            .map(|i| {
                let n = rng.gen_range(1..15);
                let t = (0..n).map(|_| format!("w{}", rng.gen_range(0..50))).collect();
                Sentence::new(i, "xx", t)
            })
            .collect();
        let v = build_vocab(&sents);
        let mut recount = std::collections::BTreeMap::<&str, u64>::new();
        let mut total = 0;
        for s in &sents {
            for t in &s.tokens {
                *recount.entry(t).or_default() += 1;
                total += 1;
            }
        }
        assert_eq!(v.total(), total);
        assert_eq!(v.len(), recount.len());
        for (t, c) in recount {
            assert_eq!(v.freq(t), c);
        }
        let halves = build_vocab(&sents[..500]).merge(&build_vocab(&sents[500..]));
        assert_eq!(halves, v);
    }

    #[test]
    fn jsonl_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let mut f = File::create(&path).unwrap();
        writeln!(f, r#"{{"src":"trafen","tgt":"met","src_lang":"de","tgt_lang":"en"}}"#).unwrap();
        writeln!(f, "{{not json").unwrap();
        writeln!(f, r#"{{"src":"Tokio .","tgt":"Tokyo .","src_lang":"de","tgt_lang":"en"}}"#).unwrap();
        drop(f);
        let c = load_parallel(&path, &ParallelFormat::Jsonl, LoadOptions::default()).unwrap();
        assert_eq!(c.pairs.len(), 2);
        assert_eq!(c.skipped(), 1);
        assert_eq!(c.skipped_lines, vec![2]);
        assert_eq!(c.pairs[0].x.tokens, toks(&["trafen"]));
        assert_eq!(c.pairs[0].y.tokens, toks(&["met"]));
        assert_eq!((c.pairs[0].id, c.pairs[1].id), (0, 1));

        let empty = dir.path().join("empty.jsonl");
        File::create(&empty).unwrap();
        let c = load_parallel(&empty, &ParallelFormat::Jsonl, LoadOptions::default()).unwrap();
        assert!(c.pairs.is_empty());
    }

    #[test]
    fn jsonl_too_many_malformed_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let mut f = File::create(&path).unwrap();
        for i in 0..20 {
            if i % 3 == 0 {
                writeln!(f, "garbage {i}").unwrap();
            } else {
                writeln!(f, r#"{{"src":"a","tgt":"b","src_lang":"de","tgt_lang":"en"}}"#).unwrap();
            }
        }
        drop(f);
        match load_parallel(&path, &ParallelFormat::Jsonl, LoadOptions::default()) {
            Err(Error::TooManyMalformed { malformed, lines, .. }) => {
                assert_eq!(malformed, 7);
                assert_eq!(lines[0], 1);
            }
            other => panic!("expected fatal error, got {other:?}"),
        }
        assert!(load_parallel(&dir.path().join("missing"), &ParallelFormat::Jsonl, LoadOptions::default()).is_err());
    }

    #[test]
    fn two_file_loading() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("corpus");
        std::fs::write(dir.path().join("corpus.de"), "Hallo Welt .\ntrafen\n").unwrap();
        std::fs::write(dir.path().join("corpus.en"), "hello world .\nmet\n").unwrap();
        let fmt = ParallelFormat::TwoFile { src_lang: "de".into(), tgt_lang: "en".into() };
        let c = load_parallel(&prefix, &fmt, LoadOptions { lowercase: true }).unwrap();
        assert_eq!(c.pairs.len(), 2);
        assert_eq!(c.pairs[0].x.tokens, toks(&["hallo", "welt", "."]));
        assert_eq!(c.pairs[1].y.language, "en");

        std::fs::write(dir.path().join("corpus.en"), "only one line\n").unwrap();
        assert!(matches!(load_parallel(&prefix, &fmt, LoadOptions::default()), Err(Error::LengthMismatch(_))));
    }

    #[test]
    fn pair_requires_distinct_languages() {
        let x = Sentence::new(0, "de", toks(&["a"]));
        assert!(SentencePair::new(0, x.clone(), x).is_err());
    }
}
