//! Word alignment: IBM Model 1 trained by EM, Viterbi decoding and
//! symmetrization of the two directional alignments.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, SentencePair};
use crate::error::{Error, Result};

/// Name used for the empty source word in table dumps.
pub const NULL_TOKEN: &str = "NULL";

const E_STEP_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub iterations: usize,
    pub epsilon: f64,
    pub use_null: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            iterations: 5,
            epsilon: 1e-6,
            use_null: true,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("EM needs at least one iteration".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config(format!("smoothing must be >= 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Which side of the pair is the conditioning (generating) side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// t(y | x): every target token picks a source token.
    Forward,
    /// t(x | y): every source token picks a target token.
    Reverse,
}

impl Direction {
    fn sides(self, pair: &SentencePair) -> (&Sentence, &Sentence) {
        match self {
            Direction::Forward => (&pair.x, &pair.y),
            Direction::Reverse => (&pair.y, &pair.x),
        }
    }
}

/// Sparse t(f | e). Row 0 is the NULL word when the table was trained with it.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslationTable {
    direction: Direction,
    use_null: bool,
    floor: f64,
    e_words: Vec<String>,
    e_index: HashMap<String, u32>,
    f_words: Vec<String>,
    f_index: HashMap<String, u32>,
    /// Per e-row: (f id, probability), sorted by f id.
    rows: Vec<Vec<(u32, f64)>>,
}

impl TranslationTable {
    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn uses_null(&self) -> bool {
        self.use_null
    }

    fn null_row(&self) -> Option<u32> {
        self.use_null.then_some(0)
    }

    fn row_prob(&self, e: u32, f: Option<u32>) -> f64 {
        let Some(f) = f else { return self.floor };
        let row = &self.rows[e as usize];
        match row.binary_search_by_key(&f, |&(k, _)| k) {
            Ok(k) => row[k].1,
            Err(_) => self.floor,
        }
    }

    /// t(f | e) for surface tokens; unseen combinations get the floor value.
    pub fn prob(&self, e: &str, f: &str) -> f64 {
        match self.e_index.get(e) {
            Some(&row) => self.row_prob(row, self.f_index.get(f).copied()),
            None => self.floor,
        }
    }

    /// t(f | NULL), or `None` for tables trained without the empty word.
    pub fn null_prob(&self, f: &str) -> Option<f64> {
        self.null_row().map(|r| self.row_prob(r, self.f_index.get(f).copied()))
    }

    /// Iterates `(e, f, p)` with `e == NULL_TOKEN` for the empty word.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &str, f64)> + '_ {
        self.rows.iter().enumerate().flat_map(move |(e, row)| {
            row.iter().map(move |&(f, p)| {
                (
                    self.e_words[e].as_str(),
                    self.f_words[f as usize].as_str(),
                    p,
                )
            })
        })
    }

    pub fn row_sums(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().filter(|r| !r.is_empty()).map(|r| r.iter().map(|(_, p)| p).sum())
    }

    /// JSONL `{"e", "f", "p"}` rows.
    pub fn dump_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (e, f, p) in self.entries() {
            let line = serde_json::json!({ "e": e, "f": f, "p": p });
            writeln!(w, "{line}").map_err(|err| Error::io(path, err))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn encode_e(&self, s: &Sentence) -> Vec<u32> {
        s.tokens.iter().map(|t| self.e_index[t]).collect()
    }

    fn encode_f(&self, s: &Sentence) -> Vec<u32> {
        s.tokens.iter().map(|t| self.f_index[t]).collect()
    }

    fn slot(&self, e: u32, f: u32) -> usize {
        self.rows[e as usize]
            .binary_search_by_key(&f, |&(k, _)| k)
            .expect("co-occurrence structure covers every training pair")
    }
}

#[derive(Debug, Clone)]
pub struct Model1 {
    pub table: TranslationTable,
    /// Corpus log-likelihood of the table after each iteration.
    pub log_likelihoods: Vec<f64>,
    /// Pairs ignored because one side was empty.
    pub skipped: usize,
}

fn usable(pairs: &[SentencePair]) -> (Vec<&SentencePair>, usize) {
    let kept: Vec<_> = pairs.iter().filter(|p| !p.x.is_empty() && !p.y.is_empty()).collect();
    let skipped = pairs.len() - kept.len();
    (kept, skipped)
}

/// Uniform initialisation over the f words co-occurring with each e word.
fn init_table(pairs: &[&SentencePair], direction: Direction, cfg: &EmConfig) -> TranslationTable {
    let mut e_words = Vec::new();
    let mut e_index = HashMap::new();
    let mut f_words = Vec::new();
    let mut f_index = HashMap::new();
    if cfg.use_null {
        e_words.push(NULL_TOKEN.to_string());
    }
    let mut cooc: Vec<BTreeSet<u32>> = Vec::new();
    if cfg.use_null {
        cooc.push(BTreeSet::new());
    }
    for pair in pairs {
        let (es, fs) = direction.sides(pair);
        let f_ids: Vec<u32> = fs
            .tokens
            .iter()
            .map(|t| {
                *f_index.entry(t.clone()).or_insert_with(|| {
                    f_words.push(t.clone());
                    (f_words.len() - 1) as u32
                })
            })
            .collect();
        let mut rows: Vec<u32> = es
            .tokens
            .iter()
            .map(|t| {
                *e_index.entry(t.clone()).or_insert_with(|| {
                    e_words.push(t.clone());
                    cooc.push(BTreeSet::new());
                    (e_words.len() - 1) as u32
                })
            })
            .collect();
        if cfg.use_null {
            rows.push(0);
        }
        for e in rows {
            cooc[e as usize].extend(f_ids.iter().copied());
        }
    }
    let rows = cooc
        .into_iter()
        .map(|set| {
            let p = 1.0 / set.len().max(1) as f64;
            set.into_iter().map(|f| (f, p)).collect()
        })
        .collect();
    let floor = if cfg.epsilon > 0.0 { cfg.epsilon } else { 1e-12 };
    TranslationTable {
        direction,
        use_null: cfg.use_null,
        floor,
        e_words,
        e_index,
        f_words,
        f_index,
        rows,
    }
}

/// Expected counts for one chunk of pairs, keyed by (e row, slot in row).
fn e_step(table: &TranslationTable, chunk: &[&SentencePair]) -> HashMap<(u32, u32), f64> {
    let mut counts: HashMap<(u32, u32), f64> = HashMap::new();
    let mut scratch: Vec<(u32, u32, f64)> = Vec::new();
    for pair in chunk {
        let (es, fs) = table.direction.sides(pair);
        let mut e_ids = table.encode_e(es);
        if let Some(null) = table.null_row() {
            e_ids.push(null);
        }
        for f in table.encode_f(fs) {
            scratch.clear();
            let mut denom = 0.0;
            for &e in &e_ids {
                let slot = table.slot(e, f);
                let p = table.rows[e as usize][slot].1;
                denom += p;
                scratch.push((e, slot as u32, p));
            }
            for &(e, slot, p) in &scratch {
                *counts.entry((e, slot)).or_default() += p / denom;
            }
        }
    }
    counts
}

/// Σ_pairs Σ_j ln( Σ_i t(f_j | e_i) / (|e| + null) ).
pub fn corpus_log_likelihood(table: &TranslationTable, pairs: &[SentencePair]) -> f64 {
    log_likelihood_of(table, pairs.iter())
}

fn log_likelihood_of<'a>(table: &TranslationTable, pairs: impl Iterator<Item = &'a SentencePair>) -> f64 {
    let mut ll = 0.0;
    for pair in pairs.filter(|p| !p.x.is_empty() && !p.y.is_empty()) {
        let (es, fs) = table.direction.sides(pair);
        let e_rows: Vec<Option<u32>> = es.tokens.iter().map(|t| table.e_index.get(t).copied()).collect();
        let norm = (es.len() + usize::from(table.use_null)) as f64;
        for ft in &fs.tokens {
            let f = table.f_index.get(ft).copied();
            let mut s: f64 = e_rows
                .iter()
                .map(|e| e.map_or(table.floor, |e| table.row_prob(e, f)))
                .sum();
            if let Some(null) = table.null_row() {
                s += table.row_prob(null, f);
            }
            ll += (s / norm).ln();
        }
    }
    ll
}

/// Runs `cfg.iterations` EM passes in the given direction.
pub fn train_model1(pairs: &[SentencePair], direction: Direction, cfg: &EmConfig) -> Result<Model1> {
    cfg.validate()?;
    let (kept, skipped) = usable(pairs);
    if kept.is_empty() {
        return Err(Error::EmptyCorpus("no sentence pair with two non-empty sides"));
    }
    if skipped > 0 {
        log::warn!("model 1: skipped {skipped} pairs with an empty side");
    }
    let mut table = init_table(&kept, direction, cfg);
    let mut log_likelihoods = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let partial: Vec<HashMap<(u32, u32), f64>> =
            kept.par_chunks(E_STEP_CHUNK).map(|c| e_step(&table, c)).collect();
        let mut counts: Vec<Vec<f64>> = table.rows.iter().map(|r| vec![0.0; r.len()]).collect();
        // Chunk order is fixed, so every count is summed in the same order on every run.
        for chunk in partial {
            for ((e, slot), c) in chunk {
                counts[e as usize][slot as usize] += c;
            }
        }
        for (row, c) in table.rows.iter_mut().zip(&counts) {
            if row.is_empty() {
                continue;
            }
            let total: f64 = c.iter().sum::<f64>() + cfg.epsilon * c.len() as f64;
            for ((_, p), &ci) in row.iter_mut().zip(c) {
                *p = (ci + cfg.epsilon) / total;
            }
        }
        let ll = corpus_log_likelihood_refs(&table, &kept);
        log::info!("model 1 {:?} iteration {}: log-likelihood {ll:.6}", direction, it + 1);
        log_likelihoods.push(ll);
    }
    Ok(Model1 {
        table,
        log_likelihoods,
        skipped,
    })
}

fn corpus_log_likelihood_refs(table: &TranslationTable, pairs: &[&SentencePair]) -> f64 {
    pairs
        .par_chunks(E_STEP_CHUNK)
        .map(|chunk| log_likelihood_of(table, chunk.iter().copied()))
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

/// Word links `(source index, target index)` for one sentence pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Alignment {
    links: BTreeSet<(usize, usize)>,
    src_len: usize,
    tgt_len: usize,
}

impl Alignment {
    pub fn new(src_len: usize, tgt_len: usize) -> Self {
        Alignment {
            links: BTreeSet::new(),
            src_len,
            tgt_len,
        }
    }

    pub fn from_links<I>(src_len: usize, tgt_len: usize, links: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut a = Alignment::new(src_len, tgt_len);
        for (i, j) in links {
            a.insert(i, j)?;
        }
        Ok(a)
    }

    pub fn insert(&mut self, i: usize, j: usize) -> Result<bool> {
        if i >= self.src_len || j >= self.tgt_len {
            return Err(Error::LengthMismatch(format!(
                "link {i}-{j} outside a {}x{} sentence pair",
                self.src_len, self.tgt_len
            )));
        }
        Ok(self.links.insert((i, j)))
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.links.contains(&(i, j))
    }

    pub fn links(&self) -> &BTreeSet<(usize, usize)> {
        &self.links
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn src_len(&self) -> usize {
        self.src_len
    }

    pub fn tgt_len(&self) -> usize {
        self.tgt_len
    }

    /// Parses one Pharaoh line (`0-0 1-2 2-1`).
    pub fn parse_pharaoh(line: &str, src_len: usize, tgt_len: usize) -> Result<Self> {
        let mut a = Alignment::new(src_len, tgt_len);
        for tok in line.split_whitespace() {
            let (i, j) = tok
                .split_once('-')
                .and_then(|(i, j)| Some((i.parse().ok()?, j.parse().ok()?)))
                .ok_or_else(|| Error::LengthMismatch(format!("bad alignment token '{tok}'")))?;
            a.insert(i, j)?;
        }
        Ok(a)
    }
}

impl fmt::Display for Alignment {
    /// Pharaoh format, links in source-major order.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (i, j) in &self.links {
            if !first {
                f.write_str(" ")?;
            }
            write!(f, "{i}-{j}")?;
            first = false;
        }
        Ok(())
    }
}

pub fn write_pharaoh(path: &Path, alignments: &[Alignment]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for a in alignments {
        writeln!(w, "{a}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a Pharaoh file line-aligned with `pairs`, validating every link
/// against the sentence lengths.
pub fn read_pharaoh(path: &Path, pairs: &[SentencePair]) -> Result<Vec<Alignment>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    if lines.len() != pairs.len() {
        return Err(Error::LengthMismatch(format!(
            "{} has {} lines for {} sentence pairs",
            path.display(),
            lines.len(),
            pairs.len()
        )));
    }
    lines
        .iter()
        .zip(pairs)
        .enumerate()
        .map(|(n, (line, p))| {
            Alignment::parse_pharaoh(line, p.x.len(), p.y.len()).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Most probable link per generated token; ties go to the smallest index and
/// NULL only wins when strictly better than every real word.
pub fn viterbi_align(pair: &SentencePair, table: &TranslationTable) -> Alignment {
    let (es, fs) = table.direction.sides(pair);
    let e_rows: Vec<Option<u32>> = es.tokens.iter().map(|t| table.e_index.get(t).copied()).collect();
    let mut align = Alignment::new(pair.x.len(), pair.y.len());
    for (j, ft) in fs.tokens.iter().enumerate() {
        let f = table.f_index.get(ft).copied();
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in e_rows.iter().enumerate() {
            let p = e.map_or(table.floor, |e| table.row_prob(e, f));
            if best.map_or(true, |(_, b)| p > b) {
                best = Some((i, p));
            }
        }
        let null_p = table.null_row().map(|n| table.row_prob(n, f));
        if let Some((i, p)) = best {
            if null_p.map_or(true, |np| p >= np) {
                let link = match table.direction {
                    Direction::Forward => (i, j),
                    Direction::Reverse => (j, i),
                };
                align.links.insert(link);
            }
        }
    }
    align
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Heuristic {
    Intersection,
    Union,
    #[default]
    GrowDiagFinalAnd,
}

impl std::str::FromStr for Heuristic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intersection" => Ok(Heuristic::Intersection),
            "union" => Ok(Heuristic::Union),
            "grow-diag-final-and" | "gdfa" => Ok(Heuristic::GrowDiagFinalAnd),
            _ => Err(Error::Config(format!("unknown symmetrization heuristic '{s}'"))),
        }
    }
}

const NEIGHBOURS: [(isize, isize); 8] = [(-1, 0), (0, -1), (1, 0), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)];

/// Merges a forward and a reverse alignment (both in source-major order).
pub fn symmetrize(fwd: &Alignment, rev: &Alignment, heuristic: Heuristic) -> Result<Alignment> {
    if fwd.src_len != rev.src_len || fwd.tgt_len != rev.tgt_len {
        return Err(Error::LengthMismatch(format!(
            "forward alignment is {}x{}, reverse is {}x{}",
            fwd.src_len, fwd.tgt_len, rev.src_len, rev.tgt_len
        )));
    }
    let (n, m) = (fwd.src_len, fwd.tgt_len);
    let inter: BTreeSet<_> = fwd.links.intersection(&rev.links).copied().collect();
    let union: BTreeSet<_> = fwd.links.union(&rev.links).copied().collect();
    let links = match heuristic {
        Heuristic::Intersection => inter,
        Heuristic::Union => union,
        Heuristic::GrowDiagFinalAnd => {
            let mut grid = vec![false; n * m];
            let mut src_aligned = vec![false; n];
            let mut tgt_aligned = vec![false; m];
            let in_union = |i: usize, j: usize| union.contains(&(i, j));
            let add = |grid: &mut Vec<bool>, sa: &mut Vec<bool>, ta: &mut Vec<bool>, i: usize, j: usize| {
                grid[i * m + j] = true;
                sa[i] = true;
                ta[j] = true;
            };
            for &(i, j) in &inter {
                add(&mut grid, &mut src_aligned, &mut tgt_aligned, i, j);
            }
            // grow-diag
            loop {
                let mut added = false;
                for i in 0..n {
                    for j in 0..m {
                        if !grid[i * m + j] {
                            continue;
                        }
                        for (di, dj) in NEIGHBOURS {
                            let (ni, nj) = (i as isize + di, j as isize + dj);
                            if ni < 0 || nj < 0 || ni >= n as isize || nj >= m as isize {
                                continue;
                            }
                            let (ni, nj) = (ni as usize, nj as usize);
                            if (!src_aligned[ni] || !tgt_aligned[nj]) && in_union(ni, nj) && !grid[ni * m + nj] {
                                add(&mut grid, &mut src_aligned, &mut tgt_aligned, ni, nj);
                                added = true;
                            }
                        }
                    }
                }
                if !added {
                    break;
                }
            }
            // final-and, forward then reverse
            for dir in [&fwd.links, &rev.links] {
                for i in 0..n {
                    for j in 0..m {
                        if !src_aligned[i] && !tgt_aligned[j] && dir.contains(&(i, j)) {
                            add(&mut grid, &mut src_aligned, &mut tgt_aligned, i, j);
                        }
                    }
                }
            }
            (0..n)
                .flat_map(|i| (0..m).map(move |j| (i, j)))
                .filter(|&(i, j)| grid[i * m + j])
                .collect()
        }
    };
    Ok(Alignment {
        links,
        src_len: n,
        tgt_len: m,
    })
}

/// Both directional Model 1 tables.
#[derive(Debug, Clone)]
pub struct BidirectionalModel {
    pub forward: Model1,
    pub reverse: Model1,
}

pub fn train_bidirectional(pairs: &[SentencePair], cfg: &EmConfig) -> Result<BidirectionalModel> {
    Ok(BidirectionalModel {
        forward: train_model1(pairs, Direction::Forward, cfg)?,
        reverse: train_model1(pairs, Direction::Reverse, cfg)?,
    })
}

impl BidirectionalModel {
    pub fn align(&self, pair: &SentencePair, heuristic: Heuristic) -> Alignment {
        let fwd = viterbi_align(pair, &self.forward.table);
        let rev = viterbi_align(pair, &self.reverse.table);
        symmetrize(&fwd, &rev, heuristic).expect("both directions decode the same pair")
    }

    pub fn align_all(&self, pairs: &[SentencePair], heuristic: Heuristic) -> Vec<Alignment> {
        pairs.par_iter().map(|p| self.align(p, heuristic)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair(id: u64, x: &[&str], y: &[&str]) -> SentencePair {
        let s = |l: &str, t: &[&str]| Sentence::new(id, l, t.iter().map(|w| w.to_string()).collect());
        SentencePair::new(id, s("de", x), s("en", y)).unwrap()
    }

    fn no_null(iterations: usize) -> EmConfig {
        EmConfig {
            iterations,
            epsilon: 0.0,
            use_null: false,
        }
    }

    #[test]
    fn single_cooccurrence_takes_all_mass() {
        let m = train_model1(&[pair(0, &["hund"], &["dog"])], Direction::Forward, &no_null(2)).unwrap();
        assert_eq!(m.table.prob("hund", "dog"), 1.0);
        let a = viterbi_align(&pair(0, &["hund"], &["dog"]), &m.table);
        assert_eq!(a.to_string(), "0-0");
    }

    /// Exact EM by hand on {(a b, x y), (a, x)} without NULL.
    #[test]
    fn second_pair_disambiguates() {
        let corpus = [pair(0, &["a", "b"], &["x", "y"]), pair(1, &["a"], &["x"])];
        let m = train_model1(&corpus, Direction::Forward, &no_null(5)).unwrap();

        // Straight-line EM: t[e][f] with e in {a,b}, f in {x,y}.
        let (mut ax, mut ay, mut bx, mut by) = (0.5, 0.5, 0.5, 0.5);
        for _ in 0..5 {
            // pair 0, f=x: a,b compete; f=y: a,b compete. pair 1: x from a only.
            let cx_a = ax / (ax + bx) + 1.0;
            let cx_b = bx / (ax + bx);
            let cy_a = ay / (ay + by);
            let cy_b = by / (ay + by);
            let (ta, tb) = (cx_a + cy_a, cx_b + cy_b);
            ax = cx_a / ta;
            ay = cy_a / ta;
            bx = cx_b / tb;
            by = cy_b / tb;
        }
        assert!((m.table.prob("a", "x") - ax).abs() < 1e-12);
        assert!((m.table.prob("a", "y") - ay).abs() < 1e-12);
        assert!((m.table.prob("b", "x") - bx).abs() < 1e-12);
        assert!((m.table.prob("b", "y") - by).abs() < 1e-12);
        assert!(m.table.prob("a", "x") > m.table.prob("a", "y"));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(train_model1(&[], Direction::Forward, &EmConfig::default()).is_err());
        let empty_side = SentencePair {
            id: 0,
            x: Sentence::new(0, "de", vec![]),
            y: Sentence::new(0, "en", vec!["a".into()]),
        };
        assert!(train_model1(&[empty_side.clone()], Direction::Forward, &EmConfig::default()).is_err());
        let m = train_model1(&[empty_side, pair(1, &["a"], &["b"])], Direction::Forward, &EmConfig::default()).unwrap();
        assert_eq!(m.skipped, 1);
    }

    #[test]
    fn uniform_table_ties_go_to_smallest_index() {
        let p = pair(0, &["a", "b"], &["x"]);
        let m = train_model1(&[p.clone()], Direction::Forward, &EmConfig::default()).unwrap();
        assert_eq!(m.table.prob("a", "x"), m.table.prob("b", "x"));
        assert_eq!(viterbi_align(&p, &m.table).links().iter().copied().collect::<Vec<_>>(), vec![(0, 0)]);
    }

    fn random_corpus(rng: &mut ChaCha8Rng, n: usize) -> Vec<SentencePair> {
        (0..n)
            .map(|i| {
                let len = rng.gen_range(1..10);
                let x: Vec<String> = (0..len).map(|_| format!("s{}", rng.gen_range(0..30))).collect();
                let mut y: Vec<String> = x.iter().map(|w| w.replace('s', "t")).collect();
                if rng.gen_bool(0.3) {
                    y.push(format!("t{}", rng.gen_range(0..30)));
                }
                SentencePair {
                    id: i as u64,
                    x: Sentence::new(i as u64, "de", x),
                    y: Sentence::new(i as u64, "en", y),
                }
            })
            .collect()
    }

    #[test]
    fn viterbi_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let corpus = random_corpus(&mut rng, 100);
        let bi = train_bidirectional(&corpus, &EmConfig::default()).unwrap();
        let long: Vec<String> = (0..10).map(|k| format!("s{}", (k * 7) % 30)).collect();
        let p = SentencePair {
            id: 9,
            x: Sentence::new(9, "de", long.clone()),
            y: Sentence::new(9, "en", long.iter().rev().map(|w| w.replace('s', "t")).collect()),
        };
        for (model, dir) in [(&bi.forward, Direction::Forward), (&bi.reverse, Direction::Reverse)] {
            let (es, fs) = dir.sides(&p);
            let mut expected = BTreeSet::new();
            for (j, f) in fs.tokens.iter().enumerate() {
                let scores: Vec<f64> = es.tokens.iter().map(|e| model.table.prob(e, f)).collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let i = scores.iter().position(|&s| s == max).unwrap();
                if max >= model.table.null_prob(f).unwrap() {
                    expected.insert(if dir == Direction::Forward { (i, j) } else { (j, i) });
                }
            }
            assert_eq!(viterbi_align(&p, &model.table).links(), &expected);
        }
    }

    #[test]
    fn tables_are_row_stochastic_and_likelihood_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let corpus = random_corpus(&mut rng, 100);
        for dir in [Direction::Forward, Direction::Reverse] {
            let m = train_model1(&corpus, dir, &EmConfig::default()).unwrap();
            for s in m.table.row_sums() {
                assert!((s - 1.0).abs() < 1e-9, "row sums to {s}");
            }
            for w in m.log_likelihoods.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "{:?}", m.log_likelihoods);
            }
            assert!(m.table.entries().all(|(_, _, p)| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let corpus = random_corpus(&mut rng, 1200);
        let a = train_model1(&corpus, Direction::Forward, &EmConfig::default()).unwrap();
        let b = train_model1(&corpus, Direction::Forward, &EmConfig::default()).unwrap();
        assert_eq!(a.table, b.table);
        assert_eq!(a.log_likelihoods, b.log_likelihoods);
    }

    #[test]
    fn symmetrize_set_identities() {
        let fwd = Alignment::from_links(2, 2, [(0, 0), (1, 1)]).unwrap();
        let rev = Alignment::from_links(2, 2, [(0, 0)]).unwrap();
        let i = symmetrize(&fwd, &rev, Heuristic::Intersection).unwrap();
        let u = symmetrize(&fwd, &rev, Heuristic::Union).unwrap();
        assert_eq!(i.to_string(), "0-0");
        assert_eq!(u.to_string(), "0-0 1-1");
        let same = Alignment::from_links(1, 1, [(0, 0)]).unwrap();
        for h in [Heuristic::Intersection, Heuristic::Union, Heuristic::GrowDiagFinalAnd] {
            assert_eq!(symmetrize(&same, &same, h).unwrap(), same);
        }
        let other = Alignment::new(3, 2);
        assert!(symmetrize(&fwd, &other, Heuristic::Union).is_err());
    }

    /// Literal transcription of the grow-diag-final-and pseudocode over sets.
    fn gdfa_reference(fwd: &BTreeSet<(usize, usize)>, rev: &BTreeSet<(usize, usize)>, n: usize, m: usize) -> BTreeSet<(usize, usize)> {
        let union: BTreeSet<_> = fwd.union(rev).copied().collect();
        let mut a: BTreeSet<_> = fwd.intersection(rev).copied().collect();
        let src_aligned = |a: &BTreeSet<(usize, usize)>, i: usize| a.iter().any(|&(x, _)| x == i);
        let tgt_aligned = |a: &BTreeSet<(usize, usize)>, j: usize| a.iter().any(|&(_, y)| y == j);
        loop {
            let mut new_point = false;
            for e in 0..n {
                for f in 0..m {
                    if a.contains(&(e, f)) {
                        for (de, df) in NEIGHBOURS {
                            let (en, fnew) = (e as isize + de, f as isize + df);
                            if en < 0 || fnew < 0 || en >= n as isize || fnew >= m as isize {
                                continue;
                            }
                            let p = (en as usize, fnew as usize);
                            if (!src_aligned(&a, p.0) || !tgt_aligned(&a, p.1)) && union.contains(&p) && !a.contains(&p) {
                                a.insert(p);
                                new_point = true;
                            }
                        }
                    }
                }
            }
            if !new_point {
                break;
            }
        }
        for d in [fwd, rev] {
            for e in 0..n {
                for f in 0..m {
                    if !src_aligned(&a, e) && !tgt_aligned(&a, f) && d.contains(&(e, f)) {
                        a.insert((e, f));
                    }
                }
            }
        }
        a
    }

    #[test]
    fn gdfa_matches_reference_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..2000 {
            let (n, m) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
            let mut gen = || {
                let mut s = BTreeSet::new();
                for i in 0..n {
                    for j in 0..m {
                        if rng.gen_bool(0.25) {
                            s.insert((i, j));
                        }
                    }
                }
                s
            };
            let (f, r) = (gen(), gen());
            let fa = Alignment::from_links(n, m, f.iter().copied()).unwrap();
            let ra = Alignment::from_links(n, m, r.iter().copied()).unwrap();
            let got = symmetrize(&fa, &ra, Heuristic::GrowDiagFinalAnd).unwrap();
            assert_eq!(got.links(), &gdfa_reference(&f, &r, n, m));
            let inter = symmetrize(&fa, &ra, Heuristic::Intersection).unwrap();
            let uni = symmetrize(&fa, &ra, Heuristic::Union).unwrap();
            assert!(inter.links().is_subset(got.links()));
            assert!(got.links().is_subset(uni.links()));
        }
    }

    #[test]
    fn pharaoh_round_trip_and_validation() {
        let a = Alignment::parse_pharaoh("0-0 1-2 2-1", 3, 3).unwrap();
        assert_eq!(a.to_string(), "0-0 1-2 2-1");
        assert!(Alignment::parse_pharaoh("0-3", 3, 3).is_err());
        assert!(Alignment::parse_pharaoh("0:1", 3, 3).is_err());
        assert!(Alignment::parse_pharaoh("", 3, 3).unwrap().is_empty());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pharaoh");
        let pairs = [pair(0, &["a", "b", "c"], &["x", "y", "z"]), pair(1, &["a"], &["x"])];
        let aligns = vec![a.clone(), Alignment::new(1, 1)];
        write_pharaoh(&path, &aligns).unwrap();
        assert_eq!(read_pharaoh(&path, &pairs).unwrap(), aligns);
        assert!(read_pharaoh(&path, &pairs[..1]).is_err());
    }

    #[test]
    fn table_dump_is_jsonl() {
        let m = train_model1(&[pair(0, &["hund"], &["dog"])], Direction::Forward, &EmConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        m.table.dump_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().any(|r| r["e"] == "hund" && r["f"] == "dog"));
        assert!(rows.iter().any(|r| r["e"] == NULL_TOKEN));
    }
}
