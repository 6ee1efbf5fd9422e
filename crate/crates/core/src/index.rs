//! Exact flat maximum-inner-product index over phrase vectors.
//!
//! Vectors live in one row-major `f32` buffer. Search scans entries in
//! cache-sized blocks, scoring every query of a chunk against a block before
//! moving on, and keeps a bounded sorted list per query. Scores ties are
//! broken by ascending id, so results are fully deterministic.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VECTORS_FILE: &str = "vectors.bin";
pub const ENTRIES_FILE: &str = "entries.jsonl";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    InnerProduct,
    /// Vectors and queries are L2-normalised before scoring.
    Cosine,
}

/// Metadata of one indexed phrase occurrence; `id` is its row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: usize,
    pub phrase: String,
    pub context: String,
    pub s: usize,
    pub e: usize,
    pub doc_id: u64,
}

/// An entry to be indexed; ids are assigned by [`PhraseIndex::build`].
#[derive(Debug, Clone, PartialEq)]
pub struct IndexItem {
    pub phrase: String,
    pub context: String,
    pub s: usize,
    pub e: usize,
    pub doc_id: u64,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchHit {
    pub id: usize,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhraseIndex {
    dim: usize,
    metric: Metric,
    vectors: Vec<f32>,
    entries: Vec<IndexEntry>,
}

fn normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

impl PhraseIndex {
    pub fn empty(dim: usize, metric: Metric) -> Self {
        PhraseIndex {
            dim,
            metric,
            vectors: Vec::new(),
            entries: Vec::new(),
        }
    }

    /// Builds an index, keeping the first of any items sharing
    /// `(context, s, e)` and numbering survivors densely in input order.
    pub fn build<I: IntoIterator<Item = IndexItem>>(dim: usize, metric: Metric, items: I) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("index dimension must be >= 1".into()));
        }
        let mut index = Self::empty(dim, metric);
        let mut seen = HashSet::new();
        for mut item in items {
            if item.vector.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: item.vector.len(),
                });
            }
            if !item.vector.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("vector of phrase {:?}", item.phrase)));
            }
            let tokens = item.context.split_whitespace().count();
            if item.s > item.e || item.e >= tokens {
                return Err(Error::SpanOutOfRange {
                    s: item.s,
                    e: item.e,
                    len: tokens,
                });
            }
            if !seen.insert((item.context.clone(), item.s, item.e)) {
                continue;
            }
            if metric == Metric::Cosine {
                normalize(&mut item.vector);
            }
            index.vectors.extend_from_slice(&item.vector);
            index.entries.push(IndexEntry {
                id: index.entries.len(),
                phrase: item.phrase,
                context: item.context,
                s: item.s,
                e: item.e,
                doc_id: item.doc_id,
            });
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn entry(&self, id: usize) -> Option<&IndexEntry> {
        self.entries.get(id)
    }

    pub fn vector(&self, id: usize) -> Option<&[f32]> {
        (id < self.len()).then(|| &self.vectors[id * self.dim..(id + 1) * self.dim])
    }

    fn prepare_queries(&self, queries: &[Vec<f32>], k: usize) -> Result<Vec<Vec<f32>>> {
        if k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        queries
            .iter()
            .map(|q| {
                if q.len() != self.dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.dim,
                        got: q.len(),
                    });
                }
                if !q.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite("query vector".into()));
                }
                let mut q = q.clone();
                if self.metric == Metric::Cosine {
                    normalize(&mut q);
                }
                Ok(q)
            })
            .collect()
    }

    /// Exact top-`k` per query with 32-bit scoring.
    pub fn search(&self, queries: &[Vec<f32>], k: usize) -> Result<Vec<Vec<SearchHit>>> {
        let queries = self.prepare_queries(queries, k)?;
        Ok(queries
            .par_chunks(QUERY_CHUNK)
            .flat_map_iter(|chunk| self.scan_chunk(chunk, k))
            .collect())
    }

    pub fn search_one(&self, query: &[f32], k: usize) -> Result<Vec<SearchHit>> {
        Ok(self.search(&[query.to_vec()], k)?.pop().unwrap_or_default())
    }

    /// Same contract as [`search`](Self::search), scored in 64-bit; used to
    /// verify the fast path.
    pub fn search_f64(&self, queries: &[Vec<f32>], k: usize) -> Result<Vec<Vec<(usize, f64)>>> {
        let queries = self.prepare_queries(queries, k)?;
        Ok(queries
            .iter()
            .map(|q| {
                let mut top = TopK::new(k);
                for id in 0..self.len() {
                    let row = &self.vectors[id * self.dim..(id + 1) * self.dim];
                    top.offer(id, q.iter().zip(row).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>());
                }
                top.items
            })
            .collect())
    }

    fn scan_chunk(&self, queries: &[Vec<f32>], k: usize) -> Vec<Vec<SearchHit>> {
        let mut tops: Vec<TopK<f32>> = queries.iter().map(|_| TopK::new(k)).collect();
        let rows_per_block = (BLOCK_BYTES / (4 * self.dim)).max(1);
        for (b, block) in self.vectors.chunks(rows_per_block * self.dim).enumerate() {
            let base = b * rows_per_block;
            scan_block(queries, &mut tops, block, base, self.dim);
        }
        tops.into_iter()
            .map(|t| t.items.into_iter().map(|(id, score)| SearchHit { id, score }).collect())
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut vec_bytes = Vec::with_capacity(self.vectors.len() * 4);
        for v in &self.vectors {
            vec_bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut entry_bytes = Vec::new();
        for entry in &self.entries {
            serde_json::to_writer(&mut entry_bytes, entry)?;
            entry_bytes.push(b'\n');
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            dimension: self.dim,
            count: self.len(),
            metric: self.metric,
            vectors_bytes: vec_bytes.len() as u64,
            entries_bytes: entry_bytes.len() as u64,
            vectors_sha256: hex::encode(Sha256::digest(&vec_bytes)),
            entries_sha256: hex::encode(Sha256::digest(&entry_bytes)),
        };
        write_file(&dir.join(VECTORS_FILE), &vec_bytes)?;
        write_file(&dir.join(ENTRIES_FILE), &entry_bytes)?;
        // The manifest goes last: a directory without one is not an index.
        write_file(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let vec_path = dir.join(VECTORS_FILE);
        let entries_path = dir.join(ENTRIES_FILE);
        let vec_bytes = fs::read(&vec_path).map_err(|e| Error::io(&vec_path, e))?;
        let entry_bytes = fs::read(&entries_path).map_err(|e| Error::io(&entries_path, e))?;
        if vec_bytes.len() as u64 != manifest.vectors_bytes
            || hex::encode(Sha256::digest(&vec_bytes)) != manifest.vectors_sha256
        {
            return Err(Error::Checksum(vec_path));
        }
        if entry_bytes.len() as u64 != manifest.entries_bytes
            || hex::encode(Sha256::digest(&entry_bytes)) != manifest.entries_sha256
        {
            return Err(Error::Checksum(entries_path));
        }
        if vec_bytes.len() != manifest.count * manifest.dimension * 4 {
            return Err(Error::Corrupt {
                path: vec_path,
                msg: format!("{} bytes for {} x {} vectors", vec_bytes.len(), manifest.count, manifest.dimension),
            });
        }
        let vectors = vec_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut entries = Vec::with_capacity(manifest.count);
        for (n, line) in BufReader::new(&entry_bytes[..]).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&entries_path, e))?;
            let entry: IndexEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: entries_path.clone(),
                line: n + 1,
                msg: e.to_string(),
            })?;
            if entry.id != n {
                return Err(Error::Corrupt {
                    path: entries_path.clone(),
                    msg: format!("line {} holds id {}", n + 1, entry.id),
                });
            }
            entries.push(entry);
        }
        if entries.len() != manifest.count {
            return Err(Error::Corrupt {
                path: entries_path,
                msg: format!("{} entries, manifest says {}", entries.len(), manifest.count),
            });
        }
        Ok(PhraseIndex {
            dim: manifest.dimension,
            metric: manifest.metric,
            vectors,
            entries,
        })
    }
}

/// Reads and version-checks an index manifest without loading the payload.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dimension: usize,
    pub count: usize,
    pub metric: Metric,
    pub vectors_bytes: u64,
    pub entries_bytes: u64,
    pub vectors_sha256: String,
    pub entries_sha256: String,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(bytes)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

const QUERY_CHUNK: usize = 64;
const BLOCK_BYTES: usize = 128 * 1024;
const LANES: usize = 8;

/// Dot product with eight independent accumulators, reduced in a fixed order.
#[inline(always)]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let (x, y) = (&a[c * LANES..(c + 1) * LANES], &b[c * LANES..(c + 1) * LANES]);
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0f32;
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn scan_block_generic(queries: &[Vec<f32>], tops: &mut [TopK<f32>], block: &[f32], base: usize, dim: usize) {
    for (q, top) in queries.iter().zip(tops) {
        for (r, row) in block.chunks_exact(dim).enumerate() {
            top.offer(base + r, dot(q, row));
        }
    }
}

/// The same loop compiled for AVX. Without FMA the arithmetic and its order
/// are unchanged, so scores are bitwise identical to the generic build.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn scan_block_avx(queries: &[Vec<f32>], tops: &mut [TopK<f32>], block: &[f32], base: usize, dim: usize) {
    scan_block_generic(queries, tops, block, base, dim)
}

fn scan_block(queries: &[Vec<f32>], tops: &mut [TopK<f32>], block: &[f32], base: usize, dim: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: the CPU supports AVX, checked just above.
        return unsafe { scan_block_avx(queries, tops, block, base, dim) };
    }
    scan_block_generic(queries, tops, block, base, dim)
}

/// Best `k` (id, score) pairs offered in ascending id order, sorted by
/// descending score then ascending id.
struct TopK<S> {
    k: usize,
    items: Vec<(usize, S)>,
}

impl<S: PartialOrd + Copy> TopK<S> {
    fn new(k: usize) -> Self {
        TopK {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    #[inline(always)]
    fn offer(&mut self, id: usize, score: S) {
        if self.items.len() == self.k {
            // Equal scores lose: the incumbent has the smaller id.
            if !(score > self.items[self.k - 1].1) {
                return;
            }
            self.items.pop();
        }
        let pos = self.items.partition_point(|&(_, s)| s >= score);
        self.items.insert(pos, (id, score));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn item(context: &str, s: usize, e: usize, vector: Vec<f32>) -> IndexItem {
        IndexItem {
            phrase: context.split_whitespace().skip(s).take(e - s + 1).collect::<Vec<_>>().join(" "),
            context: context.to_string(),
            s,
            e,
            doc_id: 0,
            vector,
        }
    }

    fn random_index(rng: &mut ChaCha8Rng, n: usize, dim: usize, metric: Metric) -> PhraseIndex {
        let items = (0..n).map(|i| {
            let v = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            item(&format!("ctx{i} a b"), 0, 1, v)
        });
        PhraseIndex::build(dim, metric, items.collect::<Vec<_>>()).unwrap()
    }

    /// Exhaustive 64-bit scan with an explicit full sort.
    fn brute_force(index: &PhraseIndex, q: &[f32], k: usize) -> Vec<usize> {
        let mut scored: Vec<(usize, f64)> = (0..index.len())
            .map(|id| (id, index.vector(id).unwrap().iter().zip(q).map(|(&a, &b)| a as f64 * b as f64).sum()))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored.into_iter().take(k).map(|(id, _)| id).collect()
    }

    #[test]
    fn forced_argmax() {
        let idx = PhraseIndex::build(
            2,
            Metric::InnerProduct,
            vec![item("x y", 0, 0, vec![1.0, 0.0]), item("x y", 1, 1, vec![0.0, 1.0])],
        )
        .unwrap();
        let hits = idx.search_one(&[1.0, 0.1], 1).unwrap();
        assert_eq!(hits, vec![SearchHit { id: 0, score: 1.0 }]);
        assert_eq!(idx.search_one(&[1.0, 0.1], 10).unwrap().len(), 2);
    }

    #[test]
    fn duplicates_are_dropped_and_ids_stay_dense() {
        let idx = PhraseIndex::build(
            1,
            Metric::InnerProduct,
            vec![
                item("a b c", 0, 1, vec![1.0]),
                item("a b c", 0, 1, vec![2.0]),
                item("a b c", 2, 2, vec![3.0]),
            ],
        )
        .unwrap();
        assert_eq!(idx.len(), 2);
        assert_eq!(idx.vector(0).unwrap(), &[1.0]);
        assert_eq!(idx.entry(1).unwrap().id, 1);
        assert_eq!(idx.entry(1).unwrap().phrase, "c");
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(matches!(
            PhraseIndex::build(2, Metric::InnerProduct, vec![item("a", 0, 0, vec![1.0])]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(PhraseIndex::build(1, Metric::InnerProduct, vec![item("a", 0, 3, vec![1.0])]).is_err());
        let idx = PhraseIndex::empty(2, Metric::InnerProduct);
        assert!(idx.search(&[vec![1.0]], 1).is_err());
        assert!(idx.search(&[vec![1.0, 2.0]], 0).is_err());
        assert_eq!(idx.search(&[vec![1.0, 2.0]], 3).unwrap(), vec![vec![]]);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let items = (0..6).map(|i| item(&format!("c{i}"), 0, 0, vec![if i % 2 == 0 { 1.0 } else { 2.0 }, 0.0]));
        let idx = PhraseIndex::build(2, Metric::InnerProduct, items.collect::<Vec<_>>()).unwrap();
        let ids: Vec<usize> = idx.search_one(&[1.0, 0.0], 4).unwrap().iter().map(|h| h.id).collect();
        assert_eq!(ids, vec![1, 3, 5, 0]);
    }

    #[test]
    fn matches_brute_force_including_planted_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut items: Vec<IndexItem> = (0..1000)
            .map(|i| item(&format!("ctx{i} w"), 0, 1, (0..32).map(|_| rng.gen_range(-1.0f32..1.0)).collect()))
            .collect();
        // Copies of earlier vectors under later ids produce exact ties.
        for i in 0..50 {
            items[900 + i].vector = items[i * 3].vector.clone();
        }
        let idx = PhraseIndex::build(32, Metric::InnerProduct, items).unwrap();
        let queries: Vec<Vec<f32>> = (0..100)
            .map(|i| {
                if i < 20 {
                    idx.vector(i * 3).unwrap().to_vec()
                } else {
                    (0..32).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
                }
            })
            .collect();
        let fast = idx.search(&queries, 32).unwrap();
        let slow = idx.search_f64(&queries, 32).unwrap();
        for (q, (f, s)) in queries.iter().zip(fast.iter().zip(&slow)) {
            let want = brute_force(&idx, q, 32);
            assert_eq!(f.iter().map(|h| h.id).collect::<Vec<_>>(), want);
            assert_eq!(s.iter().map(|h| h.0).collect::<Vec<_>>(), want);
        }
    }

    #[test]
    fn cosine_mode_normalises() {
        let idx = PhraseIndex::build(
            2,
            Metric::Cosine,
            vec![item("a b", 0, 0, vec![10.0, 0.0]), item("a b", 1, 1, vec![0.6, 0.8])],
        )
        .unwrap();
        let hits = idx.search_one(&[0.0, 5.0], 2).unwrap();
        assert_eq!(hits[0].id, 1);
        assert!((hits[0].score - 0.8).abs() < 1e-6);
        assert!((idx.vector(0).unwrap()[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let idx = random_index(&mut rng, 300, 7, Metric::InnerProduct);
        idx.save(dir.path()).unwrap();
        let back = PhraseIndex::load(dir.path()).unwrap();
        assert_eq!(back, idx);
        assert!(back.vectors.iter().zip(&idx.vectors).all(|(a, b)| a.to_bits() == b.to_bits()));

        let empty = PhraseIndex::empty(4, Metric::Cosine);
        let dir2 = tempfile::tempdir().unwrap();
        empty.save(dir2.path()).unwrap();
        assert_eq!(PhraseIndex::load(dir2.path()).unwrap(), empty);
    }

    #[test]
    fn damaged_files_fail_to_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        random_index(&mut rng, 20, 4, Metric::InnerProduct).save(dir.path()).unwrap();
        let vec_path = dir.path().join(VECTORS_FILE);
        let bytes = fs::read(&vec_path).unwrap();
        fs::write(&vec_path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(PhraseIndex::load(dir.path()), Err(Error::Checksum(_))));
        fs::write(&vec_path, &bytes).unwrap();

        let entries_path = dir.path().join(ENTRIES_FILE);
        let text = fs::read_to_string(&entries_path).unwrap();
        fs::write(&entries_path, text.replace("ctx3", "ctx9")).unwrap();
        assert!(matches!(PhraseIndex::load(dir.path()), Err(Error::Checksum(_))));
        fs::write(&entries_path, text).unwrap();

        let manifest_path = dir.path().join(MANIFEST_FILE);
        let m = fs::read_to_string(&manifest_path).unwrap();
        fs::write(&manifest_path, m.replace("\"format_version\": 1", "\"format_version\": 2")).unwrap();
        assert!(matches!(PhraseIndex::load(dir.path()), Err(Error::Version { found: 2, .. })));
    }

    proptest! {
        #[test]
        fn search_is_exact_and_prefix_monotone(
            seed in 0u64..1000,
            n in 0usize..200,
            dim in 1usize..20,
            k in 1usize..40,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx = random_index(&mut rng, n, dim, Metric::InnerProduct);
            let q: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let hits = idx.search_one(&q, k).unwrap();
            prop_assert_eq!(hits.len(), k.min(n));
            prop_assert!(hits.windows(2).all(|w| w[0].score > w[1].score || (w[0].score == w[1].score && w[0].id < w[1].id)));
            let top1 = idx.search_one(&q, 1).unwrap();
            prop_assert_eq!(&hits[..top1.len()], &top1[..]);
            let f64_ids: Vec<usize> = idx.search_f64(&[q.clone()], k).unwrap()[0].iter().map(|h| h.0).collect();
            prop_assert_eq!(f64_ids, brute_force(&idx, &q, k));
        }
    }
}
