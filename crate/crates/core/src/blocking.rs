//! Candidate-pair generation.
//!
//! Pairs are `(b, a)` row indices into tables B and A. Three generators are
//! provided: equality on a key attribute, TF-IDF cosine top-k, and exact
//! top-k over dense embeddings computed block by block. Their outputs can be
//! unioned.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet};
use std::fmt;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entry::{serialize_entry, DataEntry};
use crate::summarizer::TfidfModel;

#[derive(Debug, Error, PartialEq)]
pub enum BlockingError {
    #[error("key attribute {attr:?} missing from table {table}")]
    MissingKey { attr: String, table: &'static str },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("block_size must be at least 1")]
    ZeroBlockSize,
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("matrix data of length {len} is not {rows}×{dim}")]
    BadShape { len: usize, rows: usize, dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Key,
    Topk,
    Both,
}

impl Provenance {
    fn merge(self, other: Provenance) -> Provenance {
        if self == other {
            self
        } else {
            Provenance::Both
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Provenance::Key => "key",
            Provenance::Topk => "topk",
            Provenance::Both => "both",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub score: Option<f64>,
    pub provenance: Provenance,
}

/// Deduplicated `(b, a)` pairs in sorted order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateSet {
    pairs: BTreeMap<(usize, usize), Candidate>,
}

impl CandidateSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or merges: provenance combines, the larger score is kept.
    pub fn insert(&mut self, b: usize, a: usize, score: Option<f64>, provenance: Provenance) {
        self.pairs
            .entry((b, a))
            .and_modify(|c| {
                c.provenance = c.provenance.merge(provenance);
                c.score = match (c.score, score) {
                    (Some(x), Some(y)) => Some(x.max(y)),
                    (x, y) => x.or(y),
                };
            })
            .or_insert(Candidate { score, provenance });
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, b: usize, a: usize) -> bool {
        self.pairs.contains_key(&(b, a))
    }

    pub fn get(&self, b: usize, a: usize) -> Option<&Candidate> {
        self.pairs.get(&(b, a))
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &Candidate)> {
        self.pairs.iter().map(|(k, v)| (*k, v))
    }

    pub fn pairs(&self) -> BTreeSet<(usize, usize)> {
        self.pairs.keys().copied().collect()
    }

    pub fn union(&self, other: &CandidateSet) -> CandidateSet {
        let mut out = self.clone();
        for ((b, a), c) in other.iter() {
            out.insert(b, a, c.score, c.provenance);
        }
        out
    }
}

pub fn union_block<'a>(sets: impl IntoIterator<Item = &'a CandidateSet>) -> CandidateSet {
    sets.into_iter().fold(CandidateSet::new(), |acc, s| acc.union(s))
}

/// All `(b, a)` with equal non-empty trimmed values of `key_attr`.
pub fn key_block(a: &[DataEntry], b: &[DataEntry], key_attr: &str) -> Result<CandidateSet, BlockingError> {
    for (table, rows) in [("A", a), ("B", b)] {
        if !rows.is_empty() && rows.iter().all(|e| e.get(key_attr).is_none()) {
            return Err(BlockingError::MissingKey {
                attr: key_attr.to_string(),
                table,
            });
        }
    }
    let mut by_key: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, e) in a.iter().enumerate() {
        if let Some(k) = e.get(key_attr).map(str::trim).filter(|k| !k.is_empty()) {
            by_key.entry(k).or_default().push(i);
        }
    }
    let mut out = CandidateSet::new();
    for (j, e) in b.iter().enumerate() {
        let Some(k) = e.get(key_attr).map(str::trim).filter(|k| !k.is_empty()) else {
            continue;
        };
        for &i in by_key.get(k).into_iter().flatten() {
            out.insert(j, i, None, Provenance::Key);
        }
    }
    Ok(out)
}

/// Lowercased alphanumeric runs.
pub fn word_tokens(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Space-joined values of `attrs` (all attributes when empty).
pub fn record_text(e: &DataEntry, attrs: &[String]) -> String {
    if attrs.is_empty() {
        return e.attrs().iter().map(|(_, v)| v.as_str()).collect::<Vec<_>>().join(" ");
    }
    attrs.iter().filter_map(|n| e.get(n)).collect::<Vec<_>>().join(" ")
}

/// Sparse TF-IDF vector sorted by term index.
#[derive(Debug, Clone, PartialEq)]
pub struct TfidfVector {
    entries: Vec<(usize, f64)>,
    norm: f64,
}

impl TfidfVector {
    pub fn from_tokens(model: &TfidfModel, tokens: &[String]) -> Self {
        let mut tf: BTreeMap<usize, u32> = BTreeMap::new();
        for t in tokens {
            if let Some(i) = model.index_of(t) {
                *tf.entry(i).or_default() += 1;
            }
        }
        let entries: Vec<(usize, f64)> = tf.into_iter().map(|(i, c)| (i, c as f64 * model.idf_at(i))).collect();
        let norm = entries.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        TfidfVector { entries, norm }
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Cosine similarity; zero if either vector is empty.
    pub fn cosine(&self, other: &TfidfVector) -> f64 {
        if self.norm == 0.0 || other.norm == 0.0 {
            return 0.0;
        }
        let (mut i, mut j, mut dot) = (0, 0, 0.0);
        while i < self.entries.len() && j < other.entries.len() {
            match self.entries[i].0.cmp(&other.entries[j].0) {
                Ordering::Less => i += 1,
                Ordering::Greater => j += 1,
                Ordering::Equal => {
                    dot += self.entries[i].1 * other.entries[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        dot / (self.norm * other.norm)
    }
}

/// A score and row index ordered so that "greater" means "ranks higher":
/// larger score, then smaller index.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Ranked(f64, usize);

impl Eq for Ranked {}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Bounded heap keeping the `k` highest-ranked items.
struct TopK {
    k: usize,
    heap: BinaryHeap<Reverse<Ranked>>,
}

impl TopK {
    fn new(k: usize) -> Self {
        TopK {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    fn push(&mut self, score: f64, idx: usize) {
        let r = Ranked(score, idx);
        if self.heap.len() < self.k {
            self.heap.push(Reverse(r));
        } else if self.heap.peek().is_some_and(|w| r > w.0) {
            self.heap.pop();
            self.heap.push(Reverse(r));
        }
    }

    fn into_sorted(self) -> Vec<(usize, f64)> {
        let mut v: Vec<Ranked> = self.heap.into_iter().map(|r| r.0).collect();
        v.sort_by(|a, b| b.cmp(a));
        v.into_iter().map(|Ranked(s, i)| (i, s)).collect()
    }
}

/// TF-IDF vectors for both tables, fitted on their union.
#[derive(Debug, Clone)]
pub struct TfidfIndex {
    a: Vec<TfidfVector>,
    b: Vec<TfidfVector>,
    postings: Vec<Vec<(usize, f64)>>,
}

impl TfidfIndex {
    pub fn build(a: &[DataEntry], b: &[DataEntry], attrs: &[String]) -> Self {
        let docs_a: Vec<Vec<String>> = a.iter().map(|e| word_tokens(&record_text(e, attrs))).collect();
        let docs_b: Vec<Vec<String>> = b.iter().map(|e| word_tokens(&record_text(e, attrs))).collect();
        let joined: Vec<String> = docs_a.iter().chain(&docs_b).map(|d| d.join(" ")).collect();
        let model = if joined.is_empty() {
            None
        } else {
            TfidfModel::fit_with(&joined, |s| s.split(' ').filter(|t| !t.is_empty()).map(String::from).collect()).ok()
        };
        let vec_of = |d: &Vec<String>| match &model {
            Some(m) => TfidfVector::from_tokens(m, d),
            None => TfidfVector {
                entries: Vec::new(),
                norm: 0.0,
            },
        };
        let av: Vec<TfidfVector> = docs_a.iter().map(vec_of).collect();
        let bv: Vec<TfidfVector> = docs_b.iter().map(vec_of).collect();
        let mut postings = vec![Vec::new(); model.as_ref().map_or(0, |m| m.vocab_len())];
        for (i, v) in av.iter().enumerate() {
            for &(t, w) in v.entries() {
                postings[t].push((i, w / v.norm()));
            }
        }
        TfidfIndex { a: av, b: bv, postings }
    }

    pub fn vectors_a(&self) -> &[TfidfVector] {
        &self.a
    }

    pub fn vectors_b(&self) -> &[TfidfVector] {
        &self.b
    }

    /// The `k` most similar A rows for B row `j`; rows with no shared term
    /// fill the remaining slots with score 0 in index order.
    pub fn topk_row(&self, j: usize, k: usize) -> Vec<(usize, f64)> {
        let bv = &self.b[j];
        let mut scores: HashMap<usize, f64> = HashMap::new();
        if bv.norm() > 0.0 {
            for &(t, w) in bv.entries() {
                let wb = w / bv.norm();
                for &(i, wa) in &self.postings[t] {
                    *scores.entry(i).or_default() += wb * wa;
                }
            }
        }
        // Recompute with the merge-based cosine so ranking matches `TfidfVector::cosine` exactly.
        let mut top = TopK::new(k);
        for &i in scores.keys() {
            top.push(self.a[i].cosine(bv), i);
        }
        let mut out = top.into_sorted();
        out.retain(|&(_, s)| s > 0.0);
        let hit: HashSet<usize> = out.iter().map(|&(i, _)| i).collect();
        let fill = (0..self.a.len()).filter(|i| !hit.contains(i)).take(k - out.len().min(k));
        out.extend(fill.map(|i| (i, 0.0)));
        out.truncate(k);
        out
    }

    pub fn topk(&self, k: usize) -> Result<CandidateSet, BlockingError> {
        if k == 0 {
            return Err(BlockingError::ZeroK);
        }
        let rows: Vec<Vec<(usize, f64)>> = (0..self.b.len()).into_par_iter().map(|j| self.topk_row(j, k)).collect();
        let mut out = CandidateSet::new();
        for (j, row) in rows.into_iter().enumerate() {
            for (i, s) in row {
                out.insert(j, i, Some(s), Provenance::Topk);
            }
        }
        Ok(out)
    }
}

/// For each B record, the `k` A records with the highest TF-IDF cosine over
/// the concatenated `attrs`; ties go to the lower A row.
pub fn tfidf_topk(b: &[DataEntry], a: &[DataEntry], attrs: &[String], k: usize) -> Result<CandidateSet, BlockingError> {
    TfidfIndex::build(a, b, attrs).topk(k)
}

/// Row-major matrix whose rows are scaled to unit length (zero rows stay zero).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(data: Vec<f64>, rows: usize, dim: usize) -> Result<Self, BlockingError> {
        if data.len() != rows * dim {
            return Err(BlockingError::BadShape {
                len: data.len(),
                rows,
                dim,
            });
        }
        let mut data = data;
        if dim > 0 {
            for row in data.chunks_mut(dim) {
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 {
                    row.iter_mut().for_each(|x| *x /= n);
                }
            }
        }
        Ok(EmbeddingMatrix { rows, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, BlockingError> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(BlockingError::DimensionMismatch(dim, r.len()));
        }
        Self::new(rows.concat(), rows.len(), dim)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Exact cosine top-k of every B row against A, computed over
/// `block_size × block_size` tiles with one bounded heap per B row. B-row
/// blocks run in parallel.
pub fn blocked_topk(
    mb: &EmbeddingMatrix,
    ma: &EmbeddingMatrix,
    k: usize,
    block_size: usize,
) -> Result<CandidateSet, BlockingError> {
    if k == 0 {
        return Err(BlockingError::ZeroK);
    }
    if block_size == 0 {
        return Err(BlockingError::ZeroBlockSize);
    }
    if mb.dim != ma.dim {
        return Err(BlockingError::DimensionMismatch(mb.dim, ma.dim));
    }
    let b_blocks: Vec<usize> = (0..mb.rows).step_by(block_size).collect();
    let per_block: Vec<Vec<Vec<(usize, f64)>>> = b_blocks
        .par_iter()
        .map(|&b0| {
            let b1 = (b0 + block_size).min(mb.rows);
            let mut heaps: Vec<TopK> = (b0..b1).map(|_| TopK::new(k)).collect();
            let mut tile = vec![0.0; block_size * block_size];
            for a0 in (0..ma.rows).step_by(block_size) {
                let a1 = (a0 + block_size).min(ma.rows);
                let w = a1 - a0;
                for (r, j) in (b0..b1).enumerate() {
                    let bj = mb.row(j);
                    for (c, i) in (a0..a1).enumerate() {
                        tile[r * w + c] = dot(bj, ma.row(i));
                    }
                }
                for (r, heap) in heaps.iter_mut().enumerate() {
                    for c in 0..w {
                        heap.push(tile[r * w + c], a0 + c);
                    }
                }
            }
            heaps.into_iter().map(TopK::into_sorted).collect()
        })
        .collect();
    let mut out = CandidateSet::new();
    for (bi, rows) in per_block.into_iter().enumerate() {
        for (r, row) in rows.into_iter().enumerate() {
            for (i, s) in row {
                out.insert(b_blocks[bi] + r, i, Some(s), Provenance::Topk);
            }
        }
    }
    Ok(out)
}

/// `|gold ∩ candidates| / |gold|`; 1.0 when `gold` is empty.
pub fn recall_of(candidates: &CandidateSet, gold: &BTreeSet<(usize, usize)>) -> f64 {
    if gold.is_empty() {
        return 1.0;
    }
    let hit = gold.iter().filter(|&&(b, a)| candidates.contains(b, a)).count();
    hit as f64 / gold.len() as f64
}

/// Indices of the first occurrence of each distinct serialized entry.
pub fn dedup_exact(entries: &[DataEntry]) -> Vec<usize> {
    let mut seen = HashSet::new();
    (0..entries.len()).filter(|&i| seen.insert(serialize_entry(&entries[i]))).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Tfidf,
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockingConfig {
    /// Equality-blocking attribute; off when unset.
    pub key_attr: Option<String>,
    /// Attributes compared by the similarity blocker; all when empty.
    pub attrs: Vec<String>,
    pub sim: Similarity,
    /// k for TF-IDF top-k.
    pub topk: usize,
    /// k for embedding top-k.
    pub embed_k: usize,
    pub block_size: usize,
    /// Drop exact duplicate records of table B first.
    pub dedup: bool,
}

impl Default for BlockingConfig {
    fn default() -> Self {
        BlockingConfig {
            key_attr: None,
            attrs: Vec::new(),
            sim: Similarity::Tfidf,
            topk: 20,
            embed_k: 10,
            block_size: 64,
            dedup: false,
        }
    }
}

/// Wall-clock time per phase: candidate generation, record encoding,
/// similarity search and pair classification.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub blocking_s: f64,
    pub encoding_s: f64,
    pub search_s: f64,
    pub matching_s: f64,
}

impl TimingReport {
    pub fn set(&mut self, phase: Phase, d: Duration) {
        let s = d.as_secs_f64();
        match phase {
            Phase::Blocking => self.blocking_s = s,
            Phase::Encoding => self.encoding_s = s,
            Phase::Search => self.search_s = s,
            Phase::Matching => self.matching_s = s,
        }
    }

    pub fn total(&self) -> f64 {
        self.blocking_s + self.encoding_s + self.search_s + self.matching_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Blocking,
    Encoding,
    Search,
    Matching,
}

impl fmt::Display for TimingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "phase\tseconds")?;
        writeln!(f, "blocking\t{:.6}", self.blocking_s)?;
        writeln!(f, "encoding\t{:.6}", self.encoding_s)?;
        writeln!(f, "search\t{:.6}", self.search_s)?;
        write!(f, "matching\t{:.6}", self.matching_s)
    }
}
