//! The online phase: describe a query, scan every candidate, rank, and
//! optionally suppress near-duplicate boxes.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BoundingBox};
use crate::error::{Error, Result};
use crate::features::{extract_baseline, l2_normalize, FeatureVector};
use crate::hashing::{binarize_slice, xor_popcount_many};
use crate::imgproc::Image;
use crate::index::SearchIndex;

/// Candidates per parallel work item.
const SHARD_ROWS: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Euclidean,
    Hamming,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::Euclidean, Mode::Hamming];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Euclidean => "euclidean",
            Mode::Hamming => "hamming",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Mode::Euclidean),
            "hamming" => Ok(Mode::Hamming),
            _ => Err(Error::InvalidArgument(format!("unknown mode {s:?} (expected euclidean or hamming)"))),
        }
    }
}

/// What the user searches with.
#[derive(Debug, Clone)]
pub enum Query {
    /// A query crop; needs an index built with the baseline extractor.
    Image(Image),
    /// A precomputed descriptor in the index's feature space.
    Vector(FeatureVector),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub region_id: u64,
    pub page_id: String,
    pub bbox: BoundingBox,
    /// Euclidean distance, or the Hamming distance as a whole number.
    pub distance: f64,
    /// 1-based.
    pub rank: usize,
}

/// Descriptor of `query` in the index's ranking space.
pub fn query_vector(index: &SearchIndex, query: &Query) -> Result<FeatureVector> {
    let v = match query {
        Query::Image(img) => {
            if !index.profile().is_baseline() {
                return Err(Error::ProfileMismatch(format!(
                    "index was built with external profile {:?}; pass a precomputed query vector",
                    index.profile().name
                )));
            }
            extract_baseline(img)?
        }
        Query::Vector(v) => {
            if v.dims() != index.dims() {
                return Err(Error::ProfileMismatch(format!(
                    "query has {} dims, index profile {:?} has {}",
                    v.dims(),
                    index.profile().name,
                    index.dims()
                )));
            }
            v.clone()
        }
    };
    Ok(if index.is_normalized() { l2_normalize(&v).vector } else { v })
}

/// Full scan of the index with a single query: the `n` nearest entries,
/// ascending by distance, ties by region id.
pub fn query(index: &SearchIndex, query: &Query, mode: Mode, n: usize) -> Result<Vec<QueryResult>> {
    let v = query_vector(index, query)?;
    rank(index, v.values(), mode, n)
}

/// Ranks a descriptor already in the index's ranking space.
pub fn rank(index: &SearchIndex, q: &[f32], mode: Mode, n: usize) -> Result<Vec<QueryResult>> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    if index.is_empty() {
        return Err(Error::Empty("index has no entries".into()));
    }
    if q.len() != index.dims() {
        return Err(Error::DimensionMismatch { expected: index.dims(), found: q.len() });
    }
    let hits = match mode {
        Mode::Euclidean => scan_euclidean(index.ranking_features(), q, n),
        Mode::Hamming => {
            let code = binarize_slice(q, index.binarizer())?;
            scan_hamming(index.codes(), code.words(), n).into_iter().map(|(d, i)| (f64::from(d), i)).collect()
        }
    };
    let entries = index.entries();
    Ok(hits
        .into_iter()
        .enumerate()
        .map(|(r, (distance, i))| QueryResult {
            region_id: entries[i].region_id,
            page_id: entries[i].page_id.clone(),
            bbox: entries[i].bbox,
            distance,
            rank: r + 1,
        })
        .collect())
}

/// Bounded max-heap keeping the `n` smallest `(key, row)` pairs.
struct TopN<K> {
    n: usize,
    heap: BinaryHeap<(K, usize)>,
}

impl<K: Ord + Copy> TopN<K> {
    fn new(n: usize) -> Self {
        Self { n, heap: BinaryHeap::with_capacity(n.min(1 << 16) + 1) }
    }

    #[inline]
    fn push(&mut self, key: K, row: usize) {
        if self.heap.len() < self.n {
            self.heap.push((key, row));
        } else if let Some(mut top) = self.heap.peek_mut() {
            if (key, row) < *top {
                *top = (key, row);
            }
        }
    }

    fn merge(mut self, other: Self) -> Self {
        for (k, r) in other.heap {
            self.push(k, r);
        }
        self
    }

    fn into_sorted(self) -> Vec<(K, usize)> {
        self.heap.into_sorted_vec()
    }
}

/// Total order on non-negative finite distances.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Dist(f32);

impl Eq for Dist {}

impl PartialOrd for Dist {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Dist {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Squared Euclidean distance with eight independent accumulators, which the
/// compiler keeps in vector registers.
#[inline]
pub fn squared_euclidean(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += (x - y) * (x - y);
    }
    acc.iter().sum::<f32>() + tail
}

/// Indices and distances of the `n` rows of `rows` (row-major, `q.len()`
/// columns) nearest to `q`.
pub fn scan_euclidean(rows: &[f32], q: &[f32], n: usize) -> Vec<(f64, usize)> {
    let dims = q.len();
    rows.par_chunks(SHARD_ROWS * dims)
        .enumerate()
        .fold(
            || TopN::new(n),
            |mut top, (s, shard)| {
                for (j, row) in shard.chunks_exact(dims).enumerate() {
                    top.push(Dist(squared_euclidean(row, q)), s * SHARD_ROWS + j);
                }
                top
            },
        )
        .reduce(|| TopN::new(n), TopN::merge)
        .into_sorted()
        .into_iter()
        .map(|(d, i)| (f64::from(d.0).sqrt(), i))
        .collect()
}

/// Indices and Hamming distances of the `n` codes nearest to `q`; `codes`
/// holds `q.len()` words per entry.
pub fn scan_hamming(codes: &[u64], q: &[u64], n: usize) -> Vec<(u32, usize)> {
    let words = q.len();
    codes
        .par_chunks(SHARD_ROWS * words)
        .enumerate()
        .fold(
            || (TopN::new(n), vec![0u32; SHARD_ROWS]),
            |(mut top, mut buf), (s, shard)| {
                let m = shard.len() / words;
                xor_popcount_many(q, shard, &mut buf[..m]);
                for (j, &d) in buf[..m].iter().enumerate() {
                    top.push(d, s * SHARD_ROWS + j);
                }
                (top, buf)
            },
        )
        .map(|(top, _)| top)
        .reduce(|| TopN::new(n), TopN::merge)
        .into_sorted()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostProcessParams {
    /// How many ranked candidates enter the union step.
    pub pool_size: usize,
    /// Boxes on the same page overlapping more than this collapse into the
    /// better-ranked one.
    pub union_iou: f64,
}

impl Default for PostProcessParams {
    fn default() -> Self {
        Self { pool_size: 3000, union_iou: 0.85 }
    }
}

impl PostProcessParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.union_iou > 0.0 && self.union_iou < 1.0) {
            return Err(Error::InvalidArgument(format!("union_iou must lie in (0, 1), got {}", self.union_iou)));
        }
        if self.pool_size == 0 {
            return Err(Error::InvalidArgument("pool_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Greedy suppression in rank order over the first `pool_size` results: a
/// result is dropped when it overlaps an already kept result on the same page
/// with IoU above `union_iou`. Survivors are re-ranked from 1.
pub fn postprocess_union(results: &[QueryResult], params: &PostProcessParams) -> Vec<QueryResult> {
    let mut kept_by_page: HashMap<&str, Vec<BoundingBox>> = HashMap::new();
    let mut out = Vec::new();
    for r in results.iter().take(params.pool_size) {
        let kept = kept_by_page.entry(r.page_id.as_str()).or_default();
        if kept.iter().any(|k| iou(k, &r.bbox) > params.union_iou) {
            continue;
        }
        kept.push(r.bbox);
        out.push(QueryResult { rank: out.len() + 1, ..r.clone() });
    }
    out
}

/// Query followed by optional union post-processing, truncated to `n`. With
/// post-processing the scan fetches `pool_size` candidates first.
pub fn search(
    index: &SearchIndex,
    q: &Query,
    mode: Mode,
    n: usize,
    pp: Option<&PostProcessParams>,
) -> Result<Vec<QueryResult>> {
    let v = query_vector(index, q)?;
    search_vector(index, v.values(), mode, n, pp)
}

/// [`search`] for a descriptor already in ranking space.
pub fn search_vector(
    index: &SearchIndex,
    q: &[f32],
    mode: Mode,
    n: usize,
    pp: Option<&PostProcessParams>,
) -> Result<Vec<QueryResult>> {
    match pp {
        None => rank(index, q, mode, n),
        Some(p) => {
            p.validate()?;
            if p.pool_size < n {
                return Err(Error::InvalidArgument(format!("pool_size {} is smaller than n {n}", p.pool_size)));
            }
            let mut out = postprocess_union(&rank(index, q, mode, p.pool_size)?, p);
            out.truncate(n);
            Ok(out)
        }
    }
}

/// Pages in order of their best-ranked result, each once.
pub fn ir_page_list(results: &[QueryResult]) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    results.iter().filter(|r| seen.insert(r.page_id.as_str())).map(|r| r.page_id.clone()).collect()
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ResultLine {
    pub query_id: String,
    pub rank: usize,
    pub page_id: String,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub distance: serde_json::Number,
    pub mode: Mode,
}

impl ResultLine {
    pub fn new(query_id: &str, r: &QueryResult, mode: Mode) -> Self {
        let distance = match mode {
            Mode::Hamming => serde_json::Number::from(r.distance as u64),
            Mode::Euclidean => serde_json::Number::from_f64(r.distance).unwrap_or_else(|| 0.into()),
        };
        Self {
            query_id: query_id.to_string(),
            rank: r.rank,
            page_id: r.page_id.clone(),
            x: r.bbox.x,
            y: r.bbox.y,
            w: r.bbox.w,
            h: r.bbox.h,
            distance,
            mode,
        }
    }
}

/// One JSON object per line per result.
pub fn write_jsonl<W: Write>(mut w: W, query_id: &str, results: &[QueryResult], mode: Mode) -> Result<()> {
    for r in results {
        serde_json::to_writer(&mut w, &ResultLine::new(query_id, r, mode))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
