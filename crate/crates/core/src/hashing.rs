//! Binary codes: per-dimension median thresholds, 64-bit word packing and
//! Hamming distance by XOR + population count.
//!
//! Bit `i` of a code lives in word `i / 64` at bit position `i % 64` (least
//! significant first). Bits past `dims` in the last word are always zero.
//!
//! `PSHASH01` layout, all little-endian:
//!
//! ```text
//! magic   8 bytes  "PSHASH01"
//! count   u32
//! dims    u32
//! count × { region_id u64, ceil(dims / 64) × u64 }
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::features::{check_length, read_header, FeatureVector, HEADER_LEN};

pub const CODE_MAGIC: &[u8; 8] = b"PSHASH01";

pub fn words_for(dims: usize) -> usize {
    dims.div_ceil(64)
}

/// Mask of the meaningful bits of the last word.
fn tail_mask(dims: usize) -> u64 {
    match dims % 64 {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// Per-dimension thresholds; a value strictly above its threshold maps to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarizerParams {
    /// How the thresholds were obtained, e.g. `"median"`.
    pub rule: String,
    pub thresholds: Vec<f32>,
}

impl BinarizerParams {
    pub fn new(rule: impl Into<String>, thresholds: Vec<f32>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::Empty("binarizer with zero dimensions".into()));
        }
        if thresholds.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("binarizer thresholds must be finite".into()));
        }
        Ok(Self { rule: rule.into(), thresholds })
    }

    pub fn dims(&self) -> usize {
        self.thresholds.len()
    }
}

/// Bit-packed binary code.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryCode {
    dims: usize,
    words: Vec<u64>,
}

impl BinaryCode {
    pub fn zeros(dims: usize) -> Self {
        Self { dims, words: vec![0; words_for(dims)] }
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut code = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            code.set(i, b);
        }
        code
    }

    /// Builds a code from raw words; padding bits are cleared.
    pub fn from_words(dims: usize, mut words: Vec<u64>) -> Result<Self> {
        if words.len() != words_for(dims) {
            return Err(Error::DimensionMismatch { expected: words_for(dims), found: words.len() });
        }
        if let Some(last) = words.last_mut() {
            *last &= tail_mask(dims);
        }
        Ok(Self { dims, words })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn get(&self, i: usize) -> bool {
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn set(&mut self, i: usize, on: bool) {
        assert!(i < self.dims, "bit {i} out of range for {} dims", self.dims);
        let mask = 1u64 << (i % 64);
        if on {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn complement(&self) -> Self {
        let mut words: Vec<u64> = self.words.iter().map(|w| !w).collect();
        if let Some(last) = words.last_mut() {
            *last &= tail_mask(self.dims);
        }
        Self { dims: self.dims, words }
    }
}

fn median(column: &mut [f32]) -> f32 {
    column.sort_unstable_by(f32::total_cmp);
    let n = column.len();
    if n % 2 == 1 {
        column[n / 2]
    } else {
        ((f64::from(column[n / 2 - 1]) + f64::from(column[n / 2])) / 2.0) as f32
    }
}

/// Median thresholds over a row-major `rows × dims` value store.
pub fn fit_binarizer_rows(dims: usize, values: &[f32]) -> Result<BinarizerParams> {
    if dims == 0 || values.is_empty() {
        return Err(Error::Empty("cannot fit a binarizer on an empty corpus".into()));
    }
    if !values.len().is_multiple_of(dims) {
        return Err(Error::InvalidArgument(format!("{} values do not form rows of {dims}", values.len())));
    }
    let rows = values.len() / dims;
    let mut column = vec![0f32; rows];
    let thresholds = (0..dims)
        .map(|d| {
            for (r, slot) in column.iter_mut().enumerate() {
                *slot = values[r * dims + d];
            }
            median(&mut column)
        })
        .collect();
    BinarizerParams::new("median", thresholds)
}

/// Per-dimension corpus median; all vectors must share one length.
pub fn fit_binarizer(features: &[FeatureVector]) -> Result<BinarizerParams> {
    let first = features.first().ok_or_else(|| Error::Empty("cannot fit a binarizer on an empty corpus".into()))?;
    let dims = first.dims();
    let mut values = Vec::with_capacity(features.len() * dims);
    for f in features {
        if f.dims() != dims {
            return Err(Error::DimensionMismatch { expected: dims, found: f.dims() });
        }
        values.extend_from_slice(f.values());
    }
    fit_binarizer_rows(dims, &values)
}

/// Packs `values[i] > thresholds[i]` into `out`, which must hold
/// `words_for(dims)` words.
pub fn binarize_into(values: &[f32], params: &BinarizerParams, out: &mut [u64]) {
    out.fill(0);
    for (i, (v, t)) in values.iter().zip(&params.thresholds).enumerate() {
        if v > t {
            out[i / 64] |= 1 << (i % 64);
        }
    }
}

pub fn binarize_slice(values: &[f32], params: &BinarizerParams) -> Result<BinaryCode> {
    if values.len() != params.dims() {
        return Err(Error::DimensionMismatch { expected: params.dims(), found: values.len() });
    }
    let mut words = vec![0u64; words_for(values.len())];
    binarize_into(values, params, &mut words);
    Ok(BinaryCode { dims: values.len(), words })
}

pub fn binarize(v: &FeatureVector, params: &BinarizerParams) -> Result<BinaryCode> {
    binarize_slice(v.values(), params)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn xor_popcount_native(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Number of differing bits between two equal-length word slices.
#[inline]
pub fn xor_popcount(a: &[u64], b: &[u64]) -> u32 {
    debug_assert_eq!(a.len(), b.len());
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("popcnt") {
            // SAFETY: the CPU supports the instruction, checked just above.
            return unsafe { xor_popcount_native(a, b) };
        }
    }
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn xor_popcount_many_native(query: &[u64], codes: &[u64], out: &mut [u32]) {
    for (code, d) in codes.chunks_exact(query.len()).zip(out) {
        *d = query.iter().zip(code).map(|(x, y)| (x ^ y).count_ones()).sum();
    }
}

/// Distances from `query` to each consecutive code in `codes`, one per slot
/// of `out`. Every code has `query.len()` words.
pub fn xor_popcount_many(query: &[u64], codes: &[u64], out: &mut [u32]) {
    assert!(!query.is_empty() && codes.len() == query.len() * out.len());
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("popcnt") {
            // SAFETY: the CPU supports the instruction, checked just above.
            unsafe { xor_popcount_many_native(query, codes, out) };
            return;
        }
    }
    for (code, d) in codes.chunks_exact(query.len()).zip(out) {
        *d = query.iter().zip(code).map(|(x, y)| (x ^ y).count_ones()).sum();
    }
}

/// Hamming distance: the count of differing bits.
pub fn hamming_distance(q: &BinaryCode, p: &BinaryCode) -> Result<u32> {
    if q.dims != p.dims {
        return Err(Error::DimensionMismatch { expected: q.dims, found: p.dims });
    }
    Ok(xor_popcount(&q.words, &p.words))
}

/// Decoded `PSHASH01` payload with a contiguous word store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeTable {
    pub dims: usize,
    pub ids: Vec<u64>,
    pub words: Vec<u64>,
}

impl CodeTable {
    pub fn words_per_code(&self) -> usize {
        words_for(self.dims)
    }

    pub fn row(&self, i: usize) -> &[u64] {
        let n = self.words_per_code();
        &self.words[i * n..(i + 1) * n]
    }

    pub fn code(&self, i: usize) -> BinaryCode {
        BinaryCode { dims: self.dims, words: self.row(i).to_vec() }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn encode_codes(table: &CodeTable) -> Result<Vec<u8>> {
    let n = table.words_per_code();
    let mut out = Vec::with_capacity(HEADER_LEN + table.len() * (8 + 8 * n));
    let too_big = || Error::InvalidArgument("record count or dimension exceeds u32".into());
    out.extend_from_slice(CODE_MAGIC);
    out.extend_from_slice(&u32::try_from(table.len()).map_err(|_| too_big())?.to_le_bytes());
    out.extend_from_slice(&u32::try_from(table.dims).map_err(|_| too_big())?.to_le_bytes());
    for (i, id) in table.ids.iter().enumerate() {
        out.extend_from_slice(&id.to_le_bytes());
        for w in table.row(i) {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes a `PSHASH01` buffer. Padding bits are cleared on the way in.
pub fn decode_codes(bytes: &[u8], expected_dims: Option<usize>) -> Result<CodeTable, FormatError> {
    let header = read_header(bytes, CODE_MAGIC)?;
    if let Some(expected) = expected_dims {
        if header.dims != expected {
            return Err(FormatError::DimensionMismatch { expected, found: header.dims });
        }
    }
    let n = words_for(header.dims);
    let record_len = 8 + 8 * n;
    check_length(bytes, header, record_len)?;
    let mask = tail_mask(header.dims);
    let mut ids = Vec::with_capacity(header.count);
    let mut words = Vec::with_capacity(header.count * n);
    for rec in bytes[HEADER_LEN..].chunks_exact(record_len) {
        ids.push(u64::from_le_bytes(rec[..8].try_into().expect("8 bytes")));
        for (j, chunk) in rec[8..].chunks_exact(8).enumerate() {
            let w = u64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            words.push(if j + 1 == n { w & mask } else { w });
        }
    }
    Ok(CodeTable { dims: header.dims, ids, words })
}

pub fn write_code_file(path: &Path, table: &CodeTable) -> Result<()> {
    fs::write(path, encode_codes(table)?)?;
    Ok(())
}

pub fn read_code_file(path: &Path, expected_dims: Option<usize>) -> Result<CodeTable> {
    let bytes = fs::read(path)?;
    decode_codes(&bytes, expected_dims).map_err(|source| Error::Format { path: path.to_path_buf(), source })
}
