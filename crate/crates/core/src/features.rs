//! Region descriptors: the built-in baseline extractor, L2 normalization and
//! the `PSFEAT01` file format used to ingest externally computed CNN
//! features.
//!
//! `PSFEAT01` layout, all little-endian, no padding:
//!
//! ```text
//! magic   8 bytes  "PSFEAT01"
//! count   u32
//! dims    u32
//! count × { region_id u64, dims × f32 (IEEE-754) }
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::imgproc::{plane, resize_bilinear, sobel_plane, to_grayscale, Image};

pub const FEATURE_MAGIC: &[u8; 8] = b"PSFEAT01";
pub const HEADER_LEN: usize = 16;

/// Side of the square every crop is resampled to before extraction.
pub const INPUT_SIDE: usize = 224;
pub const BASELINE_DIMS: usize = 640;
const COLOR_GRID: usize = 4;
const COLOR_STATS: usize = 8;
const GRADIENT_GRID: usize = 8;
const ORIENTATION_BINS: usize = 8;
pub const COLOR_BLOCK_LEN: usize = COLOR_GRID * COLOR_GRID * COLOR_STATS;
pub const GRADIENT_BLOCK_LEN: usize = GRADIENT_GRID * GRADIENT_GRID * ORIENTATION_BINS;

/// A real-valued descriptor with finite components.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f32>);

impl FeatureVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("feature vector with zero dimensions".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite feature value at index {i}")));
        }
        Ok(Self(values))
    }

    pub fn dims(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }

    pub fn euclidean(&self, other: &FeatureVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| {
                let d = f64::from(a) - f64::from(b);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileKind {
    BuiltinBaseline,
    External,
}

/// Names a feature space: where the vectors come from and how long they are.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorProfile {
    pub name: String,
    pub dims: usize,
    pub kind: ProfileKind,
}

/// External CNN profiles with their descriptor lengths.
pub const KNOWN_EXTERNAL_PROFILES: &[(&str, usize)] = &[
    ("resnet-conv", 100_352),
    ("resnet-gapool", 2048),
    ("vgg19-blocks", 1472),
    ("vgg19-block4-5", 1024),
    ("vgg19-block2-3", 384),
    ("vgg19-block2-5", 640),
    ("alexnet-fc", 4096),
];

impl ExtractorProfile {
    pub fn baseline() -> Self {
        Self { name: "baseline".into(), dims: BASELINE_DIMS, kind: ProfileKind::BuiltinBaseline }
    }

    pub fn external(name: impl Into<String>, dims: usize) -> Self {
        Self { name: name.into(), dims, kind: ProfileKind::External }
    }

    /// Looks up `baseline`, a known external profile, or `external:<dims>`.
    pub fn by_name(name: &str) -> Result<Self> {
        if name == "baseline" {
            return Ok(Self::baseline());
        }
        if let Some(&(n, dims)) = KNOWN_EXTERNAL_PROFILES.iter().find(|(n, _)| *n == name) {
            return Ok(Self::external(n, dims));
        }
        if let Some(dims) = name.strip_prefix("external:") {
            let dims: usize =
                dims.parse().map_err(|_| Error::InvalidArgument(format!("bad dimension in profile {name:?}")))?;
            if dims == 0 {
                return Err(Error::InvalidArgument("profile dims must be > 0".into()));
            }
            return Ok(Self::external(name, dims));
        }
        Err(Error::InvalidArgument(format!("unknown extractor profile {name:?}")))
    }

    pub fn is_baseline(&self) -> bool {
        self.kind == ProfileKind::BuiltinBaseline
    }
}

fn l2_normalize_in_place(block: &mut [f32]) {
    let norm = block.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
    if norm > 1e-9 {
        block.iter_mut().for_each(|v| *v = (f64::from(*v) / norm) as f32);
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    // round-off on flat cells
    let std = if var < 1e-12 { 0.0 } else { var.sqrt() };
    (mean, std)
}

/// Deterministic 640-dimensional descriptor of a crop, resampled to 224×224:
///
/// * color block (128): a 4×4 grid, per cell the mean and standard deviation
///   of R, G, B and luminance;
/// * gradient block (512): an 8×8 grid, per cell an 8-bin histogram of
///   luminance gradient orientation weighted by magnitude, with linear
///   interpolation between neighbouring bins.
///
/// Each block is L2-normalized on its own; an all-zero gradient block (flat
/// crop) stays zero. The gradient block does not change when a constant is
/// added to the crop.
pub fn extract_baseline(crop: &Image) -> Result<FeatureVector> {
    let rgb = resize_bilinear(&crop.to_rgb(), INPUT_SIDE, INPUT_SIDE)?;
    let luma = to_grayscale(&rgb)?;
    let side = INPUT_SIDE;
    let lum = plane(&luma, 0);

    let mut color = Vec::with_capacity(COLOR_BLOCK_LEN);
    let cell = side / COLOR_GRID;
    for gy in 0..COLOR_GRID {
        for gx in 0..COLOR_GRID {
            let pixels =
                (gy * cell..(gy + 1) * cell).flat_map(move |y| (gx * cell..(gx + 1) * cell).map(move |x| (x, y)));
            for c in 0..3 {
                let (m, s) = mean_std(pixels.clone().map(|(x, y)| f64::from(rgb.get(x, y, c))));
                color.extend([m as f32, s as f32]);
            }
            let (m, s) = mean_std(pixels.map(|(x, y)| lum[y * side + x]));
            color.extend([m as f32, s as f32]);
        }
    }
    l2_normalize_in_place(&mut color);

    let (gxs, gys) = sobel_plane(&lum, side, side);
    let mut gradient = vec![0f32; GRADIENT_BLOCK_LEN];
    let cell = side / GRADIENT_GRID;
    for y in 0..side {
        for x in 0..side {
            let i = y * side + x;
            let mag = (gxs[i] * gxs[i] + gys[i] * gys[i]).sqrt();
            // Flat areas only carry rounding noise; drop it so the block is
            // exactly zero there.
            if mag < 1e-6 {
                continue;
            }
            // Bin centers sit on multiples of 45 degrees; the magnitude is
            // split linearly between the two nearest bins.
            let pos = gys[i].atan2(gxs[i]).rem_euclid(std::f64::consts::TAU) / std::f64::consts::TAU
                * ORIENTATION_BINS as f64;
            let lo = pos.floor() as usize % ORIENTATION_BINS;
            let hi = (lo + 1) % ORIENTATION_BINS;
            let frac = pos - pos.floor();
            let c = (y / cell) * GRADIENT_GRID + x / cell;
            gradient[c * ORIENTATION_BINS + lo] += (mag * (1.0 - frac)) as f32;
            gradient[c * ORIENTATION_BINS + hi] += (mag * frac) as f32;
        }
    }
    l2_normalize_in_place(&mut gradient);

    color.extend(gradient);
    FeatureVector::new(color)
}

/// Result of [`l2_normalize`]; `degenerate` is set for the zero vector,
/// which is returned unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub vector: FeatureVector,
    pub degenerate: bool,
}

pub fn l2_normalize(v: &FeatureVector) -> Normalized {
    let norm = v.norm();
    if norm == 0.0 {
        return Normalized { vector: v.clone(), degenerate: true };
    }
    Normalized { vector: FeatureVector(v.0.iter().map(|&x| (f64::from(x) / norm) as f32).collect()), degenerate: false }
}

/// Encodes records in the `PSFEAT01` format. All vectors must share `dims`.
pub fn encode_features(dims: usize, records: &[(u64, &[f32])]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + records.len() * (8 + 4 * dims));
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&u32::try_from(records.len()).map_err(|_| too_many())?.to_le_bytes());
    out.extend_from_slice(&u32::try_from(dims).map_err(|_| too_many())?.to_le_bytes());
    for (id, values) in records {
        if values.len() != dims {
            return Err(Error::DimensionMismatch { expected: dims, found: values.len() });
        }
        out.extend_from_slice(&id.to_le_bytes());
        for v in *values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn too_many() -> Error {
    Error::InvalidArgument("record count or dimension exceeds u32".into())
}

pub fn write_feature_file(path: &Path, dims: usize, records: &[(u64, &[f32])]) -> Result<()> {
    fs::write(path, encode_features(dims, records)?)?;
    Ok(())
}

/// Parsed header of a payload file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Header {
    pub count: usize,
    pub dims: usize,
}

pub(crate) fn read_header(bytes: &[u8], magic: &[u8; 8]) -> Result<Header, FormatError> {
    if bytes.len() < 8 || &bytes[..8] != magic {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned();
        return Err(FormatError::BadMagic { expected: String::from_utf8_lossy(magic).into_owned(), found });
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated { expected: HEADER_LEN as u64, found: bytes.len() as u64 });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    Ok(Header { count: word(8), dims: word(12) })
}

pub(crate) fn check_length(bytes: &[u8], header: Header, record_len: usize) -> Result<(), FormatError> {
    let expected = HEADER_LEN as u64 + header.count as u64 * record_len as u64;
    let found = bytes.len() as u64;
    match found.cmp(&expected) {
        std::cmp::Ordering::Less => Err(FormatError::Truncated { expected, found }),
        std::cmp::Ordering::Greater => Err(FormatError::TrailingBytes(found - expected)),
        std::cmp::Ordering::Equal => Ok(()),
    }
}

/// Decoded `PSFEAT01` payload: ids plus a contiguous row-major value store.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub dims: usize,
    pub ids: Vec<u64>,
    pub values: Vec<f32>,
}

impl FeatureTable {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dims..(i + 1) * self.dims]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Decodes a `PSFEAT01` buffer; `expected_dims` is checked before the payload
/// length so a wrong profile is reported as such.
pub fn decode_features(bytes: &[u8], expected_dims: Option<usize>) -> Result<FeatureTable, FormatError> {
    let header = read_header(bytes, FEATURE_MAGIC)?;
    if let Some(expected) = expected_dims {
        if header.dims != expected {
            return Err(FormatError::DimensionMismatch { expected, found: header.dims });
        }
    }
    let record_len = 8 + 4 * header.dims;
    check_length(bytes, header, record_len)?;
    let mut ids = Vec::with_capacity(header.count);
    let mut values = Vec::with_capacity(header.count * header.dims);
    for (r, rec) in bytes[HEADER_LEN..].chunks_exact(record_len).enumerate() {
        ids.push(u64::from_le_bytes(rec[..8].try_into().expect("8 bytes")));
        for chunk in rec[8..].chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(FormatError::NonFinite { record: r });
            }
            values.push(v);
        }
    }
    Ok(FeatureTable { dims: header.dims, ids, values })
}

pub fn read_feature_table(path: &Path, expected_dims: Option<usize>) -> Result<FeatureTable> {
    let bytes = fs::read(path)?;
    decode_features(&bytes, expected_dims).map_err(|source| Error::Format { path: path.to_path_buf(), source })
}

/// Reads an external feature file and checks it against `expected`.
pub fn load_external_features(path: &Path, expected: &ExtractorProfile) -> Result<Vec<(u64, FeatureVector)>> {
    let table = read_feature_table(path, Some(expected.dims))?;
    Ok(table.ids.iter().enumerate().map(|(i, &id)| (id, FeatureVector(table.row(i).to_vec()))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        let n = l2_normalize(&FeatureVector::new(vec![3.0, 4.0]).unwrap());
        assert!(!n.degenerate);
        assert!((n.vector.values()[0] - 0.6).abs() < 1e-7 && (n.vector.values()[1] - 0.8).abs() < 1e-7);

        let unit = FeatureVector::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(l2_normalize(&unit).vector, unit);

        let zero = FeatureVector::new(vec![0.0, 0.0]).unwrap();
        let n = l2_normalize(&zero);
        assert!(n.degenerate);
        assert_eq!(n.vector, zero);
    }

    #[test]
    fn feature_vector_rejects_bad_values() {
        assert!(FeatureVector::new(vec![]).is_err());
        assert!(FeatureVector::new(vec![1.0, f32::NAN]).is_err());
    }

    #[test]
    fn constant_crop_has_no_gradient_and_equal_color_cells() {
        let crop = Image::filled(31, 17, &[0.4, 0.4, 0.4]).unwrap();
        let f = extract_baseline(&crop).unwrap();
        assert_eq!(f.dims(), BASELINE_DIMS);
        let (color, gradient) = f.values().split_at(COLOR_BLOCK_LEN);
        assert!(gradient.iter().all(|&v| v == 0.0));
        let first = &color[..COLOR_STATS];
        for cell in color.chunks(COLOR_STATS) {
            assert_eq!(cell, first);
        }
    }

    #[test]
    fn duplicate_crops_give_identical_vectors() {
        let crop = Image::from_fn(40, 25, 3, |x, y, c| ((x * 7 + y * 3 + c) % 10) as f32 / 10.0).unwrap();
        let a = extract_baseline(&crop).unwrap();
        let b = extract_baseline(&crop.clone()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.euclidean(&b), 0.0);
    }

    #[test]
    fn brightness_shift_keeps_gradient_block() {
        let crop =
            Image::from_fn(
                48,
                48,
                3,
                |x, y, _| {
                    if (x as i32 - 24).pow(2) + (y as i32 - 24).pow(2) < 200 {
                        0.2
                    } else {
                        0.6
                    }
                },
            )
            .unwrap();
        let brighter = crop.map(|v| v + 0.1);
        let a = extract_baseline(&crop).unwrap();
        let b = extract_baseline(&brighter).unwrap();
        let ga = &a.values()[COLOR_BLOCK_LEN..];
        let gb = &b.values()[COLOR_BLOCK_LEN..];
        let max_diff = ga.iter().zip(gb).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(max_diff < 1e-4, "gradient block moved by {max_diff}");
        assert!(a.values()[..COLOR_BLOCK_LEN] != b.values()[..COLOR_BLOCK_LEN]);
    }

    #[test]
    fn profiles() {
        assert_eq!(ExtractorProfile::by_name("vgg19-block4-5").unwrap().dims, 1024);
        assert_eq!(ExtractorProfile::by_name("resnet-conv").unwrap().dims, 100_352);
        assert_eq!(ExtractorProfile::by_name("baseline").unwrap().dims, 640);
        assert_eq!(ExtractorProfile::by_name("external:12").unwrap().dims, 12);
        assert!(ExtractorProfile::by_name("external:0").is_err());
        assert!(ExtractorProfile::by_name("vgg99").is_err());
    }

    fn file_bytes(dims: usize, n: usize) -> Vec<u8> {
        let rows: Vec<Vec<f32>> = (0..n).map(|i| (0..dims).map(|d| (i * dims + d) as f32 * 0.5).collect()).collect();
        let recs: Vec<(u64, &[f32])> = rows.iter().enumerate().map(|(i, r)| (i as u64 + 10, r.as_slice())).collect();
        encode_features(dims, &recs).unwrap()
    }

    #[test]
    fn decode_happy_path() {
        let t = decode_features(&file_bytes(1024, 2), Some(1024)).unwrap();
        assert_eq!(t.ids, vec![10, 11]);
        assert_eq!(t.row(1)[3], (1024 + 3) as f32 * 0.5);
    }

    #[test]
    fn decode_errors_are_distinct() {
        let bytes = file_bytes(1024, 2);
        assert_eq!(
            decode_features(&bytes, Some(2048)),
            Err(FormatError::DimensionMismatch { expected: 2048, found: 1024 })
        );
        assert!(matches!(decode_features(&bytes[..bytes.len() - 3], Some(1024)), Err(FormatError::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[..8].copy_from_slice(b"PSHASH01");
        assert!(matches!(decode_features(&bad, None), Err(FormatError::BadMagic { .. })));
        let mut long = bytes;
        long.push(0);
        assert_eq!(decode_features(&long, None), Err(FormatError::TrailingBytes(1)));
        assert!(matches!(decode_features(b"PSFEAT01\x01\x00", None), Err(FormatError::Truncated { .. })));
    }

    #[test]
    fn header_layout_is_exact() {
        let bytes = encode_features(2, &[(7, &[1.0, -2.0][..])]).unwrap();
        let mut expected = b"PSFEAT01".to_vec();
        expected.extend([1, 0, 0, 0, 2, 0, 0, 0]);
        expected.extend(7u64.to_le_bytes());
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    proptest! {
        #[test]
        fn write_then_load_is_bit_exact(
            rows in proptest::collection::vec(proptest::collection::vec(-1e6f32..1e6, 5), 0..6),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("f.psfeat");
            let recs: Vec<(u64, &[f32])> = rows.iter().enumerate().map(|(i, r)| (i as u64 * 3, r.as_slice())).collect();
            write_feature_file(&path, 5, &recs).unwrap();
            let loaded = load_external_features(&path, &ExtractorProfile::external("t", 5)).unwrap();
            prop_assert_eq!(loaded.len(), rows.len());
            for ((id, v), (i, r)) in loaded.iter().zip(rows.iter().enumerate()) {
                prop_assert_eq!(*id, i as u64 * 3);
                let same = v.values().iter().zip(r).all(|(a, b)| a.to_bits() == b.to_bits());
                prop_assert!(same);
            }
        }
    }
}
