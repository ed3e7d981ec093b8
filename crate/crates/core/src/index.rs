//! The offline phase: proposals for every page, one descriptor and one binary
//! code per surviving region, persisted as an immutable index directory:
//!
//! ```text
//! <dir>/meta.json        profile, binarizer, pages, entries
//! <dir>/features.psfeat  raw descriptors (PSFEAT01)
//! <dir>/codes.pshash     binary codes (PSHASH01)
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::features::{
    encode_features, extract_baseline, l2_normalize, read_feature_table, ExtractorProfile, FeatureTable, FeatureVector,
    HEADER_LEN,
};
use crate::hashing::{
    binarize_into, fit_binarizer_rows, read_code_file, words_for, write_code_file, BinarizerParams, CodeTable,
};
use crate::imgproc::Image;
use crate::proposals::{propose, ProposalCounts, ProposalParams};

pub const META_FILE: &str = "meta.json";
pub const FEATURES_FILE: &str = "features.psfeat";
pub const CODES_FILE: &str = "codes.pshash";
pub const FORMAT_VERSION: &str = "docspot-index/1";

/// A decoded page and where it came from.
#[derive(Debug, Clone)]
pub struct PageInput {
    pub id: String,
    pub path: String,
    pub image: Image,
}

/// Reads every PNG/JPEG in `dir`, ordered by file name; page ids are the
/// file stems.
pub fn load_pages(dir: &Path) -> Result<Vec<PageInput>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Empty(format!("no PNG or JPEG pages in {}", dir.display())));
    }
    paths
        .into_par_iter()
        .map(|p| {
            Ok(PageInput {
                id: p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string(),
                image: Image::load(&p)?,
                path: p.to_string_lossy().into_owned(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageRecord {
    pub id: String,
    pub path: String,
    pub width: u32,
    pub height: u32,
    pub counts: ProposalCounts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub region_id: u64,
    pub page_id: String,
    pub bbox: BoundingBox,
    /// Byte offset of the record in `features.psfeat`.
    pub feature_offset: u64,
    /// Byte offset of the record in `codes.pshash`.
    pub code_offset: u64,
}

/// Proposals of every page with sequential region ids, before description.
#[derive(Debug, Clone)]
pub struct ProposalTable {
    pub pages: Vec<PageRecord>,
    /// `(region_id, page index, bbox)` in page order, then proposal order.
    pub regions: Vec<(u64, usize, BoundingBox)>,
}

impl ProposalTable {
    pub fn totals(&self) -> ProposalCounts {
        let mut total = ProposalCounts::default();
        for p in &self.pages {
            total.add(&p.counts);
        }
        total
    }
}

/// Runs the proposal pipeline on every page (in parallel) and numbers the
/// surviving regions.
pub fn propose_pages(pages: &[PageInput], params: &ProposalParams) -> Result<ProposalTable> {
    params.validate()?;
    let sets = pages.par_iter().map(|p| propose(&p.image, params)).collect::<Result<Vec<_>>>()?;
    let mut records = Vec::with_capacity(pages.len());
    let mut regions = Vec::new();
    for (i, (page, set)) in pages.iter().zip(sets).enumerate() {
        for b in set.boxes {
            regions.push((regions.len() as u64, i, b));
        }
        records.push(PageRecord {
            id: page.id.clone(),
            path: page.path.clone(),
            width: page.image.width() as u32,
            height: page.image.height() as u32,
            counts: set.counts,
        });
    }
    Ok(ProposalTable { pages: records, regions })
}

#[derive(Serialize)]
struct ManifestRow<'a> {
    region_id: u64,
    image_path: &'a str,
    x: u32,
    y: u32,
    w: u32,
    h: u32,
}

/// Crops manifest for an external feature exporter: one CSV row per region
/// with `region_id,image_path,x,y,w,h`.
pub fn write_crops_manifest(path: &Path, table: &ProposalTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for &(region_id, page, b) in &table.regions {
        w.serialize(ManifestRow { region_id, image_path: &table.pages[page].path, x: b.x, y: b.y, w: b.w, h: b.h })
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Where region descriptors come from.
#[derive(Debug, Clone)]
pub enum FeatureSource {
    /// The built-in extractor runs on every crop.
    Baseline,
    /// Precomputed vectors keyed by region id.
    External { profile: ExtractorProfile, table: FeatureTable },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildParams {
    pub proposals: ProposalParams,
    /// L2-normalize descriptors before ranking and hashing.
    pub normalize: bool,
}

impl Default for BuildParams {
    fn default() -> Self {
        Self { proposals: ProposalParams::default(), normalize: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    format: String,
    profile: ExtractorProfile,
    normalized: bool,
    binarizer: BinarizerParams,
    pages: Vec<PageRecord>,
    entries: Vec<IndexEntry>,
}

/// Payload sizes of an index, counting only the descriptors and codes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StorageReport {
    pub records: u64,
    pub dims: u64,
    pub float_bytes: u64,
    pub binary_bytes: u64,
    pub ratio: f64,
}

const GIB: f64 = (1u64 << 30) as f64;

impl StorageReport {
    pub fn for_dims(records: u64, dims: u64) -> Self {
        let float_bytes = records * dims * 4;
        let binary_bytes = records * words_for(dims as usize) as u64 * 8;
        Self {
            records,
            dims,
            float_bytes,
            binary_bytes,
            ratio: if binary_bytes == 0 { 0.0 } else { float_bytes as f64 / binary_bytes as f64 },
        }
    }

    pub fn float_gib(&self) -> f64 {
        self.float_bytes as f64 / GIB
    }

    pub fn binary_gib(&self) -> f64 {
        self.binary_bytes as f64 / GIB
    }
}

/// An immutable, query-ready index.
#[derive(Debug, Clone)]
pub struct SearchIndex {
    profile: ExtractorProfile,
    normalized: bool,
    binarizer: BinarizerParams,
    pages: Vec<PageRecord>,
    entries: Vec<IndexEntry>,
    /// Descriptors as ingested, row-major.
    raw: Vec<f32>,
    /// Ranking-space descriptors when they differ from `raw`.
    normalized_rows: Option<Vec<f32>>,
    codes: Vec<u64>,
}

fn normalize_rows(dims: usize, raw: &[f32]) -> Vec<f32> {
    raw.par_chunks(dims)
        .flat_map_iter(|row| {
            let v = FeatureVector::new(row.to_vec()).expect("finite non-empty row");
            let n = l2_normalize(&v);
            if n.degenerate {
                log::warn!("zero descriptor left unnormalized");
            }
            n.vector.into_values()
        })
        .collect()
}

impl SearchIndex {
    /// Assembles an index from descriptors already paired with regions.
    /// `regions` gives `(page_id, bbox)` per row of `raw`; region ids are the
    /// row numbers.
    pub fn from_rows(
        profile: ExtractorProfile,
        pages: Vec<PageRecord>,
        regions: Vec<(String, BoundingBox)>,
        raw: Vec<f32>,
        normalize: bool,
    ) -> Result<Self> {
        let dims = profile.dims;
        if dims == 0 || raw.len() != regions.len() * dims {
            return Err(Error::DimensionMismatch { expected: regions.len() * dims, found: raw.len() });
        }
        if regions.is_empty() {
            return Err(Error::Empty("index without regions".into()));
        }
        if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite descriptor value in row {}", i / dims)));
        }
        let normalized_rows = normalize.then(|| normalize_rows(dims, &raw));
        let ranking = normalized_rows.as_deref().unwrap_or(&raw);
        let binarizer = fit_binarizer_rows(dims, ranking)?;
        let n_words = words_for(dims);
        let mut codes = vec![0u64; regions.len() * n_words];
        codes
            .par_chunks_mut(n_words)
            .zip(ranking.par_chunks(dims))
            .for_each(|(out, row)| binarize_into(row, &binarizer, out));
        let feature_record = (8 + 4 * dims) as u64;
        let code_record = (8 + 8 * n_words) as u64;
        let entries = regions
            .into_iter()
            .enumerate()
            .map(|(i, (page_id, bbox))| IndexEntry {
                region_id: i as u64,
                page_id,
                bbox,
                feature_offset: HEADER_LEN as u64 + i as u64 * feature_record,
                code_offset: HEADER_LEN as u64 + i as u64 * code_record,
            })
            .collect();
        Ok(Self { profile, normalized: normalize, binarizer, pages, entries, raw, normalized_rows, codes })
    }

    pub fn profile(&self) -> &ExtractorProfile {
        &self.profile
    }

    pub fn dims(&self) -> usize {
        self.profile.dims
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn binarizer(&self) -> &BinarizerParams {
        &self.binarizer
    }

    pub fn pages(&self) -> &[PageRecord] {
        &self.pages
    }

    pub fn page(&self, id: &str) -> Option<&PageRecord> {
        self.pages.iter().find(|p| p.id == id)
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn words_per_code(&self) -> usize {
        words_for(self.dims())
    }

    /// Descriptors in the space used for ranking, row-major.
    pub fn ranking_features(&self) -> &[f32] {
        self.normalized_rows.as_deref().unwrap_or(&self.raw)
    }

    pub fn raw_features(&self) -> &[f32] {
        &self.raw
    }

    /// All codes, `words_per_code()` words per entry.
    pub fn codes(&self) -> &[u64] {
        &self.codes
    }

    pub fn storage_report(&self) -> StorageReport {
        StorageReport::for_dims(self.len() as u64, self.dims() as u64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let dims = self.dims();
        let records: Vec<(u64, &[f32])> =
            self.entries.iter().zip(self.raw.chunks(dims)).map(|(e, row)| (e.region_id, row)).collect();
        fs::write(dir.join(FEATURES_FILE), encode_features(dims, &records)?)?;
        let codes =
            CodeTable { dims, ids: self.entries.iter().map(|e| e.region_id).collect(), words: self.codes.clone() };
        write_code_file(&dir.join(CODES_FILE), &codes)?;
        let meta = Meta {
            format: FORMAT_VERSION.into(),
            profile: self.profile.clone(),
            normalized: self.normalized,
            binarizer: self.binarizer.clone(),
            pages: self.pages.clone(),
            entries: self.entries.clone(),
        };
        let mut json = serde_json::to_vec_pretty(&meta)?;
        json.push(b'\n');
        fs::write(dir.join(META_FILE), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: Meta = serde_json::from_slice(&fs::read(dir.join(META_FILE))?)?;
        if meta.format != FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!("unsupported index format {:?}", meta.format)));
        }
        let dims = meta.profile.dims;
        let features = read_feature_table(&dir.join(FEATURES_FILE), Some(dims))?;
        let codes = read_code_file(&dir.join(CODES_FILE), Some(dims))?;
        let ids: Vec<u64> = meta.entries.iter().map(|e| e.region_id).collect();
        if features.ids != ids || codes.ids != ids {
            return Err(Error::InvalidArgument(format!(
                "index payloads disagree with meta.json ({} entries, {} descriptors, {} codes)",
                ids.len(),
                features.len(),
                codes.len()
            )));
        }
        if meta.binarizer.dims() != dims {
            return Err(Error::DimensionMismatch { expected: dims, found: meta.binarizer.dims() });
        }
        let normalized_rows = meta.normalized.then(|| normalize_rows(dims, &features.values));
        Ok(Self {
            profile: meta.profile,
            normalized: meta.normalized,
            binarizer: meta.binarizer,
            pages: meta.pages,
            entries: meta.entries,
            raw: features.values,
            normalized_rows,
            codes: codes.words,
        })
    }
}

/// Describes every proposed region and assembles the index.
pub fn build_from_proposals(
    pages: &[PageInput],
    table: ProposalTable,
    source: &FeatureSource,
    normalize: bool,
) -> Result<SearchIndex> {
    if table.regions.is_empty() {
        let t = table.totals();
        return Err(Error::EmptyIndex { raw: t.raw, after_size: t.after_size, after_edges: t.after_edges });
    }
    let (profile, raw) = match source {
        FeatureSource::Baseline => {
            let profile = ExtractorProfile::baseline();
            let rows = table
                .regions
                .par_iter()
                .map(|&(_, page, b)| extract_baseline(&pages[page].image.crop(&b)?).map(FeatureVector::into_values))
                .collect::<Result<Vec<_>>>()?;
            (profile, rows.concat())
        }
        FeatureSource::External { profile, table: ext } => {
            if ext.dims != profile.dims {
                return Err(Error::DimensionMismatch { expected: profile.dims, found: ext.dims });
            }
            if ext.len() != table.regions.len() {
                return Err(Error::InvalidArgument(format!(
                    "feature file has {} records but {} regions were proposed",
                    ext.len(),
                    table.regions.len()
                )));
            }
            let by_id: HashMap<u64, usize> = ext.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
            let mut raw = Vec::with_capacity(ext.values.len());
            for &(id, _, _) in &table.regions {
                let row = by_id
                    .get(&id)
                    .ok_or_else(|| Error::InvalidArgument(format!("feature file has no record for region {id}")))?;
                raw.extend_from_slice(ext.row(*row));
            }
            (profile.clone(), raw)
        }
    };
    let regions = table.regions.iter().map(|&(_, page, b)| (table.pages[page].id.clone(), b)).collect();
    SearchIndex::from_rows(profile, table.pages, regions, raw, normalize)
}

/// Offline phase end to end: propose, describe, hash.
pub fn build_index(pages: &[PageInput], params: &BuildParams, source: &FeatureSource) -> Result<SearchIndex> {
    if pages.is_empty() {
        return Err(Error::Empty("no pages to index".into()));
    }
    let table = propose_pages(pages, &params.proposals)?;
    build_from_proposals(pages, table, source, params.normalize)
}
