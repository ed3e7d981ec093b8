//! Candidate regions: selective search over an initial over-segmentation,
//! followed by the size filter and the edge-density filter that rejects
//! stains, blank background and page borders.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap, HashSet};

use serde::{Deserialize, Serialize};

pub use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::imgproc::{blur_plane, edge_binarize, mean_intensity, plane, sobel_plane, BinaryImage, EdgeParams, Image};
use crate::segmentation::{felzenszwalb_segment, SegmentLabels, SegmentationParams};

pub const COLOR_BINS: usize = 25;
pub const COLOR_HIST_LEN: usize = 3 * COLOR_BINS;
pub const TEXTURE_ORIENTATIONS: usize = 8;
pub const TEXTURE_BINS: usize = 10;
pub const TEXTURE_HIST_LEN: usize = 3 * TEXTURE_ORIENTATIONS * TEXTURE_BINS;

/// Settings of the invalid-region filter and the size filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterParams {
    /// Minimum edge density, globally and per sector.
    pub alpha: f64,
    pub sector_count: usize,
    pub min_side: u32,
    /// Largest allowed box side as a fraction of the page side.
    pub max_side_frac: f64,
    /// Edge detector used to build the binary edge map of a crop.
    pub edges: EdgeParams,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self { alpha: 0.06, sector_count: 8, min_side: 10, max_side_frac: 0.9, edges: EdgeParams::default() }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.sector_count != 8 {
            return Err(Error::InvalidArgument(format!("sector_count must be 8, got {}", self.sector_count)));
        }
        if !(self.max_side_frac > 0.0 && self.max_side_frac <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "max_side_frac must lie in (0, 1], got {}",
                self.max_side_frac
            )));
        }
        self.edges.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalParams {
    pub segmentation: SegmentationParams,
    pub filter: FilterParams,
}

impl ProposalParams {
    pub fn validate(&self) -> Result<()> {
        self.segmentation.validate()?;
        self.filter.validate()
    }
}

/// A region of the selective-search hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionNode {
    pub pixel_count: usize,
    pub bbox: BoundingBox,
    /// 25 HSV bins per channel, L1-normalized over all 75 bins.
    pub color_hist: Vec<f64>,
    /// 10 bins × 8 orientations × 3 channels, L1-normalized.
    pub texture_hist: Vec<f64>,
}

impl RegionNode {
    /// Pixel-count weighted combination of two regions.
    pub fn merge(&self, other: &RegionNode) -> RegionNode {
        let n = (self.pixel_count + other.pixel_count) as f64;
        let (wa, wb) = (self.pixel_count as f64 / n, other.pixel_count as f64 / n);
        let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * wa + y * wb).collect();
        RegionNode {
            pixel_count: self.pixel_count + other.pixel_count,
            bbox: self.bbox.union(&other.bbox),
            color_hist: mix(&self.color_hist, &other.color_hist),
            texture_hist: mix(&self.texture_hist, &other.texture_hist),
        }
    }
}

/// The four similarity components, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub color: f64,
    pub texture: f64,
    pub size: f64,
    pub fill: f64,
}

impl Similarity {
    pub fn total(&self) -> f64 {
        self.color + self.texture + self.size + self.fill
    }
}

fn histogram_intersection(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.min(*y)).sum::<f64>().clamp(0.0, 1.0)
}

pub fn similarity_components(a: &RegionNode, b: &RegionNode, image_size: usize) -> Similarity {
    let image_size = image_size.max(1) as f64;
    let joint = (a.pixel_count + b.pixel_count) as f64;
    let slack = a.bbox.union(&b.bbox).area() as f64 - joint;
    Similarity {
        color: histogram_intersection(&a.color_hist, &b.color_hist),
        texture: histogram_intersection(&a.texture_hist, &b.texture_hist),
        size: (1.0 - joint / image_size).clamp(0.0, 1.0),
        fill: (1.0 - slack / image_size).clamp(0.0, 1.0),
    }
}

/// Combined color + texture + size + fill similarity in `[0, 4]`.
pub fn region_similarity(a: &RegionNode, b: &RegionNode, image_size: usize) -> f64 {
    similarity_components(a, b, image_size).total()
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let sat = if max <= 0.0 { 0.0 } else { delta / max };
    [hue, sat, max]
}

fn bin(value: f32, bins: usize) -> usize {
    ((value.clamp(0.0, 1.0) * bins as f32) as usize).min(bins - 1)
}

/// Per-pixel histogram bin indices used to build region descriptors.
pub struct PixelBins {
    width: usize,
    /// 3 color bin indices per pixel, already offset into the 75-bin layout.
    color: Vec<u16>,
    /// 24 texture bin indices per pixel, offset into the 240-bin layout.
    texture: Vec<u16>,
}

impl PixelBins {
    pub fn new(img: &Image) -> PixelBins {
        let rgb = img.to_rgb();
        let (w, h) = (rgb.width(), rgb.height());
        let mut color = Vec::with_capacity(w * h * 3);
        for p in rgb.data().chunks_exact(3) {
            let hsv = rgb_to_hsv(p[0], p[1], p[2]);
            for (c, v) in hsv.into_iter().enumerate() {
                color.push((c * COLOR_BINS + bin(v, COLOR_BINS)) as u16);
            }
        }
        // Gaussian derivatives (sigma 1) in 8 orientations, half-wave
        // rectified; responses are scaled so a unit step saturates the bins.
        let orientations: Vec<(f64, f64)> = (0..TEXTURE_ORIENTATIONS)
            .map(|o| {
                let theta = o as f64 * std::f64::consts::TAU / TEXTURE_ORIENTATIONS as f64;
                (theta.cos(), theta.sin())
            })
            .collect();
        let mut texture = vec![0u16; w * h * 3 * TEXTURE_ORIENTATIONS];
        for c in 0..3 {
            let smooth = blur_plane(&plane(&rgb, c), w, h, 1.0);
            let (gx, gy) = sobel_plane(&smooth, w, h);
            for i in 0..w * h {
                for (o, (cos, sin)) in orientations.iter().enumerate() {
                    let response = ((gx[i] * cos + gy[i] * sin) / 4.0).max(0.0) as f32;
                    let slot = c * TEXTURE_ORIENTATIONS + o;
                    texture[i * 3 * TEXTURE_ORIENTATIONS + slot] =
                        (slot * TEXTURE_BINS + bin(response, TEXTURE_BINS)) as u16;
                }
            }
        }
        PixelBins { width: w, color, texture }
    }

    /// Descriptor of an arbitrary pixel set given as flat indices.
    pub fn region(&self, pixels: impl IntoIterator<Item = usize>) -> Option<RegionNode> {
        let mut color = vec![0f64; COLOR_HIST_LEN];
        let mut texture = vec![0f64; TEXTURE_HIST_LEN];
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut count = 0usize;
        for p in pixels {
            self.accumulate(p, &mut color, &mut texture);
            let (x, y) = (p % self.width, p / self.width);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            count += 1;
        }
        (count > 0).then(|| {
            finish_node(count, BoundingBox::from_corners(x0 as u32, y0 as u32, x1 as u32, y1 as u32), color, texture)
        })
    }

    fn accumulate(&self, p: usize, color: &mut [f64], texture: &mut [f64]) {
        for &b in &self.color[p * 3..p * 3 + 3] {
            color[b as usize] += 1.0;
        }
        let stride = 3 * TEXTURE_ORIENTATIONS;
        for &b in &self.texture[p * stride..(p + 1) * stride] {
            texture[b as usize] += 1.0;
        }
    }
}

fn finish_node(count: usize, bbox: BoundingBox, mut color: Vec<f64>, mut texture: Vec<f64>) -> RegionNode {
    let cn = (count * 3) as f64;
    let tn = (count * 3 * TEXTURE_ORIENTATIONS) as f64;
    color.iter_mut().for_each(|v| *v /= cn);
    texture.iter_mut().for_each(|v| *v /= tn);
    RegionNode { pixel_count: count, bbox, color_hist: color, texture_hist: texture }
}

/// Descriptors of every initial segment, indexed by segment id.
pub fn initial_regions(seg: &SegmentLabels, img: &Image) -> Result<Vec<RegionNode>> {
    if seg.width != img.width() || seg.height != img.height() {
        return Err(Error::InvalidArgument(format!(
            "segmentation {}x{} does not match image {}x{}",
            seg.width,
            seg.height,
            img.width(),
            img.height()
        )));
    }
    let bins = PixelBins::new(img);
    let n = seg.segment_count;
    let mut color = vec![vec![0f64; COLOR_HIST_LEN]; n];
    let mut texture = vec![vec![0f64; TEXTURE_HIST_LEN]; n];
    let mut count = vec![0usize; n];
    let mut corners = vec![(usize::MAX, usize::MAX, 0usize, 0usize); n];
    for (p, &l) in seg.labels.iter().enumerate() {
        let l = l as usize;
        bins.accumulate(p, &mut color[l], &mut texture[l]);
        count[l] += 1;
        let (x, y) = (p % seg.width, p / seg.width);
        let c = &mut corners[l];
        *c = (c.0.min(x), c.1.min(y), c.2.max(x), c.3.max(y));
    }
    Ok(color
        .into_iter()
        .zip(texture)
        .zip(count)
        .zip(corners)
        .map(|(((c, t), n), (x0, y0, x1, y1))| {
            finish_node(n, BoundingBox::from_corners(x0 as u32, y0 as u32, x1 as u32, y1 as u32), c, t)
        })
        .collect())
}

/// Pairs of distinct segment ids that touch in the 8-neighbourhood, as
/// `(smaller, larger)`.
pub fn adjacent_pairs(seg: &SegmentLabels) -> BTreeSet<(usize, usize)> {
    let (w, h) = (seg.width, seg.height);
    let mut pairs = BTreeSet::new();
    for y in 0..h {
        for x in 0..w {
            let a = seg.label(x, y) as usize;
            let mut see = |nx: usize, ny: usize| {
                let b = seg.label(nx, ny) as usize;
                if a != b {
                    pairs.insert((a.min(b), a.max(b)));
                }
            };
            if x + 1 < w {
                see(x + 1, y);
            }
            if y + 1 < h {
                see(x, y + 1);
                if x + 1 < w {
                    see(x + 1, y + 1);
                }
                if x > 0 {
                    see(x - 1, y + 1);
                }
            }
        }
    }
    pairs
}

#[derive(PartialEq)]
struct Candidate {
    score: f64,
    a: usize,
    b: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // Max-heap order: highest score first, then the smallest (a, b) pair.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score.total_cmp(&other.score).then_with(|| Reverse((self.a, self.b)).cmp(&Reverse((other.a, other.b))))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// One merge step of the hierarchy: regions `a` and `b` became `merged`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MergeStep {
    pub a: usize,
    pub b: usize,
    pub merged: usize,
}

/// Full selective-search hierarchy: all regions (initial segments first,
/// then one per merge) and the merge sequence.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub regions: Vec<RegionNode>,
    pub merges: Vec<MergeStep>,
}

/// Greedy hierarchical grouping: repeatedly merges the most similar pair of
/// neighbouring regions until no neighbours remain. Ties go to the pair with
/// the smaller region ids.
pub fn merge_hierarchy(seg: &SegmentLabels, img: &Image) -> Result<Hierarchy> {
    let mut regions = initial_regions(seg, img)?;
    let image_size = seg.width * seg.height;
    let mut neighbours: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); regions.len()];
    let mut heap = BinaryHeap::new();
    for (a, b) in adjacent_pairs(seg) {
        neighbours[a].insert(b);
        neighbours[b].insert(a);
        heap.push(Candidate { score: region_similarity(&regions[a], &regions[b], image_size), a, b });
    }
    let mut alive = vec![true; regions.len()];
    let mut merges = Vec::new();
    while let Some(Candidate { a, b, .. }) = heap.pop() {
        if !alive[a] || !alive[b] {
            continue;
        }
        let t = regions.len();
        regions.push(regions[a].merge(&regions[b]));
        alive[a] = false;
        alive[b] = false;
        alive.push(true);
        merges.push(MergeStep { a, b, merged: t });

        let mut joined: BTreeSet<usize> = &neighbours[a] | &neighbours[b];
        joined.remove(&a);
        joined.remove(&b);
        for &n in &joined {
            neighbours[n].remove(&a);
            neighbours[n].remove(&b);
            neighbours[n].insert(t);
            heap.push(Candidate { score: region_similarity(&regions[n], &regions[t], image_size), a: n, b: t });
        }
        neighbours[a].clear();
        neighbours[b].clear();
        neighbours.push(joined);
    }
    Ok(Hierarchy { regions, merges })
}

/// Bounding boxes of every region of the hierarchy (initial segments in id
/// order, then merged regions in merge order), first occurrence kept.
pub fn selective_search(seg: &SegmentLabels, img: &Image) -> Result<Vec<BoundingBox>> {
    let hierarchy = merge_hierarchy(seg, img)?;
    let mut seen = HashSet::new();
    Ok(hierarchy.regions.iter().map(|r| r.bbox).filter(|b| seen.insert(*b)).collect())
}

/// Outcome of the edge-density test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FilterVerdict {
    Valid,
    /// Global edge density below alpha.
    SparseEdges,
    /// More than half of the sectors are below alpha; carries how many had
    /// been counted when the test fired.
    EmptySectors(usize),
}

impl FilterVerdict {
    pub fn is_valid(&self) -> bool {
        matches!(self, FilterVerdict::Valid)
    }
}

/// Half-open `[start, end)` spans splitting `len` into `count` nearly equal
/// parts; some are empty when `len < count`.
fn spans(len: usize, count: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..count).map(move |i| (i * len / count, (i + 1) * len / count))
}

/// Means of the sectors of an edge map: vertical strips, or horizontal strips
/// when the map is narrower than the sector count. Empty sectors read as 0.
pub fn sector_means(edges: &BinaryImage, sector_count: usize) -> Vec<f64> {
    let (w, h) = (edges.width(), edges.height());
    if w >= sector_count || h < sector_count {
        spans(w, sector_count).map(|(x0, x1)| edges.window_mean(x0, x1, 0, h).unwrap_or(0.0)).collect()
    } else {
        spans(h, sector_count).map(|(y0, y1)| edges.window_mean(0, w, y0, y1).unwrap_or(0.0)).collect()
    }
}

/// The invalid-region test on an already binarized edge map.
pub fn classify_edge_map(edges: &BinaryImage, params: &FilterParams) -> FilterVerdict {
    let mean = mean_intensity(edges).unwrap_or(0.0);
    if mean < params.alpha {
        return FilterVerdict::SparseEdges;
    }
    let mut sparse = 0;
    for m in sector_means(edges, params.sector_count) {
        if m < params.alpha {
            sparse += 1;
        }
        if sparse > params.sector_count / 2 {
            return FilterVerdict::EmptySectors(sparse);
        }
    }
    FilterVerdict::Valid
}

/// Edge-density verdict for the crop of one proposal.
pub fn filter_verdict(crop: &Image, params: &FilterParams) -> Result<FilterVerdict> {
    let edges = edge_binarize(&crop.to_gray_lossy(), &params.edges)?;
    Ok(classify_edge_map(&edges, params))
}

/// `true` when the crop looks like an object rather than background, a stain
/// or a page border.
pub fn filter_invalid_region(crop: &Image, params: &FilterParams) -> Result<bool> {
    Ok(filter_verdict(crop, params)?.is_valid())
}

/// Rejects boxes that are too small on either axis or span too much of the
/// page.
pub fn size_filter(b: &BoundingBox, page_w: u32, page_h: u32, params: &FilterParams) -> bool {
    b.w >= params.min_side
        && b.h >= params.min_side
        && f64::from(b.w) <= params.max_side_frac * f64::from(page_w)
        && f64::from(b.h) <= params.max_side_frac * f64::from(page_h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProposalCounts {
    pub raw: usize,
    pub after_size: usize,
    pub after_edges: usize,
}

impl ProposalCounts {
    pub fn add(&mut self, other: &ProposalCounts) {
        self.raw += other.raw;
        self.after_size += other.after_size;
        self.after_edges += other.after_edges;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub boxes: Vec<BoundingBox>,
    pub counts: ProposalCounts,
}

/// Full proposal pipeline for one page: segmentation, selective search, size
/// filter, edge-density filter. Order of the surviving boxes is preserved.
pub fn propose(page: &Image, params: &ProposalParams) -> Result<ProposalSet> {
    params.validate()?;
    let seg = felzenszwalb_segment(page, &params.segmentation)?;
    let raw = selective_search(&seg, page)?;
    let (pw, ph) = (page.width() as u32, page.height() as u32);
    let sized: Vec<BoundingBox> = raw.iter().filter(|b| size_filter(b, pw, ph, &params.filter)).copied().collect();
    let gray = page.to_gray_lossy();
    let mut boxes = Vec::with_capacity(sized.len());
    for b in &sized {
        if filter_invalid_region(&gray.crop(b)?, &params.filter)? {
            boxes.push(*b);
        }
    }
    Ok(ProposalSet {
        counts: ProposalCounts { raw: raw.len(), after_size: sized.len(), after_edges: boxes.len() },
        boxes,
    })
}
