//! Graph-based over-segmentation (Felzenszwalb & Huttenlocher) on the
//! 8-connected pixel grid.
//!
//! Edge weights are Euclidean color distances measured on a 0 to 255 scale, so
//! `k` has the same meaning as in the original reference implementation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::{gaussian_blur, Image};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationParams {
    /// Scale parameter: larger values favour larger components.
    pub k: f64,
    /// Components smaller than this are merged into a neighbour afterwards.
    pub min_size: usize,
    /// Gaussian pre-smoothing; 0 disables it.
    pub sigma: f64,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        Self { k: 200.0, min_size: 50, sigma: 0.8 }
    }
}

impl SegmentationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::InvalidArgument(format!("segmentation k must be > 0, got {}", self.k)));
        }
        if self.min_size == 0 {
            return Err(Error::InvalidArgument("segmentation min_size must be >= 1".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("segmentation sigma must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Per-pixel segment ids in `0..segment_count`, numbered in row-major order of
/// each segment's first pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentLabels {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub segment_count: usize,
}

impl SegmentLabels {
    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Pixel count of every segment.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.segment_count];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Edge {
    pub weight: f32,
    pub a: u32,
    pub b: u32,
}

struct Forest {
    parent: Vec<u32>,
    size: Vec<u32>,
    threshold: Vec<f32>,
}

impl Forest {
    fn new(n: usize, k: f32) -> Self {
        Self { parent: (0..n as u32).collect(), size: vec![1; n], threshold: vec![k; n] }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    /// Links two roots, returning the surviving root.
    fn join(&mut self, a: u32, b: u32) -> u32 {
        let (big, small) = if self.size[a as usize] >= self.size[b as usize] { (a, b) } else { (b, a) };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
        big
    }
}

/// 8-connected grid edges, sorted ascending by weight with ties broken by the
/// smaller pixel index, then the larger.
pub(crate) fn grid_edges(img: &Image) -> Vec<Edge> {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let dist = |p: usize, q: usize| -> f32 {
        let (a, b) = (&img.data()[p * ch..p * ch + ch], &img.data()[q * ch..q * ch + ch]);
        let sq: f32 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        sq.sqrt() * 255.0
    };
    let mut edges = Vec::with_capacity(w * h * 4);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut push = |q: usize| {
                let (a, b) = (p.min(q), p.max(q));
                edges.push(Edge { weight: dist(p, q), a: a as u32, b: b as u32 });
            };
            if x + 1 < w {
                push(p + 1);
            }
            if y + 1 < h {
                push(p + w);
                if x + 1 < w {
                    push(p + w + 1);
                }
                if x > 0 {
                    push(p + w - 1);
                }
            }
        }
    }
    edges.sort_unstable_by(|e, f| e.weight.total_cmp(&f.weight).then(e.a.cmp(&f.a)).then(e.b.cmp(&f.b)));
    edges
}

/// Runs the merge predicate over pre-sorted edges.
pub(crate) fn segment_sorted_edges(
    width: usize,
    height: usize,
    edges: &[Edge],
    k: f64,
    min_size: usize,
) -> SegmentLabels {
    let n = width * height;
    let k = k as f32;
    let mut forest = Forest::new(n, k);
    for e in edges {
        let (ra, rb) = (forest.find(e.a), forest.find(e.b));
        if ra == rb {
            continue;
        }
        if e.weight <= forest.threshold[ra as usize] && e.weight <= forest.threshold[rb as usize] {
            let root = forest.join(ra, rb);
            // Edges arrive in ascending order, so this edge is the largest
            // internal difference of the merged component.
            forest.threshold[root as usize] = e.weight + k / forest.size[root as usize] as f32;
        }
    }
    for e in edges {
        let (ra, rb) = (forest.find(e.a), forest.find(e.b));
        if ra != rb
            && ((forest.size[ra as usize] as usize) < min_size || (forest.size[rb as usize] as usize) < min_size)
        {
            forest.join(ra, rb);
        }
    }

    let mut remap = vec![u32::MAX; n];
    let mut labels = Vec::with_capacity(n);
    let mut next = 0u32;
    for p in 0..n as u32 {
        let root = forest.find(p) as usize;
        if remap[root] == u32::MAX {
            remap[root] = next;
            next += 1;
        }
        labels.push(remap[root]);
    }
    SegmentLabels { width, height, labels, segment_count: next as usize }
}

pub fn felzenszwalb_segment(img: &Image, params: &SegmentationParams) -> Result<SegmentLabels> {
    params.validate()?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Empty("cannot segment an empty image".into()));
    }
    let smooth = gaussian_blur(img, params.sigma);
    let edges = grid_edges(&smooth);
    Ok(segment_sorted_edges(img.width(), img.height(), &edges, params.k, params.min_size))
}
