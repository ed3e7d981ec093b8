//! Synthetic page sets with planted glyphs and exact ground truth.
//!
//! Pages are parchment-coloured with low-amplitude noise and faint ruled
//! lines. Each plant is one of five connected procedural glyphs (a capped
//! cross, a ring, a comb, a lattice and a zigzag) drawn in
//! solid ink; its ground-truth box is the tight bounding box of the ink.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::eval::{GroundTruth, GtQuery, Occurrence};
use crate::imgproc::Image;

const PARCHMENT: [f32; 3] = [0.93, 0.88, 0.76];
const INK: [f32; 3] = [0.22, 0.16, 0.10];
const RULE_DARKEN: f32 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlyphClass {
    Cross,
    Ring,
    Comb,
    Lattice,
    Zigzag,
}

impl GlyphClass {
    pub const ALL: [GlyphClass; 5] =
        [GlyphClass::Cross, GlyphClass::Ring, GlyphClass::Comb, GlyphClass::Lattice, GlyphClass::Zigzag];

    pub fn name(self) -> &'static str {
        match self {
            GlyphClass::Cross => "cross",
            GlyphClass::Ring => "ring",
            GlyphClass::Comb => "comb",
            GlyphClass::Lattice => "lattice",
            GlyphClass::Zigzag => "zigzag",
        }
    }

    /// Ink mask of a `size`×`size` cell, row-major. The ink touches all
    /// four sides of the cell, so the cell is the tight ink box. Every shape
    /// keeps strokes inside the cell as well as on its rim: edges on the rim
    /// of a tight crop are invisible to the edge filter.
    pub fn mask(self, size: usize, stroke: usize) -> Vec<bool> {
        let s = size as f64;
        let t = stroke as f64;
        let mid = (s - t) / 2.0;
        let band = |v: f64, lo: f64| v >= lo && v < lo + t;
        let mut m = vec![false; size * size];
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64, y as f64);
                m[y * size + x] = match self {
                    GlyphClass::Cross => {
                        let cap = |v: f64| v >= s / 4.0 && v < s - s / 4.0;
                        band(fx, mid)
                            || band(fy, mid)
                            || ((fx < t || fx >= s - t) && cap(fy))
                            || ((fy < t || fy >= s - t) && cap(fx))
                    }
                    GlyphClass::Ring => {
                        let c = (s - 1.0) / 2.0;
                        let r = ((fx - c).powi(2) + (fy - c).powi(2)).sqrt();
                        r <= s / 2.0 && r > s / 2.0 - t
                    }
                    GlyphClass::Comb => fx < t || fy < t || fy >= s - t || band(fy, mid),
                    GlyphClass::Lattice => {
                        let (a, b) = (s / 4.0 - t / 2.0, 3.0 * s / 4.0 - t / 2.0);
                        band(fx, a) || band(fx, b) || band(fy, a) || band(fy, b)
                    }
                    GlyphClass::Zigzag => {
                        // top bar, diagonal, bottom bar
                        let diag = {
                            let u = s - 1.0 - fy;
                            let lo = u * (s - t) / (s - 1.0);
                            fx >= lo && fx < lo + t
                        };
                        fy < t || fy >= s - t || diag
                    }
                };
            }
        }
        m
    }
}

impl fmt::Display for GlyphClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub page_count: usize,
    pub width: usize,
    pub height: usize,
    /// Side of every glyph in pixels.
    pub glyph_size: usize,
    pub stroke: usize,
    pub plants_per_page: usize,
    /// Peak amplitude of the uniform background noise, on the 0 to 1 scale.
    pub noise: f32,
    /// Vertical distance between ruled lines.
    pub line_spacing: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            page_count: 20,
            width: 384,
            height: 320,
            glyph_size: 36,
            stroke: 6,
            plants_per_page: 3,
            noise: 0.02,
            line_spacing: 64,
            seed: 7,
        }
    }
}

impl SynthSpec {
    fn columns(&self) -> usize {
        self.width / self.line_spacing
    }

    fn bands(&self) -> usize {
        self.height / self.line_spacing
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.page_count == 0 {
            return bad("page_count must be at least 1".into());
        }
        if !(0.0..=0.2).contains(&self.noise) {
            return bad(format!("noise must lie in [0, 0.2], got {}", self.noise));
        }
        if self.stroke == 0 || 2 * self.stroke >= self.glyph_size {
            return bad(format!("stroke {} does not fit glyph size {}", self.stroke, self.glyph_size));
        }
        if self.glyph_size + 4 > self.line_spacing {
            return bad(format!(
                "glyph size {} does not fit between ruled lines {} px apart",
                self.glyph_size, self.line_spacing
            ));
        }
        if self.glyph_size > self.width || self.glyph_size > self.height {
            return bad(format!("glyph size {} larger than the {}x{} page", self.glyph_size, self.width, self.height));
        }
        if self.plants_per_page > self.columns() * self.bands() {
            return bad(format!(
                "{} plants do not fit on a page with {} slots",
                self.plants_per_page,
                self.columns() * self.bands()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plant {
    pub page: String,
    pub class: GlyphClass,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    /// `(page id, image)` in page order.
    pub pages: Vec<(String, Image)>,
    pub plants: Vec<Plant>,
    pub gt: GroundTruth,
    /// `(query id, crop)`, one per glyph class that was planted.
    pub queries: Vec<(String, Image)>,
}

pub fn page_id(i: usize) -> String {
    format!("page_{i:03}")
}

fn render_page(spec: &SynthSpec, index: usize) -> (Image, Vec<Plant>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (w, h) = (spec.width, spec.height);
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let ruled = y % spec.line_spacing == spec.line_spacing - 1;
        for _ in 0..w {
            let n = rng.gen_range(-spec.noise..=spec.noise);
            let d = if ruled { RULE_DARKEN } else { 0.0 };
            data.extend(PARCHMENT.iter().map(|&c| (c + n - d).clamp(0.0, 1.0)));
        }
    }

    // distinct slots, class by global plant number so classes stay balanced
    let mut slots: Vec<usize> = (0..spec.columns() * spec.bands()).collect();
    let mut plants = Vec::with_capacity(spec.plants_per_page);
    let g = spec.glyph_size;
    for j in 0..spec.plants_per_page {
        let pick = rng.gen_range(j..slots.len());
        slots.swap(j, pick);
        let (col, band) = (slots[j] % spec.columns(), slots[j] / spec.columns());
        let slack = spec.line_spacing - g - 4;
        let x0 = col * spec.line_spacing + 2 + rng.gen_range(0..=slack);
        let y0 = band * spec.line_spacing + 2 + rng.gen_range(0..=slack);
        let class = GlyphClass::ALL[(index * spec.plants_per_page + j) % GlyphClass::ALL.len()];
        let mask = class.mask(g, spec.stroke);
        for y in 0..g {
            for x in 0..g {
                if mask[y * g + x] {
                    let at = ((y0 + y) * w + x0 + x) * 3;
                    data[at..at + 3].copy_from_slice(&INK);
                }
            }
        }
        plants.push(Plant {
            page: page_id(index),
            class,
            bbox: BoundingBox::new(x0 as u32, y0 as u32, g as u32, g as u32).expect("non-empty glyph"),
        });
    }
    (Image::new(w, h, 3, data).expect("consistent page buffer"), plants)
}

/// Renders the corpus. Output depends only on the spec.
pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let rendered: Vec<_> = (0..spec.page_count).into_par_iter().map(|i| render_page(spec, i)).collect();
    let mut pages = Vec::with_capacity(rendered.len());
    let mut plants = Vec::new();
    for (i, (img, ps)) in rendered.into_iter().enumerate() {
        pages.push((page_id(i), img));
        plants.extend(ps);
    }

    let mut queries = Vec::new();
    let mut gt = GroundTruth::default();
    for class in GlyphClass::ALL {
        let occ: Vec<&Plant> = plants.iter().filter(|p| p.class == class).collect();
        let Some(first) = occ.first() else { continue };
        let page = pages.iter().find(|(id, _)| *id == first.page).map(|(_, img)| img).expect("plant page");
        queries.push((class.name().to_string(), page.crop(&first.bbox)?));
        gt.queries.push(GtQuery {
            id: class.name().to_string(),
            page: first.page.clone(),
            bbox: first.bbox,
            occurrences: occ.iter().map(|p| Occurrence { page: p.page.clone(), bbox: p.bbox }).collect(),
        });
    }
    Ok(SynthCorpus { pages, plants, gt, queries })
}

impl SynthCorpus {
    pub fn occurrence_count(&self) -> usize {
        self.gt.queries.iter().map(|q| q.occurrences.len()).sum()
    }

    /// Writes `pages/<id>.png`, `queries/<id>.png` and `gt.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let pages = dir.join("pages");
        let queries = dir.join("queries");
        std::fs::create_dir_all(&pages)?;
        std::fs::create_dir_all(&queries)?;
        self.pages
            .par_iter()
            .map(|(id, img)| img.save_png(&pages.join(format!("{id}.png"))))
            .collect::<Result<Vec<_>>>()?;
        for (id, img) in &self.queries {
            img.save_png(&queries.join(format!("{id}.png")))?;
        }
        if !self.gt.queries.is_empty() {
            self.gt.save(&dir.join("gt.json"))?;
        }
        Ok(())
    }
}
