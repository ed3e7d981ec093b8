//! Image primitives shared by segmentation, the region filter and the
//! baseline extractor. Everything here is a pure function of its inputs.

use std::collections::VecDeque;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};

/// Row-major image with 1 (gray) or 3 (RGB) interleaved channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!("empty image {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidImage(format!(
                "expected {} values for {width}x{height}x{channels}, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, pixel: &[f32]) -> Result<Self> {
        let data = pixel.iter().copied().cycle().take(width * height * pixel.len()).collect();
        Self::new(width, height, pixel.len(), data)
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Pixel lookup with coordinates clamped to the border.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize, c: usize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y, c)
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// One channel as a gray image.
    pub fn channel(&self, c: usize) -> Image {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Image { width: self.width, height: self.height, channels: 1, data }
    }

    /// Gray images are returned as-is, RGB images are converted.
    pub fn to_gray_lossy(&self) -> Image {
        match self.channels {
            1 => self.clone(),
            _ => to_grayscale(self).expect("three-channel input"),
        }
    }

    /// The same pixels as RGB; gray values are replicated.
    pub fn to_rgb(&self) -> Image {
        match self.channels {
            3 => self.clone(),
            _ => Image {
                width: self.width,
                height: self.height,
                channels: 3,
                data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
            },
        }
    }

    pub fn crop(&self, b: &BoundingBox) -> Result<Image> {
        if !b.fits_within(self.width as u32, self.height as u32) {
            return Err(Error::InvalidArgument(format!("crop {b:?} exceeds {}x{} image", self.width, self.height)));
        }
        let (x0, y0, w, h) = (b.x as usize, b.y as usize, b.w as usize, b.h as usize);
        let mut data = Vec::with_capacity(w * h * self.channels);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Ok(Image { width: w, height: h, channels: self.channels, data })
    }

    /// Maps every value through `f`, clamping the result into `[0, 1]`.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image { data: self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(), ..*self }
    }

    pub fn load(path: &Path) -> Result<Image> {
        let dynimg = image::open(path).map_err(|source| Error::Decode { path: path.to_path_buf(), source })?;
        Ok(Self::from_dynamic(&dynimg))
    }

    pub fn from_dynamic(img: &DynamicImage) -> Image {
        let to_unit = |v: u8| f32::from(v) / 255.0;
        if img.color().has_color() {
            let rgb = img.to_rgb8();
            Image {
                width: rgb.width() as usize,
                height: rgb.height() as usize,
                channels: 3,
                data: rgb.into_raw().into_iter().map(to_unit).collect(),
            }
        } else {
            let gray = img.to_luma8();
            Image {
                width: gray.width() as usize,
                height: gray.height() as usize,
                channels: 1,
                data: gray.into_raw().into_iter().map(to_unit).collect(),
            }
        }
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        let bytes: Vec<u8> = self.data.iter().map(|&v| (v * 255.0).round() as u8).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => DynamicImage::ImageLuma8(ImageBuffer::from_raw(w, h, bytes).expect("sized buffer")),
            _ => DynamicImage::ImageRgb8(ImageBuffer::from_raw(w, h, bytes).expect("sized buffer")),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_dynamic().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// Row-major `{0, 1}` image, typically an edge map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    width: usize,
    height: usize,
    bits: Vec<u8>,
}

impl BinaryImage {
    pub fn new(width: usize, height: usize, bits: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!("empty image {width}x{height}")));
        }
        if bits.len() != width * height {
            return Err(Error::InvalidImage(format!("expected {} bits, got {}", width * height, bits.len())));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidImage("binary image values must be 0 or 1".into()));
        }
        Ok(Self { width, height, bits })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.bits[y * self.width + x] = u8::from(on);
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|&b| usize::from(b)).sum()
    }

    /// Mean over the half-open window `[x0, x1) × [y0, y1)`; `None` when the
    /// window is empty.
    pub fn window_mean(&self, x0: usize, x1: usize, y0: usize, y1: usize) -> Option<f64> {
        let (x1, y1) = (x1.min(self.width), y1.min(self.height));
        if x0 >= x1 || y0 >= y1 {
            return None;
        }
        let ones: usize = (y0..y1)
            .map(|y| self.bits[y * self.width + x0..y * self.width + x1].iter().map(|&b| usize::from(b)).sum::<usize>())
            .sum();
        Some(ones as f64 / ((x1 - x0) * (y1 - y0)) as f64)
    }
}

/// Anything with an arithmetic pixel mean.
pub trait PixelMean {
    /// Sum of all values and the number of values.
    fn sum_and_count(&self) -> (f64, usize);
}

impl PixelMean for Image {
    fn sum_and_count(&self) -> (f64, usize) {
        (self.data.iter().map(|&v| f64::from(v)).sum(), self.data.len())
    }
}

impl PixelMean for BinaryImage {
    fn sum_and_count(&self) -> (f64, usize) {
        (self.count_ones() as f64, self.bits.len())
    }
}

/// Arithmetic mean of all values (all channels for color images).
pub fn mean_intensity<T: PixelMean + ?Sized>(img: &T) -> Result<f64> {
    match img.sum_and_count() {
        (_, 0) => Err(Error::Empty("mean of an empty image".into())),
        (sum, n) => Ok(sum / n as f64),
    }
}

pub fn to_grayscale(img: &Image) -> Result<Image> {
    if img.channels != 3 {
        return Err(Error::InvalidImage(format!(
            "grayscale conversion needs an RGB image, got {} channel(s)",
            img.channels
        )));
    }
    let data = img.data.chunks_exact(3).map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0)).collect();
    Ok(Image { width: img.width, height: img.height, channels: 1, data })
}

/// Bilinear resampling with half-pixel (center-aligned) sample positions and
/// border clamping.
pub fn resize_bilinear(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidArgument(format!("resize target must be non-empty, got {out_w}x{out_h}")));
    }
    if out_w == img.width && out_h == img.height {
        return Ok(img.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let xs = taps(out_w, img.width);
    let ys = taps(out_h, img.height);
    let ch = img.channels;
    let mut data = Vec::with_capacity(out_w * out_h * ch);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            for c in 0..ch {
                let top = img.get(x0, y0, c) * (1.0 - tx) + img.get(x1, y0, c) * tx;
                let bottom = img.get(x0, y1, c) * (1.0 - tx) + img.get(x1, y1, c) * tx;
                data.push((top * (1.0 - ty) + bottom * ty).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Image { width: out_w, height: out_h, channels: ch, data })
}

/// Normalized sampled Gaussian with radius `ceil(4σ)`; `[1.0]` for `σ = 0`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| (v / sum) as f32).collect()
}

/// Separable Gaussian smoothing of one plane, borders replicated.
pub fn blur_plane(plane: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let kernel: Vec<f64> = gaussian_kernel(sigma).into_iter().map(f64::from).collect();
    if kernel.len() == 1 {
        return plane.to_vec();
    }
    let r = (kernel.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * plane[y * w + clamp(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] =
                kernel.iter().enumerate().map(|(k, kv)| kv * tmp[clamp(y as isize + k as isize - r, h) * w + x]).sum();
        }
    }
    out
}

/// Channel `c` as an f64 plane.
pub fn plane(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(img.channels).map(|&v| f64::from(v)).collect()
}

/// Gaussian smoothing of every channel, borders replicated.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let (w, h, ch) = (img.width, img.height, img.channels);
    let mut data = vec![0f32; img.data.len()];
    for c in 0..ch {
        let smooth = blur_plane(&plane(img, c), w, h, sigma);
        for (i, v) in smooth.into_iter().enumerate() {
            data[i * ch + c] = (v as f32).clamp(0.0, 1.0);
        }
    }
    Image { width: w, height: h, channels: ch, data }
}

/// 3×3 Sobel responses `(gx, gy)` of a plane, borders replicated. `gx` is
/// positive when intensity grows to the right, `gy` when it grows downwards.
pub fn sobel_plane(plane: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0f64; w * h];
    let mut gy = vec![0f64; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dx: isize, dy: isize| {
                let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                plane[yy * w + xx]
            };
            let i = y as usize * w + x as usize;
            gx[i] = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            gy[i] = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
        }
    }
    (gx, gy)
}

/// Edge detector settings. Magnitudes are Sobel magnitudes divided by 4, so
/// an unsmoothed unit step has magnitude 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeParams {
    pub sigma: f64,
    pub low: f64,
    pub high: f64,
}

impl Default for EdgeParams {
    fn default() -> Self {
        Self { sigma: 1.0, low: 0.1, high: 0.2 }
    }
}

impl EdgeParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.low) || !(0.0..=1.0).contains(&self.high) || self.low > self.high {
            return Err(Error::InvalidArgument(format!(
                "edge thresholds need 0 <= low <= high <= 1, got low={} high={}",
                self.low, self.high
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("edge sigma must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Normalized gradient magnitude after non-maximum suppression. Suppressed
/// pixels are 0. Magnitudes are rounded to 1e-9 so that float noise from an
/// intensity offset cannot flip comparisons between equal maxima.
pub fn thinned_gradient(img: &Image, sigma: f64) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let smooth = blur_plane(&plane(img, 0), w, h, sigma);
    let (gx, gy) = sobel_plane(&smooth, w, h);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(&x, &y)| ((x * x + y * y).sqrt() / 4.0 * 1e9).round() / 1e9).collect();
    let at = |x: isize, y: isize| -> f64 {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        mag[y * w + x]
    };
    let mut out = vec![0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = mag[i];
            if m <= 0.0 {
                continue;
            }
            // Quantize the gradient direction to 0/45/90/135 degrees; (dx, dy)
            // steps towards the "positive" neighbour along it.
            let mut angle = gy[i].atan2(gx[i]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            let (dx, dy) = if !(22.5..157.5).contains(&angle) {
                (1, 0)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (0, 1)
            } else {
                (-1, 1)
            };
            let (xi, yi) = (x as isize, y as isize);
            let behind = at(xi - dx, yi - dy);
            let ahead = at(xi + dx, yi + dy);
            // Strict on one side only so a plateau of two equal maxima keeps
            // exactly one pixel.
            if m > behind && m >= ahead {
                out[i] = m;
            }
        }
    }
    out
}

/// Canny-style edge map: Gaussian smoothing, Sobel gradients, non-maximum
/// suppression and double-threshold hysteresis (8-connected).
pub fn edge_binarize(img: &Image, params: &EdgeParams) -> Result<BinaryImage> {
    if img.channels != 1 {
        return Err(Error::InvalidImage(format!(
            "edge detection needs a grayscale image, got {} channels",
            img.channels
        )));
    }
    params.validate()?;
    let (w, h) = (img.width, img.height);
    let thin = thinned_gradient(img, params.sigma);
    let (low, high) = (params.low, params.high);
    let mut bits = vec![0u8; w * h];
    let mut queue = VecDeque::new();
    for (i, &m) in thin.iter().enumerate() {
        if m > 0.0 && m >= high {
            bits[i] = 1;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if bits[j] == 0 && thin[j] > 0.0 && thin[j] >= low {
                    bits[j] = 1;
                    queue.push_back(j);
                }
            }
        }
    }
    BinaryImage::new(w, h, bits)
}

/// Draws a rectangle outline of the given thickness, clipped to the image.
pub fn draw_rect(img: &mut DynamicImage, b: &BoundingBox, color: [u8; 3], thickness: u32) {
    let mut rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    for t in 0..thickness {
        let (x0, y0) = (b.x + t, b.y + t);
        let (x1, y1) = (b.right().saturating_sub(1 + t), b.bottom().saturating_sub(1 + t));
        if x0 > x1 || y0 > y1 {
            break;
        }
        for x in x0..=x1 {
            for y in [y0, y1] {
                if x < w && y < h {
                    rgb.put_pixel(x, y, Rgb(color));
                }
            }
        }
        for y in y0..=y1 {
            for x in [x0, x1] {
                if x < w && y < h {
                    rgb.put_pixel(x, y, Rgb(color));
                }
            }
        }
    }
    *img = DynamicImage::ImageRgb8(rgb);
}
