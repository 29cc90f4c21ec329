//! Tissue segmentation and tissue-constrained region sampling.
//!
//! Pipeline: thumbnail at a working resolution, HSV saturation, median blur,
//! Otsu threshold (floored at a minimum saturation), morphological closing
//! with a disk, then removal of small connected components.

use image::{GrayImage, Luma, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::par::Execution;
use crate::pyramid::{PyramidError, PyramidHandle, Region};
use crate::raster;

#[derive(Debug, Error)]
pub enum TissueError {
    #[error("insufficient tissue: placed {placed} of {requested} regions")]
    InsufficientTissue { placed: usize, requested: usize },
    #[error("invalid sampling parameters: {0}")]
    InvalidParams(String),
    #[error("slide too small to segment: long side {0} < 256")]
    SlideTooSmall(u32),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentParams {
    pub work_long_side: u32,
    pub median_kernel: usize,
    pub close_radius: usize,
    /// Components smaller than this fraction of the raster area are dropped.
    pub min_component_fraction: f64,
    /// Floor applied to the Otsu threshold so near-uniform glass stays empty.
    pub min_saturation: u8,
}

impl Default for SegmentParams {
    fn default() -> Self {
        SegmentParams {
            work_long_side: 2048,
            median_kernel: 7,
            close_radius: 4,
            min_component_fraction: 0.0005,
            min_saturation: 20,
        }
    }
}

/// Binary tissue map at a reduced scale of level 0.
#[derive(Debug, Clone)]
pub struct TissueMask {
    width: u32,
    height: u32,
    bits: Vec<u8>,
    /// Summed-area table, `(width + 1) * (height + 1)`.
    sat: Vec<u32>,
    /// Level-0 pixels per mask pixel.
    pub level_downsample: f64,
    pub level0_dims: (u32, u32),
    pub tissue_fraction_total: f64,
}

impl TissueMask {
    pub fn from_bits(width: u32, height: u32, bits: Vec<u8>, level_downsample: f64, level0_dims: (u32, u32)) -> Self {
        assert_eq!(bits.len(), (width * height) as usize);
        let (w, h) = (width as usize, height as usize);
        let mut sat = vec![0u32; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += bits[y * w + x] as u32;
                sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
            }
        }
        let total = sat[(w + 1) * (h + 1) - 1] as f64;
        TissueMask {
            width,
            height,
            bits,
            sat,
            level_downsample,
            level0_dims,
            tissue_fraction_total: total / (w * h).max(1) as f64,
        }
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize] != 0
    }

    pub fn is_empty(&self) -> bool {
        self.sat.last().copied().unwrap_or(0) == 0
    }

    /// 0/255 grayscale rendering.
    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| Luma([if self.get(x, y) { 255 } else { 0 }]))
    }

    fn block_sum(&self, x0: usize, x1: usize, y0: usize, y1: usize) -> f64 {
        if x1 <= x0 || y1 <= y0 {
            return 0.0;
        }
        let s = self.width as usize + 1;
        (self.sat[y1 * s + x1] + self.sat[y0 * s + x0] - self.sat[y0 * s + x1] - self.sat[y1 * s + x0]) as f64
    }

    fn tissue_pixels(&self) -> Vec<u32> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b != 0)
            .map(|(i, _)| i as u32)
            .collect()
    }
}

/// Per-axis pixel spans `(start, end, weight)` covering `[lo, hi)` in mask units.
fn axis_spans(lo: f64, hi: f64, len: u32) -> Vec<(usize, usize, f64)> {
    let first = lo.floor().max(0.0) as i64;
    let last = (hi.ceil() as i64).min(len as i64);
    if last <= first {
        return Vec::new();
    }
    let cover = |i: i64| (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
    let (first, last) = (first as usize, last as usize);
    if last - first == 1 {
        return vec![(first, last, cover(first as i64))];
    }
    vec![
        (first, first + 1, cover(first as i64)),
        (first + 1, last - 1, 1.0),
        (last - 1, last, cover(last as i64 - 1)),
    ]
}

/// Fraction of `region` (level-0 px) covered by tissue; area outside the slide counts as background.
pub fn tissue_fraction(mask: &TissueMask, region: &Region) -> f64 {
    if region.w < 1 || region.h < 1 {
        return 0.0;
    }
    let ds = mask.level_downsample;
    let (fx0, fx1) = (region.x as f64 / ds, region.right() as f64 / ds);
    let (fy0, fy1) = (region.y as f64 / ds, region.bottom() as f64 / ds);
    let cols = axis_spans(fx0, fx1, mask.width);
    let rows = axis_spans(fy0, fy1, mask.height);
    let mut covered = 0.0;
    for &(y0, y1, wy) in &rows {
        for &(x0, x1, wx) in &cols {
            covered += wx * wy * mask.block_sum(x0, x1, y0, y1);
        }
    }
    (covered / ((fx1 - fx0) * (fy1 - fy0))).clamp(0.0, 1.0)
}

/// Median filter over a single channel with replicated borders.
pub fn median_blur(src: &[u8], width: usize, height: usize, kernel: usize, exec: Execution) -> Vec<u8> {
    let r = (kernel / 2) as i64;
    let half = (kernel * kernel) / 2;
    let at = |x: i64, y: i64| src[(y.clamp(0, height as i64 - 1) as usize) * width + x.clamp(0, width as i64 - 1) as usize];
    let mut out = vec![0u8; width * height];
    exec.for_each_row(&mut out, width, |y, row| {
        let y = y as i64;
        let mut hist = [0u32; 256];
        for dy in -r..=r {
            for dx in -r..=r {
                hist[at(dx, y + dy) as usize] += 1;
            }
        }
        for (x, slot) in row.iter_mut().enumerate() {
            let x = x as i64;
            if x > 0 {
                for dy in -r..=r {
                    hist[at(x - r - 1, y + dy) as usize] -= 1;
                    hist[at(x + r, y + dy) as usize] += 1;
                }
            }
            let mut acc = 0usize;
            for (v, &c) in hist.iter().enumerate() {
                acc += c as usize;
                if acc > half {
                    *slot = v as u8;
                    break;
                }
            }
        }
    });
    out
}

/// Otsu threshold `t`; foreground is `value > t`. `None` for single-valued input.
pub fn otsu_threshold(values: &[u8]) -> Option<u8> {
    let mut hist = [0u64; 256];
    values.iter().for_each(|&v| hist[v as usize] += 1);
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w_b, mut sum_b) = (0.0, 0.0);
    let (mut best, mut best_var) = (0u8, -1.0);
    for (t, &count) in hist.iter().enumerate().take(255) {
        w_b += count as f64;
        if w_b == 0.0 {
            continue;
        }
        let w_f = total - w_b;
        if w_f == 0.0 {
            break;
        }
        sum_b += t as f64 * count as f64;
        let m_b = sum_b / w_b;
        let m_f = (sum_all - sum_b) / w_f;
        let var = w_b * w_f * (m_b - m_f) * (m_b - m_f);
        if var > best_var {
            best_var = var;
            best = t as u8;
        }
    }
    Some(best)
}

fn disk_half_widths(radius: usize) -> Vec<(i64, usize)> {
    let r = radius as i64;
    (-r..=r)
        .map(|dy| (dy, (((r * r - dy * dy) as f64).sqrt()).floor() as usize))
        .collect()
}

/// Binary dilation (`grow = true`) or erosion with a disk; outside counts as background.
fn disk_morph(bits: &[u8], width: usize, height: usize, radius: usize, grow: bool, exec: Execution) -> Vec<u8> {
    // horizontal prefix sums per row
    let mut prefix = vec![0u32; (width + 1) * height];
    for y in 0..height {
        for x in 0..width {
            prefix[y * (width + 1) + x + 1] = prefix[y * (width + 1) + x] + bits[y * width + x] as u32;
        }
    }
    let spans = disk_half_widths(radius);
    let mut out = vec![0u8; width * height];
    exec.for_each_row(&mut out, width, |y, row| {
        for (x, slot) in row.iter_mut().enumerate() {
            let mut hit = !grow;
            for &(dy, hw) in &spans {
                let yy = y as i64 + dy;
                let lo = x as i64 - hw as i64;
                let hi = x as i64 + hw as i64 + 1;
                let inside = yy >= 0 && yy < height as i64 && lo >= 0 && hi <= width as i64;
                if grow {
                    if yy < 0 || yy >= height as i64 {
                        continue;
                    }
                    let (a, b) = (lo.max(0) as usize, hi.min(width as i64) as usize);
                    let base = yy as usize * (width + 1);
                    if prefix[base + b] > prefix[base + a] {
                        hit = true;
                        break;
                    }
                } else {
                    if !inside {
                        hit = false;
                        break;
                    }
                    let base = yy as usize * (width + 1);
                    let (a, b) = (lo as usize, hi as usize);
                    if prefix[base + b] - prefix[base + a] < (b - a) as u32 {
                        hit = false;
                        break;
                    }
                }
            }
            *slot = hit as u8;
        }
    });
    out
}

/// 8-connected component labels (0 = background) and per-label pixel counts.
pub fn connected_components(bits: &[u8], width: usize, height: usize) -> (Vec<u32>, Vec<usize>) {
    let mut labels = vec![0u32; bits.len()];
    let mut sizes = vec![0usize];
    let mut stack = Vec::new();
    for start in 0..bits.len() {
        if bits[start] == 0 || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32;
        sizes.push(0);
        labels[start] = label;
        stack.push(start);
        while let Some(i) = stack.pop() {
            sizes[label as usize] += 1;
            let (x, y) = ((i % width) as i64, (i / width) as i64);
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= width as i64 || ny >= height as i64 {
                        continue;
                    }
                    let j = ny as usize * width + nx as usize;
                    if bits[j] != 0 && labels[j] == 0 {
                        labels[j] = label;
                        stack.push(j);
                    }
                }
            }
        }
    }
    (labels, sizes)
}

/// Runs the segmentation pipeline on an in-memory raster; returns 0/1 bits.
pub fn segment_raster(img: &RgbImage, params: &SegmentParams, exec: Execution) -> Vec<u8> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let sat: Vec<u8> = img.pixels().map(raster::saturation).collect();
    let blurred = median_blur(&sat, w, h, params.median_kernel.max(1) | 1, exec);
    let Some(otsu) = otsu_threshold(&blurred) else {
        return vec![0; w * h];
    };
    let t = otsu.max(params.min_saturation);
    let bits: Vec<u8> = blurred.iter().map(|&v| (v > t) as u8).collect();
    let bits = if params.close_radius > 0 {
        let grown = disk_morph(&bits, w, h, params.close_radius, true, exec);
        disk_morph(&grown, w, h, params.close_radius, false, exec)
    } else {
        bits
    };
    let (labels, sizes) = connected_components(&bits, w, h);
    let min_size = (params.min_component_fraction * (w * h) as f64).ceil() as usize;
    labels
        .iter()
        .map(|&l| (l != 0 && sizes[l as usize] >= min_size) as u8)
        .collect()
}

/// Segments a slide at `params.work_long_side` (capped at the level-0 long side).
pub fn segment(handle: &PyramidHandle, params: &SegmentParams) -> Result<TissueMask, TissueError> {
    segment_with(handle, params, Execution::default())
}

pub fn segment_with(handle: &PyramidHandle, params: &SegmentParams, exec: Execution) -> Result<TissueMask, TissueError> {
    let (w0, h0) = handle.manifest().dimensions();
    let long0 = w0.max(h0);
    if long0 < 256 {
        return Err(TissueError::SlideTooSmall(long0));
    }
    let work = params.work_long_side.clamp(16, long0);
    let thumb = handle.thumbnail(work)?;
    let bits = segment_raster(&thumb, params, exec);
    let ds = long0 as f64 / thumb.width().max(thumb.height()) as f64;
    Ok(TissueMask::from_bits(thumb.width(), thumb.height(), bits, ds, (w0, h0)))
}

fn rejection_budget(n: usize) -> usize {
    10 * n * 100
}

/// Draws a level-0 center, uniform over tissue pixels (or the whole slide when `tissue` is empty).
fn draw_center(mask: &TissueMask, tissue: &[u32], rng: &mut ChaCha8Rng) -> (f64, f64) {
    let ds = mask.level_downsample;
    if tissue.is_empty() {
        let (w0, h0) = mask.level0_dims;
        return (rng.random::<f64>() * w0 as f64, rng.random::<f64>() * h0 as f64);
    }
    let idx = tissue[rng.random_range(0..tissue.len())];
    let (mx, my) = (idx % mask.width, idx / mask.width);
    ((mx as f64 + rng.random::<f64>()) * ds, (my as f64 + rng.random::<f64>()) * ds)
}

fn place(center: (f64, f64), w: i64, h: i64, dims: (u32, u32)) -> Region {
    let (w0, h0) = (dims.0 as i64, dims.1 as i64);
    let (w, h) = (w.clamp(1, w0), h.clamp(1, h0));
    let x = ((center.0 - w as f64 / 2.0).round() as i64).clamp(0, w0 - w);
    let y = ((center.1 - h as f64 / 2.0).round() as i64).clamp(0, h0 - h);
    Region::new(x, y, w, h)
}

/// Samples `n` square level-0 patches whose tissue fraction is at least `min_frac`.
pub fn sample_patches(mask: &TissueMask, n: usize, patch_size_l0: u32, min_frac: f64, seed: u64) -> Result<Vec<Region>, TissueError> {
    if patch_size_l0 == 0 || !(0.0..=1.0).contains(&min_frac) {
        return Err(TissueError::InvalidParams(format!(
            "patch size {patch_size_l0}, min fraction {min_frac}"
        )));
    }
    if mask.is_empty() && min_frac > 0.0 {
        return Err(TissueError::InsufficientTissue { placed: 0, requested: n });
    }
    let tissue = mask.tissue_pixels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut rejections = 0;
    while out.len() < n {
        let center = draw_center(mask, &tissue, &mut rng);
        let region = place(center, patch_size_l0 as i64, patch_size_l0 as i64, mask.level0_dims);
        if tissue_fraction(mask, &region) >= min_frac {
            out.push(region);
        } else {
            rejections += 1;
            if rejections > rejection_budget(n) {
                return Err(TissueError::InsufficientTissue {
                    placed: out.len(),
                    requested: n,
                });
            }
        }
    }
    Ok(out)
}

/// One in-bounds box with independent side lengths in `[min_side, max_side]`
/// and tissue fraction at least `min_frac`.
pub fn random_tissue_bbox(mask: &TissueMask, min_side_l0: u32, max_side_l0: u32, min_frac: f64, seed: u64) -> Result<Region, TissueError> {
    if min_side_l0 == 0 || max_side_l0 < min_side_l0 || !(0.0..=1.0).contains(&min_frac) {
        return Err(TissueError::InvalidParams(format!(
            "sides [{min_side_l0}, {max_side_l0}], min fraction {min_frac}"
        )));
    }
    if mask.is_empty() && min_frac > 0.0 {
        return Err(TissueError::InsufficientTissue { placed: 0, requested: 1 });
    }
    let tissue = mask.tissue_pixels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..=rejection_budget(1) {
        let w = rng.random_range(min_side_l0..=max_side_l0) as i64;
        let h = rng.random_range(min_side_l0..=max_side_l0) as i64;
        let center = draw_center(mask, &tissue, &mut rng);
        let region = place(center, w, h, mask.level0_dims);
        if tissue_fraction(mask, &region) >= min_frac {
            return Ok(region);
        }
    }
    Err(TissueError::InsufficientTissue { placed: 0, requested: 1 })
}
