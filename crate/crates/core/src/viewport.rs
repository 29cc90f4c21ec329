//! Crop rendering and thumbnail orientation overlays.
//!
//! A crop request is a level-0 box. The renderer reads it from the pyramid
//! level closest to the target resolution, leaning toward finer levels by the
//! oversampling bias, then Lanczos-resamples so the long side is exactly `S`.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pyramid::{PyramidError, PyramidHandle, Region, SlideManifest};
use crate::raster::{self, Color};

pub const DEFAULT_LONG_SIDE: u32 = 1000;
pub const DEFAULT_BIAS: f64 = 0.85;

#[derive(Debug, Error)]
pub enum ViewportError {
    #[error("manifest has no levels")]
    NoLevels,
    #[error("invalid crop parameters: {0}")]
    InvalidParams(String),
    #[error("degenerate region {0}")]
    DegenerateRegion(Region),
    #[error("thumbnail {raster_w}x{raster_h} does not match the slide aspect {slide_w}x{slide_h}")]
    AspectMismatch {
        raster_w: u32,
        raster_h: u32,
        slide_w: u32,
        slide_h: u32,
    },
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleKind {
    Down,
    Up,
    None,
}

/// Geometry of a rendered crop, as recorded in traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropGeometry {
    pub source_region: Region,
    pub chosen_level: usize,
    pub pre_resize_long_side: u32,
    pub final_long_side: u32,
    pub width: u32,
    pub height: u32,
    pub resample_kind: ResampleKind,
    /// SHA-256 over the rendered pixels; replay compares against it.
    pub pixel_sha256: String,
}

#[derive(Debug, Clone)]
pub struct RenderedCrop {
    pub pixels: RgbImage,
    pub geometry: CropGeometry,
}

/// Picks the pyramid level used to render `region` at long side `long_side`.
///
/// With `d = max(w, h) / long_side`, this is the largest level whose
/// downsample is at most `bias * d` (level 0 when none qualifies). If that
/// level would still render fewer than `long_side` pixels, one finer level is
/// used instead.
pub fn select_level(manifest: &SlideManifest, region: &Region, long_side: u32, bias: f64) -> Result<usize, ViewportError> {
    if manifest.levels.is_empty() {
        return Err(ViewportError::NoLevels);
    }
    if long_side == 0 || !(bias > 0.0 && bias <= 1.0) {
        return Err(ViewportError::InvalidParams(format!(
            "long side {long_side} and bias {bias} must satisfy S >= 1, 0 < bias <= 1"
        )));
    }
    let region_long = region.long_side().max(1) as f64;
    let threshold = bias * region_long / long_side as f64;
    let mut level = manifest
        .levels
        .iter()
        .rposition(|l| l.downsample <= threshold)
        .unwrap_or(0);
    if level > 0 && region_long / manifest.levels[level].downsample < long_side as f64 {
        level -= 1;
    }
    Ok(level)
}

/// Renders `region` with its long side resampled to exactly `long_side`.
pub fn render_crop(handle: &PyramidHandle, region: &Region, long_side: u32, bias: f64) -> Result<RenderedCrop, ViewportError> {
    if region.w < 1 || region.h < 1 {
        return Err(ViewportError::DegenerateRegion(*region));
    }
    let level = select_level(handle.manifest(), region, long_side, bias)?;
    let raw = handle.read_region(level, region)?;
    let (tw, th) = raster::fit_long_side(region.w as u64, region.h as u64, long_side);
    let pre_long = raw.width().max(raw.height());
    let resample_kind = if raw.dimensions() == (tw, th) {
        ResampleKind::None
    } else if pre_long > long_side {
        ResampleKind::Down
    } else if pre_long < long_side {
        ResampleKind::Up
    } else {
        // long side already matches; only the short side is off by rounding
        ResampleKind::Down
    };
    let pixels = match resample_kind {
        ResampleKind::None => raw,
        _ => raster::resize_lanczos(&raw, tw, th),
    };
    let geometry = CropGeometry {
        source_region: *region,
        chosen_level: level,
        pre_resize_long_side: pre_long,
        final_long_side: pixels.width().max(pixels.height()),
        width: pixels.width(),
        height: pixels.height(),
        resample_kind,
        pixel_sha256: raster::pixel_digest(&pixels),
    };
    Ok(RenderedCrop { pixels, geometry })
}

/// Styling of the coordinate guides drawn over a whole-slide thumbnail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlaySpec {
    pub guide_fractions: Vec<f64>,
    pub line_color: Color,
    pub label_color: Color,
    pub label_background: Color,
    pub font_size_px: u32,
}

impl Default for OverlaySpec {
    fn default() -> Self {
        OverlaySpec {
            guide_fractions: vec![0.2, 0.4, 0.6, 0.8],
            line_color: [40, 40, 40],
            label_color: [0, 0, 0],
            label_background: [255, 255, 255],
            font_size_px: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Vertical,
    Horizontal,
}

/// One guide line with its level-0 coordinate label.
#[derive(Debug, Clone, PartialEq)]
pub struct GuideLabel {
    pub axis: Axis,
    /// Raster column (vertical) or row (horizontal) of the line.
    pub line_px: u32,
    pub text: String,
    /// Top-left corner of the label box.
    pub origin: (u32, u32),
    pub size: (u32, u32),
}

/// 3×5 bitmap digits, one row per byte, bit 2 = leftmost column.
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

fn glyph_scale(font_size_px: u32) -> u32 {
    (font_size_px / 5).max(1)
}

fn text_size(text: &str, scale: u32) -> (u32, u32) {
    let n = text.chars().count() as u32;
    (n * 4 * scale - scale + 2, 5 * scale + 2)
}

/// Draws decimal digits with a one-pixel background margin.
pub(crate) fn draw_number(img: &mut RgbImage, origin: (u32, u32), text: &str, scale: u32, fg: Color, bg: Color) {
    let (bw, bh) = text_size(text, scale);
    let (ox, oy) = origin;
    for y in oy..(oy + bh).min(img.height()) {
        for x in ox..(ox + bw).min(img.width()) {
            img.put_pixel(x, y, Rgb(bg));
        }
    }
    for (i, ch) in text.chars().enumerate() {
        let Some(d) = ch.to_digit(10) else { continue };
        let gx = ox + 1 + i as u32 * 4 * scale;
        for (row, bits) in DIGITS[d as usize].iter().enumerate() {
            for col in 0..3u32 {
                if bits & (0b100 >> col) == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let x = gx + col * scale + dx;
                        let y = oy + 1 + row as u32 * scale + dy;
                        if x < img.width() && y < img.height() {
                            img.put_pixel(x, y, Rgb(fg));
                        }
                    }
                }
            }
        }
    }
}

/// Computes where guides and labels go on a `width × height` thumbnail.
pub fn guide_layout(width: u32, height: u32, manifest: &SlideManifest, spec: &OverlaySpec) -> Vec<GuideLabel> {
    let (w0, h0) = manifest.dimensions();
    let scale = glyph_scale(spec.font_size_px);
    let mut out = Vec::new();
    for &f in &spec.guide_fractions {
        let line_px = ((f * width as f64).round() as u32).min(width.saturating_sub(1));
        let text = format!("{}", (f * w0 as f64).round() as u64);
        let size = text_size(&text, scale);
        out.push(GuideLabel {
            axis: Axis::Vertical,
            line_px,
            origin: (line_px + 1, 1),
            size,
            text,
        });
    }
    for &f in &spec.guide_fractions {
        let line_px = ((f * height as f64).round() as u32).min(height.saturating_sub(1));
        let text = format!("{}", (f * h0 as f64).round() as u64);
        let size = text_size(&text, scale);
        out.push(GuideLabel {
            axis: Axis::Horizontal,
            line_px,
            origin: (1, line_px + 1),
            size,
            text,
        });
    }
    out
}

/// Draws labeled axis guides over a full-slide thumbnail.
pub fn overlay_axis_guides(raster: &RgbImage, manifest: &SlideManifest, spec: &OverlaySpec) -> Result<RgbImage, ViewportError> {
    let (w, h) = raster.dimensions();
    let (w0, h0) = manifest.dimensions();
    let slide_aspect = w0 as f64 / h0 as f64;
    let aspect = w as f64 / h as f64;
    if ((aspect - slide_aspect) / slide_aspect).abs() > 0.01 {
        return Err(ViewportError::AspectMismatch {
            raster_w: w,
            raster_h: h,
            slide_w: w0,
            slide_h: h0,
        });
    }
    if let Some(f) = spec.guide_fractions.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
        return Err(ViewportError::InvalidParams(format!("guide fraction {f} outside (0, 1)")));
    }
    let layout = guide_layout(w, h, manifest, spec);
    let mut out = raster.clone();
    for g in &layout {
        match g.axis {
            Axis::Vertical => (0..h).for_each(|y| out.put_pixel(g.line_px, y, Rgb(spec.line_color))),
            Axis::Horizontal => (0..w).for_each(|x| out.put_pixel(x, g.line_px, Rgb(spec.line_color))),
        }
    }
    let scale = glyph_scale(spec.font_size_px);
    for g in &layout {
        draw_number(&mut out, g.origin, &g.text, scale, spec.label_color, spec.label_background);
    }
    Ok(out)
}
