//! Small raster helpers shared by every module.

use std::io::Cursor;

use image::imageops::{self, FilterType};
use image::{ImageFormat, Rgb, RgbImage};
use sha2::{Digest, Sha256};

pub type Color = [u8; 3];

/// Lanczos3 resize; returns a copy when the size is unchanged.
pub fn resize_lanczos(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    if img.dimensions() == (width, height) {
        return img.clone();
    }
    imageops::resize(img, width.max(1), height.max(1), FilterType::Lanczos3)
}

/// Dimensions with the long side set to `long_side` and the aspect preserved.
pub fn fit_long_side(width: u64, height: u64, long_side: u32) -> (u32, u32) {
    let long = width.max(height) as f64;
    let scale = long_side as f64 / long;
    let w = ((width as f64 * scale).round() as u32).max(1);
    let h = ((height as f64 * scale).round() as u32).max(1);
    if width >= height {
        (long_side, h.min(long_side))
    } else {
        (w.min(long_side), long_side)
    }
}

/// Copies a sub-rectangle; the rectangle must lie inside `img`.
pub fn crop(img: &RgbImage, x: u32, y: u32, w: u32, h: u32) -> RgbImage {
    imageops::crop_imm(img, x, y, w, h).to_image()
}

pub fn filled(width: u32, height: u32, color: Color) -> RgbImage {
    RgbImage::from_pixel(width, height, Rgb(color))
}

/// Mean absolute channel difference, in 0..=255 units.
pub fn mean_abs_diff(a: &RgbImage, b: &RgbImage) -> f64 {
    assert_eq!(a.dimensions(), b.dimensions(), "raster size mismatch");
    let total: u64 = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&p, &q)| (p as i32 - q as i32).unsigned_abs() as u64)
        .sum();
    total as f64 / a.as_raw().len().max(1) as f64
}

/// Rec. 601 luma in 0..=255.
#[inline]
pub fn luma(p: &Rgb<u8>) -> f32 {
    0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32
}

/// HSV saturation scaled to 0..=255.
#[inline]
pub fn saturation(p: &Rgb<u8>) -> u8 {
    let max = p[0].max(p[1]).max(p[2]);
    let min = p[0].min(p[1]).min(p[2]);
    if max == 0 {
        0
    } else {
        ((max - min) as u32 * 255 / max as u32) as u8
    }
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .expect("png encoding into memory cannot fail");
    buf.into_inner()
}

/// Hex SHA-256 over dimensions and raw pixels.
pub fn pixel_digest(img: &RgbImage) -> String {
    let mut hasher = Sha256::new();
    hasher.update(img.width().to_le_bytes());
    hasher.update(img.height().to_le_bytes());
    hasher.update(img.as_raw());
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
