//! Glyph bitmaps and the normalized cross-correlation matcher.
//!
//! A glyph is a 64 px square: a 4 px dark frame around a 14x14 grid of 4 px
//! cells, each dark or light. Classes have fixed patterns; decoys share the
//! frame but carry a random interior that correlates poorly with every class.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::raster::{self, Color};

pub const GLYPH_PX: u32 = 64;
pub const FRAME_PX: u32 = 4;
pub const CELL_PX: u32 = 4;
pub const GRID: u32 = 14;
pub const GLYPH_SET_ID: &str = "glyphs-v1";
/// Minimum correlation accepted as a match.
pub const MATCH_NCC: f64 = 0.95;
/// Search slack around a candidate, in native pixels per side.
pub const SEARCH_PX: u32 = 12;

pub const INK: Color = [30, 20, 40];
pub const PAPER: Color = [240, 230, 240];

const CLASS_NAMES: [&str; 4] = ["alpha", "beta", "gamma", "delta"];
const CLASS_SEEDS: [u64; 4] = [0x5EED_0001, 0x5EED_0002, 0x5EED_0003, 0x5EED_0004];
const DECOY_PREFIX: &str = "decoy-";
const MAX_DECOY_NCC: f64 = 0.8;

fn pattern(seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let bits: Vec<bool> = (0..GRID * GRID).map(|_| rng.random_bool(0.5)).collect();
        let dark = bits.iter().filter(|&&b| b).count() as f64 / bits.len() as f64;
        // Keeps every glyph dark enough for the candidate detector.
        if (0.45..=0.6).contains(&dark) {
            return bits;
        }
    }
}

fn render(bits: &[bool]) -> RgbImage {
    RgbImage::from_fn(GLYPH_PX, GLYPH_PX, |x, y| {
        let inner = FRAME_PX..GLYPH_PX - FRAME_PX;
        if !inner.contains(&x) || !inner.contains(&y) {
            return Rgb(INK);
        }
        let (cx, cy) = ((x - FRAME_PX) / CELL_PX, (y - FRAME_PX) / CELL_PX);
        Rgb(if bits[(cy * GRID + cx) as usize] { INK } else { PAPER })
    })
}

fn luma_plane(img: &RgbImage) -> Vec<f32> {
    img.pixels().map(raster::luma).collect()
}

/// Zero-mean, unit-norm copy of `v`; all zeros when `v` is flat.
fn normalized(v: &[f32]) -> Vec<f32> {
    let mean = v.iter().sum::<f32>() / v.len() as f32;
    let centered: Vec<f32> = v.iter().map(|x| x - mean).collect();
    let norm = centered.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm < 1e-6 {
        return vec![0.0; v.len()];
    }
    centered.iter().map(|x| x / norm).collect()
}

/// Normalized cross-correlation of two equally sized images (luma).
pub fn ncc(a: &RgbImage, b: &RgbImage) -> f64 {
    assert_eq!(a.dimensions(), b.dimensions());
    let (na, nb) = (normalized(&luma_plane(a)), normalized(&luma_plane(b)));
    na.iter().zip(&nb).map(|(x, y)| (x * y) as f64).sum()
}

#[derive(Debug, Clone)]
pub struct GlyphSet {
    pub id: &'static str,
    classes: Vec<(String, RgbImage)>,
}

impl GlyphSet {
    pub fn standard() -> Self {
        GlyphSet {
            id: GLYPH_SET_ID,
            classes: CLASS_NAMES
                .iter()
                .zip(CLASS_SEEDS)
                .map(|(n, s)| (n.to_string(), render(&pattern(s))))
                .collect(),
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.classes.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class(&self, index: usize) -> (&str, &RgbImage) {
        let (n, b) = &self.classes[index];
        (n, b)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|(n, _)| n == name)
    }

    pub fn decoy_id(seed: u64) -> String {
        format!("{DECOY_PREFIX}{seed}")
    }

    /// Decoy bitmap for `seed`: the first candidate pattern that stays below
    /// the decoy correlation ceiling against every class.
    pub fn decoy(&self, seed: u64) -> RgbImage {
        for attempt in 0u64.. {
            let img = render(&pattern(seed.wrapping_mul(0x9E37_79B9).wrapping_add(attempt) ^ 0xDEC0));
            if self.classes.iter().all(|(_, c)| ncc(&img, c) < MAX_DECOY_NCC) {
                return img;
            }
        }
        unreachable!()
    }

    /// Bitmap for a class name or a `decoy-{seed}` id.
    pub fn bitmap(&self, id: &str) -> Option<RgbImage> {
        if let Some(i) = self.index_of(id) {
            return Some(self.classes[i].1.clone());
        }
        id.strip_prefix(DECOY_PREFIX)?.parse().ok().map(|s| self.decoy(s))
    }
}

/// Dark-mark detector plus template correlation at native glyph scale.
#[derive(Debug, Clone)]
pub struct Matcher {
    templates: Vec<Vec<f32>>,
}

/// A dark mark found in an image, in image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub cx: f64,
    pub cy: f64,
}

/// Best class and correlation at a candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchScore {
    pub class: usize,
    pub score: f64,
}

/// Box-filter mean luma below which a window counts as a dark mark.
const DARK_MEAN: f32 = 150.0;

impl Matcher {
    pub fn new(set: &GlyphSet) -> Self {
        Matcher {
            templates: set.classes.iter().map(|(_, b)| normalized(&luma_plane(b))).collect(),
        }
    }

    /// Dark marks of roughly glyph size at `scale` (image px per level-0 px),
    /// sorted top to bottom, then left to right.
    pub fn candidates(&self, img: &RgbImage, scale: f64) -> Vec<Candidate> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let win = ((GLYPH_PX as f64 * scale).round() as usize).max(3);
        if w < win || h < win {
            return Vec::new();
        }
        let luma = luma_plane(img);
        let mut sat = vec![0f64; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0f64;
            for x in 0..w {
                row += luma[y * w + x] as f64;
                sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
            }
        }
        let (mw, mh) = (w - win + 1, h - win + 1);
        let area = (win * win) as f64;
        let mut means: Vec<(f32, usize, usize)> = Vec::new();
        for y in 0..mh {
            for x in 0..mw {
                let s = sat[(y + win) * (w + 1) + x + win] - sat[y * (w + 1) + x + win] - sat[(y + win) * (w + 1) + x]
                    + sat[y * (w + 1) + x];
                let m = (s / area) as f32;
                if m < DARK_MEAN {
                    means.push((m, x, y));
                }
            }
        }
        means.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));
        let mut picked: Vec<(usize, usize)> = Vec::new();
        for &(_, x, y) in &means {
            if picked.iter().all(|&(px, py)| px.abs_diff(x) >= win || py.abs_diff(y) >= win) {
                picked.push((x, y));
            }
        }
        let half = win as f64 / 2.0;
        let mut out: Vec<Candidate> = picked
            .into_iter()
            .map(|(x, y)| Candidate {
                cx: x as f64 + half,
                cy: y as f64 + half,
            })
            .collect();
        out.sort_by(|a, b| a.cy.total_cmp(&b.cy).then(a.cx.total_cmp(&b.cx)));
        out
    }

    /// Resamples the neighbourhood of `c` to native scale and correlates it
    /// with every template over a small offset search.
    pub fn score(&self, img: &RgbImage, c: Candidate, scale: f64) -> Option<MatchScore> {
        let native = GLYPH_PX + 2 * SEARCH_PX;
        let side = (native as f64 * scale).round() as i64;
        if side < 3 {
            return None;
        }
        let x0 = (c.cx - side as f64 / 2.0).round() as i64;
        let y0 = (c.cy - side as f64 / 2.0).round() as i64;
        if x0 < 0 || y0 < 0 || x0 + side > img.width() as i64 || y0 + side > img.height() as i64 {
            return None;
        }
        let window = raster::crop(img, x0 as u32, y0 as u32, side as u32, side as u32);
        let window = if side as u32 == native {
            window
        } else {
            raster::resize_lanczos(&window, native, native)
        };
        let p = luma_plane(&window);
        let n = native as usize;
        let g = GLYPH_PX as usize;
        let mut best: Option<MatchScore> = None;
        for oy in 0..=(2 * SEARCH_PX) as usize {
            for ox in 0..=(2 * SEARCH_PX) as usize {
                let (mut sum, mut sq) = (0f64, 0f64);
                for y in 0..g {
                    for &v in &p[(oy + y) * n + ox..(oy + y) * n + ox + g] {
                        sum += v as f64;
                        sq += (v as f64) * (v as f64);
                    }
                }
                let var = sq - sum * sum / (g * g) as f64;
                if var < 1e-6 {
                    continue;
                }
                let norm = var.sqrt();
                for (class, t) in self.templates.iter().enumerate() {
                    let mut dot = 0f64;
                    for y in 0..g {
                        let row = &p[(oy + y) * n + ox..(oy + y) * n + ox + g];
                        let trow = &t[y * g..(y + 1) * g];
                        dot += row.iter().zip(trow).map(|(a, b)| (a * b) as f64).sum::<f64>();
                    }
                    let score = dot / norm;
                    if best.is_none_or(|b| score > b.score) {
                        best = Some(MatchScore { class, score });
                    }
                }
            }
        }
        best
    }

    /// Highest correlation over every candidate in `img`.
    pub fn max_score(&self, img: &RgbImage, scale: f64) -> f64 {
        self.candidates(img, scale)
            .into_iter()
            .filter_map(|c| self.score(img, c, scale))
            .map(|m| m.score)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// First candidate (in reading order) whose best score reaches [`MATCH_NCC`].
    pub fn identify(&self, img: &RgbImage, scale: f64) -> Option<(Candidate, MatchScore)> {
        self.candidates(img, scale)
            .into_iter()
            .find_map(|c| self.score(img, c, scale).filter(|m| m.score >= MATCH_NCC).map(|m| (c, m)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes_are_distinct() {
        let set = GlyphSet::standard();
        for i in 0..set.len() {
            for j in i + 1..set.len() {
                let r = ncc(set.class(i).1, set.class(j).1);
                assert!(r < 0.7, "classes {i} and {j} correlate at {r}");
            }
            assert!((ncc(set.class(i).1, set.class(i).1) - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn decoys_are_deterministic_and_unlike_classes() {
        let set = GlyphSet::standard();
        for seed in 0..20 {
            let d = set.decoy(seed);
            assert_eq!(d, set.decoy(seed));
            for i in 0..set.len() {
                assert!(ncc(&d, set.class(i).1) < MAX_DECOY_NCC);
            }
        }
        assert_eq!(set.bitmap("decoy-3").unwrap(), set.decoy(3));
        assert!(set.bitmap("omega").is_none());
    }

    #[test]
    fn glyph_structure() {
        let set = GlyphSet::standard();
        let (_, g) = set.class(0);
        assert_eq!(g.dimensions(), (GLYPH_PX, GLYPH_PX));
        assert_eq!(g.get_pixel(0, 0).0, INK);
        assert_eq!(g.get_pixel(63, 30).0, INK);
    }

    fn scene(set: &GlyphSet, class: usize, at: (u32, u32)) -> RgbImage {
        let mut img = RgbImage::from_pixel(400, 300, Rgb([225, 160, 205]));
        image::imageops::replace(&mut img, set.class(class).1, at.0 as i64, at.1 as i64);
        img
    }

    #[test]
    fn finds_and_identifies_native_glyphs() {
        let set = GlyphSet::standard();
        let m = Matcher::new(&set);
        let img = scene(&set, 2, (150, 100));
        let c = m.candidates(&img, 1.0);
        assert_eq!(c.len(), 1);
        assert!((c[0].cx - 182.0).abs() <= 2.0 && (c[0].cy - 132.0).abs() <= 2.0, "{c:?}");
        let (_, s) = m.identify(&img, 1.0).unwrap();
        assert_eq!(s.class, 2);
        assert!(s.score > 0.999);
    }

    #[test]
    fn decoy_is_not_identified() {
        let set = GlyphSet::standard();
        let m = Matcher::new(&set);
        let mut img = RgbImage::from_pixel(300, 300, Rgb([225, 160, 205]));
        image::imageops::replace(&mut img, &set.decoy(7), 100, 100);
        assert_eq!(m.candidates(&img, 1.0).len(), 1);
        assert!(m.identify(&img, 1.0).is_none());
    }

    #[test]
    fn quarter_scale_is_unreadable() {
        let set = GlyphSet::standard();
        let m = Matcher::new(&set);
        for class in 0..set.len() {
            let img = scene(&set, class, (160, 120));
            let small = raster::resize_lanczos(&img, 100, 75);
            assert!(m.max_score(&small, 0.25) < MATCH_NCC);
        }
    }
}
