//! Synthetic slides: glass, pink tissue blobs and planted glyphs.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::glyphs::{GlyphSet, GLYPH_PX};
use super::SynthError;
use crate::bench::dataset::{write_manifest, QuestionRecord, Task};
use crate::par::Execution;
use crate::pyramid::{build_pyramid, open_slide, BuildOptions, PyramidHandle, Region, TileFormat};

pub const DEFAULT_SLIDE_PX: u32 = 4096;
pub const SIDECAR_FILE: &str = "truth.json";
pub const GLASS: [u8; 3] = [242, 242, 240];
pub const TISSUE: [u8; 3] = [225, 160, 205];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    /// Class name or `decoy-{seed}`.
    pub glyph: String,
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl Placement {
    pub fn region(&self) -> Region {
        Region::new(self.x, self.y, self.w, self.h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSlideSpec {
    pub slide_id: String,
    pub width: u32,
    pub height: u32,
    pub glyph_set: String,
    /// Seeds the tissue texture phases.
    pub texture_seed: u64,
    /// Tissue polygons in level-0 pixels; the first is the main blob.
    pub blobs: Vec<Vec<[f64; 2]>>,
    pub placements: Vec<Placement>,
}

/// Ground truth written next to the pyramid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub slide_id: String,
    pub glyph_set: String,
    pub placements: Vec<Placement>,
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(poly: &[[f64; 2]], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let [x1, y1] = poly[i];
        let [x2, y2] = poly[(i + 1) % n];
        if (y1 > y) != (y2 > y) && x < x1 + (y - y1) * (x2 - x1) / (y2 - y1) {
            inside = !inside;
        }
    }
    inside
}

/// Pixel spans `[x0, x1)` of row `y` covered by the polygon (pixel centers).
fn row_spans(poly: &[[f64; 2]], y: u32, width: u32) -> Vec<(u32, u32)> {
    let yc = y as f64 + 0.5;
    let n = poly.len();
    let mut xs: Vec<f64> = (0..n)
        .filter_map(|i| {
            let [x1, y1] = poly[i];
            let [x2, y2] = poly[(i + 1) % n];
            ((y1 > yc) != (y2 > yc)).then(|| x1 + (yc - y1) * (x2 - x1) / (y2 - y1))
        })
        .collect();
    xs.sort_by(f64::total_cmp);
    xs.chunks_exact(2)
        .filter_map(|pair| {
            let a = (pair[0] - 0.5).ceil().max(0.0) as u32;
            let b = ((pair[1] - 0.5).floor() + 1.0).clamp(0.0, width as f64) as u32;
            (a < b).then_some((a, b))
        })
        .collect()
}

/// Irregular star-shaped polygon around `(cx, cy)` with mean radius `r`.
pub fn blob_polygon(rng: &mut impl Rng, cx: f64, cy: f64, r: f64, wobble: f64) -> Vec<[f64; 2]> {
    let harmonics: Vec<(f64, f64, f64)> = (2..=4)
        .map(|k| (k as f64, rng.random_range(0.3..1.0) * wobble / 3.0, rng.random_range(0.0..std::f64::consts::TAU)))
        .collect();
    (0..96)
        .map(|i| {
            let t = i as f64 / 96.0 * std::f64::consts::TAU;
            let rad = r * (1.0 + harmonics.iter().map(|(k, a, p)| a * (k * t + p).sin()).sum::<f64>());
            [cx + rad * t.cos(), cy + rad * t.sin()]
        })
        .collect()
}

fn texture(seed: u64, width: u32, height: u32) -> (Vec<f32>, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (px, py): (f64, f64) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
    let (lx, ly) = (rng.random_range(700.0..1100.0), rng.random_range(700.0..1100.0));
    let fx = (0..width).map(|x| (x as f64 / lx * std::f64::consts::TAU + px).sin() as f32).collect();
    let fy = (0..height).map(|y| (y as f64 / ly * std::f64::consts::TAU + py).cos() as f32).collect();
    (fx, fy)
}

/// Rasterizes a spec at level 0.
pub fn render_level0(spec: &SynthSlideSpec, set: &GlyphSet, exec: Execution) -> Result<RgbImage, SynthError> {
    let (w, h) = (spec.width, spec.height);
    let (fx, fy) = texture(spec.texture_seed, w, h);
    let mut img = RgbImage::from_pixel(w, h, Rgb(GLASS));
    let row_len = w as usize * 3;
    exec.for_each_row(&mut img, row_len, |y, row| {
        let mut spans: Vec<(u32, u32)> = spec.blobs.iter().flat_map(|p| row_spans(p, y as u32, w)).collect();
        spans.sort_unstable();
        for (a, b) in spans {
            for x in a..b {
                let v = 14.0 * fx[x as usize] * fy[y];
                let px = &mut row[x as usize * 3..x as usize * 3 + 3];
                px[0] = (TISSUE[0] as f32 + v).round().clamp(0.0, 255.0) as u8;
                px[1] = (TISSUE[1] as f32 + 1.4 * v).round().clamp(0.0, 255.0) as u8;
                px[2] = (TISSUE[2] as f32 + 0.8 * v).round().clamp(0.0, 255.0) as u8;
            }
        }
    });
    for p in &spec.placements {
        let bmp = set
            .bitmap(&p.glyph)
            .ok_or_else(|| SynthError::InvalidSpec(format!("unknown glyph {:?}", p.glyph)))?;
        image::imageops::replace(&mut img, &bmp, p.x, p.y);
    }
    Ok(img)
}

impl SynthSlideSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        let long = self.width.max(self.height);
        if self.blobs.is_empty() || self.blobs.iter().any(|b| b.len() < 3) {
            return bad("at least one polygon with three vertices is required".into());
        }
        for (i, p) in self.placements.iter().enumerate() {
            if p.w != GLYPH_PX as i64 || p.h != GLYPH_PX as i64 {
                return bad(format!("placement {i} must be {GLYPH_PX}x{GLYPH_PX}"));
            }
            if p.w.max(p.h) as u32 > long / 64 {
                return bad(format!("glyph side {} exceeds slide long side / 64", p.w));
            }
            let r = p.region();
            let corners = [(r.x, r.y), (r.right(), r.y), (r.x, r.bottom()), (r.right(), r.bottom())];
            let inside = self.blobs.iter().any(|b| {
                corners
                    .iter()
                    .all(|&(x, y)| point_in_polygon(b, x as f64, y as f64))
            });
            if !inside {
                return bad(format!("placement {i} ({r}) is not inside a tissue blob"));
            }
            if self.placements[..i].iter().any(|q| q.region().intersect(&r).is_some()) {
                return bad(format!("placement {i} overlaps an earlier one"));
            }
        }
        Ok(())
    }
}

/// Renders the slide, builds its PNG pyramid in `out` and writes the sidecar.
pub fn generate_slide(spec: &SynthSlideSpec, out: &Path, exec: Execution) -> Result<(PyramidHandle, Sidecar), SynthError> {
    spec.validate()?;
    let set = GlyphSet::standard();
    if spec.glyph_set != set.id {
        return Err(SynthError::InvalidSpec(format!("unknown glyph set {:?}", spec.glyph_set)));
    }
    let img = render_level0(spec, &set, exec)?;
    let opts = BuildOptions {
        slide_id: spec.slide_id.clone(),
        tile_format: TileFormat::Png,
        exec,
        ..Default::default()
    };
    build_pyramid(&img, &opts, out)?;
    let sidecar = Sidecar {
        slide_id: spec.slide_id.clone(),
        glyph_set: spec.glyph_set.clone(),
        placements: spec.placements.clone(),
    };
    let path = out.join(SIDECAR_FILE);
    fs::write(&path, serde_json::to_string_pretty(&sidecar).expect("sidecar serializes") + "\n")
        .map_err(|source| SynthError::Io { path, source })?;
    Ok((open_slide(out)?, sidecar))
}

pub fn load_sidecar(slide_dir: &Path) -> Result<Sidecar, SynthError> {
    let path = slide_dir.join(SIDECAR_FILE);
    let text = fs::read_to_string(&path).map_err(|source| SynthError::Io { path: path.clone(), source })?;
    serde_json::from_str(&text).map_err(|e| SynthError::InvalidSpec(format!("{}: {e}", path.display())))
}

/// Layout of one suite slide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlideLayout {
    pub gold_class: usize,
    /// Decoys preceding the glyph in reading order.
    pub decoys_before: usize,
    /// Decoys following it.
    pub decoys_after: usize,
}

/// Candidate mark centres: a jittered grid whose columns are staggered in y,
/// so no two sites share a row and reading order is unambiguous.
fn sites(rng: &mut impl Rng, poly: &[[f64; 2]], cx: f64, cy: f64, size: u32) -> Vec<(f64, f64)> {
    let unit = size as f64 / 4096.0;
    let pitch = 700.0 * unit;
    let stagger = 120.0 * unit;
    let margin = 96.0 * unit.max(1.0);
    let mut out = Vec::new();
    for r in -2..=2 {
        for c in -2..=2i32 {
            let jx = rng.random_range(-60.0..60.0) * unit;
            let x = cx + c as f64 * pitch + jx;
            let y = cy + r as f64 * pitch + (c + 2) as f64 * stagger - 2.0 * stagger;
            let probe = [
                (x - margin, y - margin),
                (x + margin, y - margin),
                (x - margin, y + margin),
                (x + margin, y + margin),
                (x, y),
            ];
            if probe.iter().all(|&(px, py)| point_in_polygon(poly, px, py)) {
                out.push((x, y));
            }
        }
    }
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)));
    out
}

/// Builds a seeded slide spec following `layout`.
pub fn layout_spec(slide_id: &str, seed: u64, size: u32, layout: SlideLayout) -> Result<SynthSlideSpec, SynthError> {
    if size < GLYPH_PX * 64 {
        return Err(SynthError::InvalidSpec(format!(
            "slide side {size} is below {} (glyphs must stay under 1/64 of the long side)",
            GLYPH_PX * 64
        )));
    }
    let set = GlyphSet::standard();
    if layout.gold_class >= set.len() {
        return Err(SynthError::InvalidSpec(format!("class index {} out of range", layout.gold_class)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = size as f64 / 4096.0;
    let half = size as f64 / 2.0;
    let cx = half + rng.random_range(-150.0..150.0) * unit;
    let cy = half + rng.random_range(-150.0..150.0) * unit;
    let main = blob_polygon(&mut rng, cx, cy, 1400.0 * unit, 0.12);
    let mut blobs = vec![main.clone()];
    let corners = [(0.12, 0.12), (0.88, 0.12), (0.12, 0.88), (0.88, 0.88)];
    let first = rng.random_range(0..4);
    for k in 0..2 {
        let (fx, fy) = corners[(first + k * 2 + k) % 4];
        let r = rng.random_range(180.0..240.0) * unit;
        blobs.push(blob_polygon(&mut rng, fx * size as f64, fy * size as f64, r, 0.1));
    }
    let sites = sites(&mut rng, &main, cx, cy, size);
    let needed = layout.decoys_before + 1 + layout.decoys_after;
    if sites.len() < needed {
        return Err(SynthError::InvalidSpec(format!(
            "only {} mark sites fit in the main blob, {needed} needed",
            sites.len()
        )));
    }
    let g = GLYPH_PX as f64;
    let placements = sites[..needed]
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| Placement {
            glyph: if i == layout.decoys_before {
                set.class(layout.gold_class).0.to_string()
            } else {
                GlyphSet::decoy_id(seed.wrapping_mul(31).wrapping_add(i as u64))
            },
            x: (x - g / 2.0).round() as i64,
            y: (y - g / 2.0).round() as i64,
            w: GLYPH_PX as i64,
            h: GLYPH_PX as i64,
        })
        .collect();
    Ok(SynthSlideSpec {
        slide_id: slide_id.to_string(),
        width: size,
        height: size,
        glyph_set: set.id.to_string(),
        texture_seed: seed ^ 0x7E47,
        blobs,
        placements,
    })
}

pub const QUESTION_TEXT: &str = "Which glyph class is planted in the tissue on this slide?";

/// A suite slide plus its question.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub spec: SynthSlideSpec,
    pub layout: SlideLayout,
    pub question: QuestionRecord,
}

impl SuiteEntry {
    pub fn is_deep(&self) -> bool {
        self.layout.decoys_before > 0
    }
}

/// The default 20-slide suite: 10 shallow slides (glyph first in reading
/// order) and 10 deep ones with 1 to 5 decoys ahead of the glyph, two per
/// depth. Gold classes cycle, so each class is gold on 5 slides.
pub fn default_suite(seed: u64, size: u32) -> Result<Vec<SuiteEntry>, SynthError> {
    let set = GlyphSet::standard();
    let names = set.names();
    (0..20usize)
        .map(|i| {
            let layout = SlideLayout {
                gold_class: i % set.len(),
                decoys_before: if i < 10 { 0 } else { 1 + (i - 10) / 2 },
                decoys_after: 2,
            };
            let id = format!("synth-{i:02}");
            let slide_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let spec = layout_spec(&id, slide_seed, size, layout)?;
            let question = QuestionRecord {
                id: format!("q-{i:02}"),
                slide_ref: format!("slides/{id}"),
                task: Task::Vqa,
                question: QUESTION_TEXT.to_string(),
                choices: Some(names.clone()),
                gold: crate::agent::prompts::choice_letter(layout.gold_class).to_string(),
                class_label: None,
                slide_path: Default::default(),
            };
            Ok(SuiteEntry { spec, layout, question })
        })
        .collect()
}

/// Summary of a generated suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub slides: usize,
    pub dataset: std::path::PathBuf,
    pub deep_dataset: std::path::PathBuf,
}

/// Writes `slides/{id}/` pyramids plus `dataset.jsonl` and `deep.jsonl` under `out`.
pub fn generate_suite(out: &Path, seed: u64, size: u32, exec: Execution) -> Result<SuiteSummary, SynthError> {
    let entries = default_suite(seed, size)?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SynthError::Io { path, source }
    };
    fs::create_dir_all(out.join("slides")).map_err(io(out))?;
    // Slides in parallel; each build runs its own tile loop sequentially.
    let results = exec.map(&entries, |e| {
        generate_slide(&e.spec, &out.join(&e.question.slide_ref), Execution::Sequential).map(|_| ())
    });
    results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let all: Vec<QuestionRecord> = entries.iter().map(|e| e.question.clone()).collect();
    let deep: Vec<QuestionRecord> = entries.iter().filter(|e| e.is_deep()).map(|e| e.question.clone()).collect();
    let dataset = out.join("dataset.jsonl");
    let deep_dataset = out.join("deep.jsonl");
    write_manifest(&dataset, &all)?;
    write_manifest(&deep_dataset, &deep)?;
    Ok(SuiteSummary {
        slides: entries.len(),
        dataset,
        deep_dataset,
    })
}
