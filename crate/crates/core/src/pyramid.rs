//! Tiled multi-resolution slide storage.
//!
//! A slide directory holds `manifest.json` and `tiles/{level}/{col}_{row}.{ext}`
//! in a row-major grid. Level 0 is full resolution; every coarser level stores
//! the slide at `1 / downsample` scale. Regions are always expressed in level-0
//! pixels and reads outside the slide are padded with the manifest background.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use image::codecs::jpeg::JpegEncoder;
use image::codecs::png::{CompressionType, FilterType as PngFilter, PngEncoder};
use image::{ExtendedColorType, ImageEncoder, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::Execution;
use crate::raster::{self, Color};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_TILE_SIZE: u32 = 512;
pub const MIN_TILE_SIZE: u32 = 64;
pub const JPEG_QUALITY: u8 = 90;
const DEFAULT_CACHE_TILES: usize = 96;

#[derive(Debug, Error)]
pub enum PyramidError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {source}")]
    ManifestJson {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid manifest at level {level}: {reason}")]
    InvalidLevel { level: usize, reason: String },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("level {level} out of range (slide has {count} levels)")]
    LevelOutOfRange { level: usize, count: usize },
    #[error("region must have w >= 1 and h >= 1, got {w}x{h}")]
    EmptyRegion { w: i64, h: i64 },
    #[error("source {width}x{height} is smaller than one {tile}px tile")]
    SourceTooSmall { width: u32, height: u32, tile: u32 },
    #[error("tile {path} could not be decoded: {source}")]
    TileDecode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("tile {path} is {got:?}, expected {expected:?}")]
    TileSize {
        path: PathBuf,
        got: (u32, u32),
        expected: (u32, u32),
    },
    #[error("tile encoding failed: {0}")]
    Encode(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, PyramidError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PyramidError + '_ {
    move |source| PyramidError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TileFormat {
    #[default]
    Png,
    Jpeg,
}

impl TileFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TileFormat::Png => "png",
            TileFormat::Jpeg => "jpg",
        }
    }
}

impl std::str::FromStr for TileFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "png" => Ok(TileFormat::Png),
            "jpeg" | "jpg" => Ok(TileFormat::Jpeg),
            other => Err(format!("unknown tile format {other:?} (expected png or jpeg)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelInfo {
    pub index: usize,
    pub width_px: u32,
    pub height_px: u32,
    pub downsample: f64,
}

impl LevelInfo {
    pub fn long_side(&self) -> u32 {
        self.width_px.max(self.height_px)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideManifest {
    pub slide_id: String,
    #[serde(default)]
    pub mpp: Option<f64>,
    pub tile_size_px: u32,
    pub tile_format: TileFormat,
    pub levels: Vec<LevelInfo>,
    pub background: Color,
}

impl SlideManifest {
    pub fn level0(&self) -> &LevelInfo {
        &self.levels[0]
    }

    /// Level-0 `(width, height)`.
    pub fn dimensions(&self) -> (u32, u32) {
        (self.levels[0].width_px, self.levels[0].height_px)
    }

    pub fn level(&self, level: usize) -> Result<&LevelInfo> {
        self.levels.get(level).ok_or(PyramidError::LevelOutOfRange {
            level,
            count: self.levels.len(),
        })
    }

    pub fn tile_grid(&self, level: usize) -> Result<(u32, u32)> {
        let info = self.level(level)?;
        let t = self.tile_size_px;
        Ok((info.width_px.div_ceil(t), info.height_px.div_ceil(t)))
    }

    /// Checks every structural invariant; errors name the offending level.
    pub fn validate(&self) -> Result<()> {
        if self.tile_size_px < MIN_TILE_SIZE {
            return Err(PyramidError::InvalidManifest(format!(
                "tile_size_px {} is below {MIN_TILE_SIZE}",
                self.tile_size_px
            )));
        }
        let Some(base) = self.levels.first() else {
            return Err(PyramidError::InvalidManifest("no levels".into()));
        };
        if base.downsample != 1.0 {
            return Err(PyramidError::InvalidLevel {
                level: 0,
                reason: format!("downsample must be exactly 1.0, got {}", base.downsample),
            });
        }
        for (i, lvl) in self.levels.iter().enumerate() {
            if lvl.index != i {
                return Err(PyramidError::InvalidLevel {
                    level: i,
                    reason: format!("index field is {}", lvl.index),
                });
            }
            if lvl.width_px == 0 || lvl.height_px == 0 || !lvl.downsample.is_finite() {
                return Err(PyramidError::InvalidLevel {
                    level: i,
                    reason: "empty dimensions or non-finite downsample".into(),
                });
            }
            if i > 0 {
                let prev = &self.levels[i - 1];
                if lvl.downsample <= prev.downsample {
                    return Err(PyramidError::InvalidLevel {
                        level: i,
                        reason: format!(
                            "downsample {} does not increase over level {} ({})",
                            lvl.downsample,
                            i - 1,
                            prev.downsample
                        ),
                    });
                }
                if lvl.width_px >= prev.width_px || lvl.height_px >= prev.height_px {
                    return Err(PyramidError::InvalidLevel {
                        level: i,
                        reason: "dimensions do not strictly decrease".into(),
                    });
                }
            }
            let ew = base.width_px as f64 / lvl.downsample;
            let eh = base.height_px as f64 / lvl.downsample;
            if (ew - lvl.width_px as f64).abs() > 1.0 || (eh - lvl.height_px as f64).abs() > 1.0 {
                return Err(PyramidError::InvalidLevel {
                    level: i,
                    reason: format!(
                        "{}x{} inconsistent with level-0 size at downsample {}",
                        lvl.width_px, lvl.height_px, lvl.downsample
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Absolute level-0 bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl Region {
    pub const fn new(x: i64, y: i64, w: i64, h: i64) -> Self {
        Region { x, y, w, h }
    }

    pub fn long_side(&self) -> i64 {
        self.w.max(self.h)
    }

    pub fn right(&self) -> i64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> i64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + self.w as f64 / 2.0,
            self.y as f64 + self.h as f64 / 2.0,
        )
    }

    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        px >= self.x as f64 && px < self.right() as f64 && py >= self.y as f64 && py < self.bottom() as f64
    }

    pub fn intersect(&self, other: &Region) -> Option<Region> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x1 > x0 && y1 > y0).then(|| Region::new(x0, y0, x1 - x0, y1 - y0))
    }

    pub fn area(&self) -> i64 {
        self.w * self.h
    }
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "x={}, y={}, w={}, h={}", self.x, self.y, self.w, self.h)
    }
}

/// Ingestion parameters for [`build_pyramid`].
#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub slide_id: String,
    pub tile_size_px: u32,
    pub min_top_long_side: u32,
    pub tile_format: TileFormat,
    pub background: Color,
    pub mpp: Option<f64>,
    pub exec: Execution,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            slide_id: "slide".into(),
            tile_size_px: DEFAULT_TILE_SIZE,
            min_top_long_side: 1024,
            tile_format: TileFormat::Png,
            background: [255, 255, 255],
            mpp: None,
            exec: Execution::default(),
        }
    }
}

fn tile_path(root: &Path, level: usize, col: u32, row: u32, format: TileFormat) -> PathBuf {
    root.join("tiles")
        .join(level.to_string())
        .join(format!("{col}_{row}.{}", format.extension()))
}

fn encode_tile(tile: &RgbImage, format: TileFormat, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    match format {
        TileFormat::Png => PngEncoder::new_with_quality(&mut out, CompressionType::Fast, PngFilter::Adaptive)
            .write_image(tile.as_raw(), tile.width(), tile.height(), ExtendedColorType::Rgb8)?,
        TileFormat::Jpeg => JpegEncoder::new_with_quality(&mut out, JPEG_QUALITY).write_image(
            tile.as_raw(),
            tile.width(),
            tile.height(),
            ExtendedColorType::Rgb8,
        )?,
    }
    out.flush().map_err(io_err(path))
}

/// Ingests a flat raster as a ×2 Lanczos ladder of tiled levels under `out`.
///
/// Levels are added until the long side is at most
/// `max(min_top_long_side, tile_size_px)`.
pub fn build_pyramid(source: &RgbImage, opts: &BuildOptions, out: &Path) -> Result<SlideManifest> {
    let (w0, h0) = source.dimensions();
    if opts.tile_size_px < MIN_TILE_SIZE {
        return Err(PyramidError::InvalidManifest(format!(
            "tile size {} is below {MIN_TILE_SIZE}",
            opts.tile_size_px
        )));
    }
    if w0.max(h0) < opts.tile_size_px {
        return Err(PyramidError::SourceTooSmall {
            width: w0,
            height: h0,
            tile: opts.tile_size_px,
        });
    }
    let stop_at = opts.min_top_long_side.max(opts.tile_size_px);

    let mut rasters: Vec<RgbImage> = Vec::new();
    let mut levels = vec![LevelInfo {
        index: 0,
        width_px: w0,
        height_px: h0,
        downsample: 1.0,
    }];
    loop {
        let last = levels.last().unwrap();
        let (lw, lh) = (last.width_px, last.height_px);
        let (nw, nh) = (lw.div_ceil(2), lh.div_ceil(2));
        if lw.max(lh) <= stop_at || nw >= lw || nh >= lh {
            break;
        }
        let prev = rasters.last().unwrap_or(source);
        let next = raster::resize_lanczos(prev, nw, nh);
        levels.push(LevelInfo {
            index: levels.len(),
            width_px: nw,
            height_px: nh,
            downsample: last.downsample * 2.0,
        });
        rasters.push(next);
    }

    let manifest = SlideManifest {
        slide_id: opts.slide_id.clone(),
        mpp: opts.mpp,
        tile_size_px: opts.tile_size_px,
        tile_format: opts.tile_format,
        levels,
        background: opts.background,
    };
    manifest.validate()?;

    let t = opts.tile_size_px;
    for (level, info) in manifest.levels.iter().enumerate() {
        let img = if level == 0 { source } else { &rasters[level - 1] };
        let dir = out.join("tiles").join(level.to_string());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let (cols, rows) = (info.width_px.div_ceil(t), info.height_px.div_ceil(t));
        let keys: Vec<(u32, u32)> = (0..rows).flat_map(|r| (0..cols).map(move |c| (c, r))).collect();
        let results = opts.exec.map(&keys, |&(col, row)| {
            let (x, y) = (col * t, row * t);
            let tile = raster::crop(img, x, y, t.min(info.width_px - x), t.min(info.height_px - y));
            encode_tile(&tile, opts.tile_format, &tile_path(out, level, col, row, opts.tile_format))
        });
        results.into_iter().collect::<Result<Vec<()>>>()?;
    }

    let path = out.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(manifest)
}

type TileKey = (usize, u32, u32);
type TileMap = (HashMap<TileKey, Arc<RgbImage>>, VecDeque<TileKey>);

/// Bounded FIFO cache of decoded tiles; outputs never depend on its state.
struct TileCache {
    capacity: usize,
    inner: Mutex<TileMap>,
}

impl TileCache {
    fn new(capacity: usize) -> Self {
        TileCache {
            capacity,
            inner: Mutex::new((HashMap::new(), VecDeque::new())),
        }
    }

    fn get(&self, key: &TileKey) -> Option<Arc<RgbImage>> {
        self.inner.lock().unwrap().0.get(key).cloned()
    }

    fn insert(&self, key: TileKey, tile: Arc<RgbImage>) {
        if self.capacity == 0 {
            return;
        }
        let mut guard = self.inner.lock().unwrap();
        let (map, order) = &mut *guard;
        if map.insert(key, tile).is_none() {
            order.push_back(key);
            while order.len() > self.capacity {
                if let Some(old) = order.pop_front() {
                    map.remove(&old);
                }
            }
        }
    }
}

/// Read-only handle on an opened slide directory.
pub struct PyramidHandle {
    manifest: SlideManifest,
    root: PathBuf,
    cache: TileCache,
    exec: Execution,
}

impl std::fmt::Debug for PyramidHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PyramidHandle")
            .field("slide_id", &self.manifest.slide_id)
            .field("root", &self.root)
            .field("levels", &self.manifest.levels.len())
            .finish()
    }
}

/// Opens a slide directory (or its `manifest.json`) without decoding any tile.
pub fn open_slide(path: &Path) -> Result<PyramidHandle> {
    let (root, manifest_path) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (root, path.to_path_buf())
    };
    let bytes = fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: SlideManifest =
        serde_json::from_slice(&bytes).map_err(|source| PyramidError::ManifestJson {
            path: manifest_path.clone(),
            source,
        })?;
    manifest.validate()?;
    Ok(PyramidHandle {
        manifest,
        root,
        cache: TileCache::new(DEFAULT_CACHE_TILES),
        exec: Execution::default(),
    })
}

impl PyramidHandle {
    pub fn manifest(&self) -> &SlideManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn slide_id(&self) -> &str {
        &self.manifest.slide_id
    }

    /// Overrides the tile-stitching execution strategy.
    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    /// Sets the decoded-tile cache capacity (0 disables caching).
    pub fn with_cache_capacity(mut self, tiles: usize) -> Self {
        self.cache = TileCache::new(tiles);
        self
    }

    pub fn read_tile(&self, level: usize, col: u32, row: u32) -> Result<Arc<RgbImage>> {
        let key = (level, col, row);
        if let Some(tile) = self.cache.get(&key) {
            return Ok(tile);
        }
        let info = self.manifest.level(level)?;
        let t = self.manifest.tile_size_px;
        let expected = (
            t.min(info.width_px.saturating_sub(col * t)),
            t.min(info.height_px.saturating_sub(row * t)),
        );
        let path = tile_path(&self.root, level, col, row, self.manifest.tile_format);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let tile = image::load_from_memory(&bytes)
            .map_err(|source| PyramidError::TileDecode {
                path: path.clone(),
                source,
            })?
            .into_rgb8();
        if tile.dimensions() != expected {
            return Err(PyramidError::TileSize {
                path,
                got: tile.dimensions(),
                expected,
            });
        }
        let tile = Arc::new(tile);
        self.cache.insert(key, tile.clone());
        Ok(tile)
    }

    /// Reads a `width × height` rectangle in `level` pixel coordinates.
    pub fn read_level_rect(&self, level: usize, lx: i64, ly: i64, width: u32, height: u32) -> Result<RgbImage> {
        let info = self.manifest.level(level)?;
        let mut out = raster::filled(width, height, self.manifest.background);
        let x0 = lx.max(0);
        let y0 = ly.max(0);
        let x1 = (lx + width as i64).min(info.width_px as i64);
        let y1 = (ly + height as i64).min(info.height_px as i64);
        if x1 <= x0 || y1 <= y0 {
            return Ok(out);
        }
        let t = self.manifest.tile_size_px as i64;
        let keys: Vec<(u32, u32)> = ((y0 / t)..=((y1 - 1) / t))
            .flat_map(|r| ((x0 / t)..=((x1 - 1) / t)).map(move |c| (c as u32, r as u32)))
            .collect();
        let tiles = self.exec.map(&keys, |&(c, r)| self.read_tile(level, c, r));
        for (&(col, row), tile) in keys.iter().zip(tiles) {
            let tile = tile?;
            let (tx, ty) = (col as i64 * t, row as i64 * t);
            let sx0 = x0.max(tx);
            let sy0 = y0.max(ty);
            let sx1 = x1.min(tx + tile.width() as i64);
            let sy1 = y1.min(ty + tile.height() as i64);
            let span = ((sx1 - sx0) * 3) as usize;
            for sy in sy0..sy1 {
                let src_off = (((sy - ty) * tile.width() as i64 + (sx0 - tx)) * 3) as usize;
                let dst_off = (((sy - ly) * width as i64 + (sx0 - lx)) * 3) as usize;
                out.as_mut()[dst_off..dst_off + span]
                    .copy_from_slice(&tile.as_raw()[src_off..src_off + span]);
            }
        }
        Ok(out)
    }

    /// Output size of [`read_region`](Self::read_region) at `level`.
    pub fn region_output_size(&self, level: usize, region: &Region) -> Result<(u32, u32)> {
        let ds = self.manifest.level(level)?.downsample;
        Ok((
            (region.w as f64 / ds).ceil() as u32,
            (region.h as f64 / ds).ceil() as u32,
        ))
    }

    /// Reads a level-0 region rendered at `level`'s scale, padding outside the slide.
    pub fn read_region(&self, level: usize, region: &Region) -> Result<RgbImage> {
        if region.w < 1 || region.h < 1 {
            return Err(PyramidError::EmptyRegion {
                w: region.w,
                h: region.h,
            });
        }
        let ds = self.manifest.level(level)?.downsample;
        let (w, h) = self.region_output_size(level, region)?;
        let lx = (region.x as f64 / ds).floor() as i64;
        let ly = (region.y as f64 / ds).floor() as i64;
        self.read_level_rect(level, lx, ly, w, h)
    }

    /// Full raster of one level at its stored size.
    pub fn read_level(&self, level: usize) -> Result<RgbImage> {
        let info = self.manifest.level(level)?;
        self.read_level_rect(level, 0, 0, info.width_px, info.height_px)
    }

    /// Whole-slide rendering with long side `max_long_side`, aspect preserved.
    ///
    /// Reads the coarsest level whose long side is at least `max_long_side`
    /// (level 0 when none is) and Lanczos-resizes it.
    pub fn thumbnail(&self, max_long_side: u32) -> Result<RgbImage> {
        let max_long_side = max_long_side.max(16);
        let level = self
            .manifest
            .levels
            .iter()
            .rposition(|l| l.long_side() >= max_long_side)
            .unwrap_or(0);
        let info = &self.manifest.levels[level];
        let img = self.read_level(level)?;
        if info.long_side() == max_long_side {
            return Ok(img);
        }
        let (w, h) = raster::fit_long_side(info.width_px as u64, info.height_px as u64, max_long_side);
        Ok(raster::resize_lanczos(&img, w, h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x % 251) as u8, (y % 241) as u8, ((x * 7 + y * 3) % 256) as u8]))
    }

    fn build(src: &RgbImage, tile: u32, min_top: u32, dir: &Path) -> SlideManifest {
        let opts = BuildOptions {
            tile_size_px: tile,
            min_top_long_side: min_top,
            ..Default::default()
        };
        build_pyramid(src, &opts, dir).unwrap()
    }

    #[test]
    fn ladder_for_square_source() {
        let dir = tempfile::tempdir().unwrap();
        let m = build(&gradient(4096, 4096), 512, 1024, dir.path());
        let ds: Vec<f64> = m.levels.iter().map(|l| l.downsample).collect();
        let dims: Vec<u32> = m.levels.iter().map(|l| l.width_px).collect();
        assert_eq!(ds, vec![1.0, 2.0, 4.0]);
        assert_eq!(dims, vec![4096, 2048, 1024]);
    }

    #[test]
    fn small_source_gets_single_level() {
        let dir = tempfile::tempdir().unwrap();
        let m = build(&gradient(1000, 800), 512, 1024, dir.path());
        assert_eq!(m.levels.len(), 1);
        assert_eq!(m.levels[0].downsample, 1.0);
    }

    #[test]
    fn source_smaller_than_tile_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let opts = BuildOptions::default();
        let err = build_pyramid(&gradient(300, 200), &opts, dir.path()).unwrap_err();
        assert!(matches!(err, PyramidError::SourceTooSmall { .. }));
    }

    #[test]
    fn unwritable_destination_errors() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let err = build_pyramid(&gradient(512, 512), &BuildOptions::default(), &blocker.join("out")).unwrap_err();
        assert!(matches!(err, PyramidError::Io { .. }));
    }

    #[test]
    fn round_trip_level0_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let src = gradient(512, 512);
        build(&src, 512, 1024, dir.path());
        let h = open_slide(dir.path()).unwrap();
        assert_eq!(h.read_level(0).unwrap(), src);
        let full = h.read_region(0, &Region::new(0, 0, 512, 512)).unwrap();
        assert_eq!(*h.read_tile(0, 0, 0).unwrap(), full);
    }

    #[test]
    fn junction_read_matches_flat_crop() {
        let dir = tempfile::tempdir().unwrap();
        let src = gradient(1024, 1024);
        build(&src, 256, 256, dir.path());
        let h = open_slide(dir.path()).unwrap();
        let r = Region::new(200, 180, 120, 150);
        let got = h.read_region(0, &r).unwrap();
        assert_eq!(got, raster::crop(&src, 200, 180, 120, 150));
    }

    #[test]
    fn right_overhang_pads_with_background() {
        let dir = tempfile::tempdir().unwrap();
        let src = RgbImage::from_pixel(512, 512, Rgb([10, 20, 30]));
        build(&src, 256, 256, dir.path());
        let h = open_slide(dir.path()).unwrap();
        let got = h.read_region(0, &Region::new(412, 0, 200, 10)).unwrap();
        for (x, _, p) in got.enumerate_pixels() {
            let expected = if x < 100 { [10, 20, 30] } else { [255, 255, 255] };
            assert_eq!(p.0, expected, "x={x}");
        }
    }

    #[test]
    fn output_size_rounds_up() {
        let dir = tempfile::tempdir().unwrap();
        build(&gradient(2048, 2048), 256, 256, dir.path());
        let h = open_slide(dir.path()).unwrap();
        let r = Region::new(3, 5, 101, 99);
        let img = h.read_region(2, &r).unwrap();
        assert_eq!(img.dimensions(), (26, 25));
        assert!(matches!(
            h.read_region(9, &r),
            Err(PyramidError::LevelOutOfRange { level: 9, .. })
        ));
        assert!(matches!(
            h.read_region(0, &Region::new(0, 0, 0, 4)),
            Err(PyramidError::EmptyRegion { .. })
        ));
    }

    #[test]
    fn non_monotone_manifest_names_level() {
        let dir = tempfile::tempdir().unwrap();
        let m = SlideManifest {
            slide_id: "bad".into(),
            mpp: None,
            tile_size_px: 256,
            tile_format: TileFormat::Png,
            levels: vec![
                LevelInfo { index: 0, width_px: 4096, height_px: 4096, downsample: 1.0 },
                LevelInfo { index: 1, width_px: 1024, height_px: 1024, downsample: 4.0 },
                LevelInfo { index: 2, width_px: 2048, height_px: 2048, downsample: 2.0 },
            ],
            background: [255, 255, 255],
        };
        fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_vec(&m).unwrap()).unwrap();
        match open_slide(dir.path()) {
            Err(PyramidError::InvalidLevel { level, .. }) => assert_eq!(level, 2),
            other => panic!("expected monotonicity error, got {other:?}"),
        }
    }

    #[test]
    fn missing_tile_fails_lazily() {
        let dir = tempfile::tempdir().unwrap();
        build(&gradient(512, 512), 256, 256, dir.path());
        fs::remove_file(dir.path().join("tiles/0/1_1.png")).unwrap();
        let h = open_slide(dir.path()).unwrap();
        assert!(h.read_region(0, &Region::new(0, 0, 100, 100)).is_ok());
        assert!(matches!(
            h.read_region(0, &Region::new(300, 300, 10, 10)),
            Err(PyramidError::Io { .. })
        ));
    }

    #[test]
    fn thumbnail_aspect_and_identity() {
        let dir = tempfile::tempdir().unwrap();
        build(&gradient(4096, 2048), 512, 1024, dir.path());
        let h = open_slide(dir.path()).unwrap();
        assert_eq!(h.thumbnail(1024).unwrap().dimensions(), (1024, 512));
        assert_eq!(h.thumbnail(2048).unwrap(), h.read_level(1).unwrap());
    }

    #[test]
    fn jpeg_tiles_decode_to_expected_size() {
        let dir = tempfile::tempdir().unwrap();
        let opts = BuildOptions {
            tile_size_px: 256,
            min_top_long_side: 256,
            tile_format: TileFormat::Jpeg,
            ..Default::default()
        };
        build_pyramid(&gradient(700, 600), &opts, dir.path()).unwrap();
        let h = open_slide(dir.path()).unwrap();
        assert_eq!(h.read_tile(0, 2, 2).unwrap().dimensions(), (188, 88));
        let img = h.read_level(0).unwrap();
        assert!(raster::mean_abs_diff(&img, &gradient(700, 600)) < 8.0);
    }
}
