#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use giant::bench::{QuestionRecord, Task};
use giant::par::Execution;
use giant::pyramid::{build_pyramid, open_slide, BuildOptions, PyramidHandle, TileFormat};
use image::{Rgb, RgbImage};

pub const W: u32 = 1800;
pub const H: u32 = 1300;
pub const BACKGROUND: [u8; 3] = [255, 255, 255];

/// Smooth pink tissue on off-white glass. Never pure white, so padding can
/// be counted exactly.
pub fn texture(w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| {
        let (fx, fy) = (x as f64, y as f64);
        let d = ((fx - 800.0).powi(2) / 600.0f64.powi(2) + (fy - 650.0).powi(2) / 450.0f64.powi(2)).sqrt();
        if d < 1.0 {
            let wave = ((fx / 37.0).sin() * (fy / 53.0).cos() * 30.0) as i32;
            Rgb([(215 + wave / 3) as u8, (140 + wave) as u8, (195 + wave / 2) as u8])
        } else {
            let g = (236 + ((fx + fy) / 200.0) as i32 % 10) as u8;
            Rgb([g, g, g.saturating_sub(2)])
        }
    })
}

pub struct Fixture {
    _dir: tempfile::TempDir,
    pub path: PathBuf,
    pub flat: RgbImage,
}

pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("slide");
        let flat = texture(W, H);
        let opts = BuildOptions {
            slide_id: "fixture".into(),
            tile_size_px: 128,
            min_top_long_side: 256,
            tile_format: TileFormat::Png,
            background: BACKGROUND,
            mpp: None,
            exec: Execution::default(),
        };
        build_pyramid(&flat, &opts, &path).unwrap();
        Fixture { _dir: dir, path, flat }
    })
}

pub fn handle() -> PyramidHandle {
    open_slide(&fixture().path).unwrap()
}

pub fn question(id: &str) -> QuestionRecord {
    QuestionRecord {
        id: id.into(),
        slide_ref: "slide".into(),
        task: Task::Vqa,
        question: "Which?".into(),
        choices: Some(vec!["alpha".into(), "beta".into(), "gamma".into()]),
        gold: "A".into(),
        class_label: None,
        slide_path: fixture().path.clone(),
    }
}
