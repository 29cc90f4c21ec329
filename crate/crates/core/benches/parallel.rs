//! Sequential vs rayon execution of the data-parallel loops.
//!
//! `cargo bench -p giant-core --bench parallel`; with
//! `--no-default-features` both arms run sequentially.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use giant::bench::{bootstrap_std, Metric, Scored};
use giant::par::Execution;
use giant::pyramid::{build_pyramid, BuildOptions};
use giant::tissue::{median_blur, segment_raster, SegmentParams};
use image::{Rgb, RgbImage};

const ARMS: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn raster(w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| {
        let v = ((x * 7 + y * 13) % 97) as u8;
        if (x as i64 - w as i64 / 2).pow(2) + (y as i64 - h as i64 / 2).pow(2) < (w as i64 / 3).pow(2) {
            Rgb([200 + v / 4, 120 + v, 190])
        } else {
            Rgb([240, 240 - v / 8, 238])
        }
    })
}

fn bootstrap(c: &mut Criterion) {
    let records: Vec<Scored> = (0..500)
        .map(|i| Scored {
            id: i.to_string(),
            gold: format!("c{}", i % 5),
            prediction: format!("c{}", (i * 7) % 5),
            group: format!("c{}", i % 5),
        })
        .collect();
    let mut g = c.benchmark_group("bootstrap_1000");
    for (name, exec) in ARMS {
        g.bench_function(name, |b| b.iter(|| bootstrap_std(black_box(&records), Metric::BalancedAccuracy, 1000, 7, exec)));
    }
    g.finish();
}

fn filters(c: &mut Criterion) {
    let img = raster(1024, 1024);
    let sat: Vec<u8> = img.pixels().map(giant::raster::saturation).collect();
    let mut g = c.benchmark_group("tissue");
    for (name, exec) in ARMS {
        g.bench_with_input(BenchmarkId::new("median7", name), &exec, |b, &exec| {
            b.iter(|| median_blur(black_box(&sat), 1024, 1024, 7, exec))
        });
        g.bench_with_input(BenchmarkId::new("segment", name), &exec, |b, &exec| {
            b.iter(|| segment_raster(black_box(&img), &SegmentParams::default(), exec))
        });
    }
    g.finish();
}

fn pyramid(c: &mut Criterion) {
    let img = raster(2048, 2048);
    let dir = tempfile::tempdir().unwrap();
    let mut g = c.benchmark_group("build_pyramid_2048");
    g.sample_size(10);
    for (name, exec) in ARMS {
        let opts = BuildOptions {
            tile_size_px: 256,
            min_top_long_side: 256,
            exec,
            ..BuildOptions::default()
        };
        g.bench_function(name, |b| b.iter(|| build_pyramid(black_box(&img), &opts, &dir.path().join(name)).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, bootstrap, filters, pyramid);
criterion_main!(benches);
