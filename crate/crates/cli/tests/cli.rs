use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use image::{Rgb, RgbImage};

fn giant(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_giant"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_slide(dir: &Path) -> String {
    let img = RgbImage::from_fn(1500, 1100, |x, y| {
        if (x as i64 - 700).pow(2) + (y as i64 - 550).pow(2) < 400 * 400 {
            Rgb([220, 150, 200])
        } else {
            Rgb([245, 245, 245])
        }
    });
    img.save(dir.join("flat.png")).unwrap();
    let o = giant(&["ingest", "flat.png", "slide", "--tile-size", "256"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    "slide".into()
}

#[test]
fn bench_run_without_dataset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = giant(&["bench", "run"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn malformed_bbox_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let slide = small_slide(dir.path());
    for bad in ["1,2,3", "a,b,c,d", "0,0,-5,10", ""] {
        let o = giant(&["crop", &slide, "--bbox", bad], dir.path());
        assert_eq!(code(&o), 1, "bbox {bad:?}: {}", stderr(&o));
    }
    let o = giant(&["crop", &slide, "--bbox", "100,100,600,400", "--long-side", "300", "-o", "c.png", "--json"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let geom: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(geom["width"], 300);
    assert_eq!(geom["height"], 200);
    assert_eq!(image::open(dir.path().join("c.png")).unwrap().width(), 300);
}

#[test]
fn slide_tools_write_images() {
    let dir = tempfile::tempdir().unwrap();
    let slide = small_slide(dir.path());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("slide/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["levels"][0]["width_px"], 1500);

    let o = giant(&["thumb", &slide, "--long-side", "512", "--guides", "-o", "t.png"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(image::open(dir.path().join("t.png")).unwrap().width(), 512);

    let o = giant(&["segment", &slide, "-o", "m.png", "--json"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let frac = v["tissue_fraction"].as_f64().unwrap();
    // disc of radius 400 on 1500x1100
    assert!((frac - 0.3046).abs() < 0.03, "{frac}");
    let mask = image::open(dir.path().join("m.png")).unwrap().to_luma8();
    assert!(mask.pixels().all(|p| p[0] == 0 || p[0] == 255));
}

#[test]
fn runtime_and_config_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = giant(&["crop", "missing-slide", "--bbox", "0,0,10,10"], dir.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    fs::write(dir.path().join("d.jsonl"), "").unwrap();
    fs::write(dir.path().join("bad.toml"), "max_step = 4\n").unwrap();
    let o = giant(&["bench", "run", "--dataset", "d.jsonl", "--backend", "bad.toml", "--out", "o"], dir.path());
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("max_step"));

    let o = giant(&["bench", "run", "--dataset", "d.jsonl", "--vote", "4", "--out", "o"], dir.path());
    assert_eq!(code(&o), 1, "{}", stderr(&o));

    // remote backend without a key fails validation before any request
    fs::write(dir.path().join("remote.toml"), "backend = \"remote\"\napi_key_env = \"GIANT_TEST_NO_SUCH_KEY\"\n").unwrap();
    let o = giant(&["bench", "run", "--dataset", "d.jsonl", "--backend", "remote.toml", "--out", "o"], dir.path());
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn synth_bench_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = giant(&["synth", "--suite", "default", "--out", "suite", "--seed", "5"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(d.join("suite/slides/synth-00/truth.json").exists());

    let run = ["bench", "run", "--dataset", "suite/dataset.jsonl", "--mode", "giant", "--backend", "oracle", "--out", "run"];
    let o = giant(&run, d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("accuracy: 1.0000"), "{}", stdout(&o));
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["metric"]["value"], 1.0);

    // the run config travels with every trace
    let trace = fs::read_to_string(d.join("run/traces/q-00/run_0/trace.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    assert_eq!(header["extra"]["mode"], "giant");
    assert_eq!(header["extra"]["backend"], "oracle");
    assert_eq!(header["extra"]["max_steps"], 20);

    // a second run resumes from the traces
    let o = giant(&run, d);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).matches("resumed").count(), 20, "{}", stdout(&o));

    let o = giant(&["report", "run"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let index = fs::read_to_string(d.join("run/report/index.html")).unwrap();
    assert_eq!(index.matches("<tr><td><a").count(), 20);

    // external predictions: half right
    let mut csv = String::from("id,prediction\n");
    for i in 0..20 {
        let gold = ["alpha", "beta", "gamma", "delta"][i % 4];
        csv.push_str(&format!("q-{i:02},{}\n", if i < 10 { gold } else { "none of these" }));
    }
    fs::write(d.join("preds.csv"), csv).unwrap();
    let o = giant(&["bench", "score", "--pred", "preds.csv", "--dataset", "suite/dataset.jsonl", "--json"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(m["value"], 0.5);

    let o = giant(
        &["bench", "sweep", "--dataset", "suite/deep.jsonl", "--param", "T", "--values", "3,20", "--out", "sweep"],
        d,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(d.join("sweep/sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3, "{table}");
}
