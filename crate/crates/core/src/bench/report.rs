//! Static HTML report over a run directory's traces.
//!
//! Output depends only on the trace files, so regenerating from the same
//! traces yields identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde_json::Value;

use super::BenchError;
use crate::agent::action::Action;
use crate::agent::trace::{load_trace, LoadedTrace, TRACE_FILE};
use crate::pyramid::Region;

const BOX_COLORS: [[u8; 3]; 4] = [[230, 25, 75], [0, 130, 200], [60, 180, 75], [245, 130, 48]];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Pixel rectangle `[x0, y0, x1, y1]` (inclusive) of a level-0 region drawn
/// on an overview raster of `view` size.
pub fn overview_box(region: &Region, slide: (u32, u32), view: (u32, u32)) -> [u32; 4] {
    let sx = view.0 as f64 / slide.0 as f64;
    let sy = view.1 as f64 / slide.1 as f64;
    let clamp = |v: f64, max: u32| v.max(0.0).min(max.saturating_sub(1) as f64) as u32;
    [
        clamp((region.x as f64 * sx).floor(), view.0),
        clamp((region.y as f64 * sy).floor(), view.1),
        clamp((region.right() as f64 * sx).ceil() - 1.0, view.0),
        clamp((region.bottom() as f64 * sy).ceil() - 1.0, view.1),
    ]
}

fn draw_rect(img: &mut RgbImage, r: [u32; 4], color: [u8; 3], thickness: u32) {
    let (w, h) = img.dimensions();
    for k in 0..thickness {
        let (x0, y0) = (r[0] + k, r[1] + k);
        let (x1, y1) = (r[2].saturating_sub(k), r[3].saturating_sub(k));
        if x0 > x1 || y0 > y1 {
            break;
        }
        for x in x0..=x1.min(w - 1) {
            img.put_pixel(x, y0, Rgb(color));
            img.put_pixel(x, y1, Rgb(color));
        }
        for y in y0..=y1.min(h - 1) {
            img.put_pixel(x0, y, Rgb(color));
            img.put_pixel(x1, y, Rgb(color));
        }
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

/// Every trace file below `root`, sorted by path.
pub fn find_traces(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = fs::read_dir(&dir) else { continue };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == TRACE_FILE) {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn page_stem(root: &Path, trace: &Path) -> String {
    let rel = trace.parent().and_then(|p| p.strip_prefix(root).ok()).unwrap_or(Path::new("trace"));
    let parts: Vec<String> = rel
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .filter(|c| c != "traces")
        .collect();
    if parts.is_empty() {
        "trace".into()
    } else {
        parts.join("__")
    }
}

const STYLE: &str = "body{font-family:sans-serif;max-width:1100px;margin:2em auto;padding:0 1em}\
img{max-width:100%;border:1px solid #ccc}table{border-collapse:collapse}\
td,th{border:1px solid #ccc;padding:4px 8px;text-align:left}pre{white-space:pre-wrap;background:#f6f6f6;padding:8px}";

fn write_page(root: &Path, out: &Path, stem: &str, trace_path: &Path, trace: &LoadedTrace) -> Result<(), BenchError> {
    let dir = trace_path.parent().unwrap_or(root);
    let thumb_path = dir.join("thumb.png");
    let mut overview = match image::open(&thumb_path) {
        Ok(img) => img.into_rgb8(),
        Err(_) => RgbImage::from_pixel(512, 512, Rgb([200, 200, 200])),
    };
    let slide = trace.header.slide_dims;
    let view = overview.dimensions();
    for (i, step) in trace.steps.iter().filter(|s| s.crop.is_some()).enumerate() {
        let r = &step.crop.as_ref().expect("filtered").source_region;
        draw_rect(&mut overview, overview_box(r, slide, view), BOX_COLORS[i % BOX_COLORS.len()], 2);
    }
    let overview_name = format!("{stem}_overview.png");
    overview
        .save(out.join(&overview_name))
        .map_err(|e| BenchError::Io {
            path: out.join(&overview_name),
            source: std::io::Error::other(e),
        })?;

    let h = &trace.header;
    let mut html = String::new();
    let _ = write!(
        html,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{q}</title><style>{STYLE}</style></head><body>\n\
         <p><a href=\"index.html\">index</a></p>\n<h1>{q} / run {run}</h1>\n\
         <p>slide {slide_id}, backend {backend}, seed {seed}, T={t}, S={s}</p>\n<h2>Question</h2>\n<pre>{question}</pre>\n",
        q = escape(&h.question_id),
        run = h.run_index,
        slide_id = escape(&h.slide_id),
        backend = escape(&h.backend),
        seed = h.seed,
        t = h.config.max_steps,
        s = h.config.long_side,
        question = escape(&h.question),
    );
    if let Some(choices) = &h.choices {
        html.push_str("<ol type=\"A\">\n");
        for c in choices {
            let _ = writeln!(html, "<li>{}</li>", escape(c));
        }
        html.push_str("</ol>\n");
    }
    let _ = writeln!(html, "<h2>Overview</h2>\n<img src=\"{overview_name}\" alt=\"overview\">");
    html.push_str("<h2>Steps</h2>\n");
    for step in &trace.steps {
        let action = match &step.action {
            Action::Crop { x, y, w, h } => format!("crop x={x}, y={y}, w={w}, h={h}"),
            Action::Score { hypotheses } => format!("score {}", hypotheses.join(" | ")),
            Action::Final { answer } => format!("final {answer}"),
        };
        let _ = writeln!(
            html,
            "<h3>Step {}</h3>\n<p><b>{}</b> (attempts: {})</p>",
            step.t,
            escape(&action),
            step.parse_attempts
        );
        if !step.reasoning.is_empty() {
            let _ = writeln!(html, "<pre>{}</pre>", escape(&step.reasoning));
        }
        if let Some(res) = &step.tool_result {
            html.push_str("<table><tr><th>hypothesis</th><th>similarity</th></tr>\n");
            for r in res {
                let _ = writeln!(html, "<tr><td>{}</td><td>{:+.4}</td></tr>", escape(&r.hypothesis), r.similarity);
            }
            html.push_str("</table>\n");
        }
        if let Some(err) = &step.tool_error {
            let _ = writeln!(html, "<p>tool error: {}</p>", escape(err));
        }
        if let Some(geom) = &step.crop {
            let src = dir.join(format!("step_{}.png", step.t));
            let name = format!("{stem}_step_{}.png", step.t);
            if src.exists() {
                fs::copy(&src, out.join(&name)).map_err(io_err(&src))?;
                let _ = writeln!(html, "<img src=\"{name}\" alt=\"step {}\">", step.t);
            }
            let _ = writeln!(
                html,
                "<p>level {}, rendered {}x{}, sha256 {}</p>",
                geom.chosen_level, geom.width, geom.height, geom.pixel_sha256
            );
        }
    }
    html.push_str("<h2>Result</h2>\n");
    match &trace.footer {
        Some(f) => {
            let _ = writeln!(
                html,
                "<p>answer: <b>{}</b>, outcome: {:?}, wall time {} ms</p>",
                escape(f.final_answer.as_deref().unwrap_or("(none)")),
                f.outcome,
                f.wall_ms
            );
            if let Some(e) = &f.error {
                let _ = writeln!(html, "<p>error: {}</p>", escape(e));
            }
        }
        None => html.push_str("<p>incomplete trace</p>\n"),
    }
    html.push_str("</body></html>\n");
    let page = out.join(format!("{stem}.html"));
    fs::write(&page, html).map_err(io_err(&page))
}

/// Renders one page per trace found under `run_dir` plus `index.html`.
/// Returns the number of pages written.
pub fn write_report(run_dir: &Path, out_dir: &Path) -> Result<usize, BenchError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let traces = find_traces(run_dir);
    let mut rows = String::new();
    for path in &traces {
        let trace = load_trace(path).map_err(io_err(path))?;
        let stem = page_stem(run_dir, path);
        write_page(run_dir, out_dir, &stem, path, &trace)?;
        let (answer, outcome) = match &trace.footer {
            Some(f) => (f.final_answer.clone().unwrap_or_default(), format!("{:?}", f.outcome)),
            None => (String::new(), "incomplete".into()),
        };
        let crops = trace.steps.iter().filter(|s| s.crop.is_some()).count();
        let _ = writeln!(
            rows,
            "<tr><td><a href=\"{stem}.html\">{}</a></td><td>{}</td><td>{}</td><td>{}</td><td>{}</td></tr>",
            escape(&trace.header.question_id),
            trace.header.run_index,
            escape(&answer),
            outcome,
            crops
        );
    }
    let mut html = format!(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Run report</title><style>{STYLE}</style></head><body>\n<h1>Run report</h1>\n"
    );
    let metrics_path = run_dir.join("metrics.json");
    if let Some(m) = fs::read_to_string(&metrics_path)
        .ok()
        .and_then(|t| serde_json::from_str::<Value>(&t).ok())
    {
        let metric = &m["metric"];
        let _ = writeln!(
            html,
            "<p>mode {}: {} = {:.4} &plusmn; {:.4} (n={}, {} bootstrap replicates, seed {})</p>",
            escape(m["mode"].as_str().unwrap_or("?")),
            escape(metric["metric"].as_str().unwrap_or("?")),
            metric["value"].as_f64().unwrap_or(f64::NAN),
            metric["bootstrap_std"].as_f64().unwrap_or(f64::NAN),
            metric["n_questions"],
            metric["bootstrap_replicates"],
            metric["seed"]
        );
    }
    let _ = writeln!(
        html,
        "<table><tr><th>question</th><th>run</th><th>answer</th><th>outcome</th><th>crops</th></tr>\n{rows}</table>\n</body></html>"
    );
    let index = out_dir.join("index.html");
    fs::write(&index, html).map_err(io_err(&index))?;
    Ok(traces.len())
}
