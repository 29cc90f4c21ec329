//! JSONL trajectory traces and deterministic replay.
//!
//! A trace directory holds `trace.jsonl` (header line, one line per step,
//! footer line), `thumb.png` and one `step_{t}.png` per crop.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::backend::Usage;
use super::episode::{EpisodeHeader, EpisodeSink, Outcome, StepRecord, Trajectory};
use crate::pyramid::PyramidHandle;
use crate::viewport::{self, ViewportError};

pub const TRACE_FILE: &str = "trace.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFooter {
    pub final_answer: Option<String>,
    pub outcome: Outcome,
    pub wall_ms: u64,
    pub usage: Usage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum TraceLine {
    Header {
        #[serde(flatten)]
        header: EpisodeHeader,
        #[serde(default, skip_serializing_if = "Value::is_null")]
        extra: Value,
    },
    Step(StepRecord),
    Footer(TraceFooter),
}

/// Writes one episode to `dir`, flushing after every line.
pub struct JsonlTraceWriter {
    dir: PathBuf,
    file: Option<File>,
    extra: Value,
    save_images: bool,
}

impl JsonlTraceWriter {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        JsonlTraceWriter {
            dir: dir.into(),
            file: None,
            extra: Value::Null,
            save_images: true,
        }
    }

    /// Arbitrary run metadata stored in the header line.
    pub fn with_extra(mut self, extra: Value) -> Self {
        self.extra = extra;
        self
    }

    pub fn with_images(mut self, save: bool) -> Self {
        self.save_images = save;
        self
    }

    fn write_line(&mut self, line: &TraceLine) -> io::Result<()> {
        let file = self
            .file
            .as_mut()
            .ok_or_else(|| io::Error::other("trace line written before begin"))?;
        let mut text = serde_json::to_string(line).map_err(io::Error::other)?;
        text.push('\n');
        file.write_all(text.as_bytes())?;
        file.flush()
    }

    fn save(&self, name: &str, img: &RgbImage) -> io::Result<()> {
        if self.save_images {
            img.save(self.dir.join(name)).map_err(io::Error::other)?;
        }
        Ok(())
    }
}

impl EpisodeSink for JsonlTraceWriter {
    fn begin(&mut self, header: &EpisodeHeader, thumbnail: &RgbImage) -> io::Result<()> {
        fs::create_dir_all(&self.dir)?;
        self.file = Some(File::create(self.dir.join(TRACE_FILE))?);
        self.save("thumb.png", thumbnail)?;
        let line = TraceLine::Header {
            header: header.clone(),
            extra: self.extra.clone(),
        };
        self.write_line(&line)
    }

    fn step(&mut self, step: &StepRecord, image: Option<&RgbImage>) -> io::Result<()> {
        if let Some(img) = image {
            self.save(&format!("step_{}.png", step.t), img)?;
        }
        self.write_line(&TraceLine::Step(step.clone()))
    }

    fn finish(&mut self, tr: &Trajectory) -> io::Result<()> {
        self.write_line(&TraceLine::Footer(TraceFooter {
            final_answer: tr.final_answer.clone(),
            outcome: tr.outcome,
            wall_ms: tr.wall_ms,
            usage: tr.usage,
            error: tr.error.clone(),
        }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedTrace {
    pub header: EpisodeHeader,
    pub extra: Value,
    pub steps: Vec<StepRecord>,
    /// Absent when the run was interrupted.
    pub footer: Option<TraceFooter>,
}

impl LoadedTrace {
    pub fn is_complete(&self) -> bool {
        self.footer.is_some()
    }

    pub fn into_trajectory(self) -> Option<Trajectory> {
        let footer = self.footer?;
        Some(Trajectory {
            slide_id: self.header.slide_id,
            question_id: self.header.question_id,
            run_index: self.header.run_index,
            seed: self.header.seed,
            steps: self.steps,
            final_answer: footer.final_answer,
            outcome: footer.outcome,
            config: self.header.config,
            wall_ms: footer.wall_ms,
            usage: footer.usage,
            error: footer.error,
        })
    }
}

/// Reads a trace file or a directory containing one.
pub fn load_trace(path: &Path) -> io::Result<LoadedTrace> {
    let path = if path.is_dir() { path.join(TRACE_FILE) } else { path.to_path_buf() };
    let reader = BufReader::new(File::open(&path)?);
    let mut header = None;
    let mut steps = Vec::new();
    let mut footer = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine = match serde_json::from_str(&line) {
            Ok(p) => p,
            // A torn final line from an interrupted run.
            Err(_) if footer.is_none() && header.is_some() => break,
            Err(e) => {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("{}:{}: {e}", path.display(), i + 1),
                ))
            }
        };
        match parsed {
            TraceLine::Header { header: h, extra } => header = Some((h, extra)),
            TraceLine::Step(s) => steps.push(s),
            TraceLine::Footer(f) => footer = Some(f),
        }
    }
    let (header, extra) =
        header.ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, format!("{}: no header line", path.display())))?;
    Ok(LoadedTrace {
        header,
        extra,
        steps,
        footer,
    })
}

/// True when `dir` holds a trace with a footer.
pub fn trace_complete(dir: &Path) -> bool {
    load_trace(dir).map(|t| t.is_complete()).unwrap_or(false)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayMismatch {
    pub t: u32,
    pub expected: String,
    pub actual: String,
}

/// Re-renders every recorded crop and reports those whose pixels differ.
pub fn replay(handle: &PyramidHandle, trace: &LoadedTrace) -> Result<Vec<ReplayMismatch>, ViewportError> {
    let cfg = &trace.header.config;
    let mut out = Vec::new();
    for step in &trace.steps {
        let Some(geom) = &step.crop else { continue };
        let crop = viewport::render_crop(handle, &geom.source_region, cfg.long_side, cfg.bias)?;
        if crop.geometry.pixel_sha256 != geom.pixel_sha256 {
            out.push(ReplayMismatch {
                t: step.t,
                expected: geom.pixel_sha256.clone(),
                actual: crop.geometry.pixel_sha256,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::action::Action;
    use crate::agent::episode::AgentConfig;
    use crate::viewport::{CropGeometry, ResampleKind};
    use crate::pyramid::Region;

    fn header() -> EpisodeHeader {
        EpisodeHeader {
            slide_id: "s".into(),
            slide_dims: (2048, 1024),
            question_id: "q".into(),
            question: "why?".into(),
            choices: None,
            run_index: 2,
            seed: 9,
            backend: "scripted".into(),
            config: AgentConfig::default(),
        }
    }

    fn step(t: u32) -> StepRecord {
        StepRecord {
            t,
            reasoning: "r".into(),
            action: Action::Crop { x: 1, y: 2, w: 300, h: 400 },
            crop: Some(CropGeometry {
                source_region: Region::new(1, 2, 300, 400),
                chosen_level: 0,
                pre_resize_long_side: 400,
                final_long_side: 1000,
                width: 750,
                height: 1000,
                resample_kind: ResampleKind::Up,
                pixel_sha256: "ab".into(),
            }),
            tool_result: None,
            tool_error: None,
            parse_attempts: 1,
        }
    }

    #[test]
    fn round_trip_and_interrupted_runs() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = JsonlTraceWriter::new(dir.path()).with_extra(serde_json::json!({"mode": "giant"}));
        let thumb = RgbImage::new(8, 8);
        w.begin(&header(), &thumb).unwrap();
        w.step(&step(1), Some(&RgbImage::new(4, 4))).unwrap();
        assert!(!trace_complete(dir.path()));
        let partial = load_trace(dir.path()).unwrap();
        assert_eq!(partial.steps.len(), 1);
        assert!(partial.clone().into_trajectory().is_none());

        let tr = Trajectory {
            slide_id: "s".into(),
            question_id: "q".into(),
            run_index: 2,
            seed: 9,
            steps: vec![step(1)],
            final_answer: Some("A".into()),
            outcome: Outcome::Answered,
            config: AgentConfig::default(),
            wall_ms: 5,
            usage: Usage::default(),
            error: None,
        };
        w.finish(&tr).unwrap();
        let loaded = load_trace(dir.path()).unwrap();
        assert_eq!(loaded.extra["mode"], "giant");
        assert_eq!(loaded.into_trajectory().unwrap(), tr);
        assert!(dir.path().join("thumb.png").exists());
        assert!(dir.path().join("step_1.png").exists());

        let text = fs::read_to_string(dir.path().join(TRACE_FILE)).unwrap();
        let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["type"], "header");
        assert_eq!(first["question_id"], "q");
    }

    #[test]
    fn torn_tail_is_tolerated() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = JsonlTraceWriter::new(dir.path()).with_images(false);
        w.begin(&header(), &RgbImage::new(1, 1)).unwrap();
        let mut f = fs::OpenOptions::new().append(true).open(dir.path().join(TRACE_FILE)).unwrap();
        f.write_all(b"{\"type\":\"st").unwrap();
        let t = load_trace(dir.path()).unwrap();
        assert!(t.steps.is_empty() && !t.is_complete());
    }
}
