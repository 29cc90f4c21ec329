//! Benchmark runners: thumbnail and patch baselines, the navigation agent,
//! and parameter sweeps.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::dataset::{class_vocabulary, QuestionRecord, Task};
use super::metrics::{evaluate, Metric, MetricReport, Scored, DEFAULT_BOOTSTRAP};
use super::normalize::{normalize_answer, INVALID};
use super::BenchError;
use crate::agent::backend::{BackendFactory, LmmBackend};
use crate::agent::conversation::{Conversation, Message, Role};
use crate::agent::episode::{AgentConfig, EpisodeSink, Outcome, Trajectory};
use crate::agent::prompts::{format_choices, render, PromptSet, DEFAULT_PROMPT_ID};
use crate::agent::tool::Scorer;
use crate::agent::trace::{load_trace, trace_complete, JsonlTraceWriter};
use crate::agent::vote::{majority_vote, run_vote, trajectory_vote};
use crate::par::Execution;
use crate::pyramid::{open_slide, PyramidHandle};
use crate::tissue::{self, SegmentParams};

pub const PATCH_COUNT: usize = 30;
pub const PATCH_SIZE: u32 = 224;
pub const PATCH_MIN_TISSUE: f64 = 0.25;

/// Settings shared by every runner.
#[derive(Debug, Clone)]
pub struct BenchContext {
    pub exec: Execution,
    /// Question-level worker count (0 = one per core).
    pub workers: usize,
    /// Where results and traces go; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    pub bootstrap_replicates: usize,
    pub seed: u64,
    /// Extra run metadata copied into every trace header.
    pub trace_extra: Value,
    pub save_images: bool,
}

impl Default for BenchContext {
    fn default() -> Self {
        BenchContext {
            exec: Execution::default(),
            workers: 0,
            out_dir: None,
            bootstrap_replicates: DEFAULT_BOOTSTRAP,
            seed: 0,
            trace_extra: Value::Null,
            save_images: true,
        }
    }
}

impl BenchContext {
    fn with_out_dir(&self, sub: &str) -> BenchContext {
        BenchContext {
            out_dir: self.out_dir.as_ref().map(|d| d.join(sub)),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub id: String,
    pub gold: String,
    /// Normalized final prediction; [`INVALID`] when none.
    pub prediction: String,
    pub group: String,
    /// Raw answers: one per run, patch or thumbnail query.
    pub raw_answers: Vec<String>,
    /// Normalized votes; `None` marks an abstaining run.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub votes: Vec<Option<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outcomes: Vec<Outcome>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub crops: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// True when this result was rebuilt from existing traces.
    #[serde(default)]
    pub resumed: bool,
}

impl QuestionResult {
    fn new(q: &QuestionRecord) -> Self {
        QuestionResult {
            id: q.id.clone(),
            gold: q.canonical_gold(),
            prediction: INVALID.to_string(),
            group: q.group(),
            raw_answers: Vec::new(),
            votes: Vec::new(),
            outcomes: Vec::new(),
            crops: Vec::new(),
            error: None,
            resumed: false,
        }
    }

    fn failed(q: &QuestionRecord, err: &BenchError) -> Self {
        QuestionResult {
            error: Some(err.to_string()),
            ..Self::new(q)
        }
    }

    pub fn correct(&self) -> bool {
        self.prediction == self.gold
    }

    pub fn scored(&self) -> Scored {
        Scored {
            id: self.id.clone(),
            gold: self.gold.clone(),
            prediction: self.prediction.clone(),
            group: self.group.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub mode: String,
    pub metric: MetricReport,
    pub questions: Vec<QuestionResult>,
}

impl RunResult {
    /// Writes `results.jsonl` and `metrics.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), BenchError> {
        let io = |path: PathBuf| move |source| BenchError::Io { path, source };
        fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;
        let mut lines = String::new();
        for q in &self.questions {
            lines.push_str(&serde_json::to_string(q).expect("results serialize"));
            lines.push('\n');
        }
        let results = dir.join("results.jsonl");
        fs::write(&results, lines).map_err(io(results.clone()))?;
        let metrics = dir.join("metrics.json");
        let body = serde_json::json!({"mode": self.mode, "metric": self.metric});
        fs::write(&metrics, serde_json::to_string_pretty(&body).expect("metrics serialize") + "\n")
            .map_err(io(metrics.clone()))
    }
}

/// Balanced accuracy when every question is a classification, else accuracy.
pub fn metric_for(questions: &[QuestionRecord]) -> Metric {
    if !questions.is_empty() && questions.iter().all(|q| q.task == Task::Classification) {
        Metric::BalancedAccuracy
    } else {
        Metric::Accuracy
    }
}

fn finish(mode: &str, questions: &[QuestionRecord], results: Vec<QuestionResult>, ctx: &BenchContext) -> Result<RunResult, BenchError> {
    let scored: Vec<Scored> = results.iter().map(QuestionResult::scored).collect();
    let run = RunResult {
        mode: mode.to_string(),
        metric: evaluate(&scored, metric_for(questions), ctx.bootstrap_replicates, ctx.seed, ctx.exec),
        questions: results,
    };
    if let Some(dir) = &ctx.out_dir {
        run.write(dir)?;
    }
    Ok(run)
}

fn for_each_question<F>(questions: &[QuestionRecord], ctx: &BenchContext, f: F) -> Vec<QuestionResult>
where
    F: Fn(&QuestionRecord) -> Result<QuestionResult, BenchError> + Sync + Send,
{
    ctx.exec.with_workers(ctx.workers, || {
        ctx.exec
            .map(questions, |q| f(q).unwrap_or_else(|e| QuestionResult::failed(q, &e)))
    })
}

fn open(q: &QuestionRecord) -> Result<PyramidHandle, BenchError> {
    Ok(open_slide(&q.slide_path)?)
}

fn stable_hash(s: &str) -> u64 {
    let digest = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn single_shot(backend: &dyn LmmBackend, seed: u64, text: String, image: Arc<image::RgbImage>) -> Result<String, BenchError> {
    let mut conv = Conversation::new(seed);
    conv.push(Message::with_image(Role::User, text, image));
    Ok(backend.complete(&conv)?.text)
}

/// One single-turn query per question with a plain (unguided) thumbnail.
pub fn run_baseline_thumbnail(
    questions: &[QuestionRecord],
    backend: &dyn LmmBackend,
    long_side: u32,
    ctx: &BenchContext,
) -> Result<RunResult, BenchError> {
    if !(16..=16384).contains(&long_side) {
        return Err(BenchError::Config(format!("thumbnail long side {long_side} outside 16-16384")));
    }
    let prompts = PromptSet::by_id(DEFAULT_PROMPT_ID).expect("default prompts");
    let vocab = class_vocabulary(questions);
    let results = for_each_question(questions, ctx, |q| {
        let handle = open(q)?;
        let (w, h) = handle.manifest().dimensions();
        let thumb = Arc::new(handle.thumbnail(long_side)?);
        let text = render(
            prompts.baseline_thumbnail,
            &[
                ("width", w.to_string()),
                ("height", h.to_string()),
                ("question", q.question.clone()),
                ("choices", format_choices(q.choices())),
            ],
        );
        let mut r = QuestionResult::new(q);
        match single_shot(backend, ctx.seed, text, thumb) {
            Ok(answer) => {
                r.prediction = normalize_answer(&answer, q.choices(), &vocab);
                r.raw_answers.push(answer);
            }
            Err(e) => r.error = Some(e.to_string()),
        }
        Ok(r)
    });
    finish("thumbnail", questions, results, ctx)
}

/// `n` random tissue patches of `patch` px per question, queried
/// independently and combined by majority vote.
pub fn run_baseline_patches(
    questions: &[QuestionRecord],
    backend: &dyn LmmBackend,
    n: usize,
    patch: u32,
    ctx: &BenchContext,
) -> Result<RunResult, BenchError> {
    if n == 0 || patch == 0 {
        return Err(BenchError::Config("patch count and size must be positive".into()));
    }
    let prompts = PromptSet::by_id(DEFAULT_PROMPT_ID).expect("default prompts");
    let vocab = class_vocabulary(questions);
    let results = for_each_question(questions, ctx, |q| {
        let handle = open(q)?;
        let mask = tissue::segment_with(&handle, &SegmentParams::default(), Execution::Sequential)?;
        let seed = ctx.seed ^ stable_hash(&q.id);
        let regions = tissue::sample_patches(&mask, n, patch, PATCH_MIN_TISSUE, seed)?;
        let mut r = QuestionResult::new(q);
        for region in &regions {
            let pixels = Arc::new(handle.read_region(0, region)?);
            let text = render(
                prompts.baseline_patch,
                &[
                    ("patch", patch.to_string()),
                    ("x", region.x.to_string()),
                    ("y", region.y.to_string()),
                    ("w", region.w.to_string()),
                    ("h", region.h.to_string()),
                    ("question", q.question.clone()),
                    ("choices", format_choices(q.choices())),
                ],
            );
            match single_shot(backend, seed, text, pixels) {
                Ok(answer) => {
                    let norm = normalize_answer(&answer, q.choices(), &vocab);
                    r.votes.push(Some(norm).filter(|a| a != INVALID));
                    r.raw_answers.push(answer);
                }
                Err(e) => {
                    r.votes.push(None);
                    r.raw_answers.push(String::new());
                    r.error.get_or_insert_with(|| e.to_string());
                }
            }
        }
        r.prediction = majority_vote(&r.votes).unwrap_or_else(|| INVALID.to_string());
        Ok(r)
    });
    finish("patch", questions, results, ctx)
}

/// Directory-safe form of a question id.
pub fn safe_name(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

pub fn trace_dir(out: &Path, question_id: &str, run_index: u32) -> PathBuf {
    out.join("traces").join(safe_name(question_id)).join(format!("run_{run_index}"))
}

fn resume(out: &Path, q: &QuestionRecord, runs: u32) -> Option<Vec<Trajectory>> {
    (0..runs)
        .map(|i| {
            let dir = trace_dir(out, &q.id, i);
            if !trace_complete(&dir) {
                return None;
            }
            load_trace(&dir).ok()?.into_trajectory()
        })
        .collect()
}

fn giant_result(q: &QuestionRecord, trajectories: &[Trajectory], vocab: &[String], resumed: bool) -> QuestionResult {
    let votes: Vec<Option<String>> = trajectories.iter().map(|t| trajectory_vote(t, q, vocab)).collect();
    QuestionResult {
        prediction: majority_vote(&votes).unwrap_or_else(|| INVALID.to_string()),
        raw_answers: trajectories.iter().map(|t| t.final_answer.clone().unwrap_or_default()).collect(),
        votes,
        outcomes: trajectories.iter().map(|t| t.outcome).collect(),
        crops: trajectories.iter().map(Trajectory::crop_count).collect(),
        error: trajectories.iter().find_map(|t| t.error.clone()),
        resumed,
        ..QuestionResult::new(q)
    }
}

/// Runs the navigation agent (`config.vote_runs` episodes per question).
///
/// With an output directory, each episode is traced under
/// `traces/{question}/run_{i}/`, and questions whose traces are all complete
/// are rebuilt from disk without touching the backend.
pub fn run_giant(
    questions: &[QuestionRecord],
    factory: &dyn BackendFactory,
    tool: Option<&dyn Scorer>,
    config: &AgentConfig,
    ctx: &BenchContext,
) -> Result<RunResult, BenchError> {
    config.validate()?;
    let vocab = class_vocabulary(questions);
    let results = for_each_question(questions, ctx, |q| {
        if let Some(out) = &ctx.out_dir {
            if let Some(done) = resume(out, q, config.vote_runs) {
                return Ok(giant_result(q, &done, &vocab, true));
            }
        }
        let handle = open(q)?;
        let backend = factory.backend_for(&handle)?;
        let mut sink_for = |i: u32| -> std::io::Result<Box<dyn EpisodeSink>> {
            match &ctx.out_dir {
                Some(out) => Ok(Box::new(
                    JsonlTraceWriter::new(trace_dir(out, &q.id, i))
                        .with_extra(ctx.trace_extra.clone())
                        .with_images(ctx.save_images),
                )),
                None => Ok(Box::new(crate::agent::episode::NullSink)),
            }
        };
        let vote = run_vote(&handle, q, backend.as_ref(), tool, config, &vocab, &mut sink_for)?;
        Ok(giant_result(q, &vote.trajectories, &vocab, false))
    });
    finish("giant", questions, results, ctx)
}

/// One row of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: u32,
    pub metric: Metric,
    pub score: f64,
    pub bootstrap_std: f64,
    pub n_questions: usize,
}

fn row(parameter: &str, value: u32, run: &RunResult) -> SweepRow {
    SweepRow {
        parameter: parameter.to_string(),
        value,
        metric: run.metric.metric,
        score: run.metric.value,
        bootstrap_std: run.metric.bootstrap_std,
        n_questions: run.metric.n_questions,
    }
}

/// The agent at each iteration limit `T` in `t_values`.
pub fn iteration_sweep(
    questions: &[QuestionRecord],
    factory: &dyn BackendFactory,
    tool: Option<&dyn Scorer>,
    base: &AgentConfig,
    t_values: &[u32],
    ctx: &BenchContext,
) -> Result<Vec<SweepRow>, BenchError> {
    t_values
        .iter()
        .map(|&t| {
            let cfg = AgentConfig {
                max_steps: t,
                ..base.clone()
            };
            let run = run_giant(questions, factory, tool, &cfg, &ctx.with_out_dir(&format!("T{t}")))?;
            Ok(row("max_steps", t, &run))
        })
        .collect()
}

/// The thumbnail baseline at each thumbnail long side in `sides`.
pub fn resolution_sweep(
    questions: &[QuestionRecord],
    backend: &dyn LmmBackend,
    sides: &[u32],
    ctx: &BenchContext,
) -> Result<Vec<SweepRow>, BenchError> {
    sides
        .iter()
        .map(|&s| {
            let run = run_baseline_thumbnail(questions, backend, s, &ctx.with_out_dir(&format!("side{s}")))?;
            Ok(row("thumbnail_long_side", s, &run))
        })
        .collect()
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), BenchError> {
    let io = |source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(std::io::Error::other(e)))?;
    for r in rows {
        w.serialize(r).map_err(|e| io(std::io::Error::other(e)))?;
    }
    w.flush().map_err(io)
}

#[derive(Debug, Deserialize)]
struct PredictionRow {
    #[serde(alias = "question_id")]
    id: String,
    #[serde(alias = "answer")]
    prediction: String,
}

/// Scores an external model's predictions (`id,prediction` CSV).
/// Questions without a prediction count as [`INVALID`].
pub fn score_predictions(path: &Path, questions: &[QuestionRecord], ctx: &BenchContext) -> Result<RunResult, BenchError> {
    let parse = |line: usize, message: String| BenchError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| parse(0, e.to_string()))?;
    let mut preds = std::collections::HashMap::new();
    for (i, rec) in reader.deserialize::<PredictionRow>().enumerate() {
        let rec = rec.map_err(|e| parse(i + 2, e.to_string()))?;
        preds.insert(rec.id, rec.prediction);
    }
    let vocab = class_vocabulary(questions);
    let results = questions
        .iter()
        .map(|q| {
            let mut r = QuestionResult::new(q);
            if let Some(raw) = preds.get(&q.id) {
                r.prediction = normalize_answer(raw, q.choices(), &vocab);
                r.raw_answers.push(raw.clone());
            } else {
                r.error = Some("no prediction".into());
            }
            r
        })
        .collect();
    finish("predictions", questions, results, ctx)
}
