//! The navigation loop: thumbnail first, then up to `T - 1` crops or tool
//! calls, then a forced final answer if the model has not stopped.

use std::sync::Arc;
use std::time::Instant;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::action::{parse_action, sanitize_region, Action, DEFAULT_MIN_SIDE_L0};
use super::backend::{BackendError, LmmBackend, Usage};
use super::conversation::{Conversation, Message, Role};
use super::prompts::{format_choices, render, PromptSet, DEFAULT_PROMPT_ID};
use super::tool::{format_scores, score_tool, Scorer};
use crate::bench::dataset::QuestionRecord;
use crate::pyramid::PyramidHandle;
use crate::viewport::{self, CropGeometry, OverlaySpec, ViewportError, DEFAULT_BIAS, DEFAULT_LONG_SIDE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    /// Iteration limit `T`: at most `T - 1` crops, then a forced answer.
    pub max_steps: u32,
    /// Long side `S` of every rendered crop.
    pub long_side: u32,
    pub bias: f64,
    pub parse_retries: u32,
    pub overlay_thumbnail: bool,
    pub thumbnail_long_side: u32,
    pub tool_enabled: bool,
    pub vote_runs: u32,
    pub seed: u64,
    pub prompt_template_id: String,
    pub min_crop_side: i64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            max_steps: 20,
            long_side: DEFAULT_LONG_SIDE,
            bias: DEFAULT_BIAS,
            parse_retries: 3,
            overlay_thumbnail: true,
            thumbnail_long_side: 1024,
            tool_enabled: false,
            vote_runs: 1,
            seed: 0,
            prompt_template_id: DEFAULT_PROMPT_ID.into(),
            min_crop_side: DEFAULT_MIN_SIDE_L0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), EpisodeError> {
        let bad = |m: String| Err(EpisodeError::Config(m));
        if self.max_steps < 1 {
            return bad("max_steps must be at least 1".into());
        }
        if self.long_side < 1 || self.thumbnail_long_side < 1 {
            return bad("long sides must be positive".into());
        }
        if !(self.bias > 0.0 && self.bias.is_finite()) {
            return bad(format!("bias must be positive, got {}", self.bias));
        }
        if self.vote_runs < 1 || (self.vote_runs > 1 && self.vote_runs.is_multiple_of(2)) {
            return bad(format!("vote_runs must be 1 or odd, got {}", self.vote_runs));
        }
        if self.min_crop_side < 1 {
            return bad("min_crop_side must be positive".into());
        }
        if PromptSet::by_id(&self.prompt_template_id).is_none() {
            return bad(format!("unknown prompt template {:?}", self.prompt_template_id));
        }
        Ok(())
    }

    pub fn max_crops(&self) -> u32 {
        self.max_steps.saturating_sub(1)
    }
}

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("invalid agent config: {0}")]
    Config(String),
    #[error(transparent)]
    Viewport(#[from] ViewportError),
    #[error("trace output failed: {0}")]
    Trace(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolScore {
    pub hypothesis: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u32,
    pub reasoning: String,
    /// The action as requested; crop boxes are stored unclamped.
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<CropGeometry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_result: Option<Vec<ToolScore>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_error: Option<String>,
    /// Backend calls spent on this step, including rejected replies.
    pub parse_attempts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Answered,
    ForcedFinal,
    FailedParse,
    BackendError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub slide_id: String,
    pub question_id: String,
    pub run_index: u32,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub final_answer: Option<String>,
    pub outcome: Outcome,
    pub config: AgentConfig,
    pub wall_ms: u64,
    pub usage: Usage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Trajectory {
    pub fn crop_count(&self) -> usize {
        self.steps.iter().filter(|s| s.crop.is_some()).count()
    }
}

/// Receives an episode as it unfolds, so a crash loses at most one step.
pub trait EpisodeSink {
    fn begin(&mut self, header: &EpisodeHeader, thumbnail: &RgbImage) -> std::io::Result<()>;
    fn step(&mut self, step: &StepRecord, image: Option<&RgbImage>) -> std::io::Result<()>;
    fn finish(&mut self, trajectory: &Trajectory) -> std::io::Result<()>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub slide_id: String,
    /// Level-0 slide dimensions.
    pub slide_dims: (u32, u32),
    pub question_id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    pub run_index: u32,
    pub seed: u64,
    pub backend: String,
    pub config: AgentConfig,
}

/// Discards everything.
pub struct NullSink;

impl EpisodeSink for NullSink {
    fn begin(&mut self, _: &EpisodeHeader, _: &RgbImage) -> std::io::Result<()> {
        Ok(())
    }
    fn step(&mut self, _: &StepRecord, _: Option<&RgbImage>) -> std::io::Result<()> {
        Ok(())
    }
    fn finish(&mut self, _: &Trajectory) -> std::io::Result<()> {
        Ok(())
    }
}

/// The schema lines quoted in the initial and correction prompts.
pub fn action_schema(prompts: &PromptSet, tool_enabled: bool) -> String {
    format!(
        "  {{\"action\": \"crop\", \"x\": <int>, \"y\": <int>, \"w\": <int>, \"h\": <int>}}\n{}  {{\"action\": \"final\", \"answer\": \"<your answer>\"}}",
        if tool_enabled { prompts.tool_line } else { "" }
    )
}

/// The overlaid (or plain) thumbnail shown with the initial prompt.
pub fn agent_thumbnail(handle: &PyramidHandle, config: &AgentConfig) -> Result<RgbImage, EpisodeError> {
    let thumb = handle.thumbnail(config.thumbnail_long_side).map_err(ViewportError::from)?;
    if config.overlay_thumbnail {
        Ok(viewport::overlay_axis_guides(&thumb, handle.manifest(), &OverlaySpec::default())?)
    } else {
        Ok(thumb)
    }
}

pub fn initial_prompt(handle: &PyramidHandle, question: &QuestionRecord, config: &AgentConfig) -> String {
    let prompts = PromptSet::by_id(&config.prompt_template_id).expect("validated template id");
    let (w, h) = handle.manifest().dimensions();
    render(
        prompts.initial,
        &[
            ("width", w.to_string()),
            ("height", h.to_string()),
            ("question", question.question.clone()),
            ("choices", format_choices(question.choices())),
            ("max_crops", config.max_crops().to_string()),
            ("long_side", config.long_side.to_string()),
            ("tool_line", if config.tool_enabled { prompts.tool_line.to_string() } else { String::new() }),
        ],
    )
}

/// Per-run episode identity.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunInfo {
    pub run_index: u32,
    pub seed: u64,
}

pub fn run_episode(
    handle: &PyramidHandle,
    question: &QuestionRecord,
    backend: &dyn LmmBackend,
    tool: Option<&dyn Scorer>,
    config: &AgentConfig,
) -> Result<Trajectory, EpisodeError> {
    run_episode_traced(
        handle,
        question,
        backend,
        tool,
        config,
        RunInfo {
            run_index: 0,
            seed: config.seed,
        },
        &mut NullSink,
    )
}

struct Loop<'a> {
    backend: &'a dyn LmmBackend,
    conversation: Conversation,
    usage: Usage,
}

impl Loop<'_> {
    fn call(&mut self) -> Result<String, BackendError> {
        let reply = self.backend.complete(&self.conversation)?;
        if let Some(u) = reply.usage {
            self.usage += u;
        }
        self.conversation.push(Message::text(Role::Assistant, reply.text.clone()));
        Ok(reply.text)
    }
}

pub fn run_episode_traced(
    handle: &PyramidHandle,
    question: &QuestionRecord,
    backend: &dyn LmmBackend,
    tool: Option<&dyn Scorer>,
    config: &AgentConfig,
    run: RunInfo,
    sink: &mut dyn EpisodeSink,
) -> Result<Trajectory, EpisodeError> {
    config.validate()?;
    let started = Instant::now();
    let prompts = PromptSet::by_id(&config.prompt_template_id).expect("validated template id");
    let manifest = handle.manifest();
    let thumbnail = Arc::new(agent_thumbnail(handle, config)?);
    // The scorer sees plain pixels, not the guide overlay.
    let mut current_view: Arc<RgbImage> = if config.overlay_thumbnail && tool.is_some() && config.tool_enabled {
        Arc::new(handle.thumbnail(config.thumbnail_long_side).map_err(ViewportError::from)?)
    } else {
        thumbnail.clone()
    };

    sink.begin(
        &EpisodeHeader {
            slide_id: handle.slide_id().to_string(),
            slide_dims: manifest.dimensions(),
            question_id: question.id.clone(),
            question: question.question.clone(),
            choices: question.choices.clone(),
            run_index: run.run_index,
            seed: run.seed,
            backend: backend.name().to_string(),
            config: config.clone(),
        },
        &thumbnail,
    )?;

    let mut state = Loop {
        backend,
        conversation: Conversation::new(run.seed),
        usage: Usage::default(),
    };
    state.conversation.push(Message::with_image(
        Role::User,
        initial_prompt(handle, question, config),
        thumbnail.clone(),
    ));

    let schema = action_schema(&prompts, config.tool_enabled);
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut final_answer = None;
    let mut outcome = None;
    let mut error = None;

    'steps: for t in 1..config.max_steps {
        let mut attempts = 0u32;
        let (reasoning, action) = loop {
            attempts += 1;
            let text = match state.call() {
                Ok(text) => text,
                Err(e) => {
                    outcome = Some(Outcome::BackendError);
                    error = Some(e.to_string());
                    break 'steps;
                }
            };
            let problem = match parse_action(&text) {
                Err(e) => e.to_string(),
                Ok(parsed) => match &parsed.action {
                    Action::Crop { .. } => match sanitize_region(manifest, &parsed.action.region().unwrap(), config.min_crop_side) {
                        Ok(_) => break (parsed.reasoning, parsed.action),
                        Err(reason) => format!("crop rejected: {reason}"),
                    },
                    Action::Score { .. } if !(config.tool_enabled && tool.is_some()) => {
                        "the scoring tool is not available".to_string()
                    }
                    _ => break (parsed.reasoning, parsed.action),
                },
            };
            if attempts > config.parse_retries {
                outcome = Some(Outcome::FailedParse);
                error = Some(problem);
                break 'steps;
            }
            state.conversation.push(Message::text(
                Role::User,
                render(prompts.correction, &[("reason", problem), ("schema", schema.clone())]),
            ));
        };

        let mut record = StepRecord {
            t,
            reasoning,
            action: action.clone(),
            crop: None,
            tool_result: None,
            tool_error: None,
            parse_attempts: attempts,
        };
        match &action {
            Action::Final { answer } => {
                final_answer = Some(answer.clone());
                outcome = Some(Outcome::Answered);
                sink.step(&record, None)?;
                steps.push(record);
                break 'steps;
            }
            Action::Crop { .. } => {
                let region = sanitize_region(manifest, &action.region().unwrap(), config.min_crop_side)
                    .expect("validated above");
                let crop = viewport::render_crop(handle, &region, config.long_side, config.bias)?;
                let pixels = Arc::new(crop.pixels);
                let text = render(
                    prompts.crop,
                    &[
                        ("step", t.to_string()),
                        ("max_crops", config.max_crops().to_string()),
                        ("x", region.x.to_string()),
                        ("y", region.y.to_string()),
                        ("w", region.w.to_string()),
                        ("h", region.h.to_string()),
                        ("width", crop.geometry.width.to_string()),
                        ("height", crop.geometry.height.to_string()),
                        ("remaining", (config.max_crops() - t).to_string()),
                    ],
                );
                record.crop = Some(crop.geometry);
                sink.step(&record, Some(&pixels))?;
                state.conversation.push(Message::with_image(Role::User, text, pixels.clone()));
                current_view = pixels;
            }
            Action::Score { hypotheses } => {
                let scorer = tool.expect("validated above");
                let text = match score_tool(scorer, &current_view, hypotheses) {
                    Ok(scores) => {
                        record.tool_result = Some(
                            hypotheses
                                .iter()
                                .zip(&scores)
                                .map(|(h, &s)| ToolScore {
                                    hypothesis: h.clone(),
                                    similarity: s,
                                })
                                .collect(),
                        );
                        render(prompts.tool_result, &[("table", format_scores(hypotheses, &scores))])
                    }
                    Err(e) => {
                        record.tool_error = Some(e.to_string());
                        render(prompts.tool_error, &[("error", e.to_string())])
                    }
                };
                sink.step(&record, None)?;
                state.conversation.push(Message::text(Role::User, text));
            }
        }
        steps.push(record);
    }

    if outcome.is_none() {
        state.conversation.push(Message::text(
            Role::User,
            render(
                prompts.forced_final,
                &[
                    ("max_crops", config.max_crops().to_string()),
                    ("max_steps", config.max_steps.to_string()),
                ],
            ),
        ));
        match state.call() {
            Ok(text) => {
                let (reasoning, answer) = match parse_action(&text) {
                    Ok(p) => match p.action {
                        Action::Final { answer } => (p.reasoning, answer),
                        _ => (String::new(), text.trim().to_string()),
                    },
                    Err(_) => (String::new(), text.trim().to_string()),
                };
                let record = StepRecord {
                    t: config.max_steps,
                    reasoning,
                    action: Action::Final { answer: answer.clone() },
                    crop: None,
                    tool_result: None,
                    tool_error: None,
                    parse_attempts: 1,
                };
                sink.step(&record, None)?;
                steps.push(record);
                final_answer = Some(answer);
                outcome = Some(Outcome::ForcedFinal);
            }
            Err(e) => {
                outcome = Some(Outcome::BackendError);
                error = Some(e.to_string());
            }
        }
    }

    let trajectory = Trajectory {
        slide_id: handle.slide_id().to_string(),
        question_id: question.id.clone(),
        run_index: run.run_index,
        seed: run.seed,
        steps,
        final_answer,
        outcome: outcome.expect("every path sets an outcome"),
        config: config.clone(),
        wall_ms: started.elapsed().as_millis() as u64,
        usage: state.usage,
        error,
    };
    sink.finish(&trajectory)?;
    Ok(trajectory)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::backend::{RuleBackend, ScriptedBackend};
    use crate::agent::tool::MockScorer;
    use crate::bench::dataset::Task;
    use crate::pyramid::{build_pyramid, open_slide, BuildOptions};
    use std::path::PathBuf;
    use std::sync::Mutex;

    fn slide() -> (tempfile::TempDir, PyramidHandle) {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(2048, 1536, |x, y| image::Rgb([(x % 251) as u8, (y % 241) as u8, 180]));
        let opts = BuildOptions {
            slide_id: "s1".into(),
            ..Default::default()
        };
        build_pyramid(&img, &opts, dir.path()).unwrap();
        let h = open_slide(dir.path()).unwrap();
        (dir, h)
    }

    fn question() -> QuestionRecord {
        QuestionRecord {
            id: "q1".into(),
            slide_ref: ".".into(),
            task: Task::Vqa,
            question: "Which?".into(),
            choices: Some(vec!["a".into(), "b".into()]),
            gold: "A".into(),
            class_label: None,
            slide_path: PathBuf::new(),
        }
    }

    const CROP: &str = r#"looking {"action":"crop","x":100,"y":200,"w":500,"h":400}"#;

    #[test]
    fn crop_crop_final_answers() {
        let (_d, h) = slide();
        let b = ScriptedBackend::new([CROP, CROP, r#"{"action":"final","answer":"A"}"#]);
        let tr = run_episode(&h, &question(), &b, None, &AgentConfig::default()).unwrap();
        assert_eq!(tr.steps.len(), 3);
        assert_eq!(tr.final_answer.as_deref(), Some("A"));
        assert_eq!(tr.outcome, Outcome::Answered);
        assert_eq!(tr.steps[0].reasoning, "looking");
        assert_eq!(tr.steps[0].crop.as_ref().unwrap().final_long_side, 1000);
        assert!(tr.steps[2].crop.is_none());
    }

    #[test]
    fn never_final_gets_forced_after_t_minus_one_crops() {
        let (_d, h) = slide();
        let cfg = AgentConfig {
            max_steps: 5,
            ..Default::default()
        };
        let calls = Mutex::new(0);
        let b = RuleBackend::new("loop", |c: &Conversation| {
            *calls.lock().unwrap() += 1;
            let last = c.last().unwrap().joined_text();
            Ok(if last.contains("You have used all 4 crops") { "B".to_string() } else { CROP.to_string() })
        });
        let tr = run_episode(&h, &question(), &b, None, &cfg).unwrap();
        assert_eq!(tr.crop_count(), 4);
        assert_eq!(tr.outcome, Outcome::ForcedFinal);
        assert_eq!(tr.final_answer.as_deref(), Some("B"));
        assert_eq!(tr.steps.len(), 5);
        assert_eq!(*calls.lock().unwrap(), 5);
    }

    #[test]
    fn garbage_four_times_fails_parse() {
        let (_d, h) = slide();
        let b = ScriptedBackend::new(["nope"; 4]);
        let tr = run_episode(&h, &question(), &b, None, &AgentConfig::default()).unwrap();
        assert_eq!(tr.outcome, Outcome::FailedParse);
        assert!(tr.final_answer.is_none());
        assert!(tr.steps.is_empty());
        assert_eq!(b.calls(), 4);
    }

    #[test]
    fn retries_do_not_consume_budget() {
        let (_d, h) = slide();
        let cfg = AgentConfig {
            max_steps: 2,
            ..Default::default()
        };
        let b = ScriptedBackend::new(["x", "y", "z", CROP, r#"{"action":"final","answer":"A"}"#]);
        let tr = run_episode(&h, &question(), &b, None, &cfg).unwrap();
        assert_eq!(tr.steps[0].parse_attempts, 4);
        assert_eq!(tr.crop_count(), 1);
        assert_eq!(tr.outcome, Outcome::ForcedFinal);
    }

    #[test]
    fn off_slide_box_is_corrected() {
        let (_d, h) = slide();
        let b = ScriptedBackend::new([
            r#"{"action":"crop","x":99999,"y":0,"w":10,"h":10}"#,
            r#"{"action":"crop","x":1800,"y":0,"w":500,"h":500}"#,
            r#"{"action":"final","answer":"B"}"#,
        ]);
        let tr = run_episode(&h, &question(), &b, None, &AgentConfig::default()).unwrap();
        assert_eq!(tr.steps[0].parse_attempts, 2);
        assert_eq!(tr.steps[0].action.region().unwrap().w, 500);
        assert_eq!(tr.steps[0].crop.as_ref().unwrap().source_region.w, 248);
    }

    #[test]
    fn exhausted_script_is_backend_error() {
        let (_d, h) = slide();
        let b = ScriptedBackend::new([CROP]);
        let tr = run_episode(&h, &question(), &b, None, &AgentConfig::default()).unwrap();
        assert_eq!(tr.outcome, Outcome::BackendError);
        assert_eq!(tr.steps.len(), 1);
        assert!(tr.error.is_some());
    }

    #[test]
    fn tool_scores_are_appended() {
        let (_d, h) = slide();
        let cfg = AgentConfig {
            tool_enabled: true,
            ..Default::default()
        };
        let scorer = MockScorer::new([("colon".to_string(), 0.9)]);
        let seen = Mutex::new(String::new());
        let b = RuleBackend::new("tool", |c: &Conversation| {
            Ok(match c.assistant_turns() {
                0 => r#"{"action":"score","hypotheses":["colon","lung"]}"#.to_string(),
                _ => {
                    *seen.lock().unwrap() = c.last().unwrap().joined_text();
                    r#"{"action":"final","answer":"A"}"#.to_string()
                }
            })
        });
        let tr = run_episode(&h, &question(), &b, Some(&scorer), &cfg).unwrap();
        let res = tr.steps[0].tool_result.as_ref().unwrap();
        assert_eq!(res[0].similarity, 0.9);
        assert_eq!(res[1].similarity, 0.0);
        assert!(seen.lock().unwrap().contains("colon  +0.9000"));
    }

    #[test]
    fn score_without_tool_is_rejected() {
        let (_d, h) = slide();
        let b = ScriptedBackend::new([r#"{"action":"score","hypotheses":["x"]}"#, r#"{"action":"final","answer":"A"}"#]);
        let tr = run_episode(&h, &question(), &b, None, &AgentConfig::default()).unwrap();
        assert_eq!(tr.steps.len(), 1);
        assert_eq!(tr.steps[0].parse_attempts, 2);
    }

    #[test]
    fn context_grows_by_extension() {
        let (_d, h) = slide();
        let history: Mutex<Vec<Conversation>> = Mutex::new(Vec::new());
        let b = RuleBackend::new("rec", |c: &Conversation| {
            let mut hist = history.lock().unwrap();
            if let Some(prev) = hist.last() {
                assert!(c.extends(prev));
            }
            hist.push(c.clone());
            Ok(if hist.len() < 4 { CROP.into() } else { r#"{"action":"final","answer":"A"}"#.into() })
        });
        run_episode(&h, &question(), &b, None, &AgentConfig::default()).unwrap();
        let hist = history.lock().unwrap();
        assert_eq!(hist.len(), 4);
        assert_eq!(hist[3].image_count(), 4);
        let first = hist[0].messages[0].joined_text();
        assert!(first.contains("at most 19 crops"));
        assert!(first.contains("width=2048, height=1536"));
    }

    #[test]
    fn config_validation() {
        let ok = AgentConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            AgentConfig { max_steps: 0, ..ok.clone() },
            AgentConfig { vote_runs: 4, ..ok.clone() },
            AgentConfig { vote_runs: 0, ..ok.clone() },
            AgentConfig {
                prompt_template_id: "x".into(),
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
