//! The JSON action grammar spoken by navigation backends.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::pyramid::{Region, SlideManifest};

pub const MAX_HYPOTHESES: usize = 16;
pub const DEFAULT_MIN_SIDE_L0: i64 = 64;

/// One decision of the agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "lowercase")]
pub enum Action {
    Crop { x: i64, y: i64, w: i64, h: i64 },
    Score { hypotheses: Vec<String> },
    Final { answer: String },
}

impl Action {
    pub fn crop(region: Region) -> Self {
        Action::Crop {
            x: region.x,
            y: region.y,
            w: region.w,
            h: region.h,
        }
    }

    pub fn region(&self) -> Option<Region> {
        match *self {
            Action::Crop { x, y, w, h } => Some(Region::new(x, y, w, h)),
            _ => None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("actions serialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseErrorKind {
    NoJson,
    BadSchema,
    BadValues,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind:?}: {message}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub message: String,
}

impl ParseError {
    fn new(kind: ParseErrorKind, message: impl Into<String>) -> Self {
        ParseError {
            kind,
            message: message.into(),
        }
    }
}

/// A parsed reply: free-text reasoning followed by one action.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedReply {
    pub reasoning: String,
    pub action: Action,
}

/// Locates the last top-level JSON object in `text` as a byte range.
fn last_json_object(text: &str) -> Option<(usize, usize, Map<String, Value>)> {
    let mut best: Option<(usize, usize, Map<String, Value>)> = None;
    for (start, _) in text.match_indices('{') {
        if let Some((_, end, _)) = &best {
            if start < *end {
                continue;
            }
        }
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(obj))) = stream.next() {
            let end = start + stream.byte_offset();
            best = Some((start, end, obj));
        }
    }
    best
}

fn strip_fence(reasoning: &str) -> String {
    let mut s = reasoning.trim_end();
    for fence in ["```json", "```JSON", "```"] {
        if let Some(stripped) = s.strip_suffix(fence) {
            s = stripped.trim_end();
            break;
        }
    }
    s.trim().to_string()
}

fn int_field(obj: &Map<String, Value>, key: &str) -> Result<i64, ParseError> {
    match obj.get(key) {
        Some(Value::Number(n)) => n
            .as_i64()
            .or_else(|| n.as_f64().filter(|f| f.fract() == 0.0 && f.abs() < 9e15).map(|f| f as i64))
            .ok_or_else(|| ParseError::new(ParseErrorKind::BadSchema, format!("field {key:?} must be an integer"))),
        Some(_) => Err(ParseError::new(ParseErrorKind::BadSchema, format!("field {key:?} must be an integer"))),
        None => Err(ParseError::new(ParseErrorKind::BadSchema, format!("missing field {key:?}"))),
    }
}

/// Parses a model reply into reasoning plus the action in its last JSON object.
pub fn parse_action(model_text: &str) -> Result<ParsedReply, ParseError> {
    let (start, _end, obj) = last_json_object(model_text)
        .ok_or_else(|| ParseError::new(ParseErrorKind::NoJson, "no JSON object found"))?;
    let reasoning = strip_fence(&model_text[..start]);
    let kind = obj
        .get("action")
        .and_then(Value::as_str)
        .ok_or_else(|| ParseError::new(ParseErrorKind::BadSchema, "missing string field \"action\""))?;
    let action = match kind.to_ascii_lowercase().as_str() {
        "crop" => Action::Crop {
            x: int_field(&obj, "x")?,
            y: int_field(&obj, "y")?,
            w: int_field(&obj, "w")?,
            h: int_field(&obj, "h")?,
        },
        "score" => {
            let list = obj
                .get("hypotheses")
                .and_then(Value::as_array)
                .ok_or_else(|| ParseError::new(ParseErrorKind::BadSchema, "\"hypotheses\" must be an array of strings"))?;
            let hypotheses = list
                .iter()
                .map(|v| v.as_str().map(str::to_string))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| ParseError::new(ParseErrorKind::BadSchema, "\"hypotheses\" must be an array of strings"))?;
            if hypotheses.is_empty() || hypotheses.len() > MAX_HYPOTHESES {
                return Err(ParseError::new(
                    ParseErrorKind::BadValues,
                    format!("expected 1-{MAX_HYPOTHESES} hypotheses, got {}", hypotheses.len()),
                ));
            }
            if hypotheses.iter().any(|h| h.trim().is_empty()) {
                return Err(ParseError::new(ParseErrorKind::BadValues, "hypotheses must be nonempty"));
            }
            Action::Score { hypotheses }
        }
        "final" => {
            let answer = obj
                .get("answer")
                .and_then(Value::as_str)
                .ok_or_else(|| ParseError::new(ParseErrorKind::BadSchema, "\"answer\" must be a string"))?;
            if answer.trim().is_empty() {
                return Err(ParseError::new(ParseErrorKind::BadValues, "answer is empty"));
            }
            Action::Final {
                answer: answer.to_string(),
            }
        }
        other => {
            return Err(ParseError::new(
                ParseErrorKind::BadSchema,
                format!("unknown action {other:?} (expected crop, score or final)"),
            ))
        }
    };
    Ok(ParsedReply { reasoning, action })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Error)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    #[error("width and height must be positive")]
    BadValues,
    #[error("box lies entirely outside the slide")]
    OutOfBounds,
    #[error("box is smaller than the minimum side after clamping")]
    TooSmall,
}

/// Clamps a requested box to the slide; rejects empty, off-slide or tiny boxes.
pub fn sanitize_region(manifest: &SlideManifest, region: &Region, min_side_l0: i64) -> Result<Region, RejectReason> {
    if region.w <= 0 || region.h <= 0 {
        return Err(RejectReason::BadValues);
    }
    let (w0, h0) = manifest.dimensions();
    let slide = Region::new(0, 0, w0 as i64, h0 as i64);
    let clamped = region.intersect(&slide).ok_or(RejectReason::OutOfBounds)?;
    if clamped.w < min_side_l0 || clamped.h < min_side_l0 {
        return Err(RejectReason::TooSmall);
    }
    Ok(clamped)
}
