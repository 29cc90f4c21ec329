//! Image–text similarity scorer exposed to the agent as a tool.

use std::collections::HashMap;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use image::RgbImage;
use serde_json::{json, Value};
use thiserror::Error;

use super::action::MAX_HYPOTHESES;
use crate::raster;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScorerError {
    #[error("expected 1-{MAX_HYPOTHESES} hypotheses, got {0}")]
    HypothesisCount(usize),
    #[error("scorer returned {got} scores for {expected} hypotheses")]
    LengthMismatch { expected: usize, got: usize },
    #[error("score {0} outside [-1, 1]")]
    OutOfRange(f64),
    #[error("scorer transport failure: {0}")]
    Transport(String),
}

/// Returns one cosine similarity per hypothesis for an image.
pub trait Scorer: Send + Sync {
    fn score(&self, image: &RgbImage, hypotheses: &[String]) -> Result<Vec<f64>, ScorerError>;
}

/// Validated scorer call: checks the hypothesis count, alignment and range.
pub fn score_tool(scorer: &dyn Scorer, image: &RgbImage, hypotheses: &[String]) -> Result<Vec<f64>, ScorerError> {
    if hypotheses.is_empty() || hypotheses.len() > MAX_HYPOTHESES {
        return Err(ScorerError::HypothesisCount(hypotheses.len()));
    }
    let scores = scorer.score(image, hypotheses)?;
    if scores.len() != hypotheses.len() {
        return Err(ScorerError::LengthMismatch {
            expected: hypotheses.len(),
            got: scores.len(),
        });
    }
    if let Some(&bad) = scores.iter().find(|s| !(-1.0..=1.0).contains(*s)) {
        return Err(ScorerError::OutOfRange(bad));
    }
    Ok(scores)
}

/// Fixed lookup table; unknown hypotheses score `default`.
#[derive(Debug, Clone, Default)]
pub struct MockScorer {
    pub table: HashMap<String, f64>,
    pub default: f64,
}

impl MockScorer {
    pub fn new<I: IntoIterator<Item = (String, f64)>>(entries: I) -> Self {
        MockScorer {
            table: entries.into_iter().collect(),
            default: 0.0,
        }
    }
}

impl Scorer for MockScorer {
    fn score(&self, _image: &RgbImage, hypotheses: &[String]) -> Result<Vec<f64>, ScorerError> {
        Ok(hypotheses
            .iter()
            .map(|h| self.table.get(h).copied().unwrap_or(self.default))
            .collect())
    }
}

/// Client for an external scoring service.
///
/// Request: `POST {"image": "data:image/png;base64,…", "hypotheses": [..]}`;
/// response: `{"scores": [..]}`.
pub struct HttpScorer {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpScorer {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpScorer {
            endpoint: endpoint.into(),
            agent,
        }
    }
}

impl Scorer for HttpScorer {
    fn score(&self, image: &RgbImage, hypotheses: &[String]) -> Result<Vec<f64>, ScorerError> {
        let body = json!({
            "image": format!("data:image/png;base64,{}", BASE64.encode(raster::encode_png(image))),
            "hypotheses": hypotheses,
        });
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(&body)
            .map_err(|e| ScorerError::Transport(e.to_string()))?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ScorerError::Transport(e.to_string()))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| ScorerError::Transport(e.to_string()))?;
        v.get("scores")
            .and_then(Value::as_array)
            .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
            .ok_or_else(|| ScorerError::Transport(format!("malformed scorer response: {text}")))
    }
}

/// Plain-text similarity table shown to the model.
pub fn format_scores(hypotheses: &[String], scores: &[f64]) -> String {
    let width = hypotheses.iter().map(|h| h.chars().count()).max().unwrap_or(0);
    hypotheses
        .iter()
        .zip(scores)
        .map(|(h, s)| format!("{h:<width$}  {s:+.4}"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyps(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn mock_table_lookup() {
        let s = MockScorer::new([("colon".to_string(), 0.9)]);
        let img = RgbImage::new(2, 2);
        assert_eq!(score_tool(&s, &img, &hyps(&["colon"])).unwrap(), vec![0.9]);
        assert_eq!(score_tool(&s, &img, &hyps(&["colon", "colon", "lung"])).unwrap(), vec![0.9, 0.9, 0.0]);
    }

    #[test]
    fn validation() {
        let img = RgbImage::new(2, 2);
        let s = MockScorer::new([("x".to_string(), 1.5)]);
        assert_eq!(score_tool(&s, &img, &[]), Err(ScorerError::HypothesisCount(0)));
        assert_eq!(score_tool(&s, &img, &hyps(&["x"])), Err(ScorerError::OutOfRange(1.5)));
    }

    #[test]
    fn table_is_aligned() {
        let t = format_scores(&hyps(&["a", "long"]), &[0.5, -0.25]);
        assert_eq!(t, "a     +0.5000\nlong  -0.2500");
    }
}
