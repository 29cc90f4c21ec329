//! Backend abstraction: anything that turns a conversation into reply text.

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::action::{parse_action, Action};
use super::conversation::{Conversation, Role};
use crate::pyramid::PyramidHandle;
use crate::tissue::{self, SegmentParams, TissueMask};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum BackendError {
    #[error("script exhausted after {0} replies")]
    Exhausted(usize),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("backend setup failed: {0}")]
    Setup(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, rhs: Self) {
        self.prompt_tokens += rhs.prompt_tokens;
        self.completion_tokens += rhs.completion_tokens;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub usage: Option<Usage>,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Completion {
            text: text.into(),
            usage: None,
        }
    }
}

/// A large multimodal model, real or scripted.
pub trait LmmBackend: Send + Sync {
    fn complete(&self, conversation: &Conversation) -> Result<Completion, BackendError>;

    fn name(&self) -> &str {
        "backend"
    }
}

impl<B: LmmBackend + ?Sized> LmmBackend for Arc<B> {
    fn complete(&self, conversation: &Conversation) -> Result<Completion, BackendError> {
        (**self).complete(conversation)
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

/// Replays a fixed list of replies, one per call, then errors.
#[derive(Debug)]
pub struct ScriptedBackend {
    script: Vec<String>,
    cursor: Mutex<usize>,
}

impl ScriptedBackend {
    pub fn new<I, S>(script: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedBackend {
            script: script.into_iter().map(Into::into).collect(),
            cursor: Mutex::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        *self.cursor.lock().unwrap()
    }
}

impl LmmBackend for ScriptedBackend {
    fn complete(&self, _conversation: &Conversation) -> Result<Completion, BackendError> {
        let mut cursor = self.cursor.lock().unwrap();
        let reply = self
            .script
            .get(*cursor)
            .cloned()
            .ok_or(BackendError::Exhausted(self.script.len()))?;
        *cursor += 1;
        Ok(Completion::text(reply))
    }

    fn name(&self) -> &str {
        "scripted"
    }
}

/// Deterministic backend driven by a rule over the conversation.
pub struct RuleBackend<F> {
    rule: F,
    name: String,
}

impl<F> RuleBackend<F>
where
    F: Fn(&Conversation) -> Result<String, BackendError> + Send + Sync,
{
    pub fn new(name: impl Into<String>, rule: F) -> Self {
        RuleBackend { rule, name: name.into() }
    }
}

impl<F> LmmBackend for RuleBackend<F>
where
    F: Fn(&Conversation) -> Result<String, BackendError> + Send + Sync,
{
    fn complete(&self, conversation: &Conversation) -> Result<Completion, BackendError> {
        (self.rule)(conversation).map(Completion::text)
    }

    fn name(&self) -> &str {
        &self.name
    }
}

/// Sampling bounds for random-region navigation.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomRegionParams {
    pub min_side_l0: u32,
    pub max_side_l0: u32,
    pub min_tissue_fraction: f64,
}

impl Default for RandomRegionParams {
    fn default() -> Self {
        RandomRegionParams {
            min_side_l0: 512,
            max_side_l0: 4096,
            min_tissue_fraction: 0.25,
        }
    }
}

fn mix_seed(seed: u64, step: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Keeps the inner model's reasoning and answers but swaps every crop it
/// proposes for a random tissue-bearing box.
pub struct RandomRegionBackend<B> {
    inner: B,
    mask: Arc<TissueMask>,
    params: RandomRegionParams,
}

impl<B: LmmBackend> RandomRegionBackend<B> {
    pub fn new(inner: B, mask: Arc<TissueMask>, params: RandomRegionParams) -> Self {
        RandomRegionBackend { inner, mask, params }
    }
}

impl<B: LmmBackend> LmmBackend for RandomRegionBackend<B> {
    fn complete(&self, conversation: &Conversation) -> Result<Completion, BackendError> {
        let reply = self.inner.complete(conversation)?;
        let Ok(parsed) = parse_action(&reply.text) else {
            return Ok(reply);
        };
        if !matches!(parsed.action, Action::Crop { .. }) {
            return Ok(reply);
        }
        let step = conversation
            .messages
            .iter()
            .filter(|m| m.role == Role::User)
            .count() as u64;
        let region = tissue::random_tissue_bbox(
            &self.mask,
            self.params.min_side_l0,
            self.params.max_side_l0,
            self.params.min_tissue_fraction,
            mix_seed(conversation.seed, step),
        )
        .map_err(|e| BackendError::Setup(e.to_string()))?;
        let text = if parsed.reasoning.is_empty() {
            Action::crop(region).to_json()
        } else {
            format!("{}\n{}", parsed.reasoning, Action::crop(region).to_json())
        };
        Ok(Completion { text, usage: reply.usage })
    }

    fn name(&self) -> &str {
        "random-region"
    }
}

/// Produces the backend used for one slide.
pub trait BackendFactory: Send + Sync {
    fn backend_for(&self, handle: &PyramidHandle) -> Result<Arc<dyn LmmBackend>, BackendError>;
}

/// The same backend for every slide.
#[derive(Clone)]
pub struct SharedBackend(pub Arc<dyn LmmBackend>);

impl BackendFactory for SharedBackend {
    fn backend_for(&self, _handle: &PyramidHandle) -> Result<Arc<dyn LmmBackend>, BackendError> {
        Ok(self.0.clone())
    }
}

/// Wraps a backend in [`RandomRegionBackend`] using each slide's tissue mask.
pub struct RandomRegionFactory {
    pub inner: Arc<dyn LmmBackend>,
    pub segment: SegmentParams,
    pub params: RandomRegionParams,
}

impl BackendFactory for RandomRegionFactory {
    fn backend_for(&self, handle: &PyramidHandle) -> Result<Arc<dyn LmmBackend>, BackendError> {
        let mask = tissue::segment(handle, &self.segment).map_err(|e| BackendError::Setup(e.to_string()))?;
        Ok(Arc::new(RandomRegionBackend::new(
            self.inner.clone(),
            Arc::new(mask),
            self.params.clone(),
        )))
    }
}
