use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Part {
    Text(String),
    Image(Arc<RgbImage>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl Message {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Message {
            role,
            parts: vec![Part::Text(text.into())],
        }
    }

    pub fn with_image(role: Role, text: impl Into<String>, image: Arc<RgbImage>) -> Self {
        Message {
            role,
            parts: vec![Part::Image(image), Part::Text(text.into())],
        }
    }

    /// Concatenated text parts.
    pub fn joined_text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Text(t) => Some(t.as_str()),
                Part::Image(_) => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn images(&self) -> impl Iterator<Item = &Arc<RgbImage>> {
        self.parts.iter().filter_map(|p| match p {
            Part::Image(img) => Some(img),
            Part::Text(_) => None,
        })
    }
}

/// The multimodal context of one episode; only ever appended to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Conversation {
    pub messages: Vec<Message>,
    /// Sampling seed forwarded to backends that support one.
    pub seed: u64,
}

impl Conversation {
    pub fn new(seed: u64) -> Self {
        Conversation {
            messages: Vec::new(),
            seed,
        }
    }

    pub fn push(&mut self, message: Message) {
        self.messages.push(message);
    }

    pub fn last(&self) -> Option<&Message> {
        self.messages.last()
    }

    pub fn assistant_turns(&self) -> usize {
        self.messages.iter().filter(|m| m.role == Role::Assistant).count()
    }

    pub fn image_count(&self) -> usize {
        self.messages.iter().map(|m| m.images().count()).sum()
    }

    /// True when `self` extends `earlier` without changing any earlier message.
    pub fn extends(&self, earlier: &Conversation) -> bool {
        self.messages.len() > earlier.messages.len() && self.messages[..earlier.messages.len()] == earlier.messages[..]
    }
}
