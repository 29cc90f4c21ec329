//! The navigation agent: action grammar, backends, episode loop, traces and voting.

pub mod action;
pub mod backend;
pub mod conversation;
pub mod episode;
pub mod prompts;
pub mod remote;
pub mod tool;
pub mod trace;
pub mod vote;

pub use action::{parse_action, sanitize_region, Action, ParseError, ParseErrorKind, RejectReason};
pub use backend::{BackendError, BackendFactory, LmmBackend, RandomRegionBackend, RuleBackend, ScriptedBackend, SharedBackend};
pub use conversation::{Conversation, Message, Role};
pub use episode::{run_episode, run_episode_traced, AgentConfig, EpisodeError, EpisodeSink, Outcome, StepRecord, Trajectory};
pub use tool::{score_tool, MockScorer, Scorer};
pub use vote::{majority_vote, run_vote};
