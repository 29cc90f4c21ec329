//! Majority voting over independent episodes.

use super::backend::LmmBackend;
use super::episode::{run_episode_traced, AgentConfig, EpisodeError, EpisodeSink, NullSink, Outcome, RunInfo, Trajectory};
use super::tool::Scorer;
use crate::bench::dataset::QuestionRecord;
use crate::bench::normalize::{normalize_answer, INVALID};
use crate::pyramid::PyramidHandle;

/// Modal answer among cast votes; ties go to the answer first cast earliest.
/// `None` entries (failed runs) do not vote.
pub fn majority_vote(votes: &[Option<String>]) -> Option<String> {
    let mut tally: Vec<(&str, usize, usize)> = Vec::new();
    for (i, v) in votes.iter().enumerate() {
        let Some(v) = v else { continue };
        match tally.iter_mut().find(|(a, _, _)| *a == v.as_str()) {
            Some(entry) => entry.1 += 1,
            None => tally.push((v.as_str(), 1, i)),
        }
    }
    tally
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2)))
        .map(|(a, _, _)| a.to_string())
}

#[derive(Debug, Clone)]
pub struct VoteResult {
    /// Normalized winning answer, or `None` when no run produced a valid one.
    pub answer: Option<String>,
    /// Normalized per-run votes.
    pub votes: Vec<Option<String>>,
    pub trajectories: Vec<Trajectory>,
}

/// Normalized vote of one trajectory; failed or unmatched answers abstain.
pub fn trajectory_vote(tr: &Trajectory, question: &QuestionRecord, vocabulary: &[String]) -> Option<String> {
    if matches!(tr.outcome, Outcome::FailedParse | Outcome::BackendError) {
        return None;
    }
    let answer = tr.final_answer.as_deref()?;
    Some(normalize_answer(answer, question.choices(), vocabulary)).filter(|a| a != INVALID)
}

/// Runs `config.vote_runs` episodes with seeds `config.seed + i` and votes.
///
/// `sink_for(i)` supplies the trace sink of run `i`.
#[allow(clippy::too_many_arguments)]
pub fn run_vote(
    handle: &PyramidHandle,
    question: &QuestionRecord,
    backend: &dyn LmmBackend,
    tool: Option<&dyn Scorer>,
    config: &AgentConfig,
    vocabulary: &[String],
    sink_for: &mut dyn FnMut(u32) -> std::io::Result<Box<dyn EpisodeSink>>,
) -> Result<VoteResult, EpisodeError> {
    config.validate()?;
    let mut trajectories = Vec::new();
    for i in 0..config.vote_runs {
        let mut sink = sink_for(i)?;
        let run = RunInfo {
            run_index: i,
            seed: config.seed.wrapping_add(i as u64),
        };
        trajectories.push(run_episode_traced(handle, question, backend, tool, config, run, sink.as_mut())?);
    }
    let votes: Vec<_> = trajectories.iter().map(|t| trajectory_vote(t, question, vocabulary)).collect();
    Ok(VoteResult {
        answer: majority_vote(&votes),
        votes,
        trajectories,
    })
}

/// [`run_vote`] without traces.
pub fn run_vote_untraced(
    handle: &PyramidHandle,
    question: &QuestionRecord,
    backend: &dyn LmmBackend,
    tool: Option<&dyn Scorer>,
    config: &AgentConfig,
    vocabulary: &[String],
) -> Result<VoteResult, EpisodeError> {
    run_vote(handle, question, backend, tool, config, vocabulary, &mut |_| Ok(Box::new(NullSink)))
}
