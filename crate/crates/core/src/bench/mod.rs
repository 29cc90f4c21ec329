//! Benchmark harness: question manifests, answer scoring, baselines,
//! sweeps and static reports.

use std::path::PathBuf;

use thiserror::Error;

pub mod dataset;
pub mod metrics;
pub mod normalize;
pub mod report;
pub mod runners;

pub use dataset::{load_manifest, QuestionRecord, Task};
pub use metrics::{accuracy, balanced_accuracy, bootstrap_std, Metric, MetricReport, Scored};
pub use normalize::{normalize_answer, INVALID};
pub use runners::{
    iteration_sweep, resolution_sweep, run_baseline_patches, run_baseline_thumbnail, run_giant, BenchContext, QuestionResult,
    RunResult, SweepRow,
};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("question {id}: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("invalid benchmark settings: {0}")]
    Config(String),
    #[error(transparent)]
    Pyramid(#[from] crate::pyramid::PyramidError),
    #[error(transparent)]
    Tissue(#[from] crate::tissue::TissueError),
    #[error(transparent)]
    Episode(#[from] crate::agent::episode::EpisodeError),
    #[error(transparent)]
    Backend(#[from] crate::agent::backend::BackendError),
    #[error(transparent)]
    Viewport(#[from] crate::viewport::ViewportError),
}
