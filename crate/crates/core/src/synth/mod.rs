//! Synthetic glyph slides and the scripted oracle that reads them.

use std::path::PathBuf;

use thiserror::Error;

pub mod generate;
pub mod glyphs;
pub mod oracle;

pub use generate::{default_suite, generate_slide, generate_suite, layout_spec, Placement, Sidecar, SlideLayout, SynthSlideSpec};
pub use glyphs::{GlyphSet, Matcher, MATCH_NCC};
pub use oracle::{OracleBackend, UNDETERMINED};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic slide: {0}")]
    InvalidSpec(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Pyramid(#[from] crate::pyramid::PyramidError),
    #[error(transparent)]
    Bench(#[from] crate::bench::BenchError),
}
