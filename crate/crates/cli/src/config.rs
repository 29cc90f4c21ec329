//! Run configuration: a flat TOML document merged with command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use giant::agent::remote::RemoteConfig;
use giant::agent::AgentConfig;
use serde::{Deserialize, Serialize};

/// A validation failure; the CLI exits with status 1 on these.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Scripted glyph reader for synthetic slides; needs no network.
    #[default]
    Oracle,
    /// OpenAI-compatible chat completions endpoint.
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Giant,
    Thumbnail,
    Patch,
    RandomRegion,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Giant => "giant",
            Mode::Thumbnail => "thumbnail",
            Mode::Patch => "patch",
            Mode::RandomRegion => "random-region",
        }
    }
}

/// Everything needed to rerun or rescore a benchmark run. Serialized into
/// every trace header; holds the name of the key variable, never the key.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub backend: BackendKind,
    #[serde(flatten)]
    pub remote: RemoteConfig,
    /// Optional external scorer for the `score` action.
    pub scorer_endpoint: Option<String>,
    #[serde(flatten)]
    pub agent: AgentConfig,
    /// Question-level workers (0 = one per core).
    pub workers: usize,
    pub mode: Mode,
    pub dataset: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Either the literal `oracle` / `remote`, or a path to a TOML file.
    pub fn from_backend_arg(arg: &str) -> anyhow::Result<Self> {
        match arg {
            "oracle" => Ok(RunConfig::default()),
            "remote" => Ok(RunConfig {
                backend: BackendKind::Remote,
                ..RunConfig::default()
            }),
            path => Self::load(Path::new(path)),
        }
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| e.message().to_string())?;
        let known = serde_json::to_value(RunConfig::default()).expect("config serializes");
        let known = known.as_object().expect("config is an object");
        // flatten swallows unknown keys, so typos are caught here
        let mut unknown: Vec<&String> = table.keys().filter(|k| !known.contains_key(*k)).collect();
        unknown.sort();
        if !unknown.is_empty() {
            return Err(format!("unknown config keys: {unknown:?}"));
        }
        table.try_into().map_err(|e: toml::de::Error| e.message().to_string())
    }

    /// Checks every field before anything touches the network.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.agent.validate().map_err(|e| invalid(e.to_string()))?;
        if self.backend == BackendKind::Remote {
            let r = &self.remote;
            if !(r.endpoint.starts_with("http://") || r.endpoint.starts_with("https://")) {
                return Err(invalid(format!("endpoint {:?} is not an http(s) URL", r.endpoint)));
            }
            if r.model.trim().is_empty() {
                return Err(invalid("model must not be empty"));
            }
            if let Some(t) = r.temperature {
                if !(0.0..=2.0).contains(&t) {
                    return Err(invalid(format!("temperature {t} outside 0-2")));
                }
            }
            if r.timeout_secs == 0 {
                return Err(invalid("timeout_secs must be positive"));
            }
            if r.api_key_env.trim().is_empty() {
                return Err(invalid("api_key_env must name an environment variable"));
            }
        }
        if self.agent.tool_enabled && self.scorer_endpoint.is_none() {
            return Err(invalid("tool_enabled requires scorer_endpoint"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_document_round_trips() {
        let cfg = RunConfig::parse(
            r#"
            backend = "remote"
            model = "m"
            temperature = 0.2
            max_steps = 12
            vote_runs = 5
            workers = 3
            "#,
        )
        .unwrap();
        assert_eq!(cfg.backend, BackendKind::Remote);
        assert_eq!(cfg.remote.model, "m");
        assert_eq!(cfg.agent.max_steps, 12);
        assert_eq!(cfg.agent.vote_runs, 5);
        assert_eq!(cfg.agent.long_side, 1000);
        assert_eq!(cfg.workers, 3);
        cfg.validate().unwrap();
    }

    #[test]
    fn typos_and_bad_values_are_rejected() {
        assert!(RunConfig::parse("max_step = 3").unwrap_err().contains("max_step"));
        assert!(RunConfig::parse("max_steps = \"x\"").is_err());
        let bad = RunConfig::parse("backend = \"remote\"\ntemperature = 9.0").unwrap();
        assert!(bad.validate().is_err());
        let zero = RunConfig::parse("max_steps = 0").unwrap();
        assert!(zero.validate().is_err());
    }
}
