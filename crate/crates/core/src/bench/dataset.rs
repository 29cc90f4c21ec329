//! Line-delimited JSON question manifests.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::agent::prompts::choice_letter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Vqa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    /// Slide directory, relative to the manifest file or absolute.
    pub slide_ref: String,
    pub task: Task,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    pub gold: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
    /// Resolved slide directory; filled in by [`load_manifest`].
    #[serde(skip)]
    pub slide_path: PathBuf,
}

impl QuestionRecord {
    pub fn choices(&self) -> Option<&[String]> {
        self.choices.as_deref()
    }

    /// Checks the per-task invariants.
    pub fn validate(&self) -> Result<(), BenchError> {
        let invalid = |reason: String| BenchError::InvalidRecord {
            id: self.id.clone(),
            reason,
        };
        if self.id.trim().is_empty() {
            return Err(invalid("empty id".into()));
        }
        match self.task {
            Task::Vqa => {
                let choices = self
                    .choices
                    .as_ref()
                    .filter(|c| !c.is_empty())
                    .ok_or_else(|| invalid("vqa question without choices".into()))?;
                let letters: Vec<String> = (0..choices.len()).map(|i| choice_letter(i).to_string()).collect();
                if !letters.contains(&self.gold) && !choices.contains(&self.gold) {
                    return Err(invalid(format!("gold {:?} is not among the choices", self.gold)));
                }
            }
            Task::Classification => match &self.class_label {
                None => return Err(invalid("classification question without class_label".into())),
                Some(label) if *label != self.gold => {
                    return Err(invalid(format!("class_label {label:?} differs from gold {:?}", self.gold)))
                }
                Some(_) => {}
            },
        }
        Ok(())
    }

    /// Canonical gold answer: a choice letter for VQA, the label otherwise.
    pub fn canonical_gold(&self) -> String {
        if let Some(choices) = &self.choices {
            if let Some(i) = choices.iter().position(|c| *c == self.gold) {
                return choice_letter(i).to_string();
            }
        }
        self.gold.clone()
    }

    /// Grouping key for balanced accuracy.
    pub fn group(&self) -> String {
        self.class_label.clone().unwrap_or_else(|| self.canonical_gold())
    }
}

/// Parses and validates a JSONL manifest, resolving slide paths against its directory.
pub fn load_manifest(path: &Path) -> Result<Vec<QuestionRecord>, BenchError> {
    let text = fs::read_to_string(path).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: QuestionRecord = serde_json::from_str(line).map_err(|e| BenchError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        rec.validate()?;
        if !seen.insert(rec.id.clone()) {
            return Err(BenchError::InvalidRecord {
                id: rec.id,
                reason: "duplicate id".into(),
            });
        }
        let slide = PathBuf::from(&rec.slide_ref);
        rec.slide_path = if slide.is_absolute() { slide } else { base.join(slide) };
        out.push(rec);
    }
    Ok(out)
}

/// Writes records as JSONL (slide paths as given in `slide_ref`).
pub fn write_manifest(path: &Path, records: &[QuestionRecord]) -> Result<(), BenchError> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("records serialize"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Distinct classification labels, in first-seen order.
pub fn class_vocabulary(records: &[QuestionRecord]) -> Vec<String> {
    let mut seen = HashSet::new();
    records
        .iter()
        .filter(|r| r.task == Task::Classification)
        .filter_map(|r| r.class_label.clone())
        .filter(|l| seen.insert(l.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vqa(id: &str, gold: &str) -> QuestionRecord {
        QuestionRecord {
            id: id.into(),
            slide_ref: "slides/a".into(),
            task: Task::Vqa,
            question: "q?".into(),
            choices: Some(vec!["x".into(), "y".into(), "z".into(), "w".into()]),
            gold: gold.into(),
            class_label: None,
            slide_path: PathBuf::new(),
        }
    }

    #[test]
    fn loads_five_records() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<_> = (0..5).map(|i| vqa(&format!("q{i}"), "B")).collect();
        let p = dir.path().join("d.jsonl");
        write_manifest(&p, &recs).unwrap();
        let got = load_manifest(&p).unwrap();
        assert_eq!(got.len(), 5);
        assert_eq!(got[0].slide_path, dir.path().join("slides/a"));
    }

    #[test]
    fn rejects_bad_gold_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_manifest(&p, &[vqa("q1", "B"), vqa("bad", "nothing")]).unwrap();
        match load_manifest(&p) {
            Err(BenchError::InvalidRecord { id, .. }) => assert_eq!(id, "bad"),
            other => panic!("{other:?}"),
        }
        write_manifest(&p, &[vqa("q1", "B"), vqa("q1", "A")]).unwrap();
        assert!(matches!(load_manifest(&p), Err(BenchError::InvalidRecord { .. })));
    }

    #[test]
    fn classification_needs_label() {
        let mut r = vqa("c1", "lung");
        r.task = Task::Classification;
        r.choices = None;
        assert!(r.validate().is_err());
        r.class_label = Some("lung".into());
        assert!(r.validate().is_ok());
        assert_eq!(r.group(), "lung");
    }

    #[test]
    fn gold_text_maps_to_letter() {
        assert_eq!(vqa("q", "z").canonical_gold(), "C");
        assert_eq!(vqa("q", "D").canonical_gold(), "D");
    }
}
