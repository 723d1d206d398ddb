//! Labeled-case ingestion: a JSONL manifest of [`CaseRecord`] rows plus a
//! sidecar JSON split file naming the train/val/test case ids.
//!
//! Loading validates everything up front — splits must be disjoint, every
//! split id must exist, and every label must be inside the vocabulary — so
//! downstream code never re-checks.

use crate::exec::CaseRecord;
use serde::Deserialize;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("parse error at {location}: {message}")]
    ParseError { location: String, message: String },
    #[error("case {case_id} appears twice in the manifest")]
    DuplicateCaseId { case_id: String },
    #[error("case {case_id} is listed in both {first} and {second} splits")]
    SplitOverlap { case_id: String, first: String, second: String },
    #[error("split {split} references unknown case {case_id}")]
    UnknownCaseId { split: String, case_id: String },
    #[error("case {case_id} has label {label} outside the vocabulary")]
    UnknownLabel { case_id: String, label: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other} (expected train, val or test)")),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitsFile {
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
    #[serde(default)]
    label_vocabulary: Option<Vec<String>>,
}

/// The fully validated dataset: all cases plus the split membership lists.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub cases: Vec<CaseRecord>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub label_vocabulary: Vec<String>,
}

impl DatasetManifest {
    pub fn case(&self, case_id: &str) -> Option<&CaseRecord> {
        self.cases.iter().find(|c| c.case_id == case_id)
    }

    /// Cases of one split, in split-file order.
    pub fn split_cases(&self, split: Split) -> Vec<CaseRecord> {
        let ids = match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        };
        ids.iter()
            .map(|id| self.case(id).expect("validated split id").clone())
            .collect()
    }

    pub fn per_class_counts(&self, split: Split) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for case in self.split_cases(split) {
            *counts.entry(case.label).or_default() += 1;
        }
        counts
    }
}

/// Loads and validates a JSONL manifest plus its split file.
pub fn load_manifest(
    manifest_path: &Path,
    splits_path: &Path,
) -> Result<DatasetManifest, DatasetError> {
    let read = |path: &Path| {
        fs::read_to_string(path).map_err(|e| DatasetError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    };

    let mut cases: Vec<CaseRecord> = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in read(manifest_path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let case: CaseRecord = serde_json::from_str(line).map_err(|e| {
            DatasetError::ParseError {
                location: format!("{}:{}", manifest_path.display(), idx + 1),
                message: e.to_string(),
            }
        })?;
        if !seen.insert(case.case_id.clone()) {
            return Err(DatasetError::DuplicateCaseId { case_id: case.case_id });
        }
        cases.push(case);
    }

    let splits: SplitsFile = serde_json::from_str(&read(splits_path)?).map_err(|e| {
        DatasetError::ParseError {
            location: splits_path.display().to_string(),
            message: e.to_string(),
        }
    })?;

    let vocabulary = match splits.label_vocabulary {
        Some(vocab) => vocab,
        None => {
            let mut union: BTreeSet<String> = BTreeSet::new();
            for case in &cases {
                union.extend(case.label_vocabulary.iter().cloned());
            }
            union.into_iter().collect()
        }
    };

    for case in &cases {
        let problems = case.problems();
        if !problems.is_empty() {
            return Err(DatasetError::ParseError {
                location: format!("{} (case {})", manifest_path.display(), case.case_id),
                message: problems.join("; "),
            });
        }
        if !vocabulary.contains(&case.label) {
            return Err(DatasetError::UnknownLabel {
                case_id: case.case_id.clone(),
                label: case.label.clone(),
            });
        }
    }

    let named = [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)];
    let mut membership: BTreeMap<&str, &str> = BTreeMap::new();
    for (split_name, ids) in named {
        for id in ids {
            if !seen.contains(id) {
                return Err(DatasetError::UnknownCaseId {
                    split: split_name.to_string(),
                    case_id: id.clone(),
                });
            }
            if let Some(first) = membership.insert(id, split_name) {
                return Err(DatasetError::SplitOverlap {
                    case_id: id.clone(),
                    first: first.to_string(),
                    second: split_name.to_string(),
                });
            }
        }
    }

    Ok(DatasetManifest {
        cases,
        train: splits.train,
        val: splits.val,
        test: splits.test,
        label_vocabulary: vocabulary,
    })
}

/// Convenience for the common layout where the split file sits next to the
/// manifest as `<stem>.splits.json`.
pub fn sibling_splits_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("splits.json")
}
