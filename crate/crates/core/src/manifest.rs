//! Dataset manifest: one JSON record per line.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate sample_id {0}")]
    DuplicateId(String),
    #[error("train sample {0} has no cd label")]
    MissingLabel(String),
    #[error("sample {0} has no sdf_path")]
    MissingSdf(String),
}

pub type Result<T> = std::result::Result<T, ManifestError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub project: String,
    pub baseline_group: String,
    pub is_baseline: bool,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sdf_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh_path: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn new(records: Vec<SampleRecord>) -> Result<Self> {
        let m = Self { records };
        m.check_ids()?;
        Ok(m)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(line).map_err(|e| ManifestError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(rec);
        }
        Self::new(records)
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("records serialize"));
            s.push('\n');
        }
        s
    }

    /// Relative `sdf_path` / `mesh_path` entries are resolved against the
    /// manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut m = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for r in &mut m.records {
            for p in [&mut r.sdf_path, &mut r.mesh_path].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.sample_id.as_str()) {
                return Err(ManifestError::DuplicateId(r.sample_id.clone()));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Every train row must carry a label.
    pub fn check_train_labels(&self) -> Result<()> {
        match self.split(Split::Train).find(|r| r.cd.is_none()) {
            Some(r) => Err(ManifestError::MissingLabel(r.sample_id.clone())),
            None => Ok(()),
        }
    }

    /// Test groups that have no training baseline.
    pub fn orphan_groups(&self) -> Vec<String> {
        let have: HashSet<&str> = self
            .split(Split::Train)
            .filter(|r| r.is_baseline)
            .map(|r| r.baseline_group.as_str())
            .collect();
        let mut missing: Vec<String> = self
            .split(Split::Test)
            .map(|r| r.baseline_group.as_str())
            .filter(|g| !have.contains(g))
            .map(str::to_string)
            .collect();
        missing.sort();
        missing.dedup();
        missing
    }

    /// Labels of training baselines keyed by group.
    pub fn baseline_labels(&self) -> HashMap<String, f64> {
        self.split(Split::Train)
            .filter(|r| r.is_baseline)
            .filter_map(|r| r.cd.map(|cd| (r.baseline_group.clone(), cd)))
            .collect()
    }
}
