use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset_io::{read_json, write_json};
use crate::error::{Error, Result};

pub const STATE_FILE: &str = "state.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Predict,
    Consensus,
    Cd,
    Train,
    Evaluate,
    Promote,
}

impl Phase {
    pub const ALL: [Phase; 6] = [Phase::Predict, Phase::Consensus, Phase::Cd, Phase::Train, Phase::Evaluate, Phase::Promote];
    /// Generation 0 trains the baseline and has no teachers.
    pub const BASELINE: [Phase; 4] = [Phase::Cd, Phase::Train, Phase::Evaluate, Phase::Promote];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Predict => "predict",
            Phase::Consensus => "consensus",
            Phase::Cd => "cd",
            Phase::Train => "train",
            Phase::Evaluate => "evaluate",
            Phase::Promote => "promote",
        }
    }

    /// Artifact location of the phase, relative to its generation directory.
    pub fn output(self) -> &'static str {
        match self {
            Phase::Predict => "predictions",
            Phase::Consensus => "consensus",
            Phase::Cd => "cd",
            Phase::Train => "students/models",
            Phase::Evaluate => "students/eval",
            Phase::Promote => "report.json",
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown phase {s:?}")))
    }
}

/// A `(generation, phase)` step of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Step {
    pub generation: usize,
    pub phase: Phase,
}

impl std::fmt::Display for Step {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gen{}:{}", self.generation, self.phase.as_str())
    }
}

impl std::str::FromStr for Step {
    type Err = Error;
    /// Parses `gen<i>:<phase>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("expected gen<i>:<phase>, got {s:?}"));
        let (g, p) = s.split_once(':').ok_or_else(bad)?;
        let generation = g.strip_prefix("gen").and_then(|g| g.parse().ok()).ok_or_else(bad)?;
        Ok(Step { generation, phase: p.parse()? })
    }
}

/// All steps of a run with `generations` loop iterations, in order.
pub fn plan(generations: usize) -> Vec<Step> {
    let mut steps: Vec<Step> = Phase::BASELINE.iter().map(|&phase| Step { generation: 0, phase }).collect();
    for generation in 1..=generations {
        steps.extend(Phase::ALL.iter().map(|&phase| Step { generation, phase }));
    }
    steps
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletedStep {
    #[serde(flatten)]
    pub step: Step,
    /// SHA-256 over the phase's artifacts.
    pub digest: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunState {
    pub config_digest: String,
    pub completed: Vec<CompletedStep>,
}

impl RunState {
    pub fn load(run_dir: &Path) -> Result<Option<Self>> {
        let path = run_dir.join(STATE_FILE);
        if path.is_file() {
            read_json(&path).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        write_json(&run_dir.join(STATE_FILE), self)
    }
}

fn hash_into(hasher: &mut Sha256, root: &Path, path: &Path) -> Result<()> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_dir() {
        let mut entries: Vec<_> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for e in entries {
            hash_into(hasher, root, &e)?;
        }
    } else {
        let rel = path.strip_prefix(root).unwrap_or(path);
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0]);
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        hasher.update(Sha256::digest(&bytes));
    }
    Ok(())
}

/// Hex SHA-256 over a file or a directory tree (relative paths and contents).
/// A missing path has no digest.
pub fn digest_path(path: &Path) -> Result<Option<String>> {
    if !path.exists() {
        return Ok(None);
    }
    let mut hasher = Sha256::new();
    hash_into(&mut hasher, path, path)?;
    Ok(Some(hex(&hasher.finalize())))
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_order() {
        let p = plan(2);
        assert_eq!(p.len(), 4 + 12);
        assert_eq!(p[0], Step { generation: 0, phase: Phase::Cd });
        assert_eq!(p[4], Step { generation: 1, phase: Phase::Predict });
        assert!(p.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn step_parsing() {
        let s: Step = "gen3:consensus".parse().unwrap();
        assert_eq!(s, Step { generation: 3, phase: Phase::Consensus });
        assert_eq!(s.to_string(), "gen3:consensus");
        assert!("3:cd".parse::<Step>().is_err());
        assert!("gen1:nope".parse::<Step>().is_err());
    }

    #[test]
    fn digests_track_content_and_names() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("x");
        assert_eq!(digest_path(&d).unwrap(), None);
        fs::create_dir_all(d.join("sub")).unwrap();
        fs::write(d.join("sub/a"), b"1").unwrap();
        let a = digest_path(&d).unwrap().unwrap();
        fs::write(d.join("sub/a"), b"2").unwrap();
        let b = digest_path(&d).unwrap().unwrap();
        assert_ne!(a, b);
        fs::rename(d.join("sub/a"), d.join("sub/c")).unwrap();
        assert_ne!(digest_path(&d).unwrap().unwrap(), b);
    }
}
