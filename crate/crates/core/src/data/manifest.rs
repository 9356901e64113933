//! Paired-image manifests and scenario-disjoint splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub sharp_path: PathBuf,
    pub blurry_path: PathBuf,
    pub scenario_id: String,
    pub split: Split,
}

/// Relative paths in a manifest are interpreted against the directory
/// holding the manifest file.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>) -> Self {
        DatasetManifest { records }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("manifest line {}: {e}", i + 1)))?;
            records.push(r);
        }
        Ok(DatasetManifest { records })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Reads and verifies a manifest.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m = DatasetManifest::parse(&text)?;
        m.verify()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.verify()?;
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    /// Copy with relative paths joined onto `base`.
    pub fn resolved(&self, base: &Path) -> DatasetManifest {
        let fix = |p: &PathBuf| if p.is_relative() { base.join(p) } else { p.clone() };
        DatasetManifest {
            records: self
                .records
                .iter()
                .map(|r| ManifestRecord {
                    sharp_path: fix(&r.sharp_path),
                    blurry_path: fix(&r.blurry_path),
                    ..r.clone()
                })
                .collect(),
        }
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn scenarios(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.scenario_id.as_str()).collect()
    }

    /// Fails if any scenario contributes to both splits.
    pub fn verify(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for r in &self.records {
            match seen.insert(&r.scenario_id, r.split) {
                Some(prev) if prev != r.split => {
                    return Err(Error::Data(format!(
                        "scenario {:?} appears in both the train and test splits",
                        r.scenario_id
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Relabels every record: scenarios in `train_scenarios` go to train, all
/// others to test.
pub fn split_by_scenario(manifest: &DatasetManifest, train_scenarios: &BTreeSet<String>) -> Result<DatasetManifest> {
    let all = manifest.scenarios();
    if train_scenarios.is_empty() {
        return Err(Error::Data("no training scenarios given".into()));
    }
    if let Some(unknown) = train_scenarios.iter().find(|s| !all.contains(s.as_str())) {
        return Err(Error::Data(format!("unknown scenario id {unknown:?}")));
    }
    if train_scenarios.len() == all.len() {
        return Err(Error::Data("every scenario is in the training set; the test split would be empty".into()));
    }
    let out = DatasetManifest {
        records: manifest
            .records
            .iter()
            .map(|r| ManifestRecord {
                split: if train_scenarios.contains(&r.scenario_id) {
                    Split::Train
                } else {
                    Split::Test
                },
                ..r.clone()
            })
            .collect(),
    };
    out.verify()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(s: &str, split: Split) -> ManifestRecord {
        ManifestRecord {
            sharp_path: "s.png".into(),
            blurry_path: "b.png".into(),
            scenario_id: s.into(),
            split,
        }
    }

    #[test]
    fn verify_catches_overlap() {
        let m = DatasetManifest::new(vec![rec("a", Split::Train), rec("a", Split::Test)]);
        assert!(matches!(m.verify(), Err(Error::Data(_))));
    }

    #[test]
    fn jsonl_round_trip() {
        let m = DatasetManifest::new(vec![rec("a", Split::Train), rec("b", Split::Test)]);
        assert_eq!(DatasetManifest::parse(&m.to_jsonl().unwrap()).unwrap(), m);
    }
}
