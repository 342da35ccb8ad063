//! Append-only decision log. One JSON `Decision` per line; the effective
//! verdict for an id is the last record for it.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    ConfirmInappropriate,
    RejectFlag,
    Unsure,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::ConfirmInappropriate => "confirm-inappropriate",
            Verdict::RejectFlag => "reject-flag",
            Verdict::Unsure => "unsure",
        }
    }
}

impl FromStr for Verdict {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "confirm-inappropriate" => Ok(Verdict::ConfirmInappropriate),
            "reject-flag" => Ok(Verdict::RejectFlag),
            "unsure" => Ok(Verdict::Unsure),
            _ => Err(format!("unknown verdict {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub image_id: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    /// UTC seconds.
    pub timestamp: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("corrupt decision log at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Review counts over a flagged id set. The four verdict buckets partition it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewSummary {
    pub flagged: usize,
    pub confirmed: usize,
    pub rejected: usize,
    pub unsure: usize,
    pub pending: usize,
}

impl ReviewSummary {
    pub fn confirmed_ratio(&self) -> f64 {
        if self.flagged == 0 {
            0.0
        } else {
            self.confirmed as f64 / self.flagged as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DecisionLog {
    records: Vec<Decision>,
    effective: BTreeMap<String, Verdict>,
}

impl DecisionLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, decision: Decision) {
        self.effective.insert(decision.image_id.clone(), decision.verdict);
        self.records.push(decision);
    }

    pub fn records(&self) -> &[Decision] {
        &self.records
    }

    pub fn verdict(&self, id: &str) -> Option<Verdict> {
        self.effective.get(id).copied()
    }

    pub fn effective(&self) -> &BTreeMap<String, Verdict> {
        &self.effective
    }

    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self, LogError> {
        Self::from_reader_checked(reader, |_| Ok(()))
    }

    /// Like `from_reader`, rejecting records for which `check` fails with the
    /// offending line number.
    pub fn from_reader_checked<R, F>(reader: R, mut check: F) -> Result<Self, LogError>
    where
        R: BufRead,
        F: FnMut(&Decision) -> Result<(), String>,
    {
        let mut log = Self::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| LogError::Corrupt {
                line: i + 1,
                reason: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let d: Decision = serde_json::from_str(&line).map_err(|e| LogError::Corrupt {
                line: i + 1,
                reason: e.to_string(),
            })?;
            check(&d).map_err(|reason| LogError::Corrupt { line: i + 1, reason })?;
            log.push(d);
        }
        Ok(log)
    }

    /// Replays a log file. A missing file is an empty log.
    pub fn replay(path: impl AsRef<Path>) -> Result<Self, LogError> {
        let path = path.as_ref();
        match File::open(path) {
            Ok(f) => Self::from_reader(BufReader::new(f)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::new()),
            Err(source) => Err(LogError::Io {
                path: path.to_path_buf(),
                source,
            }),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for d in &self.records {
            serde_json::to_writer(&mut out, d).expect("decision serializes");
            out.push(b'\n');
        }
        out
    }

    /// Counts effective verdicts over `flagged`; records for other ids are ignored.
    pub fn summary<'a>(&self, flagged: impl IntoIterator<Item = &'a str>) -> ReviewSummary {
        let mut s = ReviewSummary::default();
        for id in flagged {
            s.flagged += 1;
            match self.verdict(id) {
                Some(Verdict::ConfirmInappropriate) => s.confirmed += 1,
                Some(Verdict::RejectFlag) => s.rejected += 1,
                Some(Verdict::Unsure) => s.unsure += 1,
                None => s.pending += 1,
            }
        }
        s
    }
}

/// Appends decisions and syncs each one to disk before returning.
#[derive(Debug)]
pub struct DecisionWriter {
    file: File,
    path: PathBuf,
}

impl DecisionWriter {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LogError> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| LogError::Io {
                path: path.clone(),
                source,
            })?;
        Ok(Self { file, path })
    }

    pub fn append(&mut self, decision: &Decision) -> Result<(), LogError> {
        let mut line = serde_json::to_vec(decision).expect("decision serializes");
        line.push(b'\n');
        let io = |source| LogError::Io {
            path: self.path.clone(),
            source,
        };
        self.file.write_all(&line).map_err(io)?;
        self.file.sync_data().map_err(io)
    }
}
