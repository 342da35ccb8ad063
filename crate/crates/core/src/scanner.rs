//! Dataset scanning and flag reports.
//!
//! A report file is a JSON header line followed by one JSON entry per line:
//!
//! ```text
//! {"dataset_name":"...","total_count":N,"threshold":0.5,"model_fingerprint":"...","flagged_count":F}
//! {"id":"...","p":0.97,"flagged":true}
//! ```
//!
//! Entries are sorted by descending probability, ties broken by id, so the
//! file is byte-stable for fixed inputs.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedstore::EmbeddingStore;
use crate::mathcore::MathError;
use crate::tuner::PromptModel;

pub const DEFAULT_CHUNK_ROWS: usize = 8192;
pub const DEFAULT_DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum ScanError {
    #[error("dimension mismatch: store has {store}, model has {model}")]
    DimMismatch { store: usize, model: usize },
    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("report has no images")]
    EmptyDataset,
    #[error(transparent)]
    Math(#[from] MathError),
    #[error("malformed report line {line}: {reason}")]
    MalformedReport { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Emit {
    #[default]
    FlaggedOnly,
    All,
}

impl FromStr for Emit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flagged-only" => Ok(Emit::FlaggedOnly),
            "all" => Ok(Emit::All),
            _ => Err(format!("expected flagged-only or all, got {s:?}")),
        }
    }
}

/// The report's first line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub dataset_name: String,
    pub total_count: usize,
    pub threshold: f64,
    pub model_fingerprint: String,
    pub flagged_count: usize,
}

impl ReportHeader {
    pub fn flag_ratio(&self) -> Result<f64, ScanError> {
        if self.total_count == 0 {
            return Err(ScanError::EmptyDataset);
        }
        Ok(self.flagged_count as f64 / self.total_count as f64)
    }

    pub fn parse_line(line: &str) -> Result<Self, ScanError> {
        serde_json::from_str(line).map_err(|e| ScanError::MalformedReport {
            line: 1,
            reason: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagEntry {
    pub id: String,
    pub p: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlagReport {
    pub header: ReportHeader,
    pub entries: Vec<FlagEntry>,
}

impl FlagReport {
    pub fn flagged(&self) -> impl Iterator<Item = &FlagEntry> + '_ {
        self.entries.iter().filter(|e| e.flagged)
    }

    pub fn flagged_ids(&self) -> BTreeSet<&str> {
        self.flagged().map(|e| e.id.as_str()).collect()
    }

    pub fn flagged_count(&self) -> usize {
        self.header.flagged_count
    }

    pub fn total_count(&self) -> usize {
        self.header.total_count
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ScanError> {
        let path = path.as_ref();
        let io = |source| ScanError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = File::create(path).map_err(io)?;
        self.write_to(BufWriter::new(file)).map_err(io)
    }

    /// Parses a report and checks it against the report invariants.
    pub fn read_from<R: BufRead>(reader: R) -> Result<Self, ScanError> {
        let mut lines = reader.lines().enumerate();
        let header_line = match lines.next() {
            Some((_, line)) => line.map_err(|e| malformed(1, e))?,
            None => return Err(malformed(1, "missing header")),
        };
        let header = ReportHeader::parse_line(&header_line)?;
        let mut entries = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, line) in lines {
            let n = i + 1;
            let line = line.map_err(|e| malformed(n, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: FlagEntry = serde_json::from_str(&line).map_err(|e| malformed(n, e))?;
            if !(0.0..=1.0).contains(&e.p) {
                return Err(malformed(n, format!("probability {} outside [0, 1]", e.p)));
            }
            if e.flagged != (e.p > header.threshold) {
                return Err(malformed(n, "flag disagrees with threshold"));
            }
            if !seen.insert(e.id.clone()) {
                return Err(malformed(n, format!("duplicate id {:?}", e.id)));
            }
            entries.push(e);
        }
        let flagged = entries.iter().filter(|e| e.flagged).count();
        if flagged != header.flagged_count || entries.len() > header.total_count {
            return Err(malformed(1, "header counts disagree with entries"));
        }
        Ok(Self { header, entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScanError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| ScanError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read_from(BufReader::new(file))
    }
}

fn malformed(line: usize, reason: impl ToString) -> ScanError {
    ScanError::MalformedReport {
        line,
        reason: reason.to_string(),
    }
}

#[derive(Debug, Clone)]
pub struct ScanOptions {
    pub dataset_name: String,
    pub threshold: f64,
    pub emit: Emit,
    pub chunk_rows: usize,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            dataset_name: "dataset".into(),
            threshold: DEFAULT_DECISION_THRESHOLD,
            emit: Emit::FlaggedOnly,
            chunk_rows: DEFAULT_CHUNK_ROWS,
        }
    }
}

/// Scores every row of `store`; an image is flagged when its class-1
/// probability is strictly above the threshold.
pub fn scan(store: &EmbeddingStore, model: &PromptModel, opts: &ScanOptions) -> Result<FlagReport, ScanError> {
    if store.dim() != model.dim() {
        return Err(ScanError::DimMismatch {
            store: store.dim(),
            model: model.dim(),
        });
    }
    if !(0.0..=1.0).contains(&opts.threshold) {
        return Err(ScanError::InvalidThreshold(opts.threshold));
    }
    let chunk = opts.chunk_rows.max(1);
    let scored: Vec<Vec<FlagEntry>> = (0..store.len().div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let rows = c * chunk..((c + 1) * chunk).min(store.len());
            let mut out = Vec::new();
            for i in rows {
                let p = model.inappropriate_probability(store.row(i))?;
                let flagged = p > opts.threshold;
                if flagged || opts.emit == Emit::All {
                    out.push(FlagEntry {
                        id: store.ids()[i].clone(),
                        p,
                        flagged,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_, MathError>>()?;
    let mut entries: Vec<FlagEntry> = scored.into_iter().flatten().collect();
    entries.sort_by(|a, b| b.p.total_cmp(&a.p).then_with(|| a.id.cmp(&b.id)));
    let flagged_count = entries.iter().filter(|e| e.flagged).count();
    Ok(FlagReport {
        header: ReportHeader {
            dataset_name: opts.dataset_name.clone(),
            total_count: store.len(),
            threshold: opts.threshold,
            model_fingerprint: model.fingerprint(),
            flagged_count,
        },
        entries,
    })
}

pub fn flag_ratio(report: &FlagReport) -> Result<f64, ScanError> {
    report.header.flag_ratio()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ReportDiff {
    pub only_a: BTreeSet<String>,
    pub only_b: BTreeSet<String>,
    pub both: BTreeSet<String>,
}

/// Splits the union of two reports' flagged ids into three disjoint sets.
pub fn diff_reports(a: &FlagReport, b: &FlagReport) -> ReportDiff {
    let fa = a.flagged_ids();
    let fb = b.flagged_ids();
    let owned = |s: &mut dyn Iterator<Item = &&str>| s.map(|x| x.to_string()).collect();
    ReportDiff {
        only_a: owned(&mut fa.difference(&fb)),
        only_b: owned(&mut fb.difference(&fa)),
        both: owned(&mut fa.intersection(&fb)),
    }
}
