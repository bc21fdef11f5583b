//! Subject records in the neutral per-subject CSV format, and the mapping
//! from raw WESAD condition codes to task labels.
//!
//! A subject file `S<id>.csv` looks like:
//!
//! ```text
//! # fs=64
//! 12.345,1
//! 12.801,1
//! ```
//!
//! one row per 64 Hz sample, `bvp,label` with `label` in `0..=7`.

use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The only sample rate the pipeline accepts (Empatica E4 wrist BVP).
pub const BVP_SAMPLE_RATE: u32 = 64;

/// Largest raw WESAD condition code.
pub const MAX_RAW_LABEL: u8 = 7;

const HEADER_PREFIX: &str = "# fs=";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad header: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: unsupported sample rate {rate} Hz (expected {BVP_SAMPLE_RATE})")]
    UnsupportedRate { path: PathBuf, rate: u32 },
    #[error("{path}: no data rows")]
    Empty { path: PathBuf },
    #[error("{path}: row {row}: label {label} outside 0..={MAX_RAW_LABEL}")]
    Validation {
        path: PathBuf,
        row: usize,
        label: i64,
    },
    #[error("{path}: row {row}: cannot parse {field} from {text:?}")]
    Parse {
        path: PathBuf,
        row: usize,
        field: &'static str,
        text: String,
    },
    #[error("record {subject}: {reason}")]
    Invalid { subject: String, reason: String },
}

/// One subject's raw wrist BVP stream with per-sample condition codes.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub sample_rate: u32,
    pub bvp: Vec<f64>,
    pub labels: Vec<u8>,
}

impl SubjectRecord {
    /// Builds a record, enforcing the length, rate and label-range invariants.
    pub fn new(
        subject_id: impl Into<String>,
        sample_rate: u32,
        bvp: Vec<f64>,
        labels: Vec<u8>,
    ) -> Result<Self, IngestError> {
        let subject_id = subject_id.into();
        let invalid = |reason: String| IngestError::Invalid {
            subject: subject_id.clone(),
            reason,
        };
        if sample_rate != BVP_SAMPLE_RATE {
            return Err(invalid(format!(
                "sample rate {sample_rate} != {BVP_SAMPLE_RATE}"
            )));
        }
        if bvp.len() != labels.len() {
            return Err(invalid(format!(
                "{} BVP samples but {} labels",
                bvp.len(),
                labels.len()
            )));
        }
        if let Some(pos) = labels.iter().position(|&l| l > MAX_RAW_LABEL) {
            return Err(invalid(format!("label {} at sample {pos}", labels[pos])));
        }
        Ok(Self {
            subject_id,
            sample_rate,
            bvp,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.bvp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bvp.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.bvp.len() as f64 / f64::from(self.sample_rate)
    }

    /// Sample counts per raw label `0..=7`.
    pub fn label_histogram(&self) -> [usize; MAX_RAW_LABEL as usize + 1] {
        let mut hist = [0usize; MAX_RAW_LABEL as usize + 1];
        for &l in &self.labels {
            hist[l as usize] += 1;
        }
        hist
    }
}

/// Which classification problem the labels are mapped to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    /// Stress vs. non-stress (baseline and amusement merged).
    #[serde(rename = "2class")]
    TwoClass,
    /// Baseline vs. stress vs. amusement.
    #[serde(rename = "3class")]
    ThreeClass,
}

impl Task {
    pub fn n_classes(self) -> usize {
        match self {
            Task::TwoClass => 2,
            Task::ThreeClass => 3,
        }
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Task::TwoClass => &["non-stress", "stress"],
            Task::ThreeClass => &["baseline", "stress", "amusement"],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::TwoClass => "2class",
            Task::ThreeClass => "3class",
        }
    }

    /// Maps a single raw WESAD code; `None` for non-task conditions
    /// (0 transient, 4 meditation, 5-7 ignored).
    pub fn map_raw(self, raw: u8) -> Option<TaskLabel> {
        match (self, raw) {
            (Task::ThreeClass, 1) => Some(TaskLabel::Baseline),
            (Task::ThreeClass, 2) => Some(TaskLabel::Stress),
            (Task::ThreeClass, 3) => Some(TaskLabel::Amusement),
            (Task::TwoClass, 2) => Some(TaskLabel::Stress),
            (Task::TwoClass, 1 | 3) => Some(TaskLabel::NonStress),
            _ => None,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "2class" => Ok(Task::TwoClass),
            "3class" => Ok(Task::ThreeClass),
            other => Err(format!(
                "unknown task {other:?} (expected 2class or 3class)"
            )),
        }
    }
}

/// A condition label in task space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskLabel {
    Baseline,
    Stress,
    Amusement,
    NonStress,
}

impl TaskLabel {
    /// Dense class index used by the classifier.
    ///
    /// 3-class: baseline 0, stress 1, amusement 2. 2-class: non-stress 0, stress 1.
    pub fn class_index(self) -> usize {
        match self {
            TaskLabel::Baseline | TaskLabel::NonStress => 0,
            TaskLabel::Stress => 1,
            TaskLabel::Amusement => 2,
        }
    }
}

/// Labels a window of raw codes: the task label when every code is identical
/// and maps to a task class, `None` (discard) otherwise.
pub fn map_segment_label(raw_labels: &[u8], task: Task) -> Option<TaskLabel> {
    let (&first, rest) = raw_labels.split_first()?;
    if rest.iter().any(|&l| l != first) {
        return None;
    }
    task.map_raw(first)
}

/// Subject id from a path such as `data/S7.csv` (yields `S7`).
fn subject_id_from_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn load_subject(path: impl AsRef<Path>) -> Result<SubjectRecord, IngestError> {
    let path = path.as_ref();
    let io_err = |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let mut lines = BufReader::new(file).lines();

    let header = match lines.next() {
        Some(line) => line.map_err(io_err)?,
        None => {
            return Err(IngestError::Format {
                path: path.to_path_buf(),
                reason: "file is empty".into(),
            })
        }
    };
    let rate_text = header
        .strip_prefix(HEADER_PREFIX)
        .ok_or_else(|| IngestError::Format {
            path: path.to_path_buf(),
            reason: format!("expected `{HEADER_PREFIX}{BVP_SAMPLE_RATE}`, found {header:?}"),
        })?;
    let rate: u32 = rate_text.parse().map_err(|_| IngestError::Format {
        path: path.to_path_buf(),
        reason: format!("sample rate {rate_text:?} is not an integer"),
    })?;
    if rate != BVP_SAMPLE_RATE {
        return Err(IngestError::UnsupportedRate {
            path: path.to_path_buf(),
            rate,
        });
    }

    let mut bvp = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines.enumerate() {
        // Rows are numbered from 1, counting the header as row 0.
        let row = i + 1;
        let line = line.map_err(io_err)?;
        if line.is_empty() {
            continue;
        }
        let parse_err = |field: &'static str, text: &str| IngestError::Parse {
            path: path.to_path_buf(),
            row,
            field,
            text: text.to_string(),
        };
        let (bvp_text, label_text) = line
            .split_once(',')
            .ok_or_else(|| parse_err("row", &line))?;
        let value: f64 = bvp_text
            .trim()
            .parse()
            .map_err(|_| parse_err("bvp", bvp_text))?;
        if !value.is_finite() {
            return Err(parse_err("bvp", bvp_text));
        }
        let label: i64 = label_text
            .trim()
            .parse()
            .map_err(|_| parse_err("label", label_text))?;
        if !(0..=i64::from(MAX_RAW_LABEL)).contains(&label) {
            return Err(IngestError::Validation {
                path: path.to_path_buf(),
                row,
                label,
            });
        }
        bvp.push(value);
        labels.push(label as u8);
    }
    if bvp.is_empty() {
        return Err(IngestError::Empty {
            path: path.to_path_buf(),
        });
    }

    SubjectRecord::new(subject_id_from_path(path), rate, bvp, labels)
}

/// Writes a record in the neutral format. Values use Rust's shortest
/// round-trip representation, so `load_subject` reproduces them exactly.
pub fn write_subject(record: &SubjectRecord, path: impl AsRef<Path>) -> Result<(), IngestError> {
    let path = path.as_ref();
    let io_err = |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(fs::File::create(path).map_err(io_err)?);
    writeln!(out, "{HEADER_PREFIX}{}", record.sample_rate).map_err(io_err)?;
    for (v, l) in record.bvp.iter().zip(&record.labels) {
        writeln!(out, "{v},{l}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Subject files (`*.csv`) in a directory, sorted by name.
pub fn list_subject_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, IngestError> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|source| IngestError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| IngestError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let path = entry.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "csv") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}
