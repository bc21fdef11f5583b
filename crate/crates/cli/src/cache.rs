//! On-disk cache of preprocessed segments.
//!
//! A task directory holds three files:
//!
//! - `features.csv`: one row per kept segment (subject, start, label,
//!   LF/HF flag, 19 features), in segment order.
//! - `segments.bin`: magic `PSSEGS\0\0`, format `u32`, segment count `u32`,
//!   segment length `u32`, then the standardized samples as `f32` LE in the
//!   same order as the CSV rows.
//! - `manifest.json`: cache key and per-subject counts. Written last, so an
//!   interrupted run never looks like a valid cache.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use pulsestress_core::dsp::SEGMENT_LEN;
use pulsestress_core::features::{FeatureVector, FEATURE_NAMES, N_FEATURES};
use pulsestress_core::pipeline::{
    hex_digest, PreparedSegment, PreparedSubject, PreprocessConfig, PIPELINE_VERSION,
};
use serde::{Deserialize, Serialize};

use crate::atomic_write;

pub const CACHE_FORMAT: u32 = 1;
const SEGMENTS_MAGIC: &[u8; 8] = b"PSSEGS\0\0";
pub const MANIFEST: &str = "manifest.json";
pub const FEATURES: &str = "features.csv";
pub const SEGMENTS: &str = "segments.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSummary {
    pub subject_id: String,
    pub candidate_windows: usize,
    pub kept: usize,
    pub dropped: usize,
    pub lf_hf_flagged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub pipeline_version: u32,
    pub key: String,
    pub preprocess: PreprocessConfig,
    pub subjects: Vec<SubjectSummary>,
}

/// Digest over the names and contents of the input files.
pub fn inputs_digest(files: &[PathBuf]) -> Result<String> {
    let mut listing = String::new();
    for path in files {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy())
            .unwrap_or_default();
        writeln!(listing, "{name}\t{}\t{}", bytes.len(), hex_digest(&bytes))
            .expect("write to string");
    }
    Ok(hex_digest(listing.as_bytes()))
}

pub fn read_manifest(dir: &Path) -> Result<Option<Manifest>> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let manifest =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(Some(manifest))
}

pub fn write_cache(
    dir: &Path,
    key: &str,
    config: &PreprocessConfig,
    subjects: &[PreparedSubject],
) -> Result<Manifest> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let _ = fs::remove_file(dir.join(MANIFEST));

    let segments: Vec<&PreparedSegment> = subjects.iter().flat_map(|s| &s.segments).collect();

    let mut csv = String::from("subject_id,start_index,label,lf_hf_undefined");
    for name in FEATURE_NAMES {
        csv.push(',');
        csv.push_str(name);
    }
    csv.push('\n');
    for s in &segments {
        write!(
            csv,
            "{},{},{},{}",
            s.subject_id,
            s.start_index,
            s.label,
            u8::from(s.features.lf_hf_undefined)
        )
        .expect("write to string");
        for v in s.features.values {
            write!(csv, ",{v}").expect("write to string");
        }
        csv.push('\n');
    }
    atomic_write(&dir.join(FEATURES), csv.as_bytes())?;

    let mut bin = Vec::with_capacity(20 + segments.len() * SEGMENT_LEN * 4);
    bin.extend_from_slice(SEGMENTS_MAGIC);
    bin.extend_from_slice(&CACHE_FORMAT.to_le_bytes());
    bin.extend_from_slice(&(segments.len() as u32).to_le_bytes());
    bin.extend_from_slice(&(SEGMENT_LEN as u32).to_le_bytes());
    for s in &segments {
        for v in &s.samples {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(&dir.join(SEGMENTS), &bin)?;

    let manifest = Manifest {
        format: CACHE_FORMAT,
        pipeline_version: PIPELINE_VERSION,
        key: key.to_string(),
        preprocess: *config,
        subjects: subjects
            .iter()
            .map(|s| SubjectSummary {
                subject_id: s.subject_id.clone(),
                candidate_windows: s.candidate_windows,
                kept: s.segments.len(),
                dropped: s.dropped,
                lf_hf_flagged: s.lf_hf_flagged,
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    atomic_write(&dir.join(MANIFEST), json.as_bytes())?;
    Ok(manifest)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Loads every subject listed in the manifest, including those whose
/// segments were all dropped.
pub fn load_cache(dir: &Path) -> Result<(Manifest, Vec<PreparedSubject>)> {
    let manifest =
        read_manifest(dir)?.with_context(|| format!("no cache manifest in {}", dir.display()))?;
    ensure!(
        manifest.format == CACHE_FORMAT,
        "{}: cache format {} is not supported (expected {CACHE_FORMAT}); rerun preprocess",
        dir.display(),
        manifest.format
    );

    let bin_path = dir.join(SEGMENTS);
    let bin = fs::read(&bin_path).with_context(|| format!("reading {}", bin_path.display()))?;
    ensure!(
        bin.len() >= 20 && &bin[..8] == SEGMENTS_MAGIC,
        "{}: not a segment file",
        bin_path.display()
    );
    let count = u32_at(&bin, 12) as usize;
    let seg_len = u32_at(&bin, 16) as usize;
    ensure!(
        seg_len == SEGMENT_LEN,
        "{}: segment length {seg_len}",
        bin_path.display()
    );
    ensure!(
        bin.len() == 20 + count * seg_len * 4,
        "{}: size does not match {count} segments",
        bin_path.display()
    );

    let csv_path = dir.join(FEATURES);
    let csv =
        fs::read_to_string(&csv_path).with_context(|| format!("reading {}", csv_path.display()))?;
    let mut rows = csv.lines();
    rows.next()
        .with_context(|| format!("{}: missing header", csv_path.display()))?;

    let mut subjects: Vec<PreparedSubject> = manifest
        .subjects
        .iter()
        .map(|s| PreparedSubject {
            subject_id: s.subject_id.clone(),
            segments: Vec::with_capacity(s.kept),
            candidate_windows: s.candidate_windows,
            dropped: s.dropped,
            lf_hf_flagged: s.lf_hf_flagged,
        })
        .collect();
    let index: HashMap<String, usize> = subjects
        .iter()
        .enumerate()
        .map(|(i, s)| (s.subject_id.clone(), i))
        .collect();

    let mut n = 0;
    for (i, line) in rows.enumerate() {
        let ctx = || format!("{} row {}", csv_path.display(), i + 1);
        let fields: Vec<&str> = line.split(',').collect();
        ensure!(
            fields.len() == 4 + N_FEATURES,
            "{}: {} fields",
            ctx(),
            fields.len()
        );
        ensure!(n < count, "{}: more rows than segments", ctx());
        let mut values = [0.0; N_FEATURES];
        for (slot, text) in values.iter_mut().zip(&fields[4..]) {
            *slot = text.parse().with_context(ctx)?;
        }
        let offset = 20 + n * seg_len * 4;
        let samples = bin[offset..offset + seg_len * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let segment = PreparedSegment {
            subject_id: fields[0].to_string(),
            start_index: fields[1].parse().with_context(ctx)?,
            label: fields[2].parse().with_context(ctx)?,
            samples,
            features: FeatureVector {
                values,
                lf_hf_undefined: fields[3] == "1",
            },
        };
        let Some(&slot) = index.get(&segment.subject_id) else {
            bail!(
                "{}: subject {} is not in the manifest",
                ctx(),
                segment.subject_id
            );
        };
        subjects[slot].segments.push(segment);
        n += 1;
    }
    ensure!(
        n == count,
        "{}: {n} rows for {count} segments",
        csv_path.display()
    );
    for (s, summary) in subjects.iter().zip(&manifest.subjects) {
        ensure!(
            s.segments.len() == summary.kept,
            "cache is inconsistent: subject {} has {} segments, manifest says {}",
            s.subject_id,
            s.segments.len(),
            summary.kept
        );
    }
    Ok((manifest, subjects))
}
