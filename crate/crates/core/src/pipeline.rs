//! Per-subject preprocessing: filter the whole stream, cut labelled windows,
//! extract features, standardize each window.

use log::debug;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsp::{
    design_bandpass, filter_zero_phase, segment_stream, DspError, FilterCoefficients,
};
use crate::dsp::{BVP_BAND_HZ, BVP_FILTER_ORDER, SEGMENT_LEN, SEGMENT_STRIDE};
use crate::features::{
    extract_features, FeatureVector, MIN_BEATS, PEAK_THRESHOLD_STD, TACHOGRAM_HZ,
};
use crate::ingest::{SubjectRecord, Task};
use crate::train::zscore_segment;

/// Bumped whenever preprocessing output changes for identical inputs.
pub const PIPELINE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("subject {subject}: {source}")]
    Filter {
        subject: String,
        #[source]
        source: DspError,
    },
    #[error("subject {subject}: sample rate {found} Hz does not match configured {expected} Hz")]
    SampleRate {
        subject: String,
        found: u32,
        expected: f64,
    },
}

/// Every setting that affects preprocessing output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub fs: f64,
    pub f1: f64,
    pub f2: f64,
    pub order: usize,
    pub task: Task,
}

impl PreprocessConfig {
    pub fn new(task: Task) -> Self {
        Self {
            fs: 64.0,
            f1: BVP_BAND_HZ.0,
            f2: BVP_BAND_HZ.1,
            order: BVP_FILTER_ORDER,
            task,
        }
    }

    pub fn filter(&self) -> Result<FilterCoefficients, DspError> {
        design_bandpass(self.fs, self.f1, self.f2, self.order)
    }

    /// Hex SHA-256 over the configuration, the fixed pipeline constants, the
    /// code version and a digest of the input files.
    pub fn cache_key(&self, inputs_digest: &str) -> String {
        let canonical = format!(
            "v{PIPELINE_VERSION};pkg={};fs={:?};f1={:?};f2={:?};order={};task={};win={SEGMENT_LEN};stride={SEGMENT_STRIDE};\
             min_beats={MIN_BEATS};thr={PEAK_THRESHOLD_STD:?};tach={TACHOGRAM_HZ:?};inputs={inputs_digest}",
            env!("CARGO_PKG_VERSION"),
            self.fs,
            self.f1,
            self.f2,
            self.order,
            self.task,
        );
        hex_digest(canonical.as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// A window ready for training: standardized samples plus raw features.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSegment {
    pub subject_id: String,
    pub start_index: usize,
    pub label: usize,
    pub samples: Vec<f32>,
    pub features: FeatureVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSubject {
    pub subject_id: String,
    pub segments: Vec<PreparedSegment>,
    /// Label-uniform windows before the quality gate.
    pub candidate_windows: usize,
    /// Windows dropped by the beat-count quality gate.
    pub dropped: usize,
    /// Kept windows whose LF/HF ratio fell back to the zero sentinel.
    pub lf_hf_flagged: usize,
}

pub fn prepare_subject(
    record: &SubjectRecord,
    config: &PreprocessConfig,
) -> Result<PreparedSubject, PipelineError> {
    if f64::from(record.sample_rate) != config.fs {
        return Err(PipelineError::SampleRate {
            subject: record.subject_id.clone(),
            found: record.sample_rate,
            expected: config.fs,
        });
    }
    let wrap = |source| PipelineError::Filter {
        subject: record.subject_id.clone(),
        source,
    };
    let coeffs = config.filter().map_err(wrap)?;
    let filtered = filter_zero_phase(&coeffs, &record.bvp).map_err(wrap)?;
    let windows = segment_stream(&record.subject_id, &filtered, &record.labels, config.task);

    let mut out = PreparedSubject {
        subject_id: record.subject_id.clone(),
        segments: Vec::with_capacity(windows.len()),
        candidate_windows: windows.len(),
        dropped: 0,
        lf_hf_flagged: 0,
    };
    for seg in windows {
        match extract_features(&seg) {
            Ok(features) => {
                out.lf_hf_flagged += usize::from(features.lf_hf_undefined);
                out.segments.push(PreparedSegment {
                    subject_id: seg.subject_id,
                    start_index: seg.start_index,
                    label: seg.label.class_index(),
                    samples: zscore_segment(&seg.samples)
                        .into_iter()
                        .map(|v| v as f32)
                        .collect(),
                    features,
                });
            }
            Err(e) => {
                debug!("{} @{}: dropped ({e})", record.subject_id, seg.start_index);
                out.dropped += 1;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synth_subject;

    #[test]
    fn seventy_second_subject_yields_three_segments() {
        let rec = synth_subject("S1", &[(2, 70.0)], 1);
        let p = prepare_subject(&rec, &PreprocessConfig::new(Task::ThreeClass)).unwrap();
        assert_eq!(p.candidate_windows, 3);
        assert_eq!(p.segments.len(), 3);
        assert!(p
            .segments
            .iter()
            .all(|s| s.label == 1 && s.samples.len() == 3840));
        let hr = p.segments[0].features.get("hr_mean").unwrap();
        assert!((80.0..105.0).contains(&hr), "{hr}");
    }

    #[test]
    fn flatline_subject_is_dropped_entirely() {
        let rec = SubjectRecord::new("S9", 64, vec![1.0; 6400], vec![1; 6400]).unwrap();
        let p = prepare_subject(&rec, &PreprocessConfig::new(Task::TwoClass)).unwrap();
        assert_eq!(p.candidate_windows, 9);
        assert!(p.segments.is_empty());
        assert_eq!(p.dropped, 9);
    }

    #[test]
    fn cache_key_tracks_inputs() {
        let c = PreprocessConfig::new(Task::ThreeClass);
        assert_eq!(c.cache_key("a"), c.cache_key("a"));
        assert_ne!(c.cache_key("a"), c.cache_key("b"));
        assert_eq!(c.cache_key("a").len(), 64);
    }

    proptest::proptest! {
        #[test]
        fn cache_key_changes_with_any_setting(
            field in 0usize..5,
            delta in 0.01f64..5.0,
            digest in "[0-9a-f]{8}",
        ) {
            let base = PreprocessConfig::new(Task::ThreeClass);
            let mut other = base;
            match field {
                0 => other.fs += delta,
                1 => other.f1 += delta / 10.0,
                2 => other.f2 += delta,
                3 => other.order += 1 + delta as usize,
                _ => other.task = Task::TwoClass,
            }
            proptest::prop_assert_ne!(base.cache_key(&digest), other.cache_key(&digest));
            proptest::prop_assert_eq!(base.cache_key(&digest), PreprocessConfig::new(Task::ThreeClass).cache_key(&digest));
        }
    }
}
