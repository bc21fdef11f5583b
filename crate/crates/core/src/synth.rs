//! Synthetic wrist-BVP generators with known beat times.
//!
//! Used as ground truth for the peak detector and as stand-in subjects for
//! end-to-end runs when the real recordings are not available.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ingest::{SubjectRecord, BVP_SAMPLE_RATE};

/// A pulse waveform together with the exact times of its systolic peaks.
#[derive(Debug, Clone)]
pub struct PulseTrain {
    pub signal: Vec<f64>,
    /// Systolic peak positions in (fractional) samples.
    pub beat_samples: Vec<f64>,
}

/// Adds one beat: a systolic Gaussian at `t` and a smaller diastolic shoulder.
fn add_beat(signal: &mut [f64], fs: f64, t: f64, ibi_s: f64, amplitude: f64) {
    let sys_width = 0.10 * ibi_s;
    let dia_offset = 0.25 * ibi_s;
    let dia_width = 0.12 * ibi_s;
    let reach = 4.0 * (dia_offset + dia_width);
    let lo = ((t - reach) * fs).floor().max(0.0) as usize;
    let hi = (((t + reach) * fs).ceil() as usize).min(signal.len());
    for (i, v) in signal.iter_mut().enumerate().take(hi).skip(lo) {
        let x = i as f64 / fs - t;
        let sys = (-0.5 * (x / sys_width).powi(2)).exp();
        let dia = 0.25 * (-0.5 * ((x - dia_offset) / dia_width).powi(2)).exp();
        *v += amplitude * (sys + dia);
    }
}

/// Noiseless constant-rate pulse train.
pub fn pulse_train(bpm: f64, duration_s: f64, fs: f64) -> PulseTrain {
    let n = (duration_s * fs).round() as usize;
    let ibi = 60.0 / bpm;
    let mut signal = vec![0.0; n];
    let mut beat_samples = Vec::new();
    let mut t = 0.37 * ibi;
    while t < duration_s {
        add_beat(&mut signal, fs, t, ibi, 1.0);
        beat_samples.push(t * fs);
        t += ibi;
    }
    PulseTrain {
        signal,
        beat_samples,
    }
}

/// Physiological character of one study condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionProfile {
    pub heart_rate_bpm: f64,
    /// Amplitude (ms) of the 0.1 Hz IBI oscillation.
    pub lf_ms: f64,
    /// Amplitude (ms) of the respiratory IBI oscillation.
    pub hf_ms: f64,
    pub respiration_hz: f64,
    pub pulse_amplitude: f64,
}

/// Typical profile for a raw WESAD condition code.
pub fn condition_profile(raw_label: u8) -> ConditionProfile {
    match raw_label {
        // baseline: relaxed, strong respiratory arrhythmia
        1 => ConditionProfile {
            heart_rate_bpm: 66.0,
            lf_ms: 25.0,
            hf_ms: 45.0,
            respiration_hz: 0.25,
            pulse_amplitude: 60.0,
        },
        // stress: fast, low variability, LF dominated
        2 => ConditionProfile {
            heart_rate_bpm: 92.0,
            lf_ms: 20.0,
            hf_ms: 6.0,
            respiration_hz: 0.33,
            pulse_amplitude: 40.0,
        },
        // amusement
        3 => ConditionProfile {
            heart_rate_bpm: 74.0,
            lf_ms: 40.0,
            hf_ms: 20.0,
            respiration_hz: 0.3,
            pulse_amplitude: 55.0,
        },
        _ => ConditionProfile {
            heart_rate_bpm: 78.0,
            lf_ms: 30.0,
            hf_ms: 20.0,
            respiration_hz: 0.28,
            pulse_amplitude: 50.0,
        },
    }
}

/// Synthetic subject following `schedule` (raw condition code, seconds).
///
/// Each subject gets its own heart-rate offset and amplitude scale; noise
/// and baseline wander are added on top of the pulse waveform.
pub fn synth_subject(subject_id: &str, schedule: &[(u8, f64)], seed: u64) -> SubjectRecord {
    let fs = f64::from(BVP_SAMPLE_RATE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total_s: f64 = schedule.iter().map(|(_, s)| s).sum();
    let n = (total_s * fs).round() as usize;

    let mut labels = Vec::with_capacity(n);
    for &(label, secs) in schedule {
        let count = (secs * fs).round() as usize;
        labels.extend(std::iter::repeat_n(label, count));
    }
    labels.resize(n, schedule.last().map_or(0, |s| s.0));

    let hr_offset = rng.random_range(-6.0..6.0);
    let amp_scale = rng.random_range(0.7..1.3);
    let lf_phase = rng.random_range(0.0..2.0 * PI);
    let jitter = Normal::new(0.0, 0.008).expect("valid normal");

    let mut signal = vec![0.0; n];
    let mut t = 0.2;
    while t < total_s {
        let idx = ((t * fs) as usize).min(n.saturating_sub(1));
        let p = condition_profile(labels[idx]);
        let base_ibi = 60.0 / (p.heart_rate_bpm + hr_offset);
        let ibi = base_ibi
            + p.lf_ms / 1000.0 * (2.0 * PI * 0.1 * t + lf_phase).sin()
            + p.hf_ms / 1000.0 * (2.0 * PI * p.respiration_hz * t).sin()
            + jitter.sample(&mut rng);
        let amplitude = p.pulse_amplitude * amp_scale * rng.random_range(0.9..1.1);
        add_beat(&mut signal, fs, t, ibi, amplitude);
        t += ibi.max(0.3);
    }

    let noise = Normal::new(0.0, 2.0).expect("valid normal");
    let wander_phase = rng.random_range(0.0..2.0 * PI);
    for (i, v) in signal.iter_mut().enumerate() {
        let ts = i as f64 / fs;
        *v += 15.0 * (2.0 * PI * 0.03 * ts + wander_phase).sin() + noise.sample(&mut rng);
    }

    SubjectRecord::new(subject_id, BVP_SAMPLE_RATE, signal, labels)
        .expect("synthetic record is valid")
}

/// A short protocol visiting baseline, stress and amusement.
pub fn default_schedule(scale: f64) -> Vec<(u8, f64)> {
    vec![
        (0, 10.0),
        (1, 300.0 * scale),
        (0, 20.0),
        (2, 180.0 * scale),
        (0, 20.0),
        (3, 120.0 * scale),
        (4, 30.0),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pulse_train_beat_count() {
        let p = pulse_train(60.0, 60.0, 64.0);
        assert_eq!(p.beat_samples.len(), 60);
        assert_eq!(p.signal.len(), 3840);
    }

    #[test]
    fn subject_follows_schedule() {
        let rec = synth_subject("S1", &[(1, 70.0), (2, 30.0)], 3);
        assert_eq!(rec.len(), 6400);
        assert_eq!(rec.label_histogram()[1], 4480);
        assert_eq!(rec.label_histogram()[2], 1920);
        assert_eq!(rec, synth_subject("S1", &[(1, 70.0), (2, 30.0)], 3));
    }
}
