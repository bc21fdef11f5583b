//! Heartbeat detection and the 19 time- and frequency-domain HRV features
//! computed for every segment.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::Segment;

/// Fastest plausible heart rate; sets the minimum peak spacing.
pub const MAX_HR_BPM: f64 = 220.0;
/// Segments with fewer detected beats than this are dropped.
pub const MIN_BEATS: usize = 10;
/// Peaks must exceed this multiple of the segment standard deviation.
pub const PEAK_THRESHOLD_STD: f64 = 0.5;
/// Tachogram resampling rate.
pub const TACHOGRAM_HZ: f64 = 4.0;

pub const ULF_BAND: (f64, f64) = (0.01, 0.04);
pub const LF_BAND: (f64, f64) = (0.04, 0.15);
pub const HF_BAND: (f64, f64) = (0.15, 0.4);
pub const UHF_BAND: (f64, f64) = (0.4, 1.0);

pub const N_FEATURES: usize = 19;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "hr_mean",
    "hr_std",
    "ibi_mean",
    "ibi_std",
    "nn50",
    "pnn50",
    "rmssd",
    "ulf_power",
    "lf_power",
    "hf_power",
    "uhf_power",
    "lf_hf_ratio",
    "total_power",
    "ulf_rel",
    "lf_rel",
    "hf_rel",
    "uhf_rel",
    "lf_norm",
    "hf_norm",
];

/// Minimum 64 Hz sample spacing between peaks: `floor(64 * 60 / 220)`.
pub fn min_peak_distance(fs: f64) -> usize {
    (fs * 60.0 / MAX_HR_BPM).floor() as usize
}

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("only {found} beats detected (need {MIN_BEATS})")]
    QualityTooLow { found: usize },
    #[error("need at least {needed} inter-beat intervals, got {found}")]
    InsufficientBeats { needed: usize, found: usize },
}

/// Detected beats within one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct BeatSeries {
    pub peak_indices: Vec<usize>,
    /// `ibi_ms[i]` is the interval ending at `peak_indices[i + 1]`.
    pub ibi_ms: Vec<f64>,
    pub fs: f64,
}

impl BeatSeries {
    pub fn from_peaks(peak_indices: Vec<usize>, fs: f64) -> Self {
        let ibi_ms = peak_indices
            .windows(2)
            .map(|w| (w[1] - w[0]) as f64 * 1000.0 / fs)
            .collect();
        Self {
            peak_indices,
            ibi_ms,
            fs,
        }
    }

    pub fn beat_count(&self) -> usize {
        self.peak_indices.len()
    }
}

/// Systolic peak detection on a bandpass-filtered segment.
///
/// Candidates are strict local maxima above `0.5 * std(segment)`. Walking the
/// candidates from tallest to shortest, any candidate within the minimum
/// spacing of an already accepted peak is suppressed.
pub fn detect_peaks(samples: &[f64], fs: f64) -> Result<BeatSeries, FeatureError> {
    let n = samples.len();
    if n < 3 {
        return Err(FeatureError::QualityTooLow { found: 0 });
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let std = (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let threshold = PEAK_THRESHOLD_STD * std;

    let mut candidates: Vec<usize> = (1..n - 1)
        .filter(|&i| {
            samples[i] > samples[i - 1] && samples[i] > samples[i + 1] && samples[i] > threshold
        })
        .collect();
    // Tallest first; the stable sort keeps earlier peaks ahead on ties.
    candidates.sort_by(|&a, &b| samples[b].total_cmp(&samples[a]));

    let distance = min_peak_distance(fs);
    let mut taken = vec![false; n];
    let mut peaks = Vec::new();
    for idx in candidates {
        let lo = idx.saturating_sub(distance - 1);
        let hi = (idx + distance).min(n);
        if taken[lo..hi].iter().any(|&t| t) {
            continue;
        }
        taken[idx] = true;
        peaks.push(idx);
    }
    peaks.sort_unstable();

    if peaks.len() < MIN_BEATS {
        return Err(FeatureError::QualityTooLow { found: peaks.len() });
    }
    Ok(BeatSeries::from_peaks(peaks, fs))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TimeDomain {
    pub hr_mean: f64,
    pub hr_std: f64,
    pub ibi_mean: f64,
    pub ibi_std: f64,
    pub nn50: f64,
    pub pnn50: f64,
    pub rmssd: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Statistics of the IBI series. Standard deviations use divisor `n`;
/// `rmssd` is the root mean square of successive differences.
pub fn time_domain_features(ibi_ms: &[f64]) -> Result<TimeDomain, FeatureError> {
    if ibi_ms.len() < 2 {
        return Err(FeatureError::InsufficientBeats {
            needed: 2,
            found: ibi_ms.len(),
        });
    }
    let (hr_mean, hr_std) = mean_std(ibi_ms.iter().map(|ibi| 60_000.0 / ibi));
    let (ibi_mean, ibi_std) = mean_std(ibi_ms.iter().copied());

    let diffs: Vec<f64> = ibi_ms.windows(2).map(|w| w[1] - w[0]).collect();
    let nn50 = diffs.iter().filter(|d| d.abs() > 50.0).count();
    let pnn50 = 100.0 * nn50 as f64 / diffs.len() as f64;
    let rmssd = (diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64).sqrt();

    Ok(TimeDomain {
        hr_mean,
        hr_std,
        ibi_mean,
        ibi_std,
        nn50: nn50 as f64,
        pnn50,
        rmssd,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FrequencyDomain {
    pub ulf: f64,
    pub lf: f64,
    pub hf: f64,
    pub uhf: f64,
    pub lf_hf: f64,
    pub total: f64,
    pub ulf_rel: f64,
    pub lf_rel: f64,
    pub hf_rel: f64,
    pub uhf_rel: f64,
    pub lf_norm: f64,
    pub hf_norm: f64,
    /// HF power was zero, so `lf_hf` holds the 0 sentinel.
    pub lf_hf_undefined: bool,
}

/// One-sided power spectral density (ms^2/Hz) on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub df: f64,
    pub psd: Vec<f64>,
}

impl Spectrum {
    /// Trapezoidal integral of the PSD over `[lo, hi]`, with the band edges
    /// linearly interpolated between bins.
    pub fn band_power(&self, (lo, hi): (f64, f64)) -> f64 {
        let last = (self.psd.len() - 1) as f64 * self.df;
        let (lo, hi) = (lo.max(0.0), hi.min(last));
        if hi <= lo {
            return 0.0;
        }
        let at = |f: f64| {
            let x = f / self.df;
            let i = (x.floor() as usize).min(self.psd.len() - 2);
            let t = x - i as f64;
            self.psd[i] * (1.0 - t) + self.psd[i + 1] * t
        };
        let first = (lo / self.df).floor() as usize + 1;
        let mut knots = vec![lo];
        knots.extend(
            (first..)
                .map(|k| k as f64 * self.df)
                .take_while(|&f| f < hi),
        );
        knots.push(hi);
        knots
            .windows(2)
            .map(|w| 0.5 * (at(w[0]) + at(w[1])) * (w[1] - w[0]))
            .sum()
    }
}

/// Evenly sampled IBI series: each interval is placed at the time of the
/// beat that ends it and linearly interpolated at `TACHOGRAM_HZ` between
/// the first and last of those times.
pub fn tachogram(beats: &BeatSeries) -> Result<Vec<f64>, FeatureError> {
    let times: Vec<f64> = beats.peak_indices[1..]
        .iter()
        .map(|&p| p as f64 / beats.fs)
        .collect();
    let ibi = &beats.ibi_ms;
    let span = match (times.first(), times.last()) {
        (Some(a), Some(b)) => b - a,
        _ => 0.0,
    };
    let count = (span * TACHOGRAM_HZ).floor() as usize + 1;
    if count < 2 {
        return Err(FeatureError::InsufficientBeats {
            needed: 2,
            found: ibi.len(),
        });
    }
    let mut out = Vec::with_capacity(count);
    let mut j = 0;
    for k in 0..count {
        let t = times[0] + k as f64 / TACHOGRAM_HZ;
        while j + 2 < times.len() && times[j + 1] < t {
            j += 1;
        }
        let (t0, t1) = (times[j], times[j + 1]);
        let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        out.push(ibi[j] * (1.0 - w) + ibi[j + 1] * w);
    }
    Ok(out)
}

fn fft_len(n: usize) -> usize {
    n.next_power_of_two().max(2048)
}

/// Hann-windowed periodogram of a mean-removed series sampled at `fs`,
/// zero padded to at least 2048 points for a fine frequency grid.
pub fn periodogram(series: &[f64], fs: f64) -> Spectrum {
    let n = series.len();
    let nfft = fft_len(n);
    let mean = series.iter().sum::<f64>() / n as f64;
    let flat = series.iter().all(|&v| v == series[0]);
    let window: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1).max(1) as f64).cos())
        .collect();
    let norm = fs * window.iter().map(|w| w * w).sum::<f64>();

    let mut buf: Vec<Complex64> = vec![Complex64::default(); nfft];
    if !flat {
        for i in 0..n {
            buf[i] = Complex64::new((series[i] - mean) * window[i], 0.0);
        }
    }
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(nfft);
    fft.process(&mut buf);

    let half = nfft / 2;
    let psd = (0..=half)
        .map(|k| {
            let p = buf[k].norm_sqr() / norm;
            if k == 0 || k == half {
                p
            } else {
                2.0 * p
            }
        })
        .collect();
    Spectrum {
        df: fs / nfft as f64,
        psd,
    }
}

/// Band powers and their ratios from the 4 Hz tachogram periodogram.
///
/// Degenerate cases: ratios over a zero denominator are reported as 0, and
/// a zero HF power additionally sets `lf_hf_undefined`.
pub fn spectral_features(beats: &BeatSeries) -> Result<FrequencyDomain, FeatureError> {
    if beats.beat_count() < MIN_BEATS {
        return Err(FeatureError::QualityTooLow {
            found: beats.beat_count(),
        });
    }
    let spectrum = periodogram(&tachogram(beats)?, TACHOGRAM_HZ);
    Ok(band_summary(
        spectrum.band_power(ULF_BAND),
        spectrum.band_power(LF_BAND),
        spectrum.band_power(HF_BAND),
        spectrum.band_power(UHF_BAND),
    ))
}

fn band_summary(ulf: f64, lf: f64, hf: f64, uhf: f64) -> FrequencyDomain {
    let total = ulf + lf + hf + uhf;
    let frac = |x: f64| if total > 0.0 { x / total } else { 0.0 };
    let lf_hf_sum = lf + hf;
    let (lf_norm, hf_norm) = if lf_hf_sum > 0.0 {
        (100.0 * lf / lf_hf_sum, 100.0 * hf / lf_hf_sum)
    } else {
        (0.0, 0.0)
    };
    let lf_hf_undefined = hf <= 0.0;
    FrequencyDomain {
        ulf,
        lf,
        hf,
        uhf,
        lf_hf: if lf_hf_undefined { 0.0 } else { lf / hf },
        total,
        ulf_rel: frac(ulf),
        lf_rel: frac(lf),
        hf_rel: frac(hf),
        uhf_rel: frac(uhf),
        lf_norm,
        hf_norm,
        lf_hf_undefined,
    }
}

/// The 19 features of one segment, in [`FEATURE_NAMES`] order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: [f64; N_FEATURES],
    pub lf_hf_undefined: bool,
}

impl FeatureVector {
    pub fn from_parts(t: &TimeDomain, f: &FrequencyDomain) -> Self {
        Self {
            values: [
                t.hr_mean, t.hr_std, t.ibi_mean, t.ibi_std, t.nn50, t.pnn50, t.rmssd, f.ulf, f.lf,
                f.hf, f.uhf, f.lf_hf, f.total, f.ulf_rel, f.lf_rel, f.hf_rel, f.uhf_rel, f.lf_norm,
                f.hf_norm,
            ],
            lf_hf_undefined: f.lf_hf_undefined,
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        FEATURE_NAMES
            .iter()
            .position(|&n| n == name)
            .map(|i| self.values[i])
    }
}

/// Features of a filtered segment sampled at `fs`.
pub fn extract_features_from_samples(
    samples: &[f64],
    fs: f64,
) -> Result<FeatureVector, FeatureError> {
    let beats = detect_peaks(samples, fs)?;
    let time = time_domain_features(&beats.ibi_ms)?;
    let freq = spectral_features(&beats)?;
    Ok(FeatureVector::from_parts(&time, &freq))
}

pub fn extract_features(segment: &Segment) -> Result<FeatureVector, FeatureError> {
    extract_features_from_samples(&segment.samples, f64::from(crate::ingest::BVP_SAMPLE_RATE))
}
