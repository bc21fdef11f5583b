//! Butterworth bandpass design, zero-phase filtering and sliding-window
//! segmentation of the filtered BVP stream.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use thiserror::Error;

use crate::ingest::{map_segment_label, Task, TaskLabel};

/// Window length in samples (60 s at 64 Hz).
pub const SEGMENT_LEN: usize = 3840;
/// Window stride in samples (5 s at 64 Hz).
pub const SEGMENT_STRIDE: usize = 320;

/// Passband used for wrist BVP: roughly 40 to 220 BPM.
pub const BVP_BAND_HZ: (f64, f64) = (0.7, 3.7);
pub const BVP_FILTER_ORDER: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("invalid filter design: {0}")]
    Design(String),
    #[error("signal of {len} samples is too short for {padding} samples of edge padding")]
    TooShort { len: usize, padding: usize },
}

/// One biquad: `H(z) = (b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    /// Complex response at `z`.
    pub fn response(&self, z: Complex64) -> Complex64 {
        let zi = z.inv();
        let zi2 = zi * zi;
        (self.b0 + zi * self.b1 + zi2 * self.b2) / (1.0 + zi * self.a1 + zi2 * self.a2)
    }

    /// Roots of `z^2 + a1 z + a2`.
    pub fn poles(&self) -> [Complex64; 2] {
        let disc = Complex64::new(self.a1 * self.a1 - 4.0 * self.a2, 0.0).sqrt();
        [(-self.a1 + disc) / 2.0, (-self.a1 - disc) / 2.0]
    }

    /// Transposed direct-form II state that holds the output steady for a
    /// constant input of 1.
    fn steady_state(&self) -> [f64; 2] {
        let dc = (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2);
        let z2 = self.b2 - self.a2 * dc;
        let z1 = self.b1 - self.a1 * dc + z2;
        [z1, z2]
    }

    fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }

    fn run(&self, state: &mut [f64; 2], x: f64) -> f64 {
        let y = self.b0 * x + state[0];
        state[0] = self.b1 * x - self.a1 * y + state[1];
        state[1] = self.b2 * x - self.a2 * y;
        y
    }
}

/// A cascade of second-order sections plus the design it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterCoefficients {
    pub sections: Vec<Biquad>,
    pub fs: f64,
    pub f1: f64,
    pub f2: f64,
    pub order: usize,
}

impl FilterCoefficients {
    /// Complex response at frequency `f_hz`.
    pub fn response_at(&self, f_hz: f64) -> Complex64 {
        let z = Complex64::from_polar(1.0, 2.0 * PI * f_hz / self.fs);
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z))
    }

    pub fn magnitude_at(&self, f_hz: f64) -> f64 {
        self.response_at(f_hz).norm()
    }

    pub fn poles(&self) -> Vec<Complex64> {
        self.sections.iter().flat_map(|s| s.poles()).collect()
    }

    /// Edge padding used by [`filter_zero_phase`]: three times the total
    /// number of poles and zeros.
    pub fn padding_len(&self) -> usize {
        3 * (4 * self.sections.len())
    }

    /// CSV rows `b0,b1,b2,a1,a2`, one per section.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("b0,b1,b2,a1,a2\n");
        for s in &self.sections {
            out.push_str(&format!("{},{},{},{},{}\n", s.b0, s.b1, s.b2, s.a1, s.a2));
        }
        out
    }
}

/// Digital Butterworth bandpass of the given prototype order, as `order`
/// second-order sections.
///
/// The analog lowpass prototype is shifted to the band between the
/// prewarped edges and discretized with the bilinear transform, so the
/// -3 dB points land exactly on `f1` and `f2`.
pub fn design_bandpass(
    fs: f64,
    f1: f64,
    f2: f64,
    order: usize,
) -> Result<FilterCoefficients, DspError> {
    if order == 0 {
        return Err(DspError::Design("order must be at least 1".into()));
    }
    if !(fs > 0.0) {
        return Err(DspError::Design(format!(
            "sample rate {fs} must be positive"
        )));
    }
    if !(f1 > 0.0) {
        return Err(DspError::Design(format!(
            "low cutoff {f1} Hz must be positive"
        )));
    }
    if !(f2 < fs / 2.0) {
        return Err(DspError::Design(format!(
            "high cutoff {f2} Hz must be below Nyquist ({} Hz)",
            fs / 2.0
        )));
    }
    if !(f1 < f2) {
        return Err(DspError::Design(format!(
            "cutoffs must satisfy f1 < f2 (got {f1}, {f2})"
        )));
    }

    let fs2 = 2.0 * fs;
    let w1 = fs2 * (PI * f1 / fs).tan();
    let w2 = fs2 * (PI * f2 / fs).tan();
    let bw = w2 - w1;
    let w0_sq = w1 * w2;

    // Each prototype pole p maps to the two roots of s^2 - p*bw*s + w0^2.
    let mut analog_poles = Vec::with_capacity(2 * order);
    for k in 0..order {
        let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
        let p = Complex64::from_polar(1.0, theta) * bw;
        let disc = (p * p - 4.0 * w0_sq).sqrt();
        analog_poles.push((p + disc) / 2.0);
        analog_poles.push((p - disc) / 2.0);
    }

    // `order` zeros at s = 0 map to z = 1; the `order` zeros at infinity map to z = -1.
    let mut gain = Complex64::new(bw.powi(order as i32), 0.0);
    gain *= Complex64::new(fs2.powi(order as i32), 0.0);
    let mut digital_poles = Vec::with_capacity(2 * order);
    for &p in &analog_poles {
        gain /= fs2 - p;
        digital_poles.push((fs2 + p) / (fs2 - p));
    }
    let gain = gain.re;

    let denominators = pair_poles(digital_poles);
    debug_assert_eq!(denominators.len(), order);
    let per_section = gain.abs().powf(1.0 / order as f64);
    let sections = denominators
        .into_iter()
        .enumerate()
        .map(|(i, (a1, a2))| {
            let g = if i == 0 {
                per_section * gain.signum()
            } else {
                per_section
            };
            // (1 - z^-1)(1 + z^-1): one zero at DC, one at Nyquist.
            Biquad {
                b0: g,
                b1: 0.0,
                b2: -g,
                a1,
                a2,
            }
        })
        .collect();

    Ok(FilterCoefficients {
        sections,
        fs,
        f1,
        f2,
        order,
    })
}

/// Groups poles into real-coefficient quadratics `(a1, a2)`: conjugate pairs
/// first, leftover real poles paired with each other.
fn pair_poles(poles: Vec<Complex64>) -> Vec<(f64, f64)> {
    const TOL: f64 = 1e-10;
    let mut complex: Vec<Complex64> = poles.iter().copied().filter(|p| p.im > TOL).collect();
    let mut real: Vec<f64> = poles
        .iter()
        .filter(|p| p.im.abs() <= TOL)
        .map(|p| p.re)
        .collect();
    complex.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    real.sort_by(f64::total_cmp);

    let mut out: Vec<(f64, f64)> = complex
        .iter()
        .map(|p| (-2.0 * p.re, p.norm_sqr()))
        .collect();
    for pair in real.chunks(2) {
        match *pair {
            [p, q] => out.push((-(p + q), p * q)),
            [p] => out.push((-p, 0.0)),
            _ => unreachable!(),
        }
    }
    out
}

/// Runs every section over `x` in place, starting each section from its
/// steady state for the constant level `x[0]`.
fn sos_filter_in_place(sections: &[Biquad], x: &mut [f64]) {
    let Some(&first) = x.first() else { return };
    let mut level = first;
    for s in sections {
        let mut state = s.steady_state().map(|v| v * level);
        for v in x.iter_mut() {
            *v = s.run(&mut state, *v);
        }
        level *= s.dc_gain();
    }
}

/// Forward-backward filtering: zero phase, squared magnitude response.
///
/// The input is extended at both ends by an odd reflection about the end
/// samples (`padding_len()` samples each side); each pass starts from the
/// steady state of its first sample, and the padding is trimmed so the
/// output has the input's length.
pub fn filter_zero_phase(
    coeffs: &FilterCoefficients,
    signal: &[f64],
) -> Result<Vec<f64>, DspError> {
    let pad = coeffs.padding_len();
    let n = signal.len();
    if n <= 6 * pad {
        return Err(DspError::TooShort {
            len: n,
            padding: pad,
        });
    }

    let mut ext = Vec::with_capacity(n + 2 * pad);
    let (first, last) = (signal[0], signal[n - 1]);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - signal[i]));
    ext.extend_from_slice(signal);
    ext.extend((1..=pad).map(|i| 2.0 * last - signal[n - 1 - i]));

    sos_filter_in_place(&coeffs.sections, &mut ext);
    ext.reverse();
    sos_filter_in_place(&coeffs.sections, &mut ext);
    ext.reverse();

    ext.truncate(n + pad);
    ext.drain(..pad);
    Ok(ext)
}

/// A labelled 60 s window of the filtered stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub subject_id: String,
    pub start_index: usize,
    pub samples: Vec<f64>,
    pub label: TaskLabel,
}

/// Number of candidate windows in a stream of `n` samples.
pub fn window_count(n: usize, window: usize, stride: usize) -> usize {
    if n < window {
        0
    } else {
        (n - window) / stride + 1
    }
}

/// Start offsets of every candidate window.
pub fn window_offsets(n: usize, window: usize, stride: usize) -> impl Iterator<Item = usize> {
    (0..window_count(n, window, stride)).map(move |i| i * stride)
}

/// Cuts the stream into 60 s windows every 5 s, keeping only windows whose
/// raw labels are uniform and map to a class of `task`.
///
/// # Panics
///
/// If `signal` and `labels` differ in length.
pub fn segment_stream(subject_id: &str, signal: &[f64], labels: &[u8], task: Task) -> Vec<Segment> {
    assert_eq!(signal.len(), labels.len(), "signal/label length mismatch");
    window_offsets(signal.len(), SEGMENT_LEN, SEGMENT_STRIDE)
        .filter_map(|start| {
            let end = start + SEGMENT_LEN;
            map_segment_label(&labels[start..end], task).map(|label| Segment {
                subject_id: subject_id.to_string(),
                start_index: start,
                samples: signal[start..end].to_vec(),
                label,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bvp_filter() -> FilterCoefficients {
        design_bandpass(64.0, 0.7, 3.7, 3).unwrap()
    }

    /// Closed-form analog Butterworth bandpass magnitude at the prewarped
    /// frequency: the bilinear transform maps it exactly onto the digital
    /// response.
    fn analog_oracle(fs: f64, f1: f64, f2: f64, order: i32, f: f64) -> f64 {
        let warp = |f: f64| 2.0 * fs * (PI * f / fs).tan();
        let (w1, w2, w) = (warp(f1), warp(f2), warp(f));
        let x = (w * w - w1 * w2) / (w * (w2 - w1));
        1.0 / (1.0 + x.powi(2 * order)).sqrt()
    }

    fn sine(freq: f64, amp: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / 64.0).sin())
            .collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn order_three_gives_three_sections() {
        let c = bvp_filter();
        assert_eq!(c.sections.len(), 3);
        assert_eq!(c.poles().len(), 6);
        assert_eq!(c.padding_len(), 36);
    }

    #[test]
    fn magnitude_matches_analog_prototype() {
        let c = bvp_filter();
        for i in 1..320 {
            let f = i as f64 * 0.1;
            let expected = analog_oracle(64.0, 0.7, 3.7, 3, f);
            assert!(
                (c.magnitude_at(f) - expected).abs() < 1e-9,
                "f={f}: {} vs {expected}",
                c.magnitude_at(f)
            );
        }
        assert!((c.magnitude_at(0.7) - 0.5f64.sqrt()).abs() < 1e-9);
        assert!((c.magnitude_at(3.7) - 0.5f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn bvp_band_response_points() {
        let c = bvp_filter();
        assert!(c.magnitude_at(0.0) < 1e-9);
        let center = (0.7f64 * 3.7).sqrt();
        let m = c.magnitude_at(center);
        assert!((0.99..=1.0).contains(&m), "{m}");
        assert!(c.magnitude_at(10.0) <= 0.05);
    }

    #[test]
    fn poles_inside_unit_circle() {
        for (f1, f2, order) in [(0.7, 3.7, 3), (0.5, 8.0, 4), (0.05, 0.4, 2), (1.0, 30.0, 5)] {
            let c = design_bandpass(64.0, f1, f2, order).unwrap();
            assert_eq!(c.sections.len(), order);
            for p in c.poles() {
                assert!(p.norm() < 1.0, "{f1}-{f2} order {order}: |p|={}", p.norm());
            }
        }
    }

    #[test]
    fn design_rejects_bad_cutoffs() {
        assert!(matches!(
            design_bandpass(64.0, 0.7, 40.0, 3),
            Err(DspError::Design(_))
        ));
        assert!(matches!(
            design_bandpass(64.0, 0.0, 3.7, 3),
            Err(DspError::Design(_))
        ));
        assert!(matches!(
            design_bandpass(64.0, 3.0, 2.0, 3),
            Err(DspError::Design(_))
        ));
        assert!(matches!(
            design_bandpass(64.0, 0.7, 3.7, 0),
            Err(DspError::Design(_))
        ));
    }

    #[test]
    fn constant_signal_is_rejected() {
        let c = bvp_filter();
        let x = vec![3.5; 4000];
        let y = filter_zero_phase(&c, &x).unwrap();
        assert_eq!(y.len(), x.len());
        assert!(y.iter().all(|v| v.abs() <= 1e-6 * 3.5));
    }

    #[test]
    fn band_center_sine_keeps_amplitude_and_phase() {
        let c = bvp_filter();
        let x = sine(1.6, 2.0, 3840);
        let y = filter_zero_phase(&c, &x).unwrap();
        // Compare away from the edges.
        let core = 640..3200;
        let ratio = rms(&y[core.clone()]) / rms(&x[core.clone()]);
        assert!((ratio - 1.0).abs() < 0.02, "ratio {ratio}");
        let lag = best_lag(&x[core.clone()], &y[core], 20);
        assert_eq!(lag, 0);
    }

    #[test]
    fn slow_drift_is_removed() {
        let c = bvp_filter();
        let x = sine(0.1, 1.0, 3840);
        let y = filter_zero_phase(&c, &x).unwrap();
        assert!(rms(&y) <= 0.05 * rms(&x), "{}", rms(&y) / rms(&x));
    }

    #[test]
    fn short_signal_is_a_length_error() {
        let c = bvp_filter();
        assert_eq!(
            filter_zero_phase(&c, &[0.0; 216]),
            Err(DspError::TooShort {
                len: 216,
                padding: 36
            })
        );
        assert!(filter_zero_phase(&c, &[0.0; 217]).is_ok());
    }

    fn best_lag(x: &[f64], y: &[f64], max_lag: isize) -> isize {
        let n = x.len() as isize;
        (-max_lag..=max_lag)
            .max_by(|&a, &b| xcorr(x, y, n, a).total_cmp(&xcorr(x, y, n, b)))
            .unwrap()
    }

    fn xcorr(x: &[f64], y: &[f64], n: isize, lag: isize) -> f64 {
        (0..n)
            .filter(|&i| (0..n).contains(&(i + lag)))
            .map(|i| x[i as usize] * y[(i + lag) as usize])
            .sum()
    }

    #[test]
    fn filtering_is_linear() {
        let c = bvp_filter();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..2000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..2000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, b) = (2.5, -0.75);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let fx = filter_zero_phase(&c, &x).unwrap();
        let fy = filter_zero_phase(&c, &y).unwrap();
        let fm = filter_zero_phase(&c, &mix).unwrap();
        let scale = fm.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..fm.len() {
            let expected = a * fx[i] + b * fy[i];
            assert!((fm[i] - expected).abs() <= 1e-8 * scale);
        }
    }

    #[test]
    fn segmentation_boundaries() {
        let seg =
            |n: usize, l: u8| segment_stream("S1", &vec![0.0; n], &vec![l; n], Task::ThreeClass);
        assert_eq!(seg(3840, 1).len(), 1);
        let s = seg(4480, 2);
        assert_eq!(
            s.iter().map(|s| s.start_index).collect::<Vec<_>>(),
            vec![0, 320, 640]
        );
        assert!(s
            .iter()
            .all(|s| s.label == TaskLabel::Stress && s.samples.len() == SEGMENT_LEN));
        assert!(seg(3839, 1).is_empty());
        assert!(seg(8000, 0).is_empty());
    }

    #[test]
    fn boundary_spanning_windows_are_dropped() {
        let n = 3840 + 320 * 4;
        let mut labels = vec![1u8; n];
        labels[3840 + 100..].fill(2);
        let segs = segment_stream("S1", &vec![0.0; n], &labels, Task::ThreeClass);
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].start_index, 0);
    }

    proptest! {
        #[test]
        fn window_count_matches_closed_form(n in 0usize..=1_000_000) {
            let expected = if n >= 3840 { (n - 3840) / 320 + 1 } else { 0 };
            prop_assert_eq!(window_offsets(n, SEGMENT_LEN, SEGMENT_STRIDE).count(), expected);
            prop_assert!(window_offsets(n, SEGMENT_LEN, SEGMENT_STRIDE).all(|s| s % 320 == 0 && s + 3840 <= n));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn uniform_stream_keeps_every_window(n in 0usize..40_000) {
            let segs = segment_stream("S1", &vec![0.0; n], &vec![3; n], Task::TwoClass);
            prop_assert_eq!(segs.len(), window_count(n, SEGMENT_LEN, SEGMENT_STRIDE));
        }
    }
}
