//! Central finite-difference verification of [`ModelState::backward`].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::Activation;
use super::loss::weighted_cce;
use super::model::{ModelInput, ModelState};
use super::tensor::Real;
use super::NnError;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Smallest step tried when a perturbation crosses a ReLU kink.
pub const MIN_FD_STEP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst parameter.
    pub worst: Option<(String, usize)>,
    /// Parameters whose `FD_STEP` perturbation flipped an activation gate
    /// and were re-measured with a smaller step.
    pub reduced_steps: usize,
}

/// Gradients smaller than this are compared in absolute terms. Central
/// differences of an O(1) loss carry about `1e-16 / FD_STEP` of rounding
/// noise, so parameters whose true gradient is zero (biases feeding batch
/// norm, dead units) never agree more closely than ~1e-12.
pub const GRAD_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compares analytic gradients with central differences on at least
/// `min_params` parameters, drawn so that every trainable tensor is
/// represented. Runs in `f64` with dropout disabled and batch norm on batch
/// statistics, whatever the model's own scalar type and config.
///
/// A central difference straddling a ReLU kink does not estimate the
/// derivative, so when the `+h` and `-h` evaluations disagree on any gate the
/// step is divided by 10 until they agree (down to [`MIN_FD_STEP`]).
pub fn gradient_check<T: Real>(
    model: &ModelState<T>,
    input: &ModelInput<T>,
    targets: &[usize],
    class_weights: &[f64],
    min_params: usize,
    seed: u64,
) -> Result<GradCheckReport, NnError> {
    let mut wide: ModelState<f64> = model.cast();
    wide.set_config(wide.config.without_dropout());
    let input: ModelInput<f64> = input.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (probs, trace) = wide.propagate_train(&input, &mut rng)?;
    let grads = wide.backward(&trace, &probs, targets, class_weights)?;

    let names = wide.trainable_names();
    let sizes: Vec<usize> = wide.trainable_tensors().iter().map(|t| t.len()).collect();
    let per_tensor = min_params.div_ceil(sizes.len()).max(1);
    let mut picks: Vec<(usize, usize)> = Vec::new();
    for (ti, &len) in sizes.iter().enumerate() {
        let mut idx: Vec<usize> = (0..len).collect();
        idx.shuffle(&mut rng);
        picks.extend(idx.into_iter().take(per_tensor).map(|i| (ti, i)));
    }
    let total: usize = sizes.iter().sum();
    while picks.len() < min_params.min(total) {
        let flat = rng.random_range(0..total);
        let mut ti = 0;
        let mut i = flat;
        while i >= sizes[ti] {
            i -= sizes[ti];
            ti += 1;
        }
        if !picks.contains(&(ti, i)) {
            picks.push((ti, i));
        }
    }

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        reduced_steps: 0,
    };
    let has_kinks = wide.config.activation == Activation::Relu;
    for (ti, i) in picks {
        let original = wide.trainable_tensors()[ti].data()[i];
        let mut eval = |value: f64| -> Result<(f64, Vec<bool>), NnError> {
            wide.trainable_tensors_mut()[ti].data_mut()[i] = value;
            let (probs, trace) = wide.propagate_train(&input, &mut rng)?;
            Ok((
                weighted_cce(&probs, targets, class_weights),
                if has_kinks {
                    trace.gate_pattern()
                } else {
                    Vec::new()
                },
            ))
        };
        let mut h = FD_STEP;
        let numeric = loop {
            let (plus, gates_plus) = eval(original + h)?;
            let (minus, gates_minus) = eval(original - h)?;
            if gates_plus == gates_minus || h / 10.0 < MIN_FD_STEP {
                break (plus - minus) / (2.0 * h);
            }
            h /= 10.0;
        };
        wide.trainable_tensors_mut()[ti].data_mut()[i] = original;
        report.reduced_steps += usize::from(h < FD_STEP);

        let analytic = grads.tensors[ti].data()[i];
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((names[ti].to_string(), i));
        }
    }
    Ok(report)
}
