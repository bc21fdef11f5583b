use super::tensor::{Real, Tensor};

/// Probabilities are clipped to `[CLAMP, 1 - CLAMP]` before the log.
pub const CLAMP: f64 = 1e-7;

/// True when `p` lies outside the clip range, where the clipped loss is flat.
pub(crate) fn clamp_engaged<T: Real>(p: T) -> bool {
    p < T::lit(CLAMP) || p > T::lit(1.0 - CLAMP)
}

/// `-w * ln(clip(p_target))` for one sample.
pub fn sample_cce<T: Real>(p_target: T, weight: T) -> T {
    let p = p_target.max(T::lit(CLAMP)).min(T::lit(1.0 - CLAMP));
    -weight * p.ln()
}

/// Class-weighted categorical cross-entropy averaged over the batch.
pub fn weighted_cce<T: Real>(probs: &Tensor<T>, targets: &[usize], class_weights: &[T]) -> T {
    let n = probs.shape()[1];
    let total: T = probs
        .data()
        .chunks_exact(n)
        .zip(targets)
        .map(|(row, &t)| sample_cce(row[t], class_weights[t]))
        .sum();
    total / T::lit(targets.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_costs_nothing() {
        // Clipping leaves -ln(1 - 1e-7) ~ 1e-7.
        assert!(sample_cce(1.0f64, 3.0) < 1e-6);
    }

    #[test]
    fn weighted_log_loss() {
        let p = (-1.0f64).exp();
        assert!((sample_cce(p, 2.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_is_finite() {
        let l = sample_cce(0.0f32, 1.0);
        assert!(l.is_finite());
        assert!((l - (1e-7f32).ln().abs()).abs() < 1e-3);
    }

    #[test]
    fn batch_mean() {
        let probs = Tensor::from_vec(&[2, 2], vec![0.5f64, 0.5, 0.25, 0.75]).unwrap();
        let l = weighted_cce(&probs, &[0, 1], &[1.0, 2.0]);
        let expected = (-(0.5f64).ln() - 2.0 * (0.75f64).ln()) / 2.0;
        assert!((l - expected).abs() < 1e-12);
    }
}
