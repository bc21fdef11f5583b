use serde::{Deserialize, Serialize};

use super::model::{Gradients, ModelState};
use super::tensor::{Real, Tensor};
use super::NnError;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// First and second moment buffers mirroring the trainable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn zeros_like(params: &[&Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn cast<U: Real>(&self) -> AdamState<U> {
        AdamState {
            m: self.m.iter().map(Tensor::cast).collect(),
            v: self.v.iter().map(Tensor::cast).collect(),
            step: self.step,
        }
    }
}

/// Bias-corrected Adam update of one tensor at step `step` (1-based).
pub fn adam_update<T: Real>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    opt: &Adam,
) {
    let b1 = T::lit(opt.beta1);
    let b2 = T::lit(opt.beta2);
    let one = T::one();
    let c1 = T::lit(1.0 - opt.beta1.powf(step as f64));
    let c2 = T::lit(1.0 - opt.beta2.powf(step as f64));
    let lr = T::lit(opt.lr);
    let eps = T::lit(opt.eps);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

impl<T: Real> ModelState<T> {
    /// One optimizer step over every trainable tensor. Batch-norm running
    /// statistics are not touched.
    pub fn adam_step(&mut self, grads: &Gradients<T>, opt: &Adam) -> Result<(), NnError> {
        let shapes: Vec<Vec<usize>> = self
            .trainable_tensors()
            .iter()
            .map(|t| t.shape().to_vec())
            .collect();
        if grads.tensors.len() != shapes.len() {
            return Err(NnError::Usage(format!(
                "{} gradient tensors for {} parameters",
                grads.tensors.len(),
                shapes.len()
            )));
        }
        for (g, s) in grads.tensors.iter().zip(&shapes) {
            g.expect_shape(s, "gradient")?;
        }
        let step = self.adam.step + 1;
        let mut m = std::mem::take(&mut self.adam.m);
        let mut v = std::mem::take(&mut self.adam.v);
        for (((p, g), m), v) in self
            .trainable_tensors_mut()
            .into_iter()
            .zip(&grads.tensors)
            .zip(&mut m)
            .zip(&mut v)
        {
            adam_update(
                p.data_mut(),
                g.data(),
                m.data_mut(),
                v.data_mut(),
                step,
                opt,
            );
        }
        self.adam.m = m;
        self.adam.v = v;
        self.adam.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let (mut p, mut m, mut v) = ([0.0f64], [0.0], [0.0]);
        adam_update(&mut p, &[1.0], &mut m, &mut v, 1, &Adam::default());
        assert!((p[0] + 0.001).abs() < 1e-5);
    }

    #[test]
    fn zero_gradient_decays_moments_only() {
        let (mut p, mut m, mut v) = ([0.5f64], [0.2], [0.04]);
        adam_update(&mut p, &[0.0], &mut m, &mut v, 3, &Adam::default());
        assert!((m[0] - 0.18).abs() < 1e-12);
        assert!((v[0] - 0.04 * 0.999).abs() < 1e-12);
        // The decayed moment still pushes; only the gradient term vanished.
        let (mut p2, mut m2, mut v2) = ([0.5f64], [0.0], [0.0]);
        adam_update(&mut p2, &[0.0], &mut m2, &mut v2, 1, &Adam::default());
        assert_eq!(p2[0], 0.5);
        assert!(p[0] < 0.5);
    }

    #[test]
    fn constant_gradient_step_size_approaches_lr() {
        // With a constant gradient the bias-corrected moments are exactly g and
        // g^2, so every step is lr * g / (|g| + eps).
        let opt = Adam::default();
        let g = 0.37f64;
        let (mut p, mut m, mut v) = ([0.0f64], [0.0], [0.0]);
        let mut last = 0.0;
        for step in 1..=1000 {
            let before = p[0];
            adam_update(&mut p, &[g], &mut m, &mut v, step, &opt);
            last = (p[0] - before).abs();
            let expected = opt.lr * g / (g + opt.eps);
            assert!(
                (last - expected).abs() < 1e-9 * opt.lr,
                "step {step}: {last}"
            );
        }
        assert!((last - opt.lr).abs() <= 0.05 * opt.lr);
    }
}
