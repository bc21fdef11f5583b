//! The hybrid CNN and its feature-free CNN variant.
//!
//! ```text
//! segment [3840x1] -> dropout -> conv(64/4)+relu -> pool(4/4) -> bn -> dropout
//!                  -> conv(32/2)+relu -> pool(4/4) -> bn -> dropout
//!                  -> conv(16/1)+relu -> global average pool [8]
//! features [19]    -> dropout -> dense(4)+relu                        (hybrid only)
//! concat [12] or [8] -> dense(n_classes) -> softmax
//! ```

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::layers::{
    apply_mask, avg_pool_backward, avg_pool_forward, dropout_mask, global_avg_pool,
    global_avg_pool_backward, softmax, valid_len, Activation, BatchNorm, BnCache, Conv1d, Dense,
};
use super::loss::{clamp_engaged, weighted_cce};
use super::tensor::{Real, Tensor};
use super::NnError;
use crate::features::N_FEATURES;

pub const SEGMENT_INPUT_LEN: usize = 3840;

const CONV1: (usize, usize, usize) = (64, 4, 8);
const CONV2: (usize, usize, usize) = (32, 2, 16);
const CONV3: (usize, usize, usize) = (16, 1, 8);
const POOL: (usize, usize) = (4, 4);
const FEATURE_HIDDEN: usize = 4;

/// Per-sample activation shapes the architecture must produce.
pub mod shapes {
    pub const SEGMENT_INPUT: [usize; 2] = [3840, 1];
    pub const CONV1: [usize; 2] = [945, 8];
    pub const POOL1: [usize; 2] = [236, 8];
    pub const CONV2: [usize; 2] = [103, 16];
    pub const POOL2: [usize; 2] = [25, 16];
    pub const CONV3: [usize; 2] = [10, 8];
    pub const FLATTEN: usize = 8;
    pub const FEATURE_DENSE: usize = 4;
    pub const CONCAT: usize = 12;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Convolutional branch concatenated with the hand-crafted features.
    Hcnn,
    /// Convolutional branch only.
    Cnn,
}

impl Variant {
    pub fn uses_features(self) -> bool {
        self == Variant::Hcnn
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Hcnn => "hcnn",
            Variant::Cnn => "cnn",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hcnn" => Ok(Variant::Hcnn),
            "cnn" => Ok(Variant::Cnn),
            other => Err(format!("unknown variant {other:?} (expected cnn or hcnn)")),
        }
    }
}

/// Regularization and normalization settings not fixed by the architecture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dropout: f64,
    pub block_dropout: f64,
    pub feature_dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    #[serde(skip, default = "relu")]
    pub activation: Activation,
}

fn relu() -> Activation {
    Activation::Relu
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dropout: 0.2,
            block_dropout: 0.5,
            feature_dropout: 0.2,
            bn_momentum: 0.99,
            bn_eps: 1e-3,
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    /// Same settings with every dropout rate set to zero.
    pub fn without_dropout(self) -> Self {
        Self {
            input_dropout: 0.0,
            block_dropout: 0.0,
            feature_dropout: 0.0,
            ..self
        }
    }
}

/// A batch of network inputs.
#[derive(Debug, Clone)]
pub struct ModelInput<T> {
    /// `[batch, 3840, 1]`
    pub segments: Tensor<T>,
    /// `[batch, 19]`, present iff the model is hybrid.
    pub features: Option<Tensor<T>>,
}

impl<T: Real> ModelInput<T> {
    pub fn batch_size(&self) -> usize {
        self.segments.shape().first().copied().unwrap_or(0)
    }

    pub fn cast<U: Real>(&self) -> ModelInput<U> {
        ModelInput {
            segments: self.segments.cast(),
            features: self.features.as_ref().map(Tensor::cast),
        }
    }
}

pub enum Mode<'a> {
    /// Dropout active (masks drawn from the generator), batch statistics in
    /// batch norm, running statistics updated.
    Train(&'a mut ChaCha8Rng),
    Infer,
}

/// Activations cached by a training-mode forward for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    step: u64,
    batch: usize,
    conv1_in: Tensor<T>,
    conv1_z: Tensor<T>,
    bn1: BnCache<T>,
    mask1: Option<Vec<T>>,
    conv2_in: Tensor<T>,
    conv2_z: Tensor<T>,
    bn2: BnCache<T>,
    mask2: Option<Vec<T>>,
    conv3_in: Tensor<T>,
    conv3_z: Tensor<T>,
    feat_in: Option<Tensor<T>>,
    feat_z: Option<Tensor<T>>,
    concat: Tensor<T>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Input of the output dense layer: the flattened convolutional features,
    /// concatenated with the feature branch for the hybrid model.
    pub fn head_input(&self) -> &Tensor<T> {
        &self.concat
    }

    /// Sign pattern of every pre-activation feeding a nonlinearity.
    pub(crate) fn gate_pattern(&self) -> Vec<bool> {
        let z = [
            Some(&self.conv1_z),
            Some(&self.conv2_z),
            Some(&self.conv3_z),
            self.feat_z.as_ref(),
        ];
        z.into_iter()
            .flatten()
            .flat_map(|t| t.data().iter().map(|&v| v > T::zero()))
            .collect()
    }
}

/// Gradients of every trainable tensor, in [`ModelState::trainable`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Tensor<T>>,
}

/// One row of the architecture table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSummary {
    pub name: &'static str,
    pub kernel: Option<usize>,
    pub stride: Option<usize>,
    pub activation: Option<&'static str>,
    /// Per-sample output shape.
    pub output_shape: Vec<usize>,
    /// Trainable plus non-trainable parameters.
    pub params: usize,
}

/// All parameters, batch-norm running statistics and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub variant: Variant,
    pub n_classes: usize,
    pub config: ModelConfig,
    pub conv1: Conv1d<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv1d<T>,
    pub bn2: BatchNorm<T>,
    pub conv3: Conv1d<T>,
    pub feature_dense: Option<Dense<T>>,
    pub output_dense: Dense<T>,
    pub adam: AdamState<T>,
}

fn glorot<T: Real>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.random_range(-limit..limit)))
        .collect();
    Tensor::from_vec(shape, data).expect("glorot shape")
}

fn conv_layer<T: Real>(
    (kernel, stride, cout): (usize, usize, usize),
    cin: usize,
    rng: &mut ChaCha8Rng,
) -> Conv1d<T> {
    Conv1d {
        weight: glorot(&[kernel, cin, cout], kernel * cin, kernel * cout, rng),
        bias: Tensor::zeros(&[cout]),
        stride,
    }
}

fn dense_layer<T: Real>(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Dense<T> {
    Dense {
        weight: glorot(&[inputs, outputs], inputs, outputs, rng),
        bias: Tensor::zeros(&[outputs]),
    }
}

/// Constructs a freshly initialized model: Glorot-uniform weights, zero
/// biases, identity batch norm, zeroed optimizer state.
///
/// # Panics
///
/// If `n_classes` is not 2 or 3.
pub fn build_model<T: Real>(variant: Variant, n_classes: usize, seed: u64) -> ModelState<T> {
    build_model_with(variant, n_classes, seed, ModelConfig::default())
}

pub fn build_model_with<T: Real>(
    variant: Variant,
    n_classes: usize,
    seed: u64,
    config: ModelConfig,
) -> ModelState<T> {
    assert!(
        (2..=3).contains(&n_classes),
        "n_classes must be 2 or 3, got {n_classes}"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv1 = conv_layer(CONV1, 1, &mut rng);
    let conv2 = conv_layer(CONV2, CONV1.2, &mut rng);
    let conv3 = conv_layer(CONV3, CONV2.2, &mut rng);
    let feature_dense = variant
        .uses_features()
        .then(|| dense_layer(N_FEATURES, FEATURE_HIDDEN, &mut rng));
    let head_inputs = CONV3.2
        + if variant.uses_features() {
            FEATURE_HIDDEN
        } else {
            0
        };
    let output_dense = dense_layer(head_inputs, n_classes, &mut rng);
    let momentum = T::lit(config.bn_momentum);
    let eps = T::lit(config.bn_eps);

    let mut model = ModelState {
        variant,
        n_classes,
        config,
        conv1,
        bn1: BatchNorm::new(CONV1.2, momentum, eps),
        conv2,
        bn2: BatchNorm::new(CONV2.2, momentum, eps),
        conv3,
        feature_dense,
        output_dense,
        adam: AdamState::default(),
    };
    model.adam = AdamState::zeros_like(&model.trainable_tensors());
    model.assert_architecture();
    model
}

impl<T: Real> ModelState<T> {
    /// Rows mirroring the architecture table, computed from the layers.
    pub fn summary(&self) -> Vec<LayerSummary> {
        let row =
            |name, kernel, stride, activation, output_shape: Vec<usize>, params| LayerSummary {
                name,
                kernel,
                stride,
                activation,
                output_shape,
                params,
            };
        let relu = Some("ReLU");
        let l0 = SEGMENT_INPUT_LEN;
        let l1 = valid_len(l0, self.conv1.kernel(), self.conv1.stride);
        let p1 = valid_len(l1, POOL.0, POOL.1);
        let l2 = valid_len(p1, self.conv2.kernel(), self.conv2.stride);
        let p2 = valid_len(l2, POOL.0, POOL.1);
        let l3 = valid_len(p2, self.conv3.kernel(), self.conv3.stride);
        let (c1, c2, c3) = (
            self.conv1.out_channels(),
            self.conv2.out_channels(),
            self.conv3.out_channels(),
        );

        let mut rows = vec![
            row("Seg. Inp.", None, None, None, vec![l0, 1], 0),
            row("D.O. 1", None, None, None, vec![l0, 1], 0),
            row(
                "Conv 1",
                Some(self.conv1.kernel()),
                Some(self.conv1.stride),
                relu,
                vec![l1, c1],
                self.conv1.param_count(),
            ),
            row("Pool 1", Some(POOL.0), Some(POOL.1), None, vec![p1, c1], 0),
            row(
                "B.N. 1",
                None,
                None,
                None,
                vec![p1, c1],
                self.bn1.param_count(),
            ),
            row("D.O. 2", None, None, None, vec![p1, c1], 0),
            row(
                "Conv 2",
                Some(self.conv2.kernel()),
                Some(self.conv2.stride),
                relu,
                vec![l2, c2],
                self.conv2.param_count(),
            ),
            row("Pool 2", Some(POOL.0), Some(POOL.1), None, vec![p2, c2], 0),
            row(
                "B.N. 2",
                None,
                None,
                None,
                vec![p2, c2],
                self.bn2.param_count(),
            ),
            row("D.O. 3", None, None, None, vec![p2, c2], 0),
            row(
                "Conv 3",
                Some(self.conv3.kernel()),
                Some(self.conv3.stride),
                relu,
                vec![l3, c3],
                self.conv3.param_count(),
            ),
            row("G. Pool", None, None, None, vec![c3], 0),
            row("Flatten", None, None, None, vec![c3], 0),
        ];
        if let Some(fd) = &self.feature_dense {
            rows.push(row("Feat. Inp.", None, None, None, vec![fd.inputs()], 0));
            rows.push(row("D.O. 4", None, None, None, vec![fd.inputs()], 0));
            rows.push(row(
                "Feat. Den.",
                None,
                None,
                relu,
                vec![fd.outputs()],
                fd.param_count(),
            ));
            rows.push(row("Concate", None, None, None, vec![c3 + fd.outputs()], 0));
        }
        rows.push(row(
            "Out. Den.",
            None,
            None,
            Some("Softmax"),
            vec![self.output_dense.outputs()],
            self.output_dense.param_count(),
        ));
        rows
    }

    pub fn total_params(&self) -> usize {
        self.summary().iter().map(|r| r.params).sum()
    }

    fn assert_architecture(&self) {
        let rows = self.summary();
        let shape_of = |name: &str| {
            rows.iter()
                .find(|r| r.name == name)
                .map(|r| r.output_shape.clone())
        };
        assert_eq!(shape_of("Conv 1").unwrap(), shapes::CONV1);
        assert_eq!(shape_of("Pool 1").unwrap(), shapes::POOL1);
        assert_eq!(shape_of("Conv 2").unwrap(), shapes::CONV2);
        assert_eq!(shape_of("Pool 2").unwrap(), shapes::POOL2);
        assert_eq!(shape_of("Conv 3").unwrap(), shapes::CONV3);
        assert_eq!(shape_of("Flatten").unwrap(), [shapes::FLATTEN]);
        if self.variant.uses_features() {
            assert_eq!(shape_of("Feat. Den.").unwrap(), [shapes::FEATURE_DENSE]);
            assert_eq!(shape_of("Concate").unwrap(), [shapes::CONCAT]);
        }
    }

    /// Names of the trainable tensors, in gradient order.
    pub fn trainable_names(&self) -> Vec<&'static str> {
        let mut names = vec![
            "conv1.weight",
            "conv1.bias",
            "bn1.gamma",
            "bn1.beta",
            "conv2.weight",
            "conv2.bias",
            "bn2.gamma",
            "bn2.beta",
            "conv3.weight",
            "conv3.bias",
        ];
        if self.feature_dense.is_some() {
            names.extend(["feature_dense.weight", "feature_dense.bias"]);
        }
        names.extend(["output_dense.weight", "output_dense.bias"]);
        names
    }

    pub fn trainable_tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![
            &self.conv1.weight,
            &self.conv1.bias,
            &self.bn1.gamma,
            &self.bn1.beta,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.bn2.gamma,
            &self.bn2.beta,
            &self.conv3.weight,
            &self.conv3.bias,
        ];
        if let Some(fd) = &self.feature_dense {
            out.extend([&fd.weight, &fd.bias]);
        }
        out.extend([&self.output_dense.weight, &self.output_dense.bias]);
        out
    }

    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.bn2.gamma,
            &mut self.bn2.beta,
            &mut self.conv3.weight,
            &mut self.conv3.bias,
        ];
        if let Some(fd) = &mut self.feature_dense {
            out.extend([&mut fd.weight, &mut fd.bias]);
        }
        out.extend([&mut self.output_dense.weight, &mut self.output_dense.bias]);
        out
    }

    /// Batch-norm running statistics, named.
    pub fn running_stats(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("bn1.running_mean", &self.bn1.running_mean),
            ("bn1.running_var", &self.bn1.running_var),
            ("bn2.running_mean", &self.bn2.running_mean),
            ("bn2.running_var", &self.bn2.running_var),
        ]
    }

    pub fn running_stats_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.bn1.running_mean,
            &mut self.bn1.running_var,
            &mut self.bn2.running_mean,
            &mut self.bn2.running_var,
        ]
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_tensors().iter().map(|t| t.len()).sum()
    }

    /// Adam steps taken so far.
    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// Converts every tensor to another scalar type (optimizer state included).
    pub fn cast<U: Real>(&self) -> ModelState<U> {
        let conv = |c: &Conv1d<T>| Conv1d {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
            stride: c.stride,
        };
        let bn = |b: &BatchNorm<T>| BatchNorm {
            gamma: b.gamma.cast(),
            beta: b.beta.cast(),
            running_mean: b.running_mean.cast(),
            running_var: b.running_var.cast(),
            momentum: U::lit(self.config.bn_momentum),
            eps: U::lit(self.config.bn_eps),
        };
        let dense = |d: &Dense<T>| Dense {
            weight: d.weight.cast(),
            bias: d.bias.cast(),
        };
        ModelState {
            variant: self.variant,
            n_classes: self.n_classes,
            config: self.config,
            conv1: conv(&self.conv1),
            bn1: bn(&self.bn1),
            conv2: conv(&self.conv2),
            bn2: bn(&self.bn2),
            conv3: conv(&self.conv3),
            feature_dense: self.feature_dense.as_ref().map(dense),
            output_dense: dense(&self.output_dense),
            adam: self.adam.cast(),
        }
    }

    /// Replaces the regularization settings (dropout rates, activation);
    /// batch-norm constants follow the new config.
    pub fn set_config(&mut self, config: ModelConfig) {
        self.config = config;
        for bn in [&mut self.bn1, &mut self.bn2] {
            bn.momentum = T::lit(config.bn_momentum);
            bn.eps = T::lit(config.bn_eps);
        }
    }

    fn check_input(&self, input: &ModelInput<T>) -> Result<usize, NnError> {
        let b = input.batch_size();
        if b == 0 {
            return Err(NnError::Usage("empty batch".into()));
        }
        input
            .segments
            .expect_shape(&[b, SEGMENT_INPUT_LEN, 1], "segment input")?;
        match (&input.features, self.variant.uses_features()) {
            (Some(f), true) => f.expect_shape(&[b, N_FEATURES], "feature input")?,
            (None, false) => {}
            (None, true) => return Err(NnError::Usage("hybrid model needs feature input".into())),
            (Some(_), false) => {
                return Err(NnError::Usage("CNN variant takes no feature input".into()))
            }
        }
        Ok(b)
    }

    pub fn forward(
        &mut self,
        input: &ModelInput<T>,
        mode: Mode<'_>,
    ) -> Result<(Tensor<T>, Option<ForwardTrace<T>>), NnError> {
        match mode {
            Mode::Train(rng) => {
                let (probs, trace) = self.propagate_train(input, rng)?;
                self.bn1.update_running(&trace.bn1);
                self.bn2.update_running(&trace.bn2);
                Ok((probs, Some(trace)))
            }
            Mode::Infer => Ok((self.predict(input)?, None)),
        }
    }

    /// Training-mode forward that leaves the running statistics untouched.
    pub fn propagate_train(
        &self,
        input: &ModelInput<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor<T>, ForwardTrace<T>), NnError> {
        let b = self.check_input(input)?;
        let act = self.config.activation;

        let mut conv1_in = input.segments.clone();
        let mask0 = dropout_mask(conv1_in.len(), self.config.input_dropout, rng);
        apply_mask(&mut conv1_in, mask0.as_deref());
        let conv1_z = self.conv1.forward(&conv1_in);
        conv1_z.expect_shape(&[b, shapes::CONV1[0], shapes::CONV1[1]], "conv 1")?;
        let mut r1 = conv1_z.clone();
        act.apply(&mut r1);
        let p1 = avg_pool_forward(&r1, POOL.0, POOL.1);
        p1.expect_shape(&[b, shapes::POOL1[0], shapes::POOL1[1]], "pool 1")?;
        let (mut conv2_in, bn1) = self.bn1.forward_batch(&p1);
        let mask1 = dropout_mask(conv2_in.len(), self.config.block_dropout, rng);
        apply_mask(&mut conv2_in, mask1.as_deref());

        let conv2_z = self.conv2.forward(&conv2_in);
        conv2_z.expect_shape(&[b, shapes::CONV2[0], shapes::CONV2[1]], "conv 2")?;
        let mut r2 = conv2_z.clone();
        act.apply(&mut r2);
        let p2 = avg_pool_forward(&r2, POOL.0, POOL.1);
        p2.expect_shape(&[b, shapes::POOL2[0], shapes::POOL2[1]], "pool 2")?;
        let (mut conv3_in, bn2) = self.bn2.forward_batch(&p2);
        let mask2 = dropout_mask(conv3_in.len(), self.config.block_dropout, rng);
        apply_mask(&mut conv3_in, mask2.as_deref());

        let conv3_z = self.conv3.forward(&conv3_in);
        conv3_z.expect_shape(&[b, shapes::CONV3[0], shapes::CONV3[1]], "conv 3")?;
        let mut r3 = conv3_z.clone();
        act.apply(&mut r3);
        let pooled = global_avg_pool(&r3);

        let (feat_in, feat_z, concat) = match (&self.feature_dense, &input.features) {
            (Some(fd), Some(features)) => {
                let mut feat_in = features.clone();
                let mask = dropout_mask(feat_in.len(), self.config.feature_dropout, rng);
                apply_mask(&mut feat_in, mask.as_deref());
                let feat_z = fd.forward(&feat_in);
                let mut hidden = feat_z.clone();
                act.apply(&mut hidden);
                let concat = concat_rows(&pooled, &hidden);
                (Some(feat_in), Some(feat_z), concat)
            }
            _ => (None, None, pooled),
        };
        let logits = self.output_dense.forward(&concat);
        let probs = softmax(&logits);

        let trace = ForwardTrace {
            step: self.adam.step,
            batch: b,
            conv1_in,
            conv1_z,
            bn1,
            mask1,
            conv2_in,
            conv2_z,
            bn2,
            mask2,
            conv3_in,
            conv3_z,
            feat_in,
            feat_z,
            concat,
        };
        Ok((probs, trace))
    }

    /// Inference-mode forward: no dropout, running batch-norm statistics.
    pub fn predict(&self, input: &ModelInput<T>) -> Result<Tensor<T>, NnError> {
        let b = self.check_input(input)?;
        let act = self.config.activation;
        let mut h = self.conv1.forward(&input.segments);
        h.expect_shape(&[b, shapes::CONV1[0], shapes::CONV1[1]], "conv 1")?;
        act.apply(&mut h);
        let h = self
            .bn1
            .forward_infer(&avg_pool_forward(&h, POOL.0, POOL.1));
        h.expect_shape(&[b, shapes::POOL1[0], shapes::POOL1[1]], "pool 1")?;
        let mut h = self.conv2.forward(&h);
        h.expect_shape(&[b, shapes::CONV2[0], shapes::CONV2[1]], "conv 2")?;
        act.apply(&mut h);
        let h = self
            .bn2
            .forward_infer(&avg_pool_forward(&h, POOL.0, POOL.1));
        h.expect_shape(&[b, shapes::POOL2[0], shapes::POOL2[1]], "pool 2")?;
        let mut h = self.conv3.forward(&h);
        h.expect_shape(&[b, shapes::CONV3[0], shapes::CONV3[1]], "conv 3")?;
        act.apply(&mut h);
        let pooled = global_avg_pool(&h);
        let head_in = match (&self.feature_dense, &input.features) {
            (Some(fd), Some(features)) => {
                let mut hidden = fd.forward(features);
                act.apply(&mut hidden);
                concat_rows(&pooled, &hidden)
            }
            _ => pooled,
        };
        Ok(softmax(&self.output_dense.forward(&head_in)))
    }

    /// Class with the highest probability for each sample.
    pub fn predict_classes(&self, input: &ModelInput<T>) -> Result<Vec<usize>, NnError> {
        let probs = self.predict(input)?;
        Ok(argmax_rows(&probs))
    }

    /// Mean weighted cross-entropy of a training-mode forward (running
    /// statistics untouched).
    pub fn train_loss(
        &self,
        input: &ModelInput<T>,
        targets: &[usize],
        class_weights: &[T],
        rng: &mut ChaCha8Rng,
    ) -> Result<T, NnError> {
        let (probs, _) = self.propagate_train(input, rng)?;
        Ok(weighted_cce(&probs, targets, class_weights))
    }

    /// Reverse-mode gradients of the batch-mean weighted cross-entropy.
    pub fn backward(
        &self,
        trace: &ForwardTrace<T>,
        probs: &Tensor<T>,
        targets: &[usize],
        class_weights: &[T],
    ) -> Result<Gradients<T>, NnError> {
        if trace.step != self.adam.step {
            return Err(NnError::Usage(format!(
                "stale trace: recorded at step {}, model is at step {}",
                trace.step, self.adam.step
            )));
        }
        let b = trace.batch;
        let nc = self.n_classes;
        probs.expect_shape(&[b, nc], "probabilities")?;
        if targets.len() != b {
            return Err(NnError::Usage(format!(
                "{} targets for a batch of {b}",
                targets.len()
            )));
        }
        if class_weights.len() != nc {
            return Err(NnError::Usage(format!(
                "{} class weights for {nc} classes",
                class_weights.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= nc) {
            return Err(NnError::Usage(format!("target {t} out of range")));
        }
        let act = self.config.activation;

        // d(mean loss)/d(logits) = w_t / b * (p - onehot), zero where the clamp holds p_t fixed.
        let scale = T::one() / T::lit(b as f64);
        let mut dlogits = probs.clone();
        for (i, row) in dlogits.data_mut().chunks_exact_mut(nc).enumerate() {
            let t = targets[i];
            if clamp_engaged(row[t]) {
                row.fill(T::zero());
                continue;
            }
            let w = class_weights[t] * scale;
            row[t] -= T::one();
            row.iter_mut().for_each(|v| *v *= w);
        }

        let (d_out_w, d_out_b, d_concat) = self.output_dense.backward(&trace.concat, &dlogits);
        let c3 = self.conv3.out_channels();
        let (d_pooled, feat_grads) = match (&self.feature_dense, &trace.feat_in, &trace.feat_z) {
            (Some(fd), Some(feat_in), Some(feat_z)) => {
                let (d_pooled, mut d_hidden) = split_rows(&d_concat, c3);
                act.backward(feat_z, &mut d_hidden);
                let (dw, db, _) = fd.backward(feat_in, &d_hidden);
                (d_pooled, Some((dw, db)))
            }
            _ => (d_concat, None),
        };

        let mut d3 = global_avg_pool_backward(&d_pooled, trace.conv3_z.shape()[1]);
        act.backward(&trace.conv3_z, &mut d3);
        let (d_c3w, d_c3b, d_c3in) = self.conv3.backward(&trace.conv3_in, &d3, true);
        let mut d_bn2_out = d_c3in.expect("input grad");
        apply_mask(&mut d_bn2_out, trace.mask2.as_deref());
        let (d_g2, d_b2, d_p2) = self.bn2.backward(&trace.bn2, &d_bn2_out);
        let mut d2 = avg_pool_backward(&d_p2, trace.conv2_z.shape()[1], POOL.0, POOL.1);
        act.backward(&trace.conv2_z, &mut d2);
        let (d_c2w, d_c2b, d_c2in) = self.conv2.backward(&trace.conv2_in, &d2, true);
        let mut d_bn1_out = d_c2in.expect("input grad");
        apply_mask(&mut d_bn1_out, trace.mask1.as_deref());
        let (d_g1, d_b1, d_p1) = self.bn1.backward(&trace.bn1, &d_bn1_out);
        let mut d1 = avg_pool_backward(&d_p1, trace.conv1_z.shape()[1], POOL.0, POOL.1);
        act.backward(&trace.conv1_z, &mut d1);
        let (d_c1w, d_c1b, _) = self.conv1.backward(&trace.conv1_in, &d1, false);

        let mut tensors = vec![
            d_c1w, d_c1b, d_g1, d_b1, d_c2w, d_c2b, d_g2, d_b2, d_c3w, d_c3b,
        ];
        if let Some((dw, db)) = feat_grads {
            tensors.extend([dw, db]);
        }
        tensors.extend([d_out_w, d_out_b]);
        Ok(Gradients { tensors })
    }
}

fn concat_rows<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, wa, wb) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut data = Vec::with_capacity(n * (wa + wb));
    for (ra, rb) in a.data().chunks_exact(wa).zip(b.data().chunks_exact(wb)) {
        data.extend_from_slice(ra);
        data.extend_from_slice(rb);
    }
    Tensor::from_vec(&[n, wa + wb], data).expect("concat shape")
}

fn split_rows<T: Real>(x: &Tensor<T>, left: usize) -> (Tensor<T>, Tensor<T>) {
    let (n, w) = (x.shape()[0], x.shape()[1]);
    let mut a = Vec::with_capacity(n * left);
    let mut b = Vec::with_capacity(n * (w - left));
    for row in x.data().chunks_exact(w) {
        a.extend_from_slice(&row[..left]);
        b.extend_from_slice(&row[left..]);
    }
    (
        Tensor::from_vec(&[n, left], a).expect("split"),
        Tensor::from_vec(&[n, w - left], b).expect("split"),
    )
}

/// Index of the largest entry per row (first on ties).
pub fn argmax_rows<T: Real>(probs: &Tensor<T>) -> Vec<usize> {
    let n = probs.shape()[1];
    probs
        .data()
        .chunks_exact(n)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}
