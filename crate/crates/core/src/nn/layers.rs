//! Batched layer kernels. Sequence activations are `[batch, length, channels]`.
//!
//! Per-sample work runs on the rayon pool; anything summed across samples is
//! reduced in sample order so results do not depend on the thread count.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::tensor::{Real, Tensor};

/// Output length of a valid (unpadded) window of `kernel` taps moved by `stride`.
pub fn valid_len(len: usize, kernel: usize, stride: usize) -> usize {
    if len < kernel {
        0
    } else {
        (len - kernel) / stride + 1
    }
}

fn sum_in_order<T: Real>(parts: impl IntoIterator<Item = Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for part in parts {
        for (a, p) in acc.iter_mut().zip(part) {
            *a += p;
        }
    }
    acc
}

/// 1-D convolution, weights `[kernel, in_channels, out_channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
}

impl<T: Real> Conv1d<T> {
    pub fn kernel(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (b, len, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        debug_assert_eq!(cin, self.in_channels());
        let (k, cout, s) = (self.kernel(), self.out_channels(), self.stride);
        let out_len = valid_len(len, k, s);
        let w = self.weight.data();
        let bias = self.bias.data();
        let mut y = Tensor::zeros(&[b, out_len, cout]);
        if out_len == 0 || b == 0 {
            return y;
        }
        y.data_mut()
            .par_chunks_mut(out_len * cout)
            .zip(x.data().par_chunks(len * cin))
            .for_each(|(ys, xs)| {
                for o in 0..out_len {
                    let acc = &mut ys[o * cout..(o + 1) * cout];
                    acc.copy_from_slice(bias);
                    let window = &xs[o * s * cin..(o * s + k) * cin];
                    for (xv, wrow) in window.iter().zip(w.chunks_exact(cout)) {
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a += *xv * wv;
                        }
                    }
                }
            });
        y
    }

    /// Gradients for weight and bias, plus the input gradient when asked.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        want_dx: bool,
    ) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
        let (b, len, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (k, cout, s) = (self.kernel(), self.out_channels(), self.stride);
        let out_len = dy.shape()[1];
        let w = self.weight.data();

        let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = x
            .data()
            .par_chunks(len * cin)
            .zip(dy.data().par_chunks(out_len * cout))
            .map(|(xs, gs)| {
                let mut dw = vec![T::zero(); k * cin * cout];
                let mut db = vec![T::zero(); cout];
                let mut dx = if want_dx {
                    vec![T::zero(); len * cin]
                } else {
                    Vec::new()
                };
                for o in 0..out_len {
                    let g = &gs[o * cout..(o + 1) * cout];
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                    let base = o * s * cin;
                    for tap in 0..k * cin {
                        let xv = xs[base + tap];
                        let dwrow = &mut dw[tap * cout..(tap + 1) * cout];
                        for (d, &gv) in dwrow.iter_mut().zip(g) {
                            *d += xv * gv;
                        }
                        if want_dx {
                            let wrow = &w[tap * cout..(tap + 1) * cout];
                            let mut acc = T::zero();
                            for (&wv, &gv) in wrow.iter().zip(g) {
                                acc += wv * gv;
                            }
                            dx[base + tap] += acc;
                        }
                    }
                }
                (dw, db, dx)
            })
            .collect();

        let mut dws = Vec::with_capacity(b);
        let mut dbs = Vec::with_capacity(b);
        let mut dxs = Vec::with_capacity(if want_dx { b * len * cin } else { 0 });
        for (dw, db, dx) in per_sample {
            dws.push(dw);
            dbs.push(db);
            dxs.extend(dx);
        }
        let dw = Tensor::from_vec(self.weight.shape(), sum_in_order(dws, k * cin * cout))
            .expect("dw shape");
        let db = Tensor::from_vec(&[cout], sum_in_order(dbs, cout)).expect("db shape");
        let dx = want_dx.then(|| Tensor::from_vec(&[b, len, cin], dxs).expect("dx shape"));
        (dw, db, dx)
    }
}

/// Average pooling along the length axis; trailing samples that do not fill
/// a window are dropped.
pub fn avg_pool_forward<T: Real>(x: &Tensor<T>, size: usize, stride: usize) -> Tensor<T> {
    let (b, len, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let out_len = valid_len(len, size, stride);
    let scale = T::one() / T::lit(size as f64);
    let mut y = Tensor::zeros(&[b, out_len, c]);
    let xd = x.data();
    let yd = y.data_mut();
    for bi in 0..b {
        for o in 0..out_len {
            for j in 0..size {
                let src = (bi * len + o * stride + j) * c;
                let dst = (bi * out_len + o) * c;
                for ch in 0..c {
                    yd[dst + ch] += xd[src + ch];
                }
            }
            for v in &mut yd[(bi * out_len + o) * c..(bi * out_len + o + 1) * c] {
                *v *= scale;
            }
        }
    }
    y
}

pub fn avg_pool_backward<T: Real>(
    dy: &Tensor<T>,
    in_len: usize,
    size: usize,
    stride: usize,
) -> Tensor<T> {
    let (b, out_len, c) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
    let scale = T::one() / T::lit(size as f64);
    let mut dx = Tensor::zeros(&[b, in_len, c]);
    let g = dy.data();
    let dxd = dx.data_mut();
    for bi in 0..b {
        for o in 0..out_len {
            let src = (bi * out_len + o) * c;
            for j in 0..size {
                let dst = (bi * in_len + o * stride + j) * c;
                for ch in 0..c {
                    dxd[dst + ch] += g[src + ch] * scale;
                }
            }
        }
    }
    dx
}

/// Batch normalization over every axis but the last (channels).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub eps: T,
}

/// What the backward pass needs from a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize, momentum: T, eps: T) -> Self {
        Self {
            gamma: Tensor::filled(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], T::one()),
            momentum,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Trainable plus running statistics.
    pub fn param_count(&self) -> usize {
        4 * self.channels()
    }

    /// Normalizes with the statistics of this batch (biased variance).
    pub fn forward_batch(&self, x: &Tensor<T>) -> (Tensor<T>, BnCache<T>) {
        let c = self.channels();
        let rows = x.len() / c;
        let n = T::lit(rows as f64);
        let mut mean = vec![T::zero(); c];
        for row in x.data().chunks_exact(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![T::zero(); c];
        for row in x.data().chunks_exact(c) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n);
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + self.eps).sqrt())
            .collect();

        let mut x_hat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let (g, bt) = (self.gamma.data(), self.beta.data());
        for ((xr, hr), yr) in x
            .data()
            .chunks_exact(c)
            .zip(x_hat.data_mut().chunks_exact_mut(c))
            .zip(y.data_mut().chunks_exact_mut(c))
        {
            for ch in 0..c {
                hr[ch] = (xr[ch] - mean[ch]) * inv_std[ch];
                yr[ch] = g[ch] * hr[ch] + bt[ch];
            }
        }
        (
            y,
            BnCache {
                x_hat,
                inv_std,
                mean,
                var,
            },
        )
    }

    /// Exponential moving average of the batch statistics.
    pub fn update_running(&mut self, cache: &BnCache<T>) {
        let keep = self.momentum;
        let blend = T::one() - keep;
        for ch in 0..self.channels() {
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = keep * *rm + blend * cache.mean[ch];
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = keep * *rv + blend * cache.var[ch];
        }
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> (Tensor<T>, BnCache<T>) {
        let (y, cache) = self.forward_batch(x);
        self.update_running(&cache);
        (y, cache)
    }

    pub fn forward_infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let c = self.channels();
        let (g, bt) = (self.gamma.data(), self.beta.data());
        let (rm, rv) = (self.running_mean.data(), self.running_var.data());
        let scale: Vec<T> = (0..c)
            .map(|ch| g[ch] / (rv[ch] + self.eps).sqrt())
            .collect();
        let mut y = x.clone();
        for row in y.data_mut().chunks_exact_mut(c) {
            for ch in 0..c {
                row[ch] = (row[ch] - rm[ch]) * scale[ch] + bt[ch];
            }
        }
        y
    }

    /// Returns `(d_gamma, d_beta, dx)`.
    pub fn backward(
        &self,
        cache: &BnCache<T>,
        dy: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let c = self.channels();
        let rows = dy.len() / c;
        let n = T::lit(rows as f64);
        let g = self.gamma.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for (dr, hr) in dy
            .data()
            .chunks_exact(c)
            .zip(cache.x_hat.data().chunks_exact(c))
        {
            for ch in 0..c {
                dbeta[ch] += dr[ch];
                dgamma[ch] += dr[ch] * hr[ch];
            }
        }
        // dx = gamma * inv_std / n * (n * dy - sum(dy) - x_hat * sum(dy * x_hat))
        let mut dx = Tensor::zeros(dy.shape());
        for ((dr, hr), xr) in dy
            .data()
            .chunks_exact(c)
            .zip(cache.x_hat.data().chunks_exact(c))
            .zip(dx.data_mut().chunks_exact_mut(c))
        {
            for ch in 0..c {
                xr[ch] =
                    g[ch] * cache.inv_std[ch] / n * (n * dr[ch] - dbeta[ch] - hr[ch] * dgamma[ch]);
            }
        }
        (
            Tensor::from_vec(&[c], dgamma).expect("dgamma"),
            Tensor::from_vec(&[c], dbeta).expect("dbeta"),
            dx,
        )
    }
}

/// Fully connected layer, weights `[inputs, outputs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Dense<T> {
    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (b, nin, nout) = (x.shape()[0], self.inputs(), self.outputs());
        let w = self.weight.data();
        let mut y = Tensor::zeros(&[b, nout]);
        for (xr, yr) in x
            .data()
            .chunks_exact(nin)
            .zip(y.data_mut().chunks_exact_mut(nout))
        {
            yr.copy_from_slice(self.bias.data());
            for (i, &xv) in xr.iter().enumerate() {
                for (a, &wv) in yr.iter_mut().zip(&w[i * nout..(i + 1) * nout]) {
                    *a += xv * wv;
                }
            }
        }
        y
    }

    /// Returns `(dW, db, dx)`.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let (nin, nout) = (self.inputs(), self.outputs());
        let w = self.weight.data();
        let mut dw = Tensor::zeros(self.weight.shape());
        let mut db = Tensor::zeros(self.bias.shape());
        let mut dx = Tensor::zeros(x.shape());
        for ((xr, gr), dxr) in x
            .data()
            .chunks_exact(nin)
            .zip(dy.data().chunks_exact(nout))
            .zip(dx.data_mut().chunks_exact_mut(nin))
        {
            for (d, &gv) in db.data_mut().iter_mut().zip(gr) {
                *d += gv;
            }
            for i in 0..nin {
                let row = &mut dw.data_mut()[i * nout..(i + 1) * nout];
                let mut acc = T::zero();
                for ((d, &gv), &wv) in row.iter_mut().zip(gr).zip(&w[i * nout..(i + 1) * nout]) {
                    *d += xr[i] * gv;
                    acc += wv * gv;
                }
                dxr[i] = acc;
            }
        }
        (dw, db, dx)
    }
}

/// Inverted dropout mask: each entry is 0 with probability `rate`, else
/// `1 / (1 - rate)`. `None` when the rate is zero.
pub fn dropout_mask<T: Real>(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Option<Vec<T>> {
    if rate <= 0.0 {
        return None;
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    Some(
        (0..len)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect(),
    )
}

pub fn apply_mask<T: Real>(x: &mut Tensor<T>, mask: Option<&[T]>) {
    if let Some(mask) = mask {
        for (v, &m) in x.data_mut().iter_mut().zip(mask) {
            *v *= m;
        }
    }
}

/// Element-wise activation applied after the convolutions and the feature dense.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Only used by the linear gradient-check rig.
    Identity,
}

impl Activation {
    pub fn apply<T: Real>(self, x: &mut Tensor<T>) {
        if self == Activation::Relu {
            for v in x.data_mut() {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
    }

    /// Gates `dy` by the derivative at the pre-activation `z`.
    pub fn backward<T: Real>(self, z: &Tensor<T>, dy: &mut Tensor<T>) {
        if self == Activation::Relu {
            for (g, &zv) in dy.data_mut().iter_mut().zip(z.data()) {
                if zv <= T::zero() {
                    *g = T::zero();
                }
            }
        }
    }
}

/// Mean over the length axis: `[b, len, c] -> [b, c]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (b, len, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let scale = T::one() / T::lit(len as f64);
    let mut y = Tensor::zeros(&[b, c]);
    for (xs, yr) in x
        .data()
        .chunks_exact(len * c)
        .zip(y.data_mut().chunks_exact_mut(c))
    {
        for row in xs.chunks_exact(c) {
            for (a, &v) in yr.iter_mut().zip(row) {
                *a += v;
            }
        }
        yr.iter_mut().for_each(|v| *v *= scale);
    }
    y
}

pub fn global_avg_pool_backward<T: Real>(dy: &Tensor<T>, len: usize) -> Tensor<T> {
    let (b, c) = (dy.shape()[0], dy.shape()[1]);
    let scale = T::one() / T::lit(len as f64);
    let mut dx = Tensor::zeros(&[b, len, c]);
    for (gr, xs) in dy
        .data()
        .chunks_exact(c)
        .zip(dx.data_mut().chunks_exact_mut(len * c))
    {
        for row in xs.chunks_exact_mut(c) {
            for (d, &g) in row.iter_mut().zip(gr) {
                *d = g * scale;
            }
        }
    }
    dx
}

/// Row-wise softmax of `[b, n]` logits.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let n = logits.shape()[1];
    let mut p = logits.clone();
    for row in p.data_mut().chunks_exact_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv1d {
            weight: random_tensor(&[5, 3, 4], &mut rng),
            bias: random_tensor(&[4], &mut rng),
            stride: 2,
        };
        let x = random_tensor(&[2, 17, 3], &mut rng);
        let y = conv.forward(&x);
        assert_eq!(y.shape(), &[2, 7, 4]);
        for b in 0..2 {
            for o in 0..7 {
                for co in 0..4 {
                    let mut acc = conv.bias.data()[co];
                    for k in 0..5 {
                        for ci in 0..3 {
                            acc += x.data()[(b * 17 + o * 2 + k) * 3 + ci]
                                * conv.weight.data()[(k * 3 + ci) * 4 + co];
                        }
                    }
                    assert!((y.data()[(b * 7 + o) * 4 + co] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <dy, conv(x) - bias> == <dx, x> for the linear part.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv1d {
            weight: random_tensor(&[4, 2, 3], &mut rng),
            bias: Tensor::zeros(&[3]),
            stride: 3,
        };
        let x = random_tensor(&[3, 20, 2], &mut rng);
        let y = conv.forward(&x);
        let dy = random_tensor(y.shape(), &mut rng);
        let (dw, _, dx) = conv.backward(&x, &dy, true);
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(dx.unwrap().data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let rhs_w: f64 = conv
            .weight
            .data()
            .iter()
            .zip(dw.data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs_w).abs() < 1e-10);
    }

    #[test]
    fn pooling_drops_the_tail() {
        let x = Tensor::from_vec(&[1, 9, 1], (0..9).map(f64::from).collect()).unwrap();
        let y = avg_pool_forward(&x, 4, 4);
        assert_eq!(y.data(), &[1.5, 5.5]);
        let dx = avg_pool_backward(&Tensor::filled(&[1, 2, 1], 1.0), 9, 4, 4);
        assert_eq!(dx.data()[8], 0.0);
        assert_eq!(dx.data()[0], 0.25);
    }

    #[test]
    fn batch_norm_inference_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bn = BatchNorm::<f64>::new(3, 0.99, 1e-3);
        for _ in 0..5 {
            bn.forward_train(&random_tensor(&[4, 6, 3], &mut rng));
        }
        bn.gamma = random_tensor(&[3], &mut rng);
        bn.beta = random_tensor(&[3], &mut rng);
        let x = random_tensor(&[2, 5, 3], &mut rng);
        let x2 = random_tensor(&[2, 5, 3], &mut rng);
        let mix: Vec<f64> = x
            .data()
            .iter()
            .zip(x2.data())
            .map(|(a, b)| 0.3 * a + 0.7 * b)
            .collect();
        let mix = Tensor::from_vec(&[2, 5, 3], mix).unwrap();
        let (y, y2, ym) = (
            bn.forward_infer(&x),
            bn.forward_infer(&x2),
            bn.forward_infer(&mix),
        );
        for i in 0..ym.len() {
            assert!((ym.data()[i] - (0.3 * y.data()[i] + 0.7 * y2.data()[i])).abs() < 1e-12);
        }
        assert_eq!(bn.forward_infer(&x), y);
        assert!(bn.running_var.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10_000 {
            let n = rng.random_range(2..=3);
            let logits: Vec<f32> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
            let p = softmax(&Tensor::from_vec(&[1, n], logits).unwrap());
            let s: f32 = p.data().iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dropout_mask_scales_kept_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mask: Vec<f64> = dropout_mask(100_000, 0.5, &mut rng).unwrap();
        assert!(mask.iter().all(|&m| m == 0.0 || m == 2.0));
        let mean = mask.iter().sum::<f64>() / mask.len() as f64;
        assert!((mean - 1.0).abs() < 0.02);
        assert!(dropout_mask::<f64>(10, 0.0, &mut rng).is_none());
    }
}
