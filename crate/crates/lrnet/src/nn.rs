//! Layer blocks the network is assembled from, each with an explicit forward
//! pass that records what its backward pass needs (batch statistics, argmax
//! indices, activation signs), plus the Adam optimizer.
//!
//! Training-mode forwards take `&mut self` because batch norm folds the batch
//! statistics into its running estimates; inference forwards are `&self` and
//! pure, so callers may share a block across threads.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{
    add, conv2d, conv2d_backward, global_avg_pool, global_avg_pool_backward, lit, relu,
    relu_backward, scale_by_channel, scale_by_channel_backward, sigmoid, Scalar, Tensor,
};

/// Draw a fan-in-scaled Gaussian weight tensor: `N(0, sqrt(2 / fan_in))`.
pub fn gaussian_init<T: Scalar>(shape: [usize; 4], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            lit::<T>(z * std)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape/product always consistent")
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Per-channel batch normalization (epsilon 1e-5, running-stat momentum 0.9).
///
/// Training mode normalizes by the batch mean/variance taken over `N*H*W` per
/// channel (biased variance) and updates the running estimates; inference mode
/// is a fixed affine map through the running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

/// Values recorded by a training-mode batch-norm forward.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

impl<T: Scalar> BatchNorm<T> {
    /// Identity-initialized normalization: gamma 1, beta 0, running mean 0,
    /// running variance 1.
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::filled([1, channels, 1, 1], T::one()),
            beta: Tensor::zeros([1, channels, 1, 1]),
            running_mean: Tensor::zeros([1, channels, 1, 1]),
            running_var: Tensor::filled([1, channels, 1, 1], T::one()),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.c()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.c() != self.channels() {
            return Err(Error::Data(format!(
                "batchnorm: input has {} channels, layer has {}",
                x.c(),
                self.channels()
            )));
        }
        Ok(())
    }

    /// Normalize by batch statistics and fold them into the running estimates.
    /// A zero-variance channel is stabilized by epsilon rather than rejected.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, BnCache<T>)> {
        self.check_input(x)?;
        let [n, c, h, w] = x.shape();
        let m = (n * h * w) as f64;
        let hw = h * w;
        let inv_m = lit::<T>(1.0 / m);
        let eps = lit::<T>(BN_EPS);
        let mom = lit::<T>(BN_MOMENTUM);
        let one_minus_mom = lit::<T>(1.0 - BN_MOMENTUM);

        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut acc = T::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for &v in &x.data()[base..base + hw] {
                    acc = acc + v;
                }
            }
            let mu = acc * inv_m;
            let mut vacc = T::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for &v in &x.data()[base..base + hw] {
                    let d = v - mu;
                    vacc = d.mul_add(d, vacc);
                }
            }
            mean[ci] = mu;
            var[ci] = vacc * inv_m;
        }

        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let mut inv_std = vec![T::zero(); c];
        for ci in 0..c {
            inv_std[ci] = T::one() / (var[ci] + eps).sqrt();
            let g = self.gamma.data()[ci];
            let b = self.beta.data()[ci];
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for i in base..base + hw {
                    let xh = (x.data()[i] - mean[ci]) * inv_std[ci];
                    xhat.data_mut()[i] = xh;
                    out.data_mut()[i] = xh.mul_add(g, b);
                }
            }
            let rm = self.running_mean.data()[ci];
            let rv = self.running_var.data()[ci];
            self.running_mean.data_mut()[ci] = rm * mom + mean[ci] * one_minus_mom;
            self.running_var.data_mut()[ci] = rv * mom + var[ci] * one_minus_mom;
        }
        out.debug_check_finite("batchnorm (train)");
        Ok((out, BnCache { xhat, inv_std }))
    }

    /// Fixed affine map through the running statistics.
    pub fn forward_infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let eps = lit::<T>(BN_EPS);
        let mut out = Tensor::zeros(x.shape());
        for ci in 0..c {
            let inv_std = T::one() / (self.running_var.data()[ci] + eps).sqrt();
            let scale = self.gamma.data()[ci] * inv_std;
            let shift = self.beta.data()[ci] - self.running_mean.data()[ci] * scale;
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for i in base..base + hw {
                    out.data_mut()[i] = x.data()[i].mul_add(scale, shift);
                }
            }
        }
        out.debug_check_finite("batchnorm (infer)");
        Ok(out)
    }

    /// Backward through a training-mode forward. Accumulates gamma/beta
    /// gradients on the layer and returns the input gradient.
    pub fn backward(&mut self, cache: &BnCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x_shape = cache.xhat.shape();
        if grad_out.shape() != x_shape {
            return Err(Error::Data(format!(
                "batchnorm backward: gradient shape {:?} does not match forward shape {:?}",
                grad_out.shape(),
                x_shape
            )));
        }
        let [n, c, h, w] = x_shape;
        let hw = h * w;
        let m = lit::<T>((n * h * w) as f64);
        let mut gin = Tensor::zeros(x_shape);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ci in 0..c {
            // Channel-wise sums of dy and dy * xhat.
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for i in base..base + hw {
                    let dy = grad_out.data()[i];
                    sum_dy = sum_dy + dy;
                    sum_dy_xhat = dy.mul_add(cache.xhat.data()[i], sum_dy_xhat);
                }
            }
            dgamma[ci] = sum_dy_xhat;
            dbeta[ci] = sum_dy;
            // dx = gamma * inv_std / m * (m*dy - sum(dy) - xhat * sum(dy*xhat))
            let coef = self.gamma.data()[ci] * cache.inv_std[ci] / m;
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for i in base..base + hw {
                    let dy = grad_out.data()[i];
                    let xh = cache.xhat.data()[i];
                    gin.data_mut()[i] = coef * (m * dy - sum_dy - xh * sum_dy_xhat);
                }
            }
        }
        self.gamma.accumulate_grad(&dgamma);
        self.beta.accumulate_grad(&dbeta);
        Ok(gin)
    }
}

// ---------------------------------------------------------------------------
// Depthwise-separable convolution block
// ---------------------------------------------------------------------------

/// Depthwise 3x3 convolution (stride 1 or 2) followed by a pointwise 1x1
/// convolution, batch norm, and ReLU. Neither convolution carries a bias —
/// the batch-norm shift plays that role.
#[derive(Clone, Debug)]
pub struct DsConvBlock<T> {
    /// `[C_in, 1, 3, 3]` depthwise kernel.
    pub depthwise: Tensor<T>,
    /// `[C_out, C_in, 1, 1]` channel-mixing kernel.
    pub pointwise: Tensor<T>,
    pub bn: BatchNorm<T>,
    pub stride: usize,
}

/// Intermediates recorded by a training-mode DS-block forward.
#[derive(Clone, Debug)]
pub struct DsCache<T> {
    input: Tensor<T>,
    dw_out: Tensor<T>,
    bn: BnCache<T>,
    /// Post-ReLU output; `y > 0` is the ReLU pass-through mask.
    output: Tensor<T>,
}

impl<T: Scalar> DsConvBlock<T> {
    /// Fan-in Gaussian initialization for both kernels, identity batch norm.
    pub fn init(c_in: usize, c_out: usize, stride: usize, rng: &mut impl Rng) -> Self {
        DsConvBlock {
            depthwise: gaussian_init([c_in, 1, 3, 3], 9, rng),
            pointwise: gaussian_init([c_out, c_in, 1, 1], c_in, rng),
            bn: BatchNorm::new(c_out),
            stride,
        }
    }

    pub fn c_in(&self) -> usize {
        self.depthwise.shape()[0]
    }
    pub fn c_out(&self) -> usize {
        self.pointwise.shape()[0]
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, DsCache<T>)> {
        let dw_out = conv2d(x, &self.depthwise, self.stride, 1, self.c_in())?;
        let pw_out = conv2d(&dw_out, &self.pointwise, 1, 0, 1)?;
        let (bn_out, bn_cache) = self.bn.forward_train(&pw_out)?;
        let y = relu(&bn_out);
        let cache = DsCache { input: x.clone(), dw_out, bn: bn_cache, output: y.clone() };
        Ok((y, cache))
    }

    pub fn forward_infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let dw_out = conv2d(x, &self.depthwise, self.stride, 1, self.c_in())?;
        let pw_out = conv2d(&dw_out, &self.pointwise, 1, 0, 1)?;
        Ok(relu(&self.bn.forward_infer(&pw_out)?))
    }

    /// Backward through ReLU, batch norm, and both convolutions. Accumulates
    /// parameter gradients on the block and returns the input gradient.
    pub fn backward(&mut self, cache: &DsCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g_bn_out = relu_backward(&cache.output, grad_out)?;
        let g_pw_out = self.bn.backward(&cache.bn, &g_bn_out)?;
        let (g_dw_out, g_pw_kernel) = conv2d_backward(&cache.dw_out, &self.pointwise, &g_pw_out, 1, 0, 1)?;
        self.pointwise.accumulate_grad(g_pw_kernel.data());
        let (g_in, g_dw_kernel) =
            conv2d_backward(&cache.input, &self.depthwise, &g_dw_out, self.stride, 1, self.c_in())?;
        self.depthwise.accumulate_grad(g_dw_kernel.data());
        Ok(g_in)
    }

    /// Trainable parameter count: both kernels plus batch-norm gamma/beta
    /// (running statistics are buffers, not parameters).
    pub fn param_count(c_in: usize, c_out: usize) -> u64 {
        (9 * c_in + c_in * c_out + 2 * c_out) as u64
    }
}

// ---------------------------------------------------------------------------
// Efficient channel attention
// ---------------------------------------------------------------------------

/// Efficient channel attention: global average pooling to a channel
/// descriptor, a 1-D convolution (kernel `k`, zero padding, no bias) across
/// the channel axis, a sigmoid gate, and a per-channel rescale of the input.
/// Adds exactly `k` parameters.
#[derive(Clone, Debug)]
pub struct EcaLayer<T> {
    /// `[1, 1, 1, k]` 1-D kernel over channels; `k` must be odd.
    pub kernel: Tensor<T>,
}

/// Intermediates recorded by an ECA forward.
#[derive(Clone, Debug)]
pub struct EcaCache<T> {
    input: Tensor<T>,
    descriptor: Tensor<T>,
    gate: Tensor<T>,
}

pub const ECA_KERNEL_SIZE: usize = 3;

impl<T: Scalar> EcaLayer<T> {
    /// Zero-initialized kernel: the gate starts at sigmoid(0) = 0.5 uniformly.
    pub fn new(k: usize) -> Self {
        assert!(k % 2 == 1, "ECA kernel size must be odd");
        EcaLayer { kernel: Tensor::zeros([1, 1, 1, k]) }
    }

    pub fn k(&self) -> usize {
        self.kernel.w()
    }

    /// 1-D zero-padded convolution across the channel axis of an `N x C x 1 x 1`
    /// descriptor.
    fn conv1d(&self, d: &Tensor<T>) -> Tensor<T> {
        let [n, c, _, _] = d.shape();
        let k = self.k();
        let pad = k / 2;
        let mut z = Tensor::zeros([n, c, 1, 1]);
        for ni in 0..n {
            for ci in 0..c {
                let mut acc = T::zero();
                for j in 0..k {
                    let src = ci as isize + j as isize - pad as isize;
                    if src >= 0 && (src as usize) < c {
                        acc = self.kernel.data()[j].mul_add(d.data()[ni * c + src as usize], acc);
                    }
                }
                z.data_mut()[ni * c + ci] = acc;
            }
        }
        z
    }

    /// ECA has no mode-dependent state, so one forward serves both training
    /// and inference; this variant records what `backward` needs.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, EcaCache<T>)> {
        let d = global_avg_pool(x);
        let z = self.conv1d(&d);
        let a = sigmoid(&z);
        let y = scale_by_channel(x, &a)?;
        Ok((y, EcaCache { input: x.clone(), descriptor: d, gate: a }))
    }

    /// Cache-free forward for inference paths.
    pub fn forward_infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let a = sigmoid(&self.conv1d(&global_avg_pool(x)));
        scale_by_channel(x, &a)
    }

    /// Accumulates the kernel gradient on the layer and returns the input
    /// gradient (both the rescale path and the descriptor path).
    pub fn backward(&mut self, cache: &EcaCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (gx_scale, g_gate) = scale_by_channel_backward(&cache.input, &cache.gate, grad_out)?;
        // Through the sigmoid gate.
        let mut g_z = Tensor::zeros(g_gate.shape());
        for ((gz, &ga), &a) in g_z.data_mut().iter_mut().zip(g_gate.data()).zip(cache.gate.data()) {
            *gz = ga * a * (T::one() - a);
        }
        // Through the 1-D convolution: kernel gradient and descriptor gradient.
        let [n, c, _, _] = cache.descriptor.shape();
        let k = self.k();
        let pad = k / 2;
        let mut g_kernel = vec![T::zero(); k];
        let mut g_d = Tensor::zeros([n, c, 1, 1]);
        for ni in 0..n {
            for ci in 0..c {
                let gz = g_z.data()[ni * c + ci];
                for j in 0..k {
                    let src = ci as isize + j as isize - pad as isize;
                    if src >= 0 && (src as usize) < c {
                        let si = ni * c + src as usize;
                        g_kernel[j] = gz.mul_add(cache.descriptor.data()[si], g_kernel[j]);
                        g_d.data_mut()[si] =
                            gz.mul_add(self.kernel.data()[j], g_d.data()[si]);
                    }
                }
            }
        }
        self.kernel.accumulate_grad(&g_kernel);
        let gx_pool = global_avg_pool_backward(cache.input.shape(), &g_d)?;
        add(&gx_scale, &gx_pool)
    }
}

// ---------------------------------------------------------------------------
// Biased 1x1 convolution (used outside normalized blocks)
// ---------------------------------------------------------------------------

/// Pointwise convolution with a per-channel bias. Used where no batch norm
/// follows (decoder fusion projections, attention gates, and the prediction
/// head).
#[derive(Clone, Debug)]
pub struct Conv1x1<T> {
    /// `[C_out, C_in, 1, 1]` kernel.
    pub weight: Tensor<T>,
    /// `[1, C_out, 1, 1]` bias.
    pub bias: Tensor<T>,
}

impl<T: Scalar> Conv1x1<T> {
    /// Fan-in Gaussian weights, zero bias.
    pub fn init(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Conv1x1 { weight: gaussian_init([c_out, c_in, 1, 1], c_in, rng), bias: Tensor::zeros([1, c_out, 1, 1]) }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }
    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = conv2d(x, &self.weight, 1, 0, 1)?;
        let [n, c, h, w] = y.shape();
        let hw = h * w;
        for ni in 0..n {
            for ci in 0..c {
                let b = self.bias.data()[ci];
                let base = (ni * c + ci) * hw;
                for v in &mut y.data_mut()[base..base + hw] {
                    *v = *v + b;
                }
            }
        }
        Ok(y)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    /// `input` must be the tensor given to the matching forward call.
    pub fn backward(&mut self, input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (g_in, g_w) = conv2d_backward(input, &self.weight, grad_out, 1, 0, 1)?;
        self.weight.accumulate_grad(g_w.data());
        let [n, c, h, w] = grad_out.shape();
        let hw = h * w;
        let mut g_b = vec![T::zero(); c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let mut acc = T::zero();
                for &g in &grad_out.data()[base..base + hw] {
                    acc = acc + g;
                }
                g_b[ci] = g_b[ci] + acc;
            }
        }
        self.bias.accumulate_grad(&g_b);
        Ok(g_in)
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam with bias correction (beta1 0.9, beta2 0.999, epsilon 1e-8).
/// Moment buffers are keyed by parameter name and created lazily.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    slots: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, slots: BTreeMap::new() }
    }

    /// Number of update steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update to every named parameter from its accumulated
    /// gradient. Errors on a missing or non-finite gradient, naming the
    /// offending parameter; parameters are untouched when an error is
    /// returned.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor<T>)]) -> Result<()> {
        // Validate every gradient before touching any parameter.
        for (name, p) in params.iter() {
            let g = p.grad().ok_or_else(|| {
                Error::Numeric(format!("adam: no gradient accumulated for parameter '{name}'"))
            })?;
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "adam: non-finite gradient for parameter '{name}'"
                )));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (lit::<T>(self.beta1), lit::<T>(self.beta2));
        let (nb1, nb2) = (lit::<T>(1.0 - self.beta1), lit::<T>(1.0 - self.beta2));
        let (inv_bc1, inv_bc2) = (lit::<T>(1.0 / bc1), lit::<T>(1.0 / bc2));
        let lr = lit::<T>(self.lr);
        let eps = lit::<T>(self.eps);
        for (name, p) in params.iter_mut() {
            let g: Vec<T> = p.grad().expect("validated above").to_vec();
            let (m, v) = self
                .slots
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            for (pi, (&gi, (mi, vi))) in
                p.data_mut().iter_mut().zip(g.iter().zip(m.iter_mut().zip(v.iter_mut())))
            {
                *mi = b1 * *mi + nb1 * gi;
                *vi = b2 * *vi + nb2 * gi * gi;
                let mhat = *mi * inv_bc1;
                let vhat = *vi * inv_bc2;
                *pi = *pi - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
