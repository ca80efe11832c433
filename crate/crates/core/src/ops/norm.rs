use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Momentum and epsilon of a batch-norm layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnConfig {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig { momentum: 0.1, epsilon: 1e-5 }
    }
}

/// Running per-channel statistics, updated in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }
}

/// Values kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
}

fn per_channel_sums<T: Scalar>(x: &Tensor<T>, f: impl Fn(usize, T) -> T) -> Vec<T> {
    let c = x.shape().c();
    let mut sums = vec![T::zero(); c];
    for (i, &v) in x.data().iter().enumerate() {
        sums[i % c] += f(i % c, v);
    }
    sums
}

/// Batch normalization over the `(N, H, W)` axes of an NHWC tensor.
///
/// Train mode normalizes by the biased batch variance and blends the
/// unbiased variance into the running estimate.
pub fn batchnorm_forward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    stats: &mut RunningStats<T>,
    mode: Mode,
    cfg: BnConfig,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let shape = input.shape();
    let c = shape.c();
    if gamma.len() != c || beta.len() != c || stats.mean.len() != c || stats.var.len() != c {
        return Err(Error::Shape(format!("batch-norm parameters do not match {c} channels")));
    }
    if cfg.epsilon <= 0.0 {
        return Err(Error::Invalid("batch-norm epsilon must be positive".into()));
    }
    let eps = T::of(cfg.epsilon);
    let count = shape.n() * shape.h() * shape.w();

    let (mean, inv_std) = match mode {
        Mode::Train => {
            if count == 0 {
                return Err(Error::Invalid("batch norm in train mode needs a nonempty batch".into()));
            }
            let m = T::of_usize(count);
            let mean: Vec<T> = per_channel_sums(input, |_, v| v).into_iter().map(|s| s / m).collect();
            let var: Vec<T> = per_channel_sums(input, |ch, v| (v - mean[ch]) * (v - mean[ch]))
                .into_iter()
                .map(|s| s / m)
                .collect();
            let momentum = T::of(cfg.momentum);
            let unbias = if count > 1 { m / T::of_usize(count - 1) } else { T::one() };
            for ch in 0..c {
                stats.mean[ch] = (T::one() - momentum) * stats.mean[ch] + momentum * mean[ch];
                stats.var[ch] = (T::one() - momentum) * stats.var[ch] + momentum * var[ch] * unbias;
            }
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (mean, inv_std)
        }
        Mode::Eval => {
            let inv_std = stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (stats.mean.clone(), inv_std)
        }
    };

    let mut normalized = Tensor::zeros(shape);
    let mut out = Tensor::zeros(shape);
    for (i, &v) in input.data().iter().enumerate() {
        let ch = i % c;
        let xh = (v - mean[ch]) * inv_std[ch];
        normalized.data_mut()[i] = xh;
        out.data_mut()[i] = gamma[ch] * xh + beta[ch];
    }
    out.ensure_finite("batch norm")?;
    Ok((out, BnCache { normalized, inv_std, mode }))
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BnCache<T>,
    gamma: &[T],
    upstream: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let shape = upstream.shape();
    let c = shape.c();
    let xh = cache.normalized.data();
    let d_beta = per_channel_sums(upstream, |_, g| g);
    let mut d_gamma = vec![T::zero(); c];
    for (i, &g) in upstream.data().iter().enumerate() {
        d_gamma[i % c] += g * xh[i];
    }
    let mut d_input = Tensor::zeros(shape);
    match cache.mode {
        Mode::Eval => {
            for (i, &g) in upstream.data().iter().enumerate() {
                let ch = i % c;
                d_input.data_mut()[i] = g * gamma[ch] * cache.inv_std[ch];
            }
        }
        Mode::Train => {
            // dxhat = g·gamma; dx = inv_std/M · (M·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
            let m = T::of_usize(shape.n() * shape.h() * shape.w());
            for (i, &g) in upstream.data().iter().enumerate() {
                let ch = i % c;
                let dxh = g * gamma[ch];
                let sum_dxh = d_beta[ch] * gamma[ch];
                let sum_dxh_xh = d_gamma[ch] * gamma[ch];
                d_input.data_mut()[i] = cache.inv_std[ch] / m * (m * dxh - sum_dxh - xh[i] * sum_dxh_xh);
            }
        }
    }
    (d_input, d_gamma, d_beta)
}
