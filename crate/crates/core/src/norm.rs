//! Modality-specific batch normalization.
//!
//! One normalization site keeps a separate scale, bias and running-statistic
//! set per modality (private mode), so convolution weights can be shared
//! across modalities while activation statistics stay apart:
//!
//! ```text
//! y_s = gamma_s * (x_s - mu_s) / sqrt(var_s + eps) + beta_s
//! ```
//!
//! In shared mode all modalities alias a single set. Train-mode batch
//! statistics are always computed over the current call's batch; only the
//! running statistics and affine parameters are affected by the mode.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    Private,
    Shared,
}

#[derive(Debug, Clone)]
pub struct ModalityNorm {
    channels: usize,
    modalities: usize,
    mode: NormMode,
    eps: f64,
    momentum: f64,
    gamma: Vec<Tensor>,
    beta: Vec<Tensor>,
    running_mean: Vec<Vec<f64>>,
    running_var: Vec<Vec<f64>>,
}

/// Per-channel batch statistics (biased variance).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn batch_stats(x: &Tensor) -> BatchStats {
    let [n_, c, h, w] = x.shape();
    let hw = h * w;
    let count = (n_ * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for n in 0..n_ {
            s += x.plane(n, ch).iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for n in 0..n_ {
            v += x.plane(n, ch).iter().map(|&a| (a - m) * (a - m)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    BatchStats { mean, var }
}

/// Normalized activations and per-channel `1/sqrt(var + eps)`.
pub(crate) fn standardize(x: &Tensor, mean: &[f64], var: &[f64], eps: f64) -> (Tensor, Vec<f64>) {
    let [n_, c, h, w] = x.shape();
    let hw = h * w;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0; x.len()];
    for n in 0..n_ {
        for ch in 0..c {
            let base = (n * c + ch) * hw;
            let (m, is) = (mean[ch], inv_std[ch]);
            for (o, &v) in out[base..base + hw].iter_mut().zip(x.plane(n, ch)) {
                *o = (v - m) * is;
            }
        }
    }
    (Tensor::from_parts(x.shape(), out), inv_std)
}

pub(crate) fn affine(xhat: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let [n_, c, h, w] = xhat.shape();
    let hw = h * w;
    let mut out = vec![0.0; xhat.len()];
    for n in 0..n_ {
        for ch in 0..c {
            let base = (n * c + ch) * hw;
            let (g, b) = (gamma.data()[ch], beta.data()[ch]);
            for (o, &v) in out[base..base + hw].iter_mut().zip(xhat.plane(n, ch)) {
                *o = g * v + b;
            }
        }
    }
    Tensor::from_parts(xhat.shape(), out)
}

pub(crate) struct NormGrads {
    pub dx: Tensor,
    pub dgamma: Tensor,
    pub dbeta: Tensor,
}

/// Backward of `gamma * xhat + beta`. With `batch` set, `xhat` depends on
/// the batch mean and variance, which adds the usual correction terms.
pub(crate) fn norm_backward(gy: &Tensor, xhat: &Tensor, inv_std: &[f64], gamma: &Tensor, batch: bool) -> NormGrads {
    let [n_, c, h, w] = gy.shape();
    let hw = h * w;
    let count = (n_ * hw) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let (mut sg, mut sgx) = (0.0, 0.0);
        for n in 0..n_ {
            for (g, xh) in gy.plane(n, ch).iter().zip(xhat.plane(n, ch)) {
                sg += g;
                sgx += g * xh;
            }
        }
        dbeta[ch] = sg;
        dgamma[ch] = sgx;
    }
    let mut dx = vec![0.0; gy.len()];
    for n in 0..n_ {
        for ch in 0..c {
            let base = (n * c + ch) * hw;
            let k = gamma.data()[ch] * inv_std[ch];
            let out = &mut dx[base..base + hw];
            if batch {
                let (mg, mgx) = (dbeta[ch] / count, dgamma[ch] / count);
                for ((o, g), xh) in out.iter_mut().zip(gy.plane(n, ch)).zip(xhat.plane(n, ch)) {
                    *o = k * (g - mg - xh * mgx);
                }
            } else {
                for (o, g) in out.iter_mut().zip(gy.plane(n, ch)) {
                    *o = k * g;
                }
            }
        }
    }
    NormGrads {
        dx: Tensor::from_parts(gy.shape(), dx),
        dgamma: Tensor::from_parts([1, c, 1, 1], dgamma),
        dbeta: Tensor::from_parts([1, c, 1, 1], dbeta),
    }
}

impl ModalityNorm {
    pub fn new(channels: usize, modalities: usize, mode: NormMode) -> Result<Self> {
        Self::with_hyper(channels, modalities, mode, DEFAULT_EPS, DEFAULT_MOMENTUM)
    }

    pub fn with_hyper(channels: usize, modalities: usize, mode: NormMode, eps: f64, momentum: f64) -> Result<Self> {
        if channels == 0 || modalities == 0 {
            return Err(Error::Config(format!(
                "norm needs channels and modalities >= 1, got {channels} and {modalities}"
            )));
        }
        if eps <= 0.0 || !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("norm eps {eps} / momentum {momentum} out of range")));
        }
        let sets = match mode {
            NormMode::Private => modalities,
            NormMode::Shared => 1,
        };
        Ok(Self {
            channels,
            modalities,
            mode,
            eps,
            momentum,
            gamma: vec![Tensor::ones([1, channels, 1, 1]); sets],
            beta: vec![Tensor::zeros([1, channels, 1, 1]); sets],
            running_mean: vec![vec![0.0; channels]; sets],
            running_var: vec![vec![1.0; channels]; sets],
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn modalities(&self) -> usize {
        self.modalities
    }
    pub fn mode(&self) -> NormMode {
        self.mode
    }
    pub fn eps(&self) -> f64 {
        self.eps
    }
    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Number of distinct parameter/statistic sets.
    pub fn sets(&self) -> usize {
        self.gamma.len()
    }

    /// Set used by modality `s` (0-based).
    pub fn set_of(&self, s: usize) -> Result<usize> {
        if s >= self.modalities {
            return Err(Error::index(
                "modality_norm",
                format!("modality {s} with {} modalities", self.modalities),
            ));
        }
        Ok(match self.mode {
            NormMode::Private => s,
            NormMode::Shared => 0,
        })
    }

    /// Learnable scalars: `2 * C * sets`. Running statistics are buffers.
    pub fn learnable_params(&self) -> usize {
        2 * self.channels * self.sets()
    }

    pub fn gamma(&self, set: usize) -> &Tensor {
        &self.gamma[set]
    }
    pub fn beta(&self, set: usize) -> &Tensor {
        &self.beta[set]
    }
    pub fn gamma_mut(&mut self, set: usize) -> &mut Tensor {
        &mut self.gamma[set]
    }
    pub fn beta_mut(&mut self, set: usize) -> &mut Tensor {
        &mut self.beta[set]
    }
    pub fn running_mean(&self, set: usize) -> &[f64] {
        &self.running_mean[set]
    }
    pub fn running_var(&self, set: usize) -> &[f64] {
        &self.running_var[set]
    }
    pub fn running_mean_mut(&mut self, set: usize) -> &mut [f64] {
        &mut self.running_mean[set]
    }
    pub fn running_var_mut(&mut self, set: usize) -> &mut [f64] {
        &mut self.running_var[set]
    }

    fn check_input(&self, x: &Tensor, s: usize) -> Result<usize> {
        if x.c() != self.channels {
            return Err(Error::dim("modality_norm", "C", self.channels, x.c()));
        }
        self.set_of(s)
    }

    pub(crate) fn update_running(&mut self, set: usize, stats: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean[set].iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var[set].iter_mut().zip(&stats.var) {
            *r = ((1.0 - m) * *r + m * b).max(0.0);
        }
    }

    /// Normalizes with this batch's statistics and updates modality `s`'s
    /// running statistics.
    pub fn forward_train(&mut self, x: &Tensor, s: usize) -> Result<Tensor> {
        let set = self.check_input(x, s)?;
        let stats = batch_stats(x);
        let (xhat, _) = standardize(x, &stats.mean, &stats.var, self.eps);
        self.update_running(set, &stats);
        Ok(affine(&xhat, &self.gamma[set], &self.beta[set]))
    }

    /// Normalizes with the stored running statistics; no state changes.
    pub fn forward_eval(&self, x: &Tensor, s: usize) -> Result<Tensor> {
        let set = self.check_input(x, s)?;
        let (xhat, _) = standardize(x, &self.running_mean[set], &self.running_var[set], self.eps);
        Ok(affine(&xhat, &self.gamma[set], &self.beta[set]))
    }

    /// Records a normalization on `graph`. `gamma`/`beta` are the nodes
    /// holding this modality's affine parameters. In train mode running
    /// statistics are updated.
    pub fn forward_node(
        &mut self,
        graph: &mut Graph,
        x: NodeId,
        s: usize,
        gamma: NodeId,
        beta: NodeId,
        train: bool,
    ) -> Result<NodeId> {
        let set = self.check_input(graph.value(x), s)?;
        if train {
            let stats = batch_stats(graph.value(x));
            let node = graph.norm(x, gamma, beta, &stats.mean, &stats.var, self.eps, true)?;
            self.update_running(set, &stats);
            Ok(node)
        } else {
            graph.norm(
                x,
                gamma,
                beta,
                &self.running_mean[set],
                &self.running_var[set],
                self.eps,
                false,
            )
        }
    }
}
