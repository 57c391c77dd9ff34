//! Reversible instance normalization.
//!
//! Statistics come from the look-back window only. Locations are mapped back
//! with `x·std + mean`; scales with `σ·std`, which keeps predictive intervals
//! equivariant under affine transforms of the input.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default floor on the per-channel standard deviation.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-channel look-back statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceStats {
    /// `[C]`
    pub mean: Tensor,
    /// `[C]`, every entry at least `eps`.
    pub std: Tensor,
    pub eps: f64,
}

impl InstanceStats {
    /// Mean 0, std 1 for `channels` channels.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            std: Tensor::ones(&[channels]),
            eps: DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.numel()
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize)> {
        let (t, c) = x.dims2()?;
        if c != self.channels() {
            return Err(Error::dim(format!("{c} channels, statistics for {}", self.channels())));
        }
        Ok((t, c))
    }
}

/// Population mean and floored standard deviation of each channel of a
/// `[L, C]` look-back.
pub fn fit(lookback: &Tensor, eps: f64) -> Result<InstanceStats> {
    let (l, c) = lookback.dims2()?;
    let mut mean = vec![0.0; c];
    for row in lookback.data().chunks(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= l as f64);
    let mut var = vec![0.0; c];
    for row in lookback.data().chunks(c) {
        for j in 0..c {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    let std = var.iter().map(|v| (v / l as f64).sqrt().max(eps)).collect();
    Ok(InstanceStats {
        mean: Tensor::from_vec(mean),
        std: Tensor::from_vec(std),
        eps,
    })
}

fn per_channel(x: &Tensor, c: usize, f: impl Fn(f64, usize) -> f64) -> Tensor {
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        for (j, v) in row.iter_mut().enumerate() {
            *v = f(*v, j);
        }
    }
    out
}

/// `(x − mean) / std` per channel.
pub fn normalize(x: &Tensor, stats: &InstanceStats) -> Result<Tensor> {
    let (_, c) = stats.check(x)?;
    let (m, s) = (stats.mean.data(), stats.std.data());
    Ok(per_channel(x, c, |v, j| (v - m[j]) / s[j]))
}

/// `μ·std + mean` per channel.
pub fn denorm_location(mu: &Tensor, stats: &InstanceStats) -> Result<Tensor> {
    let (_, c) = stats.check(mu)?;
    let (m, s) = (stats.mean.data(), stats.std.data());
    Ok(per_channel(mu, c, |v, j| v * s[j] + m[j]))
}

/// `σ·std` per channel; scales carry no location shift.
pub fn denorm_scale(sigma: &Tensor, stats: &InstanceStats) -> Result<Tensor> {
    let (_, c) = stats.check(sigma)?;
    if sigma.data().iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Contract("scale must be positive".into()));
    }
    let s = stats.std.data();
    Ok(per_channel(sigma, c, |v, j| v * s[j]))
}
