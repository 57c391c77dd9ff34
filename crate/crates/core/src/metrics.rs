//! Probabilistic forecast metrics and the evaluation loop.
//!
//! CRPS uses the energy-form estimator
//! `(1/S)Σ|x_s − y| − (1/(2S²))Σ_{s,s'}|x_s − x_{s'}|` per cell, evaluated in
//! `O(S log S)` through sorted samples. Quantiles for QICE interpolate
//! linearly between order statistics at position `(S − 1)·q`.

use serde::{Deserialize, Serialize};

use crate::data::{window_origins, Dataset};
use crate::error::{Error, Result};
use crate::model::{Model, SampleOptions};
use crate::rng::{stream, RngStream};
use crate::tensor::Tensor;

/// Quantile levels 0.1, 0.2, …, 0.9.
pub fn default_levels() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

fn sample_dims(samples: &Tensor, truth: &Tensor) -> Result<(usize, usize, usize)> {
    let (t, c) = truth.dims2()?;
    match samples.shape() {
        &[s, st, sc] if st == t && sc == c => Ok((s, t, c)),
        other => Err(Error::Dimension(format!(
            "samples {other:?} for truth {:?}",
            truth.shape()
        ))),
    }
}

/// Samples of cell `(t, c)` sorted ascending.
fn sorted_cell(samples: &Tensor, s: usize, cells: usize, cell: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..s).map(|i| samples.data()[i * cells + cell]).collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Energy-form CRPS of sorted samples against `y`.
pub fn crps_sorted(sorted: &[f64], y: f64) -> f64 {
    let s = sorted.len() as f64;
    let abs_err: f64 = sorted.iter().map(|x| (x - y).abs()).sum::<f64>() / s;
    // Σ_{i<j} (x_(j) − x_(i)) = Σ_i x_(i)·(2i − S + 1)
    let pair: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| x * (2.0 * i as f64 - s + 1.0))
        .sum();
    abs_err - pair / (s * s)
}

/// CRPS per cell `[T, C]` from `[S, T, C]` samples.
pub fn crps_cells(samples: &Tensor, truth: &Tensor) -> Result<Tensor> {
    let (s, t, c) = sample_dims(samples, truth)?;
    if s < 2 {
        return Err(Error::Contract("CRPS needs at least two samples".into()));
    }
    let cells = t * c;
    let out = (0..cells)
        .map(|cell| crps_sorted(&sorted_cell(samples, s, cells, cell), truth.data()[cell]))
        .collect();
    Tensor::new(vec![t, c], out)
}

/// Sample CRPS averaged over all cells.
pub fn crps_samples(samples: &Tensor, truth: &Tensor) -> Result<f64> {
    Ok(crps_cells(samples, truth)?.mean())
}

/// `Σ|x − x̂| / Σ|x|`.
pub fn nmae(point: &Tensor, truth: &Tensor) -> Result<f64> {
    if point.shape() != truth.shape() {
        return Err(Error::Dimension("point forecast and truth differ in shape".into()));
    }
    let denom: f64 = truth.data().iter().map(|x| x.abs()).sum();
    if denom == 0.0 {
        return Err(Error::UndefinedMetric("NMAE of an all-zero target".into()));
    }
    let num: f64 = point.data().iter().zip(truth.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(num / denom)
}

/// Empirical `q`-quantile of sorted values by linear interpolation.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Coverage `ĉ(q)` for each level: the fraction of cells whose truth is at
/// or below the empirical `q`-quantile.
pub fn coverage(samples: &Tensor, truth: &Tensor, levels: &[f64]) -> Result<Vec<f64>> {
    let (s, t, c) = sample_dims(samples, truth)?;
    let cells = t * c;
    let mut hits = vec![0usize; levels.len()];
    for cell in 0..cells {
        let sorted = sorted_cell(samples, s, cells, cell);
        let y = truth.data()[cell];
        for (h, &q) in hits.iter_mut().zip(levels) {
            if y <= quantile_sorted(&sorted, q) {
                *h += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / cells as f64).collect())
}

/// Mean absolute gap between empirical coverage and nominal level.
pub fn qice(samples: &Tensor, truth: &Tensor, levels: &[f64]) -> Result<f64> {
    let s = samples.shape().first().copied().unwrap_or(0);
    if s < 10 {
        return Err(Error::Contract("QICE needs at least ten samples".into()));
    }
    if levels.is_empty() {
        return Err(Error::Contract("QICE needs at least one level".into()));
    }
    let cov = coverage(samples, truth, levels)?;
    Ok(cov.iter().zip(levels).map(|(c, q)| (c - q).abs()).sum::<f64>() / levels.len() as f64)
}

/// Pearson correlation between a predicted and a true scale trace.
pub fn volatility_recovery(sigma_hat: &[f64], sigma_true: &[f64]) -> Result<f64> {
    if sigma_hat.len() != sigma_true.len() {
        return Err(Error::Dimension("scale traces differ in length".into()));
    }
    if sigma_hat.len() < 2 {
        return Err(Error::UndefinedMetric("correlation needs two points".into()));
    }
    let n = sigma_hat.len() as f64;
    let ma = sigma_hat.iter().sum::<f64>() / n;
    let mb = sigma_true.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in sigma_hat.iter().zip(sigma_true) {
        let (da, db) = (a - ma, b - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedMetric("correlation of a constant trace".into()));
    }
    Ok(sab / (saa.sqrt() * sbb.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub samples: usize,
    pub levels: Vec<f64>,
    /// Window stride; `None` uses the horizon length.
    pub stride: Option<usize>,
    pub seed: u64,
    pub latent_noise: bool,
    pub obs_noise: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 100,
            levels: default_levels(),
            stride: None,
            seed: 0,
            latent_noise: true,
            obs_noise: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub crps: f64,
    pub nmae: f64,
    pub qice: f64,
    pub crps_per_step: Vec<f64>,
    pub nmae_per_step: Vec<f64>,
    pub sample_count: usize,
    pub quantile_levels: Vec<f64>,
    pub windows: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub volatility_rho: Option<f64>,
}

/// Evaluates `model` on non-overlapping (by default) windows of `ds`.
///
/// Each window draws `samples` paths from its own stream derived from the
/// evaluation seed and the window index. Metrics are averaged over windows;
/// NMAE uses the mean-mode location as the point forecast. A `fixed_sigma`
/// replaces the decoded scale.
pub fn evaluate(model: &Model, ds: &Dataset, config: &EvalConfig, fixed_sigma: Option<f64>) -> Result<EvalResult> {
    let (l, h, c) = (model.config.lookback, model.config.horizon, model.config.channels);
    if ds.channels() != c {
        return Err(Error::Compatibility(format!(
            "data has {} channels, model expects {c}",
            ds.channels()
        )));
    }
    let stride = config.stride.unwrap_or(h);
    let origins = window_origins(ds.len(), l, h, stride);
    if origins.is_empty() {
        return Err(Error::Config("evaluation split holds no complete window".into()));
    }
    let opts = SampleOptions {
        latent_noise: config.latent_noise,
        obs_noise: config.obs_noise,
        fixed_sigma,
    };
    let root = RngStream::derive(config.seed, stream::EVAL).uniform().to_bits();
    let (mut crps, mut qice_sum) = (0.0, 0.0);
    let mut crps_step = vec![0.0; h];
    let mut abs_err_step = vec![0.0; h];
    let mut abs_truth_step = vec![0.0; h];
    for (wi, &o) in origins.iter().enumerate() {
        let w = ds.window(o, l, h)?;
        let mut rng = RngStream::derive(root, wi as u64);
        let paths = model.sample_paths_with(&w.lookback, config.samples, &mut rng, &opts)?;
        let cells = crps_cells(&paths, &w.horizon)?;
        crps += cells.mean();
        for (t, row) in cells.data().chunks(c).enumerate() {
            crps_step[t] += row.iter().sum::<f64>() / c as f64;
        }
        qice_sum += qice(&paths, &w.horizon, &config.levels)?;
        let point = &model.predict_batch(&[&w.lookback], None)?[0].mu;
        for t in 0..h {
            for ch in 0..c {
                abs_err_step[t] += (point.at2(t, ch) - w.horizon.at2(t, ch)).abs();
                abs_truth_step[t] += w.horizon.at2(t, ch).abs();
            }
        }
    }
    let total_truth: f64 = abs_truth_step.iter().sum();
    if total_truth == 0.0 {
        return Err(Error::UndefinedMetric("NMAE of an all-zero target".into()));
    }
    let n = origins.len() as f64;
    Ok(EvalResult {
        crps: crps / n,
        nmae: abs_err_step.iter().sum::<f64>() / total_truth,
        qice: qice_sum / n,
        crps_per_step: crps_step.iter().map(|v| v / n).collect(),
        nmae_per_step: abs_err_step
            .iter()
            .zip(&abs_truth_step)
            .map(|(e, t)| if *t > 0.0 { e / t } else { 0.0 })
            .collect(),
        sample_count: config.samples,
        quantile_levels: config.levels.clone(),
        windows: origins.len(),
        volatility_rho: None,
    })
}

/// Mean-mode predicted scale of channel 0 over the horizon of every window
/// at `stride`, with the absolute row index of each step in `ds`.
pub fn scale_trace(model: &Model, ds: &Dataset, stride: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    let (l, h) = (model.config.lookback, model.config.horizon);
    let origins = window_origins(ds.len(), l, h, stride);
    let mut sigma = Vec::with_capacity(origins.len() * h);
    let mut index = Vec::with_capacity(origins.len() * h);
    for chunk in origins.chunks(64) {
        let windows: Vec<_> = chunk.iter().map(|&o| ds.window(o, l, h)).collect::<Result<_>>()?;
        let lbs: Vec<&Tensor> = windows.iter().map(|w| &w.lookback).collect();
        for (w, dist) in windows.iter().zip(model.predict_batch(&lbs, None)?) {
            for t in 0..h {
                sigma.push(dist.sigma.at2(t, 0));
                index.push(w.origin_index + l + t);
            }
        }
    }
    Ok((sigma, index))
}

/// Root mean squared error of mean-mode forecasts over windows at `stride`.
pub fn prediction_rmse(model: &Model, ds: &Dataset, stride: usize) -> Result<f64> {
    let (l, h) = (model.config.lookback, model.config.horizon);
    let origins = window_origins(ds.len(), l, h, stride);
    if origins.is_empty() {
        return Err(Error::Config("no complete window for residuals".into()));
    }
    let (mut sq, mut count) = (0.0, 0usize);
    for chunk in origins.chunks(64) {
        let windows: Vec<_> = chunk.iter().map(|&o| ds.window(o, l, h)).collect::<Result<_>>()?;
        let lbs: Vec<&Tensor> = windows.iter().map(|w| &w.lookback).collect();
        for (w, dist) in windows.iter().zip(model.predict_batch(&lbs, None)?) {
            for (a, b) in dist.mu.data().iter().zip(w.horizon.data()) {
                sq += (a - b).powi(2);
                count += 1;
            }
        }
    }
    Ok((sq / count as f64).sqrt())
}
