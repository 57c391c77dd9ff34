//! Mini-batch training with Adam and early stopping on validation loss.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph};
use crate::data::{window_origins, Dataset, SeriesWindow};
use crate::error::{Error, Result};
use crate::model::{forward_batch, Model, ModelConfig, ModelParams, ParamVars};
use crate::objective::{batch_loss, LossBreakdown, LossKind};
use crate::rng::{stream, RngStream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Global-norm clipping threshold; 5.0 is a reasonable value when enabled.
    pub grad_clip: Option<f64>,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 50,
            patience: 10,
            beta: 1.0,
            seed: 0,
            adam: AdamConfig::default(),
            grad_clip: None,
            loss: LossKind::Nll,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and epoch limit must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config("patience exceeds the epoch limit".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("beta must be non-negative".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.m.get(name).map(Vec::as_slice)
    }
}

/// L2 norm over every gradient entry.
pub fn global_norm(grads: &Gradients) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// One bias-corrected Adam update, clipping the global gradient norm first
/// when configured.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Training(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (name, g) in grads.iter() {
        if !g.is_finite() {
            return Err(Error::Training(format!("non-finite gradient for {name}")));
        }
    }
    let clip = match config.grad_clip {
        Some(max) => {
            let norm = global_norm(grads);
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let AdamConfig { beta1, beta2, eps } = config.adam;
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Training(format!("no gradient for {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::Training(format!("gradient shape mismatch for {name}")));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let gi = gi * clip;
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w -= config.lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Latent noise for a batch of `batch` windows.
pub fn batch_noise(model: &Model, batch: usize, rng: &mut RngStream) -> Tensor {
    let [rows, d] = model.noise_shape();
    rng.normal_tensor(&[batch * rows, d])
}

/// Objective and gradients for a batch with the given latent noise (`None`
/// for the posterior mean).
pub fn batch_gradients(
    model: &Model,
    windows: &[&SeriesWindow],
    noise: Option<&Tensor>,
    beta: f64,
    kind: LossKind,
) -> Result<(LossBreakdown, Gradients)> {
    let mut g = Graph::new();
    let pv = ParamVars::register(&mut g, &model.params)?;
    let lookbacks: Vec<&Tensor> = windows.iter().map(|w| &w.lookback).collect();
    let nodes = forward_batch(&mut g, &model.config, &pv, &lookbacks, noise)?;
    let loss = batch_loss(&mut g, &model.config, &nodes, windows, beta, kind)?;
    let grads = g.backward(loss.total)?;
    Ok((loss.breakdown(&g, beta), grads))
}

/// Objective without gradients.
pub fn batch_objective(
    model: &Model,
    windows: &[&SeriesWindow],
    noise: Option<&Tensor>,
    beta: f64,
    kind: LossKind,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let pv = ParamVars::register(&mut g, &model.params)?;
    let lookbacks: Vec<&Tensor> = windows.iter().map(|w| &w.lookback).collect();
    let nodes = forward_batch(&mut g, &model.config, &pv, &lookbacks, noise)?;
    let loss = batch_loss(&mut g, &model.config, &nodes, windows, beta, kind)?;
    Ok(loss.breakdown(&g, beta))
}

/// Mean-mode objective over all windows of `ds` at stride 1.
pub fn evaluate_loss(model: &Model, ds: &Dataset, config: &TrainConfig) -> Result<LossBreakdown> {
    let (l, h) = (model.config.lookback, model.config.horizon);
    let origins = window_origins(ds.len(), l, h, 1);
    if origins.is_empty() {
        return Err(Error::Config("no complete window in the dataset".into()));
    }
    let mut acc = Accumulator::default();
    for chunk in origins.chunks(config.batch_size) {
        let windows: Vec<SeriesWindow> = chunk.iter().map(|&o| ds.window(o, l, h)).collect::<Result<_>>()?;
        let refs: Vec<&SeriesWindow> = windows.iter().collect();
        let b = batch_objective(model, &refs, None, config.beta, config.loss)?;
        acc.add(&b, chunk.len());
    }
    Ok(acc.mean(config.beta))
}

#[derive(Default)]
struct Accumulator {
    rec: f64,
    pred: f64,
    kl: f64,
    count: usize,
}

impl Accumulator {
    fn add(&mut self, b: &LossBreakdown, n: usize) {
        let w = n as f64;
        self.rec += b.rec_nll * w;
        self.pred += b.pred_nll * w;
        self.kl += b.kl * w;
        self.count += n;
    }

    fn mean(&self, beta: f64) -> LossBreakdown {
        let n = self.count.max(1) as f64;
        LossBreakdown::new(self.rec / n, self.pred / n, self.kl / n, beta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub wall_time: f64,
}

impl TrainReport {
    pub fn best_val(&self) -> &LossBreakdown {
        &self.epochs[self.best_epoch].val
    }

    /// The report with timings zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.wall_time = 0.0;
        r.epochs.iter_mut().for_each(|e| e.elapsed_s = 0.0);
        r
    }
}

/// Trains from a seeded initialization and returns the parameters of the
/// epoch with the lowest validation loss.
pub fn train(
    model_config: &ModelConfig,
    config: &TrainConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
) -> Result<(Model, TrainReport)> {
    let model = Model::init(model_config.clone(), config.seed)?;
    train_from(model, config, train_ds, val_ds, |_| {})
}

/// Trains `model` in place of a fresh initialization, calling `on_epoch`
/// after every epoch.
pub fn train_from(
    mut model: Model,
    config: &TrainConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, TrainReport)> {
    config.validate()?;
    model.config.validate()?;
    let (l, h) = (model.config.lookback, model.config.horizon);
    for (name, ds) in [("training", train_ds), ("validation", val_ds)] {
        if ds.channels() != model.config.channels {
            return Err(Error::Compatibility(format!(
                "{name} data has {} channels, model expects {}",
                ds.channels(),
                model.config.channels
            )));
        }
        if window_origins(ds.len(), l, h, 1).is_empty() {
            return Err(Error::Config(format!(
                "{name} split has {} rows, fewer than lookback + horizon = {}",
                ds.len(),
                l + h
            )));
        }
    }

    let mut shuffle_rng = RngStream::derive(config.seed, stream::SHUFFLE);
    let mut noise_rng = RngStream::derive(config.seed, stream::LATENT);
    let mut adam = AdamState::default();
    let mut origins = window_origins(train_ds.len(), l, h, 1);
    let start = Instant::now();

    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 0..config.max_epochs {
        shuffle_rng.shuffle(&mut origins);
        let mut acc = Accumulator::default();
        for (bi, chunk) in origins.chunks(config.batch_size).enumerate() {
            let windows: Vec<SeriesWindow> = chunk.iter().map(|&o| train_ds.window(o, l, h)).collect::<Result<_>>()?;
            let refs: Vec<&SeriesWindow> = windows.iter().collect();
            let noise = batch_noise(&model, refs.len(), &mut noise_rng);
            let diagnose = |e: Error| {
                Error::Training(format!(
                    "epoch {epoch}, batch {bi} (origins {:?}..): {e}",
                    &chunk[..chunk.len().min(4)]
                ))
            };
            let (loss, grads) =
                batch_gradients(&model, &refs, Some(&noise), config.beta, config.loss).map_err(diagnose)?;
            if !loss.is_finite() {
                return Err(diagnose(Error::NonFinite("batch loss".into())));
            }
            adam_step(&mut model.params, &grads, &mut adam, config).map_err(diagnose)?;
            acc.add(&loss, chunk.len());
        }

        let val = evaluate_loss(&model, val_ds, config)?;
        if !val.is_finite() {
            return Err(Error::Training(format!("non-finite validation loss at epoch {epoch}")));
        }
        let record = EpochRecord {
            epoch,
            train: acc.mean(config.beta),
            val,
            elapsed_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.5} val {:.5}",
            record.train.total,
            record.val.total
        );
        on_epoch(&record);
        epochs.push(record);

        let improved = best.as_ref().is_none_or(|(_, b, _)| val.total < *b);
        if improved {
            best = Some((epoch, val.total, model.params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > config.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_epoch, _, params) = best.expect("at least one epoch ran");
    model.params = params;
    Ok((
        model,
        TrainReport {
            epochs,
            best_epoch,
            stopped_early,
            wall_time: start.elapsed().as_secs_f64(),
        },
    ))
}
