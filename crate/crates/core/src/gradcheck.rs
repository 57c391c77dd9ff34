//! Central finite-difference check of the full-model objective gradient.

use crate::data::SeriesWindow;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objective::LossKind;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::training::{batch_gradients, batch_objective};

/// One checked coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// `|analytic − numeric| / (|numeric| + 1e-8)`.
    pub fn relative_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / (self.numeric.abs() + 1e-8)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub samples: Vec<GradSample>,
}

impl GradCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.samples.iter().map(GradSample::relative_error).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub beta: f64,
    pub kind: LossKind,
    /// Coordinates to check.
    pub count: usize,
    /// Finite-difference step.
    pub step: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            beta: 1.0,
            kind: LossKind::Nll,
            count: 50,
            step: 1e-5,
        }
    }
}

/// Compares autodiff against central differences on coordinates drawn
/// uniformly without replacement from all parameters.
pub fn check_gradients(
    model: &Model,
    windows: &[&SeriesWindow],
    noise: Option<&Tensor>,
    opts: &GradCheckOptions,
    rng: &mut RngStream,
) -> Result<GradCheck> {
    let total = model.params.numel();
    if opts.count == 0 || opts.count > total {
        return Err(Error::Contract(format!(
            "cannot check {} of {total} coordinates",
            opts.count
        )));
    }
    let (_, grads) = batch_gradients(model, windows, noise, opts.beta, opts.kind)?;
    let coords: Vec<(String, usize)> = model
        .params
        .iter()
        .flat_map(|(name, t)| (0..t.numel()).map(move |i| (name.clone(), i)))
        .collect();
    let mut picks: Vec<usize> = (0..coords.len()).collect();
    rng.shuffle(&mut picks);

    let mut probe = model.clone();
    let mut samples = Vec::with_capacity(opts.count);
    for &k in &picks[..opts.count] {
        let (name, index) = &coords[k];
        let orig = model.params.get(name).expect("listed parameter").data()[*index];
        let mut objective_at = |v: f64| -> Result<f64> {
            probe.params.get_mut(name).expect("listed parameter").data_mut()[*index] = v;
            Ok(batch_objective(&probe, windows, noise, opts.beta, opts.kind)?.total)
        };
        let up = objective_at(orig + opts.step)?;
        let down = objective_at(orig - opts.step)?;
        probe.params.get_mut(name).expect("listed parameter").data_mut()[*index] = orig;
        samples.push(GradSample {
            param: name.clone(),
            index: *index,
            analytic: grads.get(name).expect("gradient for every parameter").data()[*index],
            numeric: (up - down) / (2.0 * opts.step),
        });
    }
    Ok(GradCheck { samples })
}
