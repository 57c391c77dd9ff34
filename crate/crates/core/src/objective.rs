//! Heteroscedastic ELBO, the homoscedastic MSE variant, and analytic helpers
//! for the gradient-attenuation properties of the Gaussian likelihood.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::SeriesWindow;
use crate::error::{Error, Result};
use crate::model::{series_to_rows, BatchNodes, LatentState, ModelConfig, PredictiveDistribution};
use crate::tensor::Tensor;

/// Which likelihood drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Location-scale Gaussian negative log-likelihood.
    #[default]
    Nll,
    /// Homoscedastic squared error on the location head only.
    Mse,
}

/// Components of the training objective. For [`LossKind::Mse`] the `rec_nll`
/// and `pred_nll` fields hold mean squared errors.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec_nll: f64,
    pub pred_nll: f64,
    pub kl: f64,
    pub total: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn new(rec_nll: f64, pred_nll: f64, kl: f64, beta: f64) -> Self {
        Self {
            rec_nll,
            pred_nll,
            kl,
            total: rec_nll + pred_nll + beta * kl,
            beta,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.rec_nll, self.pred_nll, self.kl, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn check_positive(sigma: &Tensor, what: &str) -> Result<()> {
    if sigma.data().iter().all(|&s| s > 0.0) {
        Ok(())
    } else {
        Err(Error::Contract(format!("{what} must be positive")))
    }
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

/// `1/(T·C) Σ [log σ + (u − μ)² / (2σ²)]`.
pub fn gaussian_nll(u: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<f64> {
    check_same(u, mu)?;
    check_same(u, sigma)?;
    check_positive(sigma, "sigma")?;
    let total: f64 = u
        .data()
        .iter()
        .zip(mu.data())
        .zip(sigma.data())
        .map(|((&x, &m), &s)| s.ln() + (x - m).powi(2) / (2.0 * s * s))
        .sum();
    Ok(total / u.numel() as f64)
}

/// `KL(N(μ, σ²) ‖ N(0, I))` summed over all entries.
pub fn kl_diag_gauss(mu_z: &Tensor, sigma_z: &Tensor) -> Result<f64> {
    check_same(mu_z, sigma_z)?;
    check_positive(sigma_z, "sigma_z")?;
    Ok(0.5
        * mu_z
            .data()
            .iter()
            .zip(sigma_z.data())
            .map(|(&m, &s)| s * s + m * m - 1.0 - 2.0 * s.ln())
            .sum::<f64>())
}

/// Mean squared error pooled over both spans.
pub fn mse_loss(recon: &PredictiveDistribution, pred: &PredictiveDistribution, window: &SeriesWindow) -> Result<f64> {
    check_same(&window.lookback, &recon.mu)?;
    check_same(&window.horizon, &pred.mu)?;
    let sq = |u: &Tensor, m: &Tensor| -> f64 { u.data().iter().zip(m.data()).map(|(a, b)| (a - b).powi(2)).sum() };
    let n = (window.lookback.numel() + window.horizon.numel()) as f64;
    Ok((sq(&window.lookback, &recon.mu) + sq(&window.horizon, &pred.mu)) / n)
}

/// Reconstruction and prediction NLL plus `β`-weighted KL for one window.
pub fn composite_loss(
    recon: &PredictiveDistribution,
    pred: &PredictiveDistribution,
    window: &SeriesWindow,
    latent: &LatentState,
    beta: f64,
) -> Result<LossBreakdown> {
    let rec = gaussian_nll(&window.lookback, &recon.mu, &recon.sigma)?;
    let prd = gaussian_nll(&window.horizon, &pred.mu, &pred.sigma)?;
    let kl = kl_diag_gauss(&latent.posterior.mu_z, &latent.posterior.sigma_z)?;
    Ok(LossBreakdown::new(rec, prd, kl, beta))
}

/// `∂NLL/∂μ = −(u − μ) / σ² · 1/(T·C)` per entry.
pub fn attenuation_weight(u: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    check_same(u, mu)?;
    check_same(u, sigma)?;
    check_positive(sigma, "sigma")?;
    let n = u.numel() as f64;
    let mut out = u.zip_with(mu, |x, m| x - m)?;
    for (o, &s) in out.data_mut().iter_mut().zip(sigma.data()) {
        *o = -*o / (s * s) / n;
    }
    Ok(out)
}

/// `σ* = |u − μ|`, floored at `xi`: the scale minimizing the NLL at a fixed
/// residual.
pub fn optimal_sigma(u: &Tensor, mu: &Tensor, xi: f64) -> Result<Tensor> {
    u.zip_with(mu, |x, m| (x - m).abs().max(xi))
}

/// Weighted Gaussian NLL `Σ w·[log σ + (u − μ)²/(2σ²)]` on the graph.
pub fn nll_graph(g: &mut Graph, mu: Var, sigma: Var, target: Tensor, weights: Tensor) -> Result<Var> {
    let u = g.constant(target)?;
    let w = g.constant(weights)?;
    let r = g.sub(u, mu)?;
    let r2 = g.square(r)?;
    let s2 = g.square(sigma)?;
    let q = g.div(r2, s2)?;
    let half = g.scale(q, 0.5)?;
    let ls = g.log(sigma)?;
    let term = g.add(ls, half)?;
    let weighted = g.mul(term, w)?;
    g.sum_all(weighted)
}

/// Weighted squared error `Σ w·(u − μ)²` on the graph.
pub fn mse_graph(g: &mut Graph, mu: Var, target: Tensor, weights: Tensor) -> Result<Var> {
    let u = g.constant(target)?;
    let w = g.constant(weights)?;
    let r = g.sub(u, mu)?;
    let r2 = g.square(r)?;
    let weighted = g.mul(r2, w)?;
    g.sum_all(weighted)
}

/// `0.5 Σ (σ² + μ² − 1 − 2 log σ) / batch` on the graph.
pub fn kl_graph(g: &mut Graph, mu: Var, sigma: Var, batch: usize) -> Result<Var> {
    let count = g.value(mu).numel() as f64;
    let m2 = g.square(mu)?;
    let s2 = g.square(sigma)?;
    let ls = g.log(sigma)?;
    let sm = g.sum_all(m2)?;
    let ss = g.sum_all(s2)?;
    let sl = g.sum_all(ls)?;
    let a = g.add(sm, ss)?;
    let b = g.scale(sl, 2.0)?;
    let c = g.sub(a, b)?;
    let k = g.constant(Tensor::scalar(count))?;
    let d = g.sub(c, k)?;
    g.scale(d, 0.5 / batch as f64)
}

/// Scalar nodes of a batch objective.
pub struct LossNodes {
    pub rec: Var,
    pub pred: Var,
    pub kl: Var,
    pub total: Var,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph, beta: f64) -> LossBreakdown {
        LossBreakdown {
            rec_nll: g.value(self.rec).data()[0],
            pred_nll: g.value(self.pred).data()[0],
            kl: g.value(self.kl).data()[0],
            total: g.value(self.total).data()[0],
            beta,
        }
    }
}

/// Mean over the batch of per-window objectives, in original units.
pub fn batch_loss(
    g: &mut Graph,
    cfg: &ModelConfig,
    nodes: &BatchNodes,
    windows: &[&SeriesWindow],
    beta: f64,
    kind: LossKind,
) -> Result<LossNodes> {
    let batch = windows.len();
    let (p, n, m) = (cfg.patch_len, cfg.past_patches(), cfg.future_patches());
    let lookbacks: Vec<&Tensor> = windows.iter().map(|w| &w.lookback).collect();
    let horizons: Vec<&Tensor> = windows.iter().map(|w| &w.horizon).collect();
    let (rec_u, rec_mask) = series_to_rows(&lookbacks, n, p, cfg.lookback_pad())?;
    let (pred_u, pred_mask) = series_to_rows(&horizons, m, p, 0)?;
    let rec_w = rec_mask.map(|v| v / (cfg.lookback * cfg.channels * batch) as f64);
    let pred_w = pred_mask.map(|v| v / (cfg.horizon * cfg.channels * batch) as f64);

    let (rec, pred) = match kind {
        LossKind::Nll => (
            nll_graph(g, nodes.recon_mu, nodes.recon_sigma, rec_u, rec_w)?,
            nll_graph(g, nodes.pred_mu, nodes.pred_sigma, pred_u, pred_w)?,
        ),
        LossKind::Mse => (
            mse_graph(g, nodes.recon_mu, rec_u, rec_w)?,
            mse_graph(g, nodes.pred_mu, pred_u, pred_w)?,
        ),
    };
    let kl = kl_graph(g, nodes.mu_z, nodes.sigma_z, batch)?;
    let data = g.add(rec, pred)?;
    let reg = g.scale(kl, beta)?;
    let total = g.add(data, reg)?;
    Ok(LossNodes { rec, pred, kl, total })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Tensor {
        Tensor::from_vec(x.to_vec())
    }

    #[test]
    fn nll_closed_cases() {
        assert_eq!(
            gaussian_nll(&v(&[1.0, 2.0]), &v(&[1.0, 2.0]), &v(&[1.0, 1.0])).unwrap(),
            0.0
        );
        assert_eq!(gaussian_nll(&v(&[2.0]), &v(&[1.0]), &v(&[1.0])).unwrap(), 0.5);
        let at_opt = gaussian_nll(&v(&[3.0]), &v(&[1.0]), &v(&[2.0])).unwrap();
        assert!((at_opt - (2f64.ln() + 0.5)).abs() < 1e-15);
        assert!((at_opt - 1.19315).abs() < 1e-5);
        assert!(matches!(
            gaussian_nll(&v(&[1.0]), &v(&[1.0]), &v(&[0.0])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn kl_closed_cases() {
        assert_eq!(kl_diag_gauss(&v(&[0.0, 0.0]), &v(&[1.0, 1.0])).unwrap(), 0.0);
        assert_eq!(kl_diag_gauss(&v(&[1.0]), &v(&[1.0])).unwrap(), 0.5);
        let k = kl_diag_gauss(&v(&[0.0]), &v(&[2.0])).unwrap();
        assert!((k - 0.5 * (3.0 - 4f64.ln())).abs() < 1e-15);
        assert!((k - 0.80685).abs() < 1e-5);
        assert!(kl_diag_gauss(&v(&[0.0]), &v(&[-1.0])).is_err());
    }

    #[test]
    fn kl_matches_numerical_integration() {
        // ∫ q log(q/p) for q = N(0, 4), p = N(0, 1) by the midpoint rule
        let (sigma, lo, hi, steps) = (2.0f64, -40.0, 40.0, 400_000);
        let h = (hi - lo) / steps as f64;
        let log_norm = |x: f64, s: f64| -(x * x) / (2.0 * s * s) - (s * (2.0 * std::f64::consts::PI).sqrt()).ln();
        let integral: f64 = (0..steps)
            .map(|i| {
                let x = lo + (i as f64 + 0.5) * h;
                let lq = log_norm(x, sigma);
                lq.exp() * (lq - log_norm(x, 1.0)) * h
            })
            .sum();
        let closed = kl_diag_gauss(&v(&[0.0]), &v(&[sigma])).unwrap();
        assert!((integral - closed).abs() < 1e-8, "{integral} vs {closed}");
    }

    #[test]
    fn attenuation_closed_cases() {
        let w = attenuation_weight(&v(&[2.0]), &v(&[1.0]), &v(&[1.0])).unwrap();
        assert_eq!(w.data(), &[-1.0]);
        let w = attenuation_weight(&v(&[2.0]), &v(&[1.0]), &v(&[10.0])).unwrap();
        assert!((w.data()[0] + 0.01).abs() < 1e-15);
    }

    #[test]
    fn optimal_sigma_cases() {
        assert_eq!(optimal_sigma(&v(&[3.0]), &v(&[1.0]), 1e-6).unwrap().data(), &[2.0]);
        assert_eq!(optimal_sigma(&v(&[1.0]), &v(&[1.0]), 1e-6).unwrap().data(), &[1e-6]);
    }

    #[test]
    fn mse_cases() {
        let w = SeriesWindow {
            lookback: Tensor::zeros(&[1, 1]),
            horizon: Tensor::zeros(&[1, 1]),
            origin_index: 0,
        };
        let one = PredictiveDistribution {
            mu: Tensor::ones(&[1, 1]),
            sigma: Tensor::ones(&[1, 1]),
        };
        assert_eq!(mse_loss(&one, &one, &w).unwrap(), 1.0);
        let zero = PredictiveDistribution {
            mu: Tensor::zeros(&[1, 1]),
            sigma: Tensor::ones(&[1, 1]),
        };
        assert_eq!(mse_loss(&zero, &zero, &w).unwrap(), 0.0);
    }

    #[test]
    fn breakdown_total() {
        let b = LossBreakdown::new(0.3, 0.7, 2.0, 0.5);
        assert!((b.total - 2.0).abs() < 1e-12);
        assert_eq!(LossBreakdown::new(0.3, 0.7, 2.0, 0.0).total, 1.0);
    }

    #[test]
    fn mse_graph_gradient_ignores_sigma() {
        let u = v(&[0.5, -1.0, 2.0]);
        let mut g = Graph::new();
        let mu = g.param("mu", v(&[0.0, 1.0, 1.0])).unwrap();
        let loss = mse_graph(&mut g, mu, u.clone(), Tensor::full(&[3], 1.0 / 3.0)).unwrap();
        let grad = g.backward(loss).unwrap();
        let expected = [-2.0 * 0.5 / 3.0, -2.0 * -2.0 / 3.0, -2.0 * 1.0 / 3.0];
        for (a, b) in grad.get("mu").unwrap().data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
