//! The location-scale Gaussian VAE.
//!
//! Pipeline for one window: instance-normalize the look-back, cut it into
//! patches, encode every (patch, channel) pair with a shared MLP into a
//! diagonal Gaussian posterior, sample with the reparameterization trick,
//! mean-pool the channel latents into an `N×D` grid, project the flattened
//! grid to `M×D` future latents in one affine map, and decode past and future
//! latents with one shared MLP whose output splits into location and scale
//! halves.
//!
//! The decoder sees each latent concatenated with a learned per-channel
//! embedding so that pooled latents can still produce channel-specific
//! outputs. Everything is built on an autodiff [`Graph`]; inference simply
//! never calls backward.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus_inv, Graph, Var};
use crate::data::{patch, PatchGrid, SeriesWindow};
use crate::error::{Error, Result};
use crate::revin::{self, InstanceStats};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Floor added to the posterior scale.
pub const LATENT_SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    pub patch_len: usize,
    pub latent_dim: usize,
    /// Hidden layers in the encoder MLP.
    pub enc_layers: usize,
    pub hidden_width: usize,
    /// Hidden layers in the decoder trunk.
    pub dec_layers: usize,
    pub embed_dim: usize,
    /// Floor added to the decoded scale.
    pub xi: f64,
    pub revin_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lookback: 96,
            horizon: 96,
            channels: 1,
            patch_len: 24,
            latent_dim: 256,
            enc_layers: 3,
            hidden_width: 256,
            dec_layers: 2,
            embed_dim: 16,
            xi: 1e-6,
            revin_eps: revin::DEFAULT_EPS,
        }
    }
}

impl ModelConfig {
    /// Number of look-back patches `N = ceil(L/P)`.
    pub fn past_patches(&self) -> usize {
        self.lookback.div_ceil(self.patch_len)
    }

    /// Number of horizon patches `M = ceil(H/P)`.
    pub fn future_patches(&self) -> usize {
        self.horizon.div_ceil(self.patch_len)
    }

    /// Padding rows prepended to the look-back.
    pub fn lookback_pad(&self) -> usize {
        self.past_patches() * self.patch_len - self.lookback
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("channels", self.channels),
            ("patch_len", self.patch_len),
            ("latent_dim", self.latent_dim),
            ("enc_layers", self.enc_layers),
            ("hidden_width", self.hidden_width),
            ("dec_layers", self.dec_layers),
            ("embed_dim", self.embed_dim),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.xi > 0.0) || !(self.revin_eps > 0.0) {
            return Err(Error::Config("xi and revin_eps must be positive".into()));
        }
        Ok(())
    }

    /// Name → shape of every parameter, in lexicographic order.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let (p, d, w, e) = (self.patch_len, self.latent_dim, self.hidden_width, self.embed_dim);
        let (n, m) = (self.past_patches(), self.future_patches());
        let mut s = BTreeMap::new();
        for i in 0..self.enc_layers {
            let fan_in = if i == 0 { p } else { w };
            s.insert(format!("enc.l{i}.w"), vec![fan_in, w]);
            s.insert(format!("enc.l{i}.b"), vec![w]);
        }
        s.insert("enc.mu.w".into(), vec![w, d]);
        s.insert("enc.mu.b".into(), vec![d]);
        s.insert("enc.sigma.w".into(), vec![w, d]);
        s.insert("enc.sigma.b".into(), vec![d]);
        s.insert("proj.w".into(), vec![n * d, m * d]);
        s.insert("proj.b".into(), vec![m * d]);
        s.insert("dec.embed".into(), vec![self.channels, e]);
        for i in 0..self.dec_layers {
            let fan_in = if i == 0 { d + e } else { w };
            s.insert(format!("dec.l{i}.w"), vec![fan_in, w]);
            s.insert(format!("dec.l{i}.b"), vec![w]);
        }
        s.insert("dec.out.w".into(), vec![w, 2 * p]);
        s.insert("dec.out.b".into(), vec![2 * p]);
        s
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().values().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Fails when two configs describe incompatible networks.
    pub fn check_compatible(&self, other: &ModelConfig) -> Result<()> {
        let pairs = [
            ("lookback", self.lookback, other.lookback),
            ("horizon", self.horizon, other.horizon),
            ("channels", self.channels, other.channels),
            ("patch_len", self.patch_len, other.patch_len),
            ("latent_dim", self.latent_dim, other.latent_dim),
            ("enc_layers", self.enc_layers, other.enc_layers),
            ("hidden_width", self.hidden_width, other.hidden_width),
            ("dec_layers", self.dec_layers, other.dec_layers),
            ("embed_dim", self.embed_dim, other.embed_dim),
        ];
        for (name, a, b) in pairs {
            if a != b {
                return Err(Error::Compatibility(format!("{name}: {a} vs {b}")));
            }
        }
        Ok(())
    }
}

/// Named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Checks names and shapes against a config.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = config.param_shapes();
        if expected.len() != self.tensors.len() {
            return Err(Error::Compatibility(format!(
                "{} parameter tensors, config needs {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Compatibility(format!(
                        "{name} has shape {:?}, config needs {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Compatibility(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }
}

/// Uniform(±1/√fan_in) weights and zero biases, except the scale half of the
/// decoder output bias which starts at softplus⁻¹(1) so the initial decoded
/// scale is close to 1 in normalized units.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = RngStream::derive(seed, crate::rng::stream::INIT);
    let mut tensors = BTreeMap::new();
    for (name, shape) in config.param_shapes() {
        let mut t = Tensor::zeros(&shape);
        if name == "dec.embed" {
            t.data_mut().iter_mut().for_each(|v| *v = rng.uniform_range(-1.0, 1.0));
        } else if name.ends_with(".w") {
            let bound = 1.0 / (shape[0] as f64).sqrt();
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.uniform_range(-bound, bound));
        } else if name == "dec.out.b" {
            let p = config.patch_len;
            let b = softplus_inv(1.0);
            t.data_mut()[p..].iter_mut().for_each(|v| *v = b);
        }
        tensors.insert(name, t);
    }
    Ok(ModelParams { tensors })
}

/// Per-step location and scale for every channel, in original units.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    /// `[T, C]`
    pub mu: Tensor,
    /// `[T, C]`, strictly positive.
    pub sigma: Tensor,
}

/// Encoder output for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    /// `[C·N, D]`, rows ordered channel-major.
    pub mu_z: Tensor,
    /// `[C·N, D]`, strictly positive.
    pub sigma_z: Tensor,
    /// `[C·N, D]` reparameterized per-channel samples `μ_z + ε⊙σ_z`.
    pub z_channels: Tensor,
    /// `[N, D]` channel-pooled latents.
    pub z_past: Tensor,
}

/// Posterior plus the projected future latents.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub posterior: Posterior,
    /// `[C·N, D]` noise used for sampling (zeros in mean mode).
    pub noise: Tensor,
    /// `[M, D]`
    pub z_future: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Sampled latent noise, used while optimizing.
    Train,
    /// Zero latent noise.
    Mean,
    /// Sampled latent noise at inference.
    Sample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub recon: PredictiveDistribution,
    pub pred: PredictiveDistribution,
    pub latent: LatentState,
    pub stats: InstanceStats,
}

/// Options for Monte-Carlo forecast paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    /// Draw fresh posterior noise per path.
    pub latent_noise: bool,
    /// Add `σ⊙ε` observation noise.
    pub obs_noise: bool,
    /// Replace the decoded scale by this constant (original units).
    pub fixed_sigma: Option<f64>,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            latent_noise: true,
            obs_noise: true,
            fixed_sigma: None,
        }
    }
}

/// Graph handles for every parameter.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Registers parameters as differentiable leaves.
    pub fn register(g: &mut Graph, params: &ModelParams) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, t) in params.iter() {
            vars.insert(name.clone(), g.param(name.clone(), t.clone())?);
        }
        Ok(Self { vars })
    }

    fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Compatibility(format!("missing parameter {name}")))
    }
}

/// Node handles produced by [`forward_batch`]. Decoder outputs use the row
/// layout `(window, channel, patch)` with one column per step in the patch.
pub struct BatchNodes {
    pub mu_z: Var,
    pub sigma_z: Var,
    pub z_channels: Var,
    pub z_past: Var,
    pub z_future: Var,
    pub recon_mu: Var,
    pub recon_sigma: Var,
    pub pred_mu: Var,
    pub pred_sigma: Var,
    pub stats: Vec<InstanceStats>,
}

fn linear(g: &mut Graph, pv: &ParamVars, x: Var, prefix: &str) -> Result<Var> {
    let w = pv.get(&format!("{prefix}.w"))?;
    let b = pv.get(&format!("{prefix}.b"))?;
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

/// Encoder input rows `(window, channel, patch)` from normalized patch grids.
fn encoder_rows(grids: &[PatchGrid], channels: usize) -> Result<Tensor> {
    let first = grids.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (n, p) = (first.count, first.patch_len);
    let mut data = Vec::with_capacity(grids.len() * channels * n * p);
    for grid in grids {
        let src = grid.patches.data();
        for c in 0..channels {
            for k in 0..n {
                for s in 0..p {
                    data.push(src[(k * p + s) * channels + c]);
                }
            }
        }
    }
    Tensor::new(vec![grids.len() * channels * n, p], data)
}

/// Broadcasts per-window, per-channel values to the decoder row layout.
fn row_constants(
    stats: &[InstanceStats],
    k: usize,
    p: usize,
    pick: impl Fn(&InstanceStats, usize) -> f64,
) -> Result<Tensor> {
    let c = stats[0].channels();
    let mut data = Vec::with_capacity(stats.len() * c * k * p);
    for s in stats {
        for ch in 0..c {
            let v = pick(s, ch);
            data.extend(std::iter::repeat_n(v, k * p));
        }
    }
    Tensor::new(vec![stats.len() * c * k, p], data)
}

/// Shared encoder: patch rows to posterior parameters and samples.
fn encode_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    pv: &ParamVars,
    rows: Tensor,
    noise: Option<&Tensor>,
) -> Result<(Var, Var, Var)> {
    let mut h = g.constant(rows)?;
    for i in 0..cfg.enc_layers {
        let a = linear(g, pv, h, &format!("enc.l{i}"))?;
        h = g.relu(a)?;
    }
    let mu = linear(g, pv, h, "enc.mu")?;
    let pre = linear(g, pv, h, "enc.sigma")?;
    let sp = g.softplus(pre)?;
    let floor = g.constant(Tensor::scalar(LATENT_SIGMA_FLOOR))?;
    let sigma = g.add(sp, floor)?;
    let z = match noise {
        Some(eps) => {
            if eps.shape() != g.value(mu).shape() {
                return Err(Error::dim(format!(
                    "latent noise {:?}, posterior {:?}",
                    eps.shape(),
                    g.value(mu).shape()
                )));
            }
            let e = g.constant(eps.clone())?;
            let spread = g.mul(e, sigma)?;
            g.add(mu, spread)?
        }
        None => mu,
    };
    Ok((mu, sigma, z))
}

/// Mean over channels of `[B·C·N, D]` latents, giving `[B, N·D]`.
fn pool_channels(g: &mut Graph, z: Var, batch: usize, channels: usize, nd: usize) -> Result<Var> {
    let r = g.reshape(z, &[batch, channels, nd])?;
    g.mean(r, &[1])
}

/// One affine map from flattened past latents `[B, N·D]` to `[B, M·D]`.
fn evolve_graph(g: &mut Graph, pv: &ParamVars, z_past: Var) -> Result<Var> {
    linear(g, pv, z_past, "proj")
}

/// Shared decoder: latents `[B·K, D]` to normalized `(μ, σ)` in row layout
/// `(window, channel, patch) × P`.
fn decode_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    pv: &ParamVars,
    z: Var,
    batch: usize,
    k: usize,
) -> Result<(Var, Var)> {
    let c = cfg.channels;
    let mut latent_idx = Vec::with_capacity(batch * c * k);
    let mut channel_idx = Vec::with_capacity(batch * c * k);
    for b in 0..batch {
        for ch in 0..c {
            for j in 0..k {
                latent_idx.push(b * k + j);
                channel_idx.push(ch);
            }
        }
    }
    let zr = g.gather_rows(z, &latent_idx)?;
    let embed = pv.get("dec.embed")?;
    let er = g.gather_rows(embed, &channel_idx)?;
    let mut h = g.concat_last(&[zr, er])?;
    for i in 0..cfg.dec_layers {
        let a = linear(g, pv, h, &format!("dec.l{i}"))?;
        h = g.relu(a)?;
    }
    let out = linear(g, pv, h, "dec.out")?;
    let (mu, pre) = g.split_last(out)?;
    let sp = g.softplus(pre)?;
    let xi = g.constant(Tensor::scalar(cfg.xi))?;
    let sigma = g.add(sp, xi)?;
    Ok((mu, sigma))
}

fn denorm_graph(g: &mut Graph, mu: Var, sigma: Var, stats: &[InstanceStats], k: usize, p: usize) -> Result<(Var, Var)> {
    let std = g.constant(row_constants(stats, k, p, |s, c| s.std.data()[c])?)?;
    let mean = g.constant(row_constants(stats, k, p, |s, c| s.mean.data()[c])?)?;
    let scaled = g.mul(mu, std)?;
    let mu = g.add(scaled, mean)?;
    let sigma = g.mul(sigma, std)?;
    Ok((mu, sigma))
}

/// Builds the full forward pass for a batch of look-backs.
///
/// `noise` is the `[B·C·N, D]` latent noise; `None` means zero noise.
pub fn forward_batch(
    g: &mut Graph,
    cfg: &ModelConfig,
    pv: &ParamVars,
    lookbacks: &[&Tensor],
    noise: Option<&Tensor>,
) -> Result<BatchNodes> {
    let batch = lookbacks.len();
    if batch == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let (c, n, m, d, p) = (
        cfg.channels,
        cfg.past_patches(),
        cfg.future_patches(),
        cfg.latent_dim,
        cfg.patch_len,
    );
    let mut stats = Vec::with_capacity(batch);
    let mut grids = Vec::with_capacity(batch);
    for x in lookbacks {
        if x.shape() != [cfg.lookback, c] {
            return Err(Error::dim(format!(
                "look-back {:?}, model expects [{}, {c}]",
                x.shape(),
                cfg.lookback
            )));
        }
        let s = revin::fit(x, cfg.revin_eps)?;
        grids.push(patch(&revin::normalize(x, &s)?, p)?);
        stats.push(s);
    }
    let rows = encoder_rows(&grids, c)?;
    let (mu_z, sigma_z, z_channels) = encode_graph(g, cfg, pv, rows, noise)?;
    let z_past = pool_channels(g, z_channels, batch, c, n * d)?;
    let z_future = evolve_graph(g, pv, z_past)?;

    let zp = g.reshape(z_past, &[batch * n, d])?;
    let (rmu, rsig) = decode_graph(g, cfg, pv, zp, batch, n)?;
    let (recon_mu, recon_sigma) = denorm_graph(g, rmu, rsig, &stats, n, p)?;

    let zf = g.reshape(z_future, &[batch * m, d])?;
    let (pmu, psig) = decode_graph(g, cfg, pv, zf, batch, m)?;
    let (pred_mu, pred_sigma) = denorm_graph(g, pmu, psig, &stats, m, p)?;

    Ok(BatchNodes {
        mu_z,
        sigma_z,
        z_channels,
        z_past,
        z_future,
        recon_mu,
        recon_sigma,
        pred_mu,
        pred_sigma,
        stats,
    })
}

/// Extracts window `b`'s `[len, C]` series from decoder row layout, skipping
/// the first `skip` steps.
pub fn rows_to_series(rows: &Tensor, b: usize, channels: usize, k: usize, skip: usize, len: usize) -> Result<Tensor> {
    let (_, p) = rows.dims2()?;
    let mut out = vec![0.0; len * channels];
    for c in 0..channels {
        let base = (b * channels + c) * k;
        for t in 0..len {
            let s = t + skip;
            out[t * channels + c] = rows.at2(base + s / p, s % p);
        }
    }
    Tensor::new(vec![len, channels], out)
}

/// Lays `[T, C]` series out in decoder row layout with `skip` leading
/// positions, returning the values and a 0/1 mask of real positions.
pub fn series_to_rows(series: &[&Tensor], k: usize, p: usize, skip: usize) -> Result<(Tensor, Tensor)> {
    let (len, c) = series[0].dims2()?;
    if skip + len > k * p {
        return Err(Error::dim("series longer than the patch grid"));
    }
    let rows = series.len() * c * k;
    let mut values = vec![0.0; rows * p];
    let mut mask = vec![0.0; rows * p];
    for (b, s) in series.iter().enumerate() {
        if s.shape() != [len, c] {
            return Err(Error::dim("series in a batch differ in shape"));
        }
        for ch in 0..c {
            let base = (b * c + ch) * k * p;
            for t in 0..len {
                values[base + skip + t] = s.at2(t, ch);
                mask[base + skip + t] = 1.0;
            }
        }
    }
    Ok((Tensor::new(vec![rows, p], values)?, Tensor::new(vec![rows, p], mask)?))
}

/// A configured network with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Shape of the latent noise consumed by one window.
    pub fn noise_shape(&self) -> [usize; 2] {
        [
            self.config.channels * self.config.past_patches(),
            self.config.latent_dim,
        ]
    }

    /// Encodes one normalized patch grid. `noise` has shape
    /// [`Model::noise_shape`]; zeros give the posterior mean.
    pub fn encode(&self, grid: &PatchGrid, noise: &Tensor) -> Result<Posterior> {
        let c = grid.patches.shape()[2];
        if c != self.config.channels
            || grid.count != self.config.past_patches()
            || grid.patch_len != self.config.patch_len
        {
            return Err(Error::dim(format!(
                "patch grid {:?} does not match the model",
                grid.patches.shape()
            )));
        }
        let mut g = Graph::new();
        let pv = ParamVars::register(&mut g, &self.params)?;
        let rows = encoder_rows(std::slice::from_ref(grid), c)?;
        let (mu, sigma, z) = encode_graph(&mut g, &self.config, &pv, rows, Some(noise))?;
        let nd = self.config.past_patches() * self.config.latent_dim;
        let pooled = pool_channels(&mut g, z, 1, c, nd)?;
        Ok(Posterior {
            mu_z: g.value(mu).clone(),
            sigma_z: g.value(sigma).clone(),
            z_channels: g.value(z).clone(),
            z_past: g
                .value(pooled)
                .reshape(&[self.config.past_patches(), self.config.latent_dim])?,
        })
    }

    /// Projects `[N, D]` past latents to `[M, D]` future latents.
    pub fn evolve(&self, z_past: &Tensor) -> Result<Tensor> {
        let (n, d) = (self.config.past_patches(), self.config.latent_dim);
        if z_past.shape() != [n, d] {
            return Err(Error::dim(format!("past latents {:?}", z_past.shape())));
        }
        let mut g = Graph::new();
        let pv = ParamVars::register(&mut g, &self.params)?;
        let z = g.constant(z_past.reshape(&[1, n * d])?)?;
        let f = evolve_graph(&mut g, &pv, z)?;
        g.value(f).reshape(&[self.config.future_patches(), d])
    }

    /// Decodes `[K, D]` latents into `K·P − skip` steps per channel.
    pub fn decode(&self, z: &Tensor, stats: &InstanceStats, skip: usize) -> Result<PredictiveDistribution> {
        let (k, d) = z.dims2()?;
        if d != self.config.latent_dim {
            return Err(Error::dim(format!("latent width {d}")));
        }
        let len = (k * self.config.patch_len)
            .checked_sub(skip)
            .filter(|&l| l > 0)
            .ok_or_else(|| Error::dim("nothing left after skipping"))?;
        let mut g = Graph::new();
        let pv = ParamVars::register(&mut g, &self.params)?;
        let zv = g.constant(z.clone())?;
        let (mu, sigma) = decode_graph(&mut g, &self.config, &pv, zv, 1, k)?;
        let (mu, sigma) = denorm_graph(&mut g, mu, sigma, std::slice::from_ref(stats), k, self.config.patch_len)?;
        let c = self.config.channels;
        Ok(PredictiveDistribution {
            mu: rows_to_series(g.value(mu), 0, c, k, skip, len)?,
            sigma: rows_to_series(g.value(sigma), 0, c, k, skip, len)?,
        })
    }

    /// Full forward pass for one window. The horizon of `window` is never
    /// read.
    pub fn forward(&self, window: &SeriesWindow, mode: Mode, rng: &mut RngStream) -> Result<ForwardOutput> {
        let noise = match mode {
            Mode::Mean => Tensor::zeros(&self.noise_shape()),
            Mode::Train | Mode::Sample => rng.normal_tensor(&self.noise_shape()),
        };
        self.forward_with_noise(&window.lookback, &noise)
    }

    /// Forward pass for one look-back with explicit latent noise.
    pub fn forward_with_noise(&self, lookback: &Tensor, noise: &Tensor) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let mut g = Graph::new();
        let pv = ParamVars::register(&mut g, &self.params)?;
        let nodes = forward_batch(&mut g, cfg, &pv, &[lookback], Some(noise))?;
        let (c, n, m) = (cfg.channels, cfg.past_patches(), cfg.future_patches());
        let pad = cfg.lookback_pad();
        let recon = PredictiveDistribution {
            mu: rows_to_series(g.value(nodes.recon_mu), 0, c, n, pad, cfg.lookback)?,
            sigma: rows_to_series(g.value(nodes.recon_sigma), 0, c, n, pad, cfg.lookback)?,
        };
        let pred = PredictiveDistribution {
            mu: rows_to_series(g.value(nodes.pred_mu), 0, c, m, 0, cfg.horizon)?,
            sigma: rows_to_series(g.value(nodes.pred_sigma), 0, c, m, 0, cfg.horizon)?,
        };
        let d = cfg.latent_dim;
        let latent = LatentState {
            posterior: Posterior {
                mu_z: g.value(nodes.mu_z).clone(),
                sigma_z: g.value(nodes.sigma_z).clone(),
                z_channels: g.value(nodes.z_channels).clone(),
                z_past: g.value(nodes.z_past).reshape(&[n, d])?,
            },
            noise: noise.clone(),
            z_future: g.value(nodes.z_future).reshape(&[m, d])?,
        };
        let stats = nodes.stats.into_iter().next().expect("one window");
        Ok(ForwardOutput {
            recon,
            pred,
            latent,
            stats,
        })
    }

    /// Forecast distributions for a batch of look-backs in one pass.
    /// `noises` holds one latent-noise tensor per look-back; `None` gives the
    /// posterior mean.
    pub fn predict_batch(
        &self,
        lookbacks: &[&Tensor],
        noises: Option<&[Tensor]>,
    ) -> Result<Vec<PredictiveDistribution>> {
        let cfg = &self.config;
        let s = lookbacks.len();
        let noise = match noises {
            Some(noises) => {
                if noises.len() != s {
                    return Err(Error::dim("one noise tensor per look-back"));
                }
                let mut stacked = Vec::with_capacity(s * cfg.channels * cfg.past_patches() * cfg.latent_dim);
                for e in noises {
                    if e.shape() != self.noise_shape() {
                        return Err(Error::dim("latent noise shape"));
                    }
                    stacked.extend_from_slice(e.data());
                }
                Some(Tensor::new(
                    vec![s * cfg.channels * cfg.past_patches(), cfg.latent_dim],
                    stacked,
                )?)
            }
            None => None,
        };
        let mut g = Graph::new();
        let pv = ParamVars::register(&mut g, &self.params)?;
        let nodes = forward_batch(&mut g, cfg, &pv, lookbacks, noise.as_ref())?;
        let (c, m) = (cfg.channels, cfg.future_patches());
        (0..s)
            .map(|b| {
                Ok(PredictiveDistribution {
                    mu: rows_to_series(g.value(nodes.pred_mu), b, c, m, 0, cfg.horizon)?,
                    sigma: rows_to_series(g.value(nodes.pred_sigma), b, c, m, 0, cfg.horizon)?,
                })
            })
            .collect()
    }

    /// `S` forecast paths `[S, H, C]` with posterior latent noise and, when
    /// `with_obs_noise`, Gaussian observation noise.
    pub fn sample_paths(
        &self,
        window: &SeriesWindow,
        s: usize,
        rng: &mut RngStream,
        with_obs_noise: bool,
    ) -> Result<Tensor> {
        self.sample_paths_with(
            &window.lookback,
            s,
            rng,
            &SampleOptions {
                obs_noise: with_obs_noise,
                ..Default::default()
            },
        )
    }

    pub fn sample_paths_with(
        &self,
        lookback: &Tensor,
        s: usize,
        rng: &mut RngStream,
        opts: &SampleOptions,
    ) -> Result<Tensor> {
        if s == 0 {
            return Err(Error::Contract("need at least one sample path".into()));
        }
        let noises: Vec<Tensor> = (0..s)
            .map(|_| {
                if opts.latent_noise {
                    rng.normal_tensor(&self.noise_shape())
                } else {
                    Tensor::zeros(&self.noise_shape())
                }
            })
            .collect();
        let lookbacks = vec![lookback; s];
        let dists = self.predict_batch(&lookbacks, Some(&noises))?;
        let (h, c) = (self.config.horizon, self.config.channels);
        let mut out = Vec::with_capacity(s * h * c);
        for dist in &dists {
            for (&mu, &sigma) in dist.mu.data().iter().zip(dist.sigma.data()) {
                let sigma = opts.fixed_sigma.unwrap_or(sigma);
                out.push(if opts.obs_noise { mu + sigma * rng.normal() } else { mu });
            }
        }
        Tensor::new(vec![s, h, c], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            lookback: 36,
            horizon: 20,
            channels: 2,
            patch_len: 12,
            latent_dim: 8,
            enc_layers: 2,
            hidden_width: 16,
            dec_layers: 2,
            embed_dim: 4,
            ..Default::default()
        }
    }

    fn window(cfg: &ModelConfig, seed: u64) -> SeriesWindow {
        let mut rng = RngStream::new(seed);
        let lookback = rng.normal_tensor(&[cfg.lookback, cfg.channels]);
        let horizon = rng.normal_tensor(&[cfg.horizon, cfg.channels]);
        SeriesWindow {
            lookback,
            horizon,
            origin_index: 0,
        }
    }

    #[test]
    fn default_config_matches_documented_count() {
        let cfg = ModelConfig::default();
        assert_eq!((cfg.patch_len, cfg.latent_dim, cfg.enc_layers), (24, 256, 3));
        // encoder 24·256+256 + 2(256²+256) + 2(256²+256)
        let enc = 24 * 256 + 256 + 2 * (256 * 256 + 256) + 2 * (256 * 256 + 256);
        // projection (4·256)² + 4·256
        let proj = 1024 * 1024 + 1024;
        // embedding, trunk (256+16)·256+256, 256²+256, output 256·48+48
        let dec = 16 + (272 * 256 + 256) + (256 * 256 + 256) + (256 * 48 + 48);
        assert_eq!(cfg.param_count(), enc + proj + dec);
        assert_eq!(cfg.param_count(), 1_467_200);
    }

    #[test]
    fn projection_block_shape() {
        let cfg = ModelConfig {
            latent_dim: 256,
            ..Default::default()
        };
        assert_eq!(cfg.param_shapes()["proj.w"], vec![1024, 1024]);
    }

    #[test]
    fn init_is_seeded_and_sets_scale_bias() {
        let a = init_params(&small(), 3).unwrap();
        assert_eq!(a, init_params(&small(), 3).unwrap());
        assert_ne!(a, init_params(&small(), 4).unwrap());
        let b = a.get("dec.out.b").unwrap();
        assert_eq!(b.data()[0], 0.0);
        assert!((b.data()[12] - 0.5413).abs() < 1e-4);
    }

    #[test]
    fn zero_noise_gives_posterior_mean() {
        let cfg = small();
        let model = Model::init(cfg.clone(), 1).unwrap();
        let w = window(&cfg, 2);
        let s = revin::fit(&w.lookback, cfg.revin_eps).unwrap();
        let grid = patch(&revin::normalize(&w.lookback, &s).unwrap(), cfg.patch_len).unwrap();
        let post = model.encode(&grid, &Tensor::zeros(&model.noise_shape())).unwrap();
        assert_eq!(post.z_channels, post.mu_z);
        assert!(post.sigma_z.data().iter().all(|&v| v > 0.0));
        let noisy = model
            .encode(&grid, &RngStream::new(5).normal_tensor(&model.noise_shape()))
            .unwrap();
        assert_eq!(noisy.mu_z, post.mu_z);
        assert_ne!(noisy.z_channels, post.z_channels);
    }

    #[test]
    fn identical_channels_get_identical_latents() {
        let cfg = small();
        let model = Model::init(cfg.clone(), 1).unwrap();
        let mut rng = RngStream::new(8);
        let col = rng.normal_tensor(&[cfg.lookback]);
        let mut data = Vec::new();
        for v in col.data() {
            data.extend([*v, *v]);
        }
        let x = Tensor::new(vec![cfg.lookback, 2], data).unwrap();
        let grid = patch(&x, cfg.patch_len).unwrap();
        let post = model.encode(&grid, &Tensor::zeros(&model.noise_shape())).unwrap();
        let n = cfg.past_patches() * cfg.latent_dim;
        assert_eq!(post.mu_z.data()[..n], post.mu_z.data()[n..]);
    }

    #[test]
    fn evolve_is_affine() {
        let cfg = small();
        let mut model = Model::init(cfg.clone(), 1).unwrap();
        let shape = [cfg.past_patches(), cfg.latent_dim];
        let zero = model.evolve(&Tensor::zeros(&shape)).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));

        model
            .params
            .get_mut("proj.b")
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.25);
        let mut rng = RngStream::new(4);
        let a = rng.normal_tensor(&shape);
        let b = rng.normal_tensor(&shape);
        let ab = a.zip_with(&b, |x, y| x + y).unwrap();
        let lhs = model.evolve(&ab).unwrap();
        let ea = model.evolve(&a).unwrap();
        let eb = model.evolve(&b).unwrap();
        for i in 0..lhs.numel() {
            let rhs = ea.data()[i] + eb.data()[i] - 0.25;
            assert!((lhs.data()[i] - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_is_shared_between_spans() {
        let cfg = ModelConfig { horizon: 36, ..small() };
        let model = Model::init(cfg.clone(), 1).unwrap();
        let stats = InstanceStats::identity(cfg.channels);
        let z = RngStream::new(2).normal_tensor(&[3, cfg.latent_dim]);
        let a = model.decode(&z, &stats, 0).unwrap();
        let b = model.decode(&z, &stats, 0).unwrap();
        assert_eq!(a, b);
        assert!(a.sigma.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn forward_shapes_and_padding() {
        let cfg = small();
        let model = Model::init(cfg.clone(), 1).unwrap();
        let w = window(&cfg, 3);
        let out = model.forward(&w, Mode::Train, &mut RngStream::new(1)).unwrap();
        assert_eq!(out.recon.mu.shape(), &[36, 2]);
        assert_eq!(out.recon.sigma.shape(), &[36, 2]);
        assert_eq!(out.pred.mu.shape(), &[20, 2]);
        assert_eq!(out.latent.z_future.shape(), &[2, 8]);

        let padded = ModelConfig { lookback: 30, ..cfg };
        let model = Model::init(padded.clone(), 1).unwrap();
        let w = window(&padded, 3);
        let out = model.forward(&w, Mode::Mean, &mut RngStream::new(1)).unwrap();
        assert_eq!(out.recon.mu.shape(), &[30, 2]);
    }

    #[test]
    fn mean_mode_is_deterministic() {
        let cfg = small();
        let model = Model::init(cfg.clone(), 1).unwrap();
        let w = window(&cfg, 3);
        let a = model.forward(&w, Mode::Mean, &mut RngStream::new(1)).unwrap();
        let b = model.forward(&w, Mode::Mean, &mut RngStream::new(99)).unwrap();
        assert_eq!(a, b);
        let c = model.forward(&w, Mode::Train, &mut RngStream::new(7)).unwrap();
        let d = model.forward(&w, Mode::Train, &mut RngStream::new(7)).unwrap();
        assert_eq!(c, d);
        assert_ne!(a.pred, c.pred);
    }

    #[test]
    fn single_deterministic_path_equals_mean_forecast() {
        let cfg = small();
        let model = Model::init(cfg.clone(), 1).unwrap();
        let w = window(&cfg, 3);
        let mean = model.forward(&w, Mode::Mean, &mut RngStream::new(0)).unwrap();
        let opts = SampleOptions {
            latent_noise: false,
            obs_noise: false,
            fixed_sigma: None,
        };
        let paths = model
            .sample_paths_with(&w.lookback, 1, &mut RngStream::new(0), &opts)
            .unwrap();
        assert_eq!(paths.data(), mean.pred.mu.data());
    }

    #[test]
    fn vanishing_scale_collapses_paths() {
        let cfg = small();
        let model = Model::init(cfg.clone(), 1).unwrap();
        let w = window(&cfg, 3);
        let opts = SampleOptions {
            latent_noise: false,
            obs_noise: true,
            fixed_sigma: Some(1e-300),
        };
        let paths = model
            .sample_paths_with(&w.lookback, 4, &mut RngStream::new(0), &opts)
            .unwrap();
        let mean = model.forward(&w, Mode::Mean, &mut RngStream::new(0)).unwrap();
        let hc = cfg.horizon * cfg.channels;
        for s in 0..4 {
            assert_eq!(&paths.data()[s * hc..(s + 1) * hc], mean.pred.mu.data());
        }
    }

    #[test]
    fn rejects_wrong_window_shape() {
        let cfg = small();
        let model = Model::init(cfg.clone(), 1).unwrap();
        let bad = SeriesWindow {
            lookback: Tensor::zeros(&[10, 2]),
            horizon: Tensor::zeros(&[20, 2]),
            origin_index: 0,
        };
        assert!(matches!(
            model.forward(&bad, Mode::Mean, &mut RngStream::new(0)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn row_layout_round_trips() {
        let mut rng = RngStream::new(1);
        let a = rng.normal_tensor(&[30, 2]);
        let b = rng.normal_tensor(&[30, 2]);
        let (rows, mask) = series_to_rows(&[&a, &b], 3, 12, 6).unwrap();
        assert_eq!(rows.shape(), &[12, 12]);
        assert_eq!(mask.sum(), 120.0);
        assert_eq!(rows_to_series(&rows, 1, 2, 3, 6, 30).unwrap(), b);
    }
}
