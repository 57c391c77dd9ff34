//! Run configuration: one TOML document, with command-line flags layered on
//! top. Every command writes the resolved document into its output directory.

use std::path::{Path, PathBuf};

use lsgvae_core::data::{FirstColumn, SplitRatios, SyntheticKind, SyntheticSpec};
use lsgvae_core::{Error, EvalConfig, LossKind, ModelConfig, Result, TrainConfig};
use serde::{Deserialize, Serialize};

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: DataSource,
    /// CSV input when `source = "csv"`.
    pub path: Option<PathBuf>,
    /// Optional `sigma_true` file aligned row by row with `path`.
    pub sigma_truth: Option<PathBuf>,
    pub first_column: FirstColumn,
    /// Standardize every split with training-split channel statistics.
    pub standardize: bool,
    pub split: SplitRatios,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            sigma_truth: None,
            first_column: FirstColumn::Auto,
            standardize: false,
            split: SplitRatios::default(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub out: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    /// Writes the resolved config into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.source == DataSource::Csv && self.data.path.is_none() {
            return Err(Error::Config("data.source = \"csv\" needs data.path".into()));
        }
        self.data.split.boundaries(1)?;
        if self.eval.samples < 10 {
            return Err(Error::Config("eval.samples must be at least 10".into()));
        }
        if self.eval.stride == Some(0) {
            return Err(Error::Config("eval.stride must be positive".into()));
        }
        self.train.validate()
    }

    /// Sets every seed (synthetic data, training, evaluation) to `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.synthetic.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
    }
}

/// Command-line overrides shared by every subcommand.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV input; switches the data source to csv.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `sigma_true` file aligned with --data.
    #[arg(long)]
    pub sigma_truth: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for data generation, training and evaluation.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lookback: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub hidden_width: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, alias = "max-epochs")]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Global-norm gradient clipping threshold.
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// Sample paths per evaluation window.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Evaluation window stride (default: horizon).
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub regime_len: Option<usize>,
    /// Standardize channels with training-split statistics.
    #[arg(long)]
    pub standardize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum LossArg {
    Nll,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum KindArg {
    Regime,
    Periodic,
}

impl Overrides {
    /// Loads the base config (`--config`, else `fallback` when it exists,
    /// else defaults) and applies the flags.
    pub fn resolve(&self, fallback: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, fallback) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, Some(p)) if p.is_file() => RunConfig::load(p)?,
            _ => RunConfig::default(),
        };
        self.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if let Some(p) = &self.data {
            cfg.data.source = DataSource::Csv;
            cfg.data.path = Some(p.clone());
        }
        set(&mut cfg.data.sigma_truth, self.sigma_truth.clone().map(Some));
        set(&mut cfg.out, self.out.clone());
        set(&mut cfg.model.lookback, self.lookback);
        set(&mut cfg.model.horizon, self.horizon);
        set(&mut cfg.model.patch_len, self.patch);
        set(&mut cfg.model.latent_dim, self.latent_dim);
        set(&mut cfg.model.hidden_width, self.hidden_width);
        set(&mut cfg.train.lr, self.lr);
        set(&mut cfg.train.batch_size, self.batch);
        set(&mut cfg.train.max_epochs, self.epochs);
        set(&mut cfg.train.patience, self.patience);
        if let (Some(epochs), None) = (self.epochs, self.patience) {
            // a shorter run keeps the patience <= epochs invariant
            cfg.train.patience = cfg.train.patience.min(epochs);
        }
        set(&mut cfg.train.beta, self.beta);
        set(&mut cfg.train.grad_clip, self.grad_clip.map(Some));
        set(
            &mut cfg.train.loss,
            self.loss.map(|l| match l {
                LossArg::Nll => LossKind::Nll,
                LossArg::Mse => LossKind::Mse,
            }),
        );
        set(&mut cfg.eval.samples, self.samples);
        set(&mut cfg.eval.stride, self.stride.map(Some));
        set(
            &mut cfg.data.synthetic.kind,
            self.kind.map(|k| match k {
                KindArg::Regime => SyntheticKind::RegimeSwitching,
                KindArg::Periodic => SyntheticKind::Periodic,
            }),
        );
        set(&mut cfg.data.synthetic.length, self.length);
        set(&mut cfg.data.synthetic.dt, self.dt);
        set(&mut cfg.data.synthetic.regime_len, self.regime_len);
        if self.standardize {
            cfg.data.standardize = true;
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
