//! The five subcommands. Each takes a resolved [`RunConfig`], writes its
//! artifacts under `config.out`, and returns what it wrote.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use lsgvae_core::data::{
    self, chrono_split, format_real, gen_synthetic, load_csv, read_sigma_truth, ChannelStats, CsvOptions, FirstColumn,
};
use lsgvae_core::metrics::{evaluate, prediction_rmse, quantile_sorted, scale_trace, volatility_recovery};
use lsgvae_core::training::{train_from, EpochRecord};
use lsgvae_core::{
    Checkpoint, Dataset, Error, EvalResult, LossKind, Model, Result, RngStream, SampleOptions, TrainReport,
};
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, RunConfig};

pub const SERIES_FILE: &str = "series.csv";
pub const SIGMA_FILE: &str = "sigma_true.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const FORECAST_FILE: &str = "forecast.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

pub const NLL_VARIANT: &str = "lsg-nll";
pub const MSE_VARIANT: &str = "vanilla-mse";

/// Quantile levels written by `forecast`.
pub const FORECAST_LEVELS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// A dataset split into chronological train/validation/test segments.
#[derive(Debug, Clone)]
pub struct ResolvedData {
    pub full: Dataset,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Row of `full` where the test segment begins.
    pub test_offset: usize,
    /// Ground-truth noise scale for every row of `full`, when known.
    pub sigma_truth: Option<Vec<f64>>,
}

fn csv_options(cfg: &RunConfig, path: &Path) -> Result<CsvOptions> {
    let mut first_column = cfg.data.first_column;
    if first_column == FirstColumn::Auto {
        // series written by `synth` carry a leading index column
        let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Format(format!("{}: {other:?}", path.display())),
        })?;
        let header = rdr
            .headers()
            .map_err(|e| Error::Format(format!("{}: header: {e}", path.display())))?;
        if header.get(0).is_some_and(|h| h.trim().eq_ignore_ascii_case("index")) {
            first_column = FirstColumn::Skip;
        }
    }
    Ok(CsvOptions {
        first_column,
        frequency_label: String::new(),
    })
}

/// Loads or generates the configured series and splits it.
pub fn resolve_data(cfg: &RunConfig) -> Result<ResolvedData> {
    let (full, sigma_truth) = match cfg.data.source {
        DataSource::Synthetic => {
            let (ds, sigma) = gen_synthetic(&cfg.data.synthetic)?;
            (ds, Some(sigma.into_data()))
        }
        DataSource::Csv => {
            let path = cfg
                .data
                .path
                .as_deref()
                .ok_or_else(|| Error::Config("no data path".into()))?;
            let ds = csv_options(cfg, path)
                .and_then(|opts| load_csv(path, &opts))
                .map_err(|e| match e {
                    Error::Io(io) => Error::Config(format!("cannot read {}: {io}", path.display())),
                    other => other,
                })?;
            let sigma = match &cfg.data.sigma_truth {
                Some(p) => {
                    let s = read_sigma_truth(p)?.into_data();
                    if s.len() != ds.len() {
                        return Err(Error::Format(format!(
                            "{} has {} rows, data has {}",
                            p.display(),
                            s.len(),
                            ds.len()
                        )));
                    }
                    Some(s)
                }
                None => None,
            };
            (ds, sigma)
        }
    };
    let min_len = cfg.model.lookback + cfg.model.horizon;
    let (mut train, mut val, mut test) = chrono_split(&full, cfg.data.split, min_len)?;
    let mut full = full;
    if cfg.data.standardize {
        let stats = ChannelStats::fit(&train);
        full = full.standardized(&stats)?;
        train = train.standardized(&stats)?;
        val = val.standardized(&stats)?;
        test = test.standardized(&stats)?;
    }
    let test_offset = full.len() - test.len();
    Ok(ResolvedData {
        full,
        train,
        val,
        test,
        test_offset,
        sigma_truth,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutputs {
    pub series: PathBuf,
    pub sigma: PathBuf,
    pub config: PathBuf,
}

/// Writes a synthetic series, its σ trace and the config.
pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthOutputs> {
    let (ds, sigma) = gen_synthetic(&cfg.data.synthetic)?;
    std::fs::create_dir_all(&cfg.out)?;
    let series = cfg.out.join(SERIES_FILE);
    let sigma_path = cfg.out.join(SIGMA_FILE);
    data::write_synthetic_series(BufWriter::new(File::create(&series)?), &ds)?;
    data::write_sigma_truth(BufWriter::new(File::create(&sigma_path)?), &sigma)?;
    let config = cfg.write_to(&cfg.out)?;
    log::info!("wrote {} rows to {}", ds.len(), series.display());
    Ok(SynthOutputs {
        series,
        sigma: sigma_path,
        config,
    })
}

#[derive(Debug, Clone, Serialize)]
struct LogLine {
    epoch: usize,
    rec_nll: f64,
    pred_nll: f64,
    kl: f64,
    total: f64,
    val_total: f64,
    elapsed_s: f64,
}

impl From<&EpochRecord> for LogLine {
    fn from(r: &EpochRecord) -> Self {
        Self {
            epoch: r.epoch,
            rec_nll: r.train.rec_nll,
            pred_nll: r.train.pred_nll,
            kl: r.train.kl,
            total: r.train.total,
            val_total: r.val.total,
            elapsed_s: r.elapsed_s,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
    pub checkpoint_path: PathBuf,
}

/// Trains on the configured data and writes the best checkpoint, a JSON-lines
/// log, the report and the resolved config. MSE-trained models also store
/// the RMSE of their training residuals as a constant predictive scale.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let data = resolve_data(cfg)?;
    let mut cfg = cfg.clone();
    cfg.model.channels = data.full.channels();
    std::fs::create_dir_all(&cfg.out)?;
    cfg.write_to(&cfg.out)?;

    let mut log_file = BufWriter::new(File::create(cfg.out.join(TRAIN_LOG_FILE))?);
    let mut log_error = None;
    let model = Model::init(cfg.model.clone(), cfg.train.seed)?;
    let (model, report) = train_from(model, &cfg.train, &data.train, &data.val, |rec| {
        let line = serde_json::to_string(&LogLine::from(rec)).expect("log line serializes");
        if let Err(e) = writeln!(log_file, "{line}") {
            log_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_error {
        return Err(e.into());
    }
    log_file.flush()?;

    let fixed_sigma = match cfg.train.loss {
        LossKind::Mse => Some(prediction_rmse(&model, &data.train, 1)?),
        LossKind::Nll => None,
    };
    let checkpoint = Checkpoint {
        model,
        train_config: Some(cfg.train.clone()),
        fixed_sigma,
    };
    let checkpoint_path = cfg.out.join(CHECKPOINT_FILE);
    checkpoint.save(&checkpoint_path)?;
    write_json(&cfg.out.join(TRAIN_REPORT_FILE), &report)?;
    log::info!(
        "best epoch {} of {} (val {:.5})",
        report.best_epoch,
        report.epochs.len(),
        report.best_val().total
    );
    Ok(TrainOutcome {
        checkpoint,
        report,
        checkpoint_path,
    })
}

/// Loads a checkpoint and checks it against the data and configured model.
pub fn load_compatible(cfg: &RunConfig, data: &ResolvedData, path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read checkpoint {}: {io}", path.display())),
        other => other,
    })?;
    if ck.model.config.channels != data.full.channels() {
        return Err(Error::Compatibility(format!(
            "checkpoint has {} channels, data has {}",
            ck.model.config.channels,
            data.full.channels()
        )));
    }
    let mut expected = cfg.model.clone();
    expected.channels = data.full.channels();
    ck.model.config.check_compatible(&expected)?;
    Ok(ck)
}

/// Evaluates a checkpoint on the test segment and writes the report. When
/// the σ trace is known and the model has a scale head, the report also
/// carries the volatility-recovery correlation.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalResult> {
    let data = resolve_data(cfg)?;
    let ck = load_compatible(cfg, &data, checkpoint)?;
    let mut result = evaluate(&ck.model, &data.test, &cfg.eval, ck.fixed_sigma)?;
    if let (Some(truth), None) = (&data.sigma_truth, ck.fixed_sigma) {
        let stride = cfg.eval.stride.unwrap_or(ck.model.config.horizon);
        let (sigma_hat, index) = scale_trace(&ck.model, &data.test, stride)?;
        let sigma_true: Vec<f64> = index.iter().map(|i| truth[data.test_offset + i]).collect();
        result.volatility_rho = Some(volatility_recovery(&sigma_hat, &sigma_true)?);
    }
    std::fs::create_dir_all(&cfg.out)?;
    cfg.write_to(&cfg.out)?;
    write_json(&cfg.out.join(EVAL_REPORT_FILE), &result)?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRow {
    pub t: usize,
    pub truth: Option<f64>,
    pub mu: f64,
    pub sigma: f64,
    /// Values at [`FORECAST_LEVELS`].
    pub quantiles: [f64; 5],
}

/// Forecasts channel by channel from row `origin` of the series (the first
/// forecast step), writing one CSV row per step and channel. Without an
/// origin the forecast starts at the test segment.
pub fn cmd_forecast(cfg: &RunConfig, checkpoint: &Path, origin: Option<usize>) -> Result<Vec<Vec<ForecastRow>>> {
    let data = resolve_data(cfg)?;
    let ck = load_compatible(cfg, &data, checkpoint)?;
    let (l, h, c) = (
        ck.model.config.lookback,
        ck.model.config.horizon,
        ck.model.config.channels,
    );
    let origin = origin.unwrap_or(data.test_offset);
    if origin < l || origin > data.full.len() {
        return Err(Error::Config(format!(
            "origin {origin} needs {l} rows of history within {} rows",
            data.full.len()
        )));
    }
    let lookback = data.full.slice(origin - l, origin)?.values().clone();
    let dist = &ck.model.predict_batch(&[&lookback], None)?[0];
    let opts = SampleOptions {
        latent_noise: cfg.eval.latent_noise,
        obs_noise: cfg.eval.obs_noise,
        fixed_sigma: ck.fixed_sigma,
    };
    let s = cfg.eval.samples;
    let mut rng = RngStream::derive(cfg.eval.seed, origin as u64);
    let paths = ck.model.sample_paths_with(&lookback, s, &mut rng, &opts)?;

    let mut rows = vec![Vec::with_capacity(h); c];
    for t in 0..h {
        for (ch, out) in rows.iter_mut().enumerate() {
            let mut v: Vec<f64> = (0..s).map(|i| paths.data()[(i * h + t) * c + ch]).collect();
            v.sort_by(f64::total_cmp);
            let row = origin + t;
            out.push(ForecastRow {
                t: row,
                truth: (row < data.full.len()).then(|| data.full.values().at2(row, ch)),
                mu: dist.mu.at2(t, ch),
                sigma: ck.fixed_sigma.unwrap_or(dist.sigma.at2(t, ch)),
                quantiles: FORECAST_LEVELS.map(|q| quantile_sorted(&v, q)),
            });
        }
    }

    std::fs::create_dir_all(&cfg.out)?;
    cfg.write_to(&cfg.out)?;
    let mut w = csv::Writer::from_path(cfg.out.join(FORECAST_FILE)).map_err(csv_err)?;
    let mut header = vec!["t", "truth", "mu", "sigma", "q05", "q25", "q50", "q75", "q95"];
    if c > 1 {
        header.insert(1, "channel");
    }
    w.write_record(&header).map_err(csv_err)?;
    for (ch, channel_rows) in rows.iter().enumerate() {
        for r in channel_rows {
            let mut rec = vec![r.t.to_string()];
            if c > 1 {
                rec.push(data.full.channel_names[ch].clone());
            }
            rec.push(r.truth.map(format_real).unwrap_or_default());
            rec.push(format_real(r.mu));
            rec.push(format_real(r.sigma));
            rec.extend(r.quantiles.iter().map(|&q| format_real(q)));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub crps: f64,
    pub nmae: f64,
    pub qice: f64,
}

/// Trains and evaluates the NLL model and the MSE variant under identical
/// seeds and data, writing each run to its own subdirectory and a
/// side-by-side table.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(&cfg.out)?;
    cfg.write_to(&cfg.out)?;
    let mut rows = Vec::new();
    for (variant, loss) in [(NLL_VARIANT, LossKind::Nll), (MSE_VARIANT, LossKind::Mse)] {
        let mut run = cfg.clone();
        run.train.loss = loss;
        run.out = cfg.out.join(variant);
        let trained = cmd_train(&run)?;
        let r = cmd_eval(&run, &trained.checkpoint_path)?;
        log::info!("{variant}: crps {:.5} nmae {:.5} qice {:.5}", r.crps, r.nmae, r.qice);
        rows.push(AblationRow {
            variant: variant.to_string(),
            crps: r.crps,
            nmae: r.nmae,
            qice: r.qice,
        });
    }
    let mut w = csv::Writer::from_path(cfg.out.join(ABLATION_FILE)).map_err(csv_err)?;
    w.write_record(["variant", "crps", "nmae", "qice"]).map_err(csv_err)?;
    for r in &rows {
        w.write_record([
            r.variant.clone(),
            format_real(r.crps),
            format_real(r.nmae),
            format_real(r.qice),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(rows)
}
