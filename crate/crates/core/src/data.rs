//! Dataset ingestion, chronological splits, sliding windows, patching and
//! the heteroscedastic synthetic generators.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, RngStream};
use crate::tensor::Tensor;

/// A multivariate series of `T` rows and `C` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: Tensor,
    pub channel_names: Vec<String>,
    pub frequency_label: String,
}

/// One look-back/horizon pair cut from a [`Dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesWindow {
    pub lookback: Tensor,
    pub horizon: Tensor,
    pub origin_index: usize,
}

/// Non-overlapping patches covering a (possibly left-padded) look-back.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    /// `[N, P, C]`
    pub patches: Tensor,
    pub patch_len: usize,
    pub count: usize,
    /// Rows of padding prepended before segmentation.
    pub pad: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    #[serde(alias = "regime")]
    RegimeSwitching,
    Periodic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub length: usize,
    pub dt: f64,
    pub seed: u64,
    pub regime_len: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            kind: SyntheticKind::Periodic,
            length: 4000,
            dt: 0.1,
            seed: 0,
            regime_len: 100,
        }
    }
}

/// How to treat the first CSV column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstColumn {
    /// Skip it when its header is `date` (case-insensitive).
    #[default]
    Auto,
    Skip,
    Keep,
}

#[derive(Debug, Clone, Default)]
pub struct CsvOptions {
    pub first_column: FirstColumn,
    pub frequency_label: String,
}

impl Dataset {
    pub fn new(values: Tensor, channel_names: Vec<String>) -> Result<Self> {
        let (_, c) = values.dims2()?;
        if channel_names.len() != c {
            return Err(Error::dim(format!(
                "{} channel names for {c} channels",
                channel_names.len()
            )));
        }
        if !values.is_finite() {
            return Err(Error::Format("dataset contains non-finite values".into()));
        }
        Ok(Self {
            values,
            channel_names,
            frequency_label: String::new(),
        })
    }

    /// `[T, C]` values.
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    /// Rows `start..end` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::Config(format!("row range {start}..{end} of {}", self.len())));
        }
        let c = self.channels();
        let data = self.values.data()[start * c..end * c].to_vec();
        Ok(Self {
            values: Tensor::new(vec![end - start, c], data)?,
            channel_names: self.channel_names.clone(),
            frequency_label: self.frequency_label.clone(),
        })
    }

    fn rows(&self, start: usize, len: usize) -> Tensor {
        let c = self.channels();
        let data = self.values.data()[start * c..(start + len) * c].to_vec();
        Tensor::new(vec![len, c], data).expect("row slice within bounds")
    }

    /// The window whose look-back starts at `origin`.
    pub fn window(&self, origin: usize, lookback: usize, horizon: usize) -> Result<SeriesWindow> {
        if origin + lookback + horizon > self.len() {
            return Err(Error::Config(format!(
                "window at {origin} with {lookback}+{horizon} exceeds {} rows",
                self.len()
            )));
        }
        Ok(SeriesWindow {
            lookback: self.rows(origin, lookback),
            horizon: self.rows(origin + lookback, horizon),
            origin_index: origin,
        })
    }

    /// Sliding windows at origins `0, stride, 2·stride, …`.
    pub fn windows(&self, lookback: usize, horizon: usize, stride: usize) -> impl Iterator<Item = SeriesWindow> + '_ {
        window_origins(self.len(), lookback, horizon, stride)
            .into_iter()
            .map(move |o| self.window(o, lookback, horizon).expect("origin in range"))
    }

    /// Copy with each channel shifted and scaled by the given statistics.
    pub fn standardized(&self, stats: &ChannelStats) -> Result<Self> {
        let c = self.channels();
        if stats.mean.len() != c {
            return Err(Error::dim("standardization channel count"));
        }
        let mut values = self.values.clone();
        for row in values.data_mut().chunks_mut(c) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - stats.mean[j]) / stats.std[j];
            }
        }
        Ok(Self { values, ..self.clone() })
    }

    /// Writes the dataset as CSV with a header of channel names.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
        w.write_record(&self.channel_names).map_err(csv_io)?;
        for row in self.values.data().chunks(self.channels()) {
            w.write_record(row.iter().map(|v| format_real(*v))).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Shortest decimal form that parses back to the same `f64`.
pub fn format_real(v: f64) -> String {
    format!("{v:?}")
}

/// Origins of every full window in a series of `len` rows.
pub fn window_origins(len: usize, lookback: usize, horizon: usize, stride: usize) -> Vec<usize> {
    let span = lookback + horizon;
    if stride == 0 || len < span {
        return Vec::new();
    }
    (0..=len - span).step_by(stride).collect()
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Population statistics of each channel; a constant channel gets unit std.
    pub fn fit(ds: &Dataset) -> Self {
        let (t, c) = (ds.len(), ds.channels());
        let mut mean = vec![0.0; c];
        for row in ds.values.data().chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        let mut var = vec![0.0; c];
        for row in ds.values.data().chunks(c) {
            for j in 0..c {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / t as f64).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }
}

/// Reads a CSV file with a header row into a [`Dataset`].
pub fn load_csv(path: &Path, options: &CsvOptions) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, options)
}

pub fn read_csv<R: Read>(reader: R, options: &CsvOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Format(format!("header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(Error::Format("missing header row".into()));
    }
    let skip = match options.first_column {
        FirstColumn::Skip => 1,
        FirstColumn::Keep => 0,
        FirstColumn::Auto => usize::from(header[0].eq_ignore_ascii_case("date")),
    };
    let names: Vec<String> = header[skip..].to_vec();
    if names.is_empty() {
        return Err(Error::Format("no numeric channels".into()));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        // 1-based file line: header is line 1
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Format(format!("row {line}: {e}")))?;
        if rec.len() != header.len() {
            return Err(Error::Format(format!(
                "row {line} has {} fields, header has {}",
                rec.len(),
                header.len()
            )));
        }
        for (j, cell) in rec.iter().enumerate().skip(skip) {
            let v: f64 = cell.parse().map_err(|_| Error::Ingestion {
                row: line,
                column: j + 1,
                message: format!("cannot parse {cell:?} as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Ingestion {
                    row: line,
                    column: j + 1,
                    message: format!("non-finite value {cell:?}"),
                });
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Format("no data rows".into()));
    }
    let values = Tensor::new(vec![rows, names.len()], data)?;
    let mut ds = Dataset::new(values, names)?;
    ds.frequency_label = options.frequency_label.clone();
    Ok(ds)
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    /// The 0.6/0.2/0.2 split used for the ETT family.
    pub fn ett() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }

    /// Segment boundaries `(train_end, val_end)` for `len` rows.
    pub fn boundaries(&self, len: usize) -> Result<(usize, usize)> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|&x| !(x > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios {r:?} must be positive and sum to 1"
            )));
        }
        let n = len as f64;
        // guard against 0.6 + 0.2 landing just below 0.8
        let train_end = (n * self.train + 1e-9).floor() as usize;
        let val_end = (n * (self.train + self.val) + 1e-9).floor() as usize;
        Ok((train_end, val_end.min(len)))
    }
}

/// Splits chronologically; every segment must hold at least `min_len` rows.
pub fn chrono_split(ds: &Dataset, ratios: SplitRatios, min_len: usize) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b) = ratios.boundaries(ds.len())?;
    let lens = [a, b - a, ds.len() - b];
    if let Some(short) = lens.iter().position(|&l| l < min_len.max(1)) {
        let which = ["train", "validation", "test"][short];
        return Err(Error::Config(format!(
            "{which} segment has {} rows, need at least {min_len}",
            lens[short]
        )));
    }
    Ok((ds.slice(0, a)?, ds.slice(a, b)?, ds.slice(b, ds.len())?))
}

/// Segments a `[L, C]` look-back into `ceil(L/P)` patches, left-padding with
/// copies of the first row when `P` does not divide `L`.
pub fn patch(lookback: &Tensor, patch_len: usize) -> Result<PatchGrid> {
    let (l, c) = lookback.dims2()?;
    if patch_len == 0 {
        return Err(Error::Config("patch length must be positive".into()));
    }
    let count = l.div_ceil(patch_len);
    let pad = count * patch_len - l;
    let mut data = Vec::with_capacity(count * patch_len * c);
    let first = lookback.row(0);
    for _ in 0..pad {
        data.extend_from_slice(first);
    }
    data.extend_from_slice(lookback.data());
    Ok(PatchGrid {
        patches: Tensor::new(vec![count, patch_len, c], data)?,
        patch_len,
        count,
        pad,
    })
}

/// Inverse of [`patch`]: concatenates patches and drops the padding.
pub fn unpatch(grid: &PatchGrid) -> Result<Tensor> {
    let c = grid.patches.shape()[2];
    let total = grid.count * grid.patch_len;
    let data = grid.patches.data()[grid.pad * c..].to_vec();
    Tensor::new(vec![total - grid.pad, c], data)
}

/// Ground-truth noise scale of a synthetic series at step `i`.
pub fn synthetic_sigma(spec: &SyntheticSpec, i: usize) -> f64 {
    match spec.kind {
        SyntheticKind::RegimeSwitching => {
            if (i / spec.regime_len) % 2 == 0 {
                0.1
            } else {
                1.0
            }
        }
        SyntheticKind::Periodic => 0.5 + 0.4 * (i as f64 * spec.dt).cos(),
    }
}

/// Generates `y_i = sin(t_i) + σ_i ε_i` with `t_i = i·dt`, returning the
/// univariate series and the σ trace.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Tensor)> {
    if !(spec.dt > 0.0) || spec.length == 0 {
        return Err(Error::Config("synthetic spec needs dt > 0 and length > 0".into()));
    }
    if spec.kind == SyntheticKind::RegimeSwitching && spec.regime_len == 0 {
        return Err(Error::Config("regime length must be positive".into()));
    }
    let mut rng = RngStream::derive(spec.seed, stream::SYNTHETIC);
    let mut values = Vec::with_capacity(spec.length);
    let mut sigmas = Vec::with_capacity(spec.length);
    for i in 0..spec.length {
        let t = i as f64 * spec.dt;
        let sigma = synthetic_sigma(spec, i);
        values.push(t.sin() + sigma * rng.normal());
        sigmas.push(sigma);
    }
    let mut ds = Dataset::new(Tensor::new(vec![spec.length, 1], values)?, vec!["value".to_string()])?;
    ds.frequency_label = "synthetic".into();
    Ok((ds, Tensor::from_vec(sigmas)))
}

/// Writes `(index, value)` rows for a univariate series.
pub fn write_synthetic_series<W: Write>(out: W, ds: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "value"]).map_err(csv_io)?;
    for (i, v) in ds.values().data().iter().enumerate() {
        w.write_record([i.to_string(), format_real(*v)]).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the single-column `sigma_true` file.
pub fn write_sigma_truth<W: Write>(out: W, sigma: &Tensor) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sigma_true"]).map_err(csv_io)?;
    for v in sigma.data() {
        w.write_record([format_real(*v)]).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `sigma_true` file written by [`write_sigma_truth`].
pub fn read_sigma_truth(path: &Path) -> Result<Tensor> {
    let ds = load_csv(
        path,
        &CsvOptions {
            first_column: FirstColumn::Keep,
            ..Default::default()
        },
    )?;
    if ds.channels() != 1 {
        return Err(Error::Format("sigma file must have one column".into()));
    }
    Ok(Tensor::from_vec(ds.values().data().to_vec()))
}
