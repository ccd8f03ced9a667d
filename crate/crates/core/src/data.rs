//! Sensor tables, sliding windows, chronological splits, scaling and the
//! synthetic drifting-correlation generator.

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use chrono::{NaiveDateTime, Timelike};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::RoadGraph;
use crate::kv::KeyValues;
use crate::tensor::Tensor;

const TIMESTAMP_FORMATS: [&str; 4] = [
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M",
];

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| {
            chrono::DateTime::parse_from_rfc3339(s)
                .ok()
                .map(|d| d.naive_local())
        })
}

pub fn format_timestamp(t: &NaiveDateTime) -> String {
    t.format("%Y-%m-%dT%H:%M:%S").to_string()
}

/// Fixed-frequency sensor readings; missing readings are stored as 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalTable {
    timestamps: Vec<NaiveDateTime>,
    names: Vec<String>,
    /// `S × N`, row-major.
    values: Vec<f64>,
    frequency_minutes: u32,
    missing: usize,
}

impl SignalTable {
    pub fn new(
        timestamps: Vec<NaiveDateTime>,
        names: Vec<String>,
        values: Vec<f64>,
        frequency_minutes: u32,
    ) -> Result<Self> {
        if names.is_empty() || timestamps.is_empty() {
            return Err(Error::DegenerateData(
                "signal table needs at least one row and column".into(),
            ));
        }
        if values.len() != timestamps.len() * names.len() {
            return Err(Error::DegenerateData(format!(
                "{} values for {} rows x {} sensors",
                values.len(),
                timestamps.len(),
                names.len()
            )));
        }
        let step = chrono::Duration::minutes(i64::from(frequency_minutes));
        if let Some(i) = (1..timestamps.len()).find(|&i| timestamps[i] - timestamps[i - 1] != step)
        {
            return Err(Error::DegenerateData(format!(
                "timestamp {} breaks the {frequency_minutes}-minute spacing",
                format_timestamp(&timestamps[i])
            )));
        }
        Ok(SignalTable {
            timestamps,
            names,
            values,
            frequency_minutes,
            missing: 0,
        })
    }

    /// Reads `timestamp,<name1>,...` with ISO-8601 timestamps. Empty cells
    /// become the 0 missing-value sentinel.
    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(true)
            .from_path(path)
            .map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                other => Error::parse(path, 1, format!("{other:?}")),
            })?;
        let header = reader
            .headers()
            .map_err(|e| Error::parse(path, 1, e.to_string()))?
            .clone();
        if header.len() < 2 || header.get(0) != Some("timestamp") {
            return Err(Error::parse(
                path,
                1,
                "header must be `timestamp,<sensor>,...`",
            ));
        }
        let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let n = names.len();
        let mut timestamps = Vec::new();
        let mut values = Vec::new();
        let mut missing = 0;
        for (row, record) in reader.records().enumerate() {
            let line = row + 2;
            let record = record.map_err(|e| Error::parse(path, line, e.to_string()))?;
            if record.len() != n + 1 {
                return Err(Error::parse(
                    path,
                    line,
                    format!("expected {} fields, got {}", n + 1, record.len()),
                ));
            }
            let ts = parse_timestamp(&record[0]).ok_or_else(|| {
                Error::parse(path, line, format!("bad timestamp `{}`", &record[0]))
            })?;
            if let Some(prev) = timestamps.last() {
                if ts <= *prev {
                    return Err(Error::parse(
                        path,
                        line,
                        "timestamps must be strictly increasing",
                    ));
                }
            }
            timestamps.push(ts);
            for cell in record.iter().skip(1) {
                if cell.is_empty() {
                    missing += 1;
                    values.push(0.0);
                } else {
                    let v: f64 = cell
                        .parse()
                        .map_err(|_| Error::parse(path, line, format!("bad value `{cell}`")))?;
                    values.push(v);
                }
            }
        }
        if timestamps.is_empty() {
            return Err(Error::parse(path, 2, "no data rows"));
        }
        let frequency_minutes = if timestamps.len() > 1 {
            let step = timestamps[1] - timestamps[0];
            for i in 2..timestamps.len() {
                if timestamps[i] - timestamps[i - 1] != step {
                    return Err(Error::parse(path, i + 2, "inconsistent timestamp spacing"));
                }
            }
            u32::try_from(step.num_minutes())
                .ok()
                .filter(|&m| m > 0 && step.num_seconds() % 60 == 0)
                .ok_or_else(|| Error::parse(path, 3, "spacing must be a whole number of minutes"))?
        } else {
            5
        };
        let mut table = SignalTable::new(timestamps, names, values, frequency_minutes)?;
        table.missing = missing;
        Ok(table)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("timestamp");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (s, ts) in self.timestamps.iter().enumerate() {
            out.push_str(&format_timestamp(ts));
            for v in self.row(s) {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn num_steps(&self) -> usize {
        self.timestamps.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn frequency_minutes(&self) -> u32 {
        self.frequency_minutes
    }

    /// Number of empty cells seen while loading.
    pub fn missing_count(&self) -> usize {
        self.missing
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, step: usize) -> &[f64] {
        let n = self.names.len();
        &self.values[step * n..(step + 1) * n]
    }

    pub fn value(&self, step: usize, node: usize) -> f64 {
        self.values[step * self.names.len() + node]
    }

    pub fn steps_per_day(&self) -> usize {
        (24 * 60 / self.frequency_minutes) as usize
    }
}

/// Z-score transform of the primary channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scaler {
    pub mean: f64,
    pub std: f64,
}

impl Scaler {
    /// Population mean/std of `values`, skipping zeros when `mask_zero`.
    pub fn fit(values: &[f64], mask_zero: bool) -> Result<Self> {
        let kept = || {
            values
                .iter()
                .copied()
                .filter(move |&v| !(mask_zero && v == 0.0))
        };
        let count = kept().count();
        if count == 0 {
            return Err(Error::DegenerateData(
                "no observed entries to fit the scaler".into(),
            ));
        }
        let mean = kept().sum::<f64>() / count as f64;
        let var = kept().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
        let std = var.sqrt();
        if !(std > 0.0) {
            return Err(Error::DegenerateData(
                "training data has zero variance".into(),
            ));
        }
        Ok(Scaler { mean, std })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    pub fn invert_tensor(&self, t: &Tensor) -> Tensor {
        t.map(|z| self.invert(z))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSpec {
    Fractions {
        train: f64,
        val: f64,
        test: f64,
    },
    Days {
        train: usize,
        val: usize,
        test: usize,
    },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fractions {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitSpec::Fractions { train, val, test } => write!(f, "{train},{val},{test}"),
            SplitSpec::Days { train, val, test } => write!(f, "days:{train},{val},{test}"),
        }
    }
}

impl FromStr for SplitSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "invalid split `{s}` (use `0.7,0.1,0.2` or `days:21,2,7`)"
            ))
        };
        if let Some(rest) = s.trim().strip_prefix("days:") {
            let v: Vec<usize> = rest
                .split(',')
                .map(|x| x.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad())?;
            let [train, val, test] = v[..] else {
                return Err(bad());
            };
            Ok(SplitSpec::Days { train, val, test })
        } else {
            let v: Vec<f64> = s
                .split(',')
                .map(|x| x.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad())?;
            let [train, val, test] = v[..] else {
                return Err(bad());
            };
            Ok(SplitSpec::Fractions { train, val, test })
        }
    }
}

/// Sample-index ranges of the three splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!(
                "unknown split `{s}` (train, val, test)"
            ))),
        }
    }
}

impl Splits {
    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }
}

/// One mini-batch: scaled inputs `[B, T, N, C]`, raw targets `[B, T', N]` and
/// the raw primary-channel inputs `[B, T, N]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub raw_inputs: Tensor,
}

/// Sliding-window samples over a signal table. Sample `i` reads input rows
/// `[i, i + T)` and target rows `[i + T, i + T + T')`.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    table: SignalTable,
    input_window: usize,
    output_window: usize,
    time_of_day: bool,
    splits: Option<Splits>,
    scaler: Option<Scaler>,
    source: String,
}

/// Builds the un-split window set.
pub fn make_windows(
    table: SignalTable,
    input_window: usize,
    output_window: usize,
    time_of_day: bool,
) -> Result<WindowedDataset> {
    if input_window == 0 || output_window == 0 {
        return Err(Error::Config("window lengths must be positive".into()));
    }
    let required = input_window + output_window;
    if table.num_steps() < required {
        return Err(Error::Length {
            op: "make_windows",
            got: table.num_steps(),
            required,
        });
    }
    Ok(WindowedDataset {
        table,
        input_window,
        output_window,
        time_of_day,
        splits: None,
        scaler: None,
        source: String::new(),
    })
}

impl WindowedDataset {
    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn table(&self) -> &SignalTable {
        &self.table
    }

    pub fn num_samples(&self) -> usize {
        self.table.num_steps() + 1 - self.input_window - self.output_window
    }

    pub fn input_window(&self) -> usize {
        self.input_window
    }

    pub fn output_window(&self) -> usize {
        self.output_window
    }

    pub fn channels(&self) -> usize {
        1 + usize::from(self.time_of_day)
    }

    pub fn num_nodes(&self) -> usize {
        self.table.num_nodes()
    }

    pub fn input_rows(&self, sample: usize) -> Range<usize> {
        sample..sample + self.input_window
    }

    pub fn target_rows(&self, sample: usize) -> Range<usize> {
        sample + self.input_window..sample + self.input_window + self.output_window
    }

    /// Row index of the sample's most recent input step.
    pub fn last_input_row(&self, sample: usize) -> usize {
        sample + self.input_window - 1
    }

    pub fn splits(&self) -> Option<&Splits> {
        self.splits.as_ref()
    }

    pub fn scaler(&self) -> Option<Scaler> {
        self.scaler
    }

    pub fn set_scaler(&mut self, scaler: Scaler) {
        self.scaler = Some(scaler);
    }

    pub fn split_range(&self, split: Split) -> Result<Range<usize>> {
        self.splits
            .as_ref()
            .map(|s| s.range(split))
            .ok_or_else(|| Error::Config("dataset has not been split".into()))
    }

    /// Assigns windows to train/val/test by their last input row.
    pub fn chronological_split(mut self, spec: SplitSpec) -> Result<Self> {
        let n = self.num_samples();
        let splits = match spec {
            SplitSpec::Fractions { train, val, test } => {
                if [train, val, test].iter().any(|f| !(*f >= 0.0))
                    || ((train + val + test) - 1.0).abs() > 1e-9
                {
                    return Err(Error::Config(format!(
                        "split fractions {spec} must be >= 0 and sum to 1"
                    )));
                }
                let n_train = (n as f64 * train).round() as usize;
                let n_val = ((n as f64 * val).round() as usize).min(n - n_train.min(n));
                let n_train = n_train.min(n);
                Splits {
                    train: 0..n_train,
                    val: n_train..n_train + n_val,
                    test: n_train + n_val..n,
                }
            }
            SplitSpec::Days { train, val, test } => {
                let per_day = self.table.steps_per_day();
                let b1 = train * per_day;
                let b2 = b1 + val * per_day;
                let b3 = b2 + test * per_day;
                if b3 > self.table.num_steps() {
                    return Err(Error::Config(format!(
                        "{} days of data needed, table has {} rows",
                        train + val + test,
                        self.table.num_steps()
                    )));
                }
                let bound = |rows: usize| -> usize {
                    // first sample whose last input row is >= rows
                    rows.saturating_sub(self.input_window - 1).min(n)
                };
                Splits {
                    train: 0..bound(b1),
                    val: bound(b1)..bound(b2),
                    test: bound(b2)..bound(b3),
                }
            }
        };
        if splits.train.is_empty() || splits.val.is_empty() || splits.test.is_empty() {
            return Err(Error::Config(format!(
                "split {spec} leaves an empty partition ({:?})",
                splits
            )));
        }
        self.splits = Some(splits);
        Ok(self)
    }

    /// Rows whose values feed training inputs.
    fn train_rows(&self) -> Result<Range<usize>> {
        let train = self.split_range(Split::Train)?;
        Ok(train.start..train.end - 1 + self.input_window)
    }

    /// Fits mean/std on the training rows' primary channel.
    pub fn fit_scaler(&self, mask_zero: bool) -> Result<Scaler> {
        let rows = self.train_rows()?;
        let n = self.table.num_nodes();
        Scaler::fit(&self.table.values[rows.start * n..rows.end * n], mask_zero)
    }

    /// Like [`fit_scaler`](Self::fit_scaler) but over train and validation rows.
    pub fn fit_scaler_with_validation(&self, mask_zero: bool) -> Result<Scaler> {
        let val = self.split_range(Split::Val)?;
        let n = self.table.num_nodes();
        let end = val.end - 1 + self.input_window;
        Scaler::fit(&self.table.values[..end * n], mask_zero)
    }

    fn time_of_day_fraction(&self, row: usize) -> f64 {
        let t = self.table.timestamps[row].time();
        f64::from(t.num_seconds_from_midnight()) / 86_400.0
    }

    pub fn batch(&self, samples: &[usize]) -> Result<Batch> {
        let scaler = self
            .scaler
            .ok_or_else(|| Error::Config("dataset has no scaler; call fit_scaler first".into()))?;
        if samples.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let (t, tp, n, c) = (
            self.input_window,
            self.output_window,
            self.num_nodes(),
            self.channels(),
        );
        let mut inputs = Vec::with_capacity(samples.len() * t * n * c);
        let mut targets = Vec::with_capacity(samples.len() * tp * n);
        let mut raw = Vec::with_capacity(samples.len() * t * n);
        for &s in samples {
            if s >= self.num_samples() {
                return Err(Error::Config(format!("sample {s} out of range")));
            }
            for row in self.input_rows(s) {
                let tod = self.time_of_day_fraction(row);
                raw.extend_from_slice(self.table.row(row));
                for &v in self.table.row(row) {
                    inputs.push(scaler.apply(v));
                    if self.time_of_day {
                        inputs.push(tod);
                    }
                }
            }
            for row in self.target_rows(s) {
                targets.extend_from_slice(self.table.row(row));
            }
        }
        Ok(Batch {
            inputs: Tensor::new([samples.len(), t, n, c], inputs)?,
            targets: Tensor::new([samples.len(), tp, n], targets)?,
            raw_inputs: Tensor::new([samples.len(), t, n], raw)?,
        })
    }
}

/// Parameters of a synthetic network whose node groups re-partition over time.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub nodes: usize,
    pub groups: usize,
    /// Group id per node, one partition per regime; regimes cycle through these.
    pub partitions: Vec<Vec<usize>>,
    /// Steps per regime interval.
    pub regime_length: usize,
    pub length: usize,
    pub noise: f64,
    pub seed: u64,
    pub frequency_minutes: u32,
    pub start: NaiveDateTime,
    pub base_level: f64,
    /// Depth of the morning and evening slowdowns.
    pub peak_amplitude: f64,
    pub oscillation_amplitude: f64,
    pub oscillation_period: f64,
}

impl SyntheticSpec {
    /// Two partitions: contiguous blocks, then partners swapped between blocks.
    pub fn default_partitions(nodes: usize, groups: usize) -> Vec<Vec<usize>> {
        let block = nodes.div_ceil(groups);
        let first = (0..nodes).map(|i| i / block).collect();
        let half = (block / 2).max(1);
        let second = (0..nodes).map(|i| (i / half) % groups).collect();
        vec![first, second]
    }

    pub fn new(nodes: usize, groups: usize, length: usize, noise: f64, seed: u64) -> Self {
        SyntheticSpec {
            nodes,
            groups,
            partitions: Self::default_partitions(nodes, groups),
            regime_length: 288,
            length,
            noise,
            seed,
            frequency_minutes: 5,
            start: NaiveDateTime::parse_from_str("2024-01-01 00:00:00", "%Y-%m-%d %H:%M:%S")
                .unwrap(),
            base_level: 60.0,
            peak_amplitude: 20.0,
            oscillation_amplitude: 5.0,
            oscillation_period: 36.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 || self.groups == 0 || self.length == 0 || self.regime_length == 0 {
            return Err(Error::Config("synthetic sizes must be positive".into()));
        }
        if self.partitions.is_empty() {
            return Err(Error::Config(
                "synthetic spec needs at least one partition".into(),
            ));
        }
        for p in &self.partitions {
            if p.len() != self.nodes || p.iter().any(|&g| g >= self.groups) {
                return Err(Error::Config(format!(
                    "partition {p:?} must assign each of {} nodes to a group < {}",
                    self.nodes, self.groups
                )));
            }
        }
        if !(self.noise >= 0.0) || self.frequency_minutes == 0 || !(self.oscillation_period > 0.0) {
            return Err(Error::Config(
                "noise must be >= 0, frequency and period positive".into(),
            ));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let nodes = kv.require("nodes")?;
        let groups = kv.get_or("groups", 2)?;
        let mut spec = SyntheticSpec::new(
            nodes,
            groups,
            kv.require("length")?,
            kv.get_or("noise", 0.05)?,
            kv.get_or("seed", 0)?,
        );
        let mut partitions = Vec::new();
        while let Some(p) = kv.get_list(&format!("partition.{}", partitions.len()))? {
            partitions.push(p);
        }
        if !partitions.is_empty() {
            spec.partitions = partitions;
        }
        spec.regime_length = kv.get_or("regime_length", spec.regime_length)?;
        spec.frequency_minutes = kv.get_or("frequency_minutes", spec.frequency_minutes)?;
        if let Some(s) = kv.get_str("start") {
            spec.start =
                parse_timestamp(s).ok_or_else(|| Error::Config(format!("bad start `{s}`")))?;
        }
        spec.base_level = kv.get_or("base_level", spec.base_level)?;
        spec.peak_amplitude = kv.get_or("peak_amplitude", spec.peak_amplitude)?;
        spec.oscillation_amplitude =
            kv.get_or("oscillation_amplitude", spec.oscillation_amplitude)?;
        spec.oscillation_period = kv.get_or("oscillation_period", spec.oscillation_period)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.insert("nodes", self.nodes);
        kv.insert("groups", self.groups);
        kv.insert("length", self.length);
        kv.insert("noise", self.noise);
        kv.insert("seed", self.seed);
        kv.insert("regime_length", self.regime_length);
        kv.insert("frequency_minutes", self.frequency_minutes);
        kv.insert("start", format_timestamp(&self.start));
        kv.insert("base_level", self.base_level);
        kv.insert("peak_amplitude", self.peak_amplitude);
        kv.insert("oscillation_amplitude", self.oscillation_amplitude);
        kv.insert("oscillation_period", self.oscillation_period);
        for (i, p) in self.partitions.iter().enumerate() {
            let list: Vec<String> = p.iter().map(usize::to_string).collect();
            kv.insert(format!("partition.{i}"), list.join(","));
        }
        kv
    }

    pub fn regime_at(&self, step: usize) -> usize {
        (step / self.regime_length) % self.partitions.len()
    }

    /// Latent signal followed by every node of `group` at `step`.
    fn latent(&self, group: usize, step: usize) -> f64 {
        let minutes = step as f64 * f64::from(self.frequency_minutes)
            + f64::from(self.start.time().num_seconds_from_midnight()) / 60.0;
        let hour = (minutes / 60.0) % 24.0;
        let bump = |center: f64| (-0.5 * ((hour - center) / 1.5).powi(2)).exp();
        let shift = group as f64;
        let peaks = bump(8.0 + shift) + bump(17.0 + shift);
        let phase = std::f64::consts::TAU * group as f64 / self.groups as f64;
        let osc = (std::f64::consts::TAU * step as f64 / self.oscillation_period + phase).sin();
        self.base_level - self.peak_amplitude * peaks + self.oscillation_amplitude * osc
    }
}

/// Generated table plus the true group structure at each step.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub table: SignalTable,
    pub graph: RoadGraph,
    pub spec: SyntheticSpec,
}

impl SyntheticData {
    /// Group id of every node at `step`.
    pub fn groups_at(&self, step: usize) -> &[usize] {
        &self.spec.partitions[self.spec.regime_at(step)]
    }

    /// True when rows `range` all fall in one regime interval.
    pub fn single_regime(&self, range: Range<usize>) -> bool {
        range.start / self.spec.regime_length == (range.end - 1) / self.spec.regime_length
    }
}

/// Deterministic synthetic table; the graph is an undirected ring over the nodes.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let names: Vec<String> = (0..spec.nodes).map(|i| format!("node{i}")).collect();
    let step = chrono::Duration::minutes(i64::from(spec.frequency_minutes));
    let timestamps: Vec<NaiveDateTime> = (0..spec.length)
        .map(|s| spec.start + step * s as i32)
        .collect();
    let mut values = Vec::with_capacity(spec.length * spec.nodes);
    for s in 0..spec.length {
        let groups = &spec.partitions[spec.regime_at(s)];
        for &g in groups {
            let eps = if spec.noise > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            values.push(spec.latent(g, s) + eps);
        }
    }
    let table = SignalTable::new(timestamps, names.clone(), values, spec.frequency_minutes)?;
    let n = spec.nodes;
    let edges = if n > 1 {
        (0..n)
            .flat_map(|i| [(i, (i + 1) % n, 1.0), ((i + 1) % n, i, 1.0)])
            .collect()
    } else {
        Vec::new()
    };
    let graph = RoadGraph::from_edges(names, edges)?;
    Ok(SyntheticData {
        table,
        graph,
        spec: spec.clone(),
    })
}
