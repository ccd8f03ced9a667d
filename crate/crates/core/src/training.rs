//! Masked losses and metrics, Adam, the training loop with validation-based
//! model selection, evaluation, and the persistence baseline.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::data::{Batch, Scaler, Split, WindowedDataset};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::model::PgcnModel;
use crate::param::ParamStore;
use crate::tensor::Tensor;

/// Horizons reported by default, in steps.
pub const REPORT_HORIZONS: [usize; 3] = [3, 6, 12];

fn check_pair(op: &'static str, pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(op, pred.shape(), target.shape()));
    }
    Ok(())
}

/// 1 where the entry counts, 0 where it is masked out, plus the kept count.
fn mask_weights(target: &Tensor, mask_zero: bool) -> (Vec<f64>, usize) {
    let m: Vec<f64> = target
        .data()
        .iter()
        .map(|&y| if mask_zero && y == 0.0 { 0.0 } else { 1.0 })
        .collect();
    let count = m.iter().filter(|&&w| w > 0.0).count();
    (m, count)
}

pub fn masked_mae(pred: &Tensor, target: &Tensor, mask_zero: bool) -> Result<f64> {
    check_pair("masked_mae", pred, target)?;
    let (m, count) = mask_weights(target, mask_zero);
    if count == 0 {
        log::warn!("masked_mae: every entry is masked");
        return Ok(0.0);
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .zip(&m)
        .map(|((p, y), w)| (p - y).abs() * w)
        .sum();
    Ok(sum * (1.0 / count as f64))
}

pub fn masked_rmse(pred: &Tensor, target: &Tensor, mask_zero: bool) -> Result<f64> {
    check_pair("masked_rmse", pred, target)?;
    let (m, count) = mask_weights(target, mask_zero);
    if count == 0 {
        log::warn!("masked_rmse: every entry is masked");
        return Ok(0.0);
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .zip(&m)
        .map(|((p, y), w)| (p - y) * (p - y) * w)
        .sum();
    Ok((sum / count as f64).sqrt())
}

/// Mean absolute percentage error in percent. Zero targets are always skipped.
pub fn masked_mape(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_pair("masked_mape", pred, target)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, y) in pred.data().iter().zip(target.data()) {
        if *y != 0.0 {
            sum += (p - y).abs() / y.abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric(
            "MAPE with every target equal to zero".into(),
        ));
    }
    Ok(100.0 * sum / count as f64)
}

#[derive(Debug, Clone, Copy, Default)]
struct ErrorSums {
    abs: f64,
    sq: f64,
    ape: f64,
    count: usize,
    nonzero: usize,
}

impl ErrorSums {
    fn add(&mut self, p: f64, y: f64, mask_zero: bool) {
        if mask_zero && y == 0.0 {
            return;
        }
        let e = p - y;
        self.abs += e.abs();
        self.sq += e * e;
        self.count += 1;
        if y != 0.0 {
            self.ape += e.abs() / y.abs();
            self.nonzero += 1;
        }
    }

    fn finish(
        &self,
        horizon_steps: Option<usize>,
        frequency_minutes: u32,
    ) -> Result<HorizonMetrics> {
        if self.nonzero == 0 {
            return Err(Error::UndefinedMetric(format!(
                "MAPE at horizon {} has no non-zero targets",
                horizon_steps.map_or("all".to_string(), |h| h.to_string())
            )));
        }
        let n = self.count as f64;
        Ok(HorizonMetrics {
            horizon_steps,
            horizon_minutes: horizon_steps.map(|h| h * frequency_minutes as usize),
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape_percent: 100.0 * self.ape / self.nonzero as f64,
            count: self.count,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonMetrics {
    /// `None` for the all-horizon aggregate.
    pub horizon_steps: Option<usize>,
    pub horizon_minutes: Option<usize>,
    pub mae: f64,
    pub rmse: f64,
    pub mape_percent: f64,
    /// Observed (unmasked) entries.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub horizons: Vec<HorizonMetrics>,
    pub overall: HorizonMetrics,
}

impl MetricsReport {
    pub fn at(&self, steps: usize) -> Option<&HorizonMetrics> {
        self.horizons
            .iter()
            .find(|h| h.horizon_steps == Some(steps))
    }

    pub fn rows(&self) -> impl Iterator<Item = &HorizonMetrics> {
        self.horizons.iter().chain(std::iter::once(&self.overall))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon_steps,horizon_minutes,mae,rmse,mape_percent,count\n");
        for h in self.rows() {
            let fmt = |v: Option<usize>| v.map_or("all".to_string(), |x| x.to_string());
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                fmt(h.horizon_steps),
                fmt(h.horizon_minutes),
                h.mae,
                h.rmse,
                h.mape_percent,
                h.count
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Fixed-width table for terminals.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:>8} {:>10} {:>10} {:>10} {:>10}\n",
            "horizon", "MAE", "RMSE", "MAPE%", "count"
        );
        for h in self.rows() {
            let label = h
                .horizon_minutes
                .map_or("all".to_string(), |m| format!("{m} min"));
            let _ = writeln!(
                out,
                "{label:>8} {:>10.4} {:>10.4} {:>10.4} {:>10}",
                h.mae, h.rmse, h.mape_percent, h.count
            );
        }
        out
    }
}

/// Anything that maps a batch to predictions `[B, T', N]` in original units.
pub trait Forecaster {
    fn output_window(&self) -> usize;
    fn predict(&self, batch: &Batch, scaler: &Scaler) -> Result<Tensor>;
}

impl Forecaster for PgcnModel {
    fn output_window(&self) -> usize {
        self.config().output_window
    }

    fn predict(&self, batch: &Batch, scaler: &Scaler) -> Result<Tensor> {
        Ok(scaler.invert_tensor(&self.predict_normalized(&batch.inputs)?))
    }
}

/// Repeats the most recent observation over every horizon.
#[derive(Debug, Clone, Copy)]
pub struct HistoricalAverage {
    pub output_window: usize,
}

impl Forecaster for HistoricalAverage {
    fn output_window(&self) -> usize {
        self.output_window
    }

    fn predict(&self, batch: &Batch, _scaler: &Scaler) -> Result<Tensor> {
        historical_average_baseline(&batch.raw_inputs, self.output_window)
    }
}

/// `window[B, T, N]` to `[B, T', N]` holding `window[:, T-1, :]` at every step.
pub fn historical_average_baseline(window: &Tensor, output_window: usize) -> Result<Tensor> {
    let s = window.shape();
    if s.len() != 3 || output_window == 0 {
        return Err(Error::Shape {
            shape: s.to_vec(),
            reason: "historical average expects [B, T, N] and T' >= 1".into(),
        });
    }
    let (b, t, n) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(b * output_window * n);
    for bi in 0..b {
        let last = &window.data()[(bi * t + t - 1) * n..(bi * t + t) * n];
        for _ in 0..output_window {
            out.extend_from_slice(last);
        }
    }
    Tensor::new([b, output_window, n], out)
}

/// Per-horizon and aggregate metrics of `forecaster` on one split.
pub fn evaluate(
    forecaster: &dyn Forecaster,
    dataset: &WindowedDataset,
    split: Split,
    mask_zero: bool,
    batch_size: usize,
    horizons: &[usize],
) -> Result<MetricsReport> {
    let tp = forecaster.output_window();
    if let Some(&h) = horizons.iter().find(|&&h| h == 0 || h > tp) {
        return Err(Error::Config(format!("horizon {h} outside 1..={tp}")));
    }
    if tp != dataset.output_window() {
        return Err(Error::Config(format!(
            "forecaster predicts {tp} steps, dataset targets {}",
            dataset.output_window()
        )));
    }
    let range = dataset.split_range(split)?;
    if range.is_empty() {
        return Err(Error::Config(format!("{split:?} split is empty")));
    }
    let scaler = dataset
        .scaler()
        .ok_or_else(|| Error::Config("dataset has no scaler".into()))?;
    let n = dataset.num_nodes();
    let mut per_step = vec![ErrorSums::default(); tp];
    let mut overall = ErrorSums::default();
    let samples: Vec<usize> = range.collect();
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = dataset.batch(chunk)?;
        let pred = forecaster.predict(&batch, &scaler)?;
        check_pair("evaluate", &pred, &batch.targets)?;
        for (i, (&p, &y)) in pred.data().iter().zip(batch.targets.data()).enumerate() {
            let step = (i / n) % tp;
            per_step[step].add(p, y, mask_zero);
            overall.add(p, y, mask_zero);
        }
    }
    let freq = dataset.table().frequency_minutes();
    let horizons = horizons
        .iter()
        .map(|&h| per_step[h - 1].finish(Some(h), freq))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        horizons,
        overall: overall.finish(None, freq)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip applied before the update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Result<Self> {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value().shape().to_vec()))
                .collect::<Result<Vec<_>>>()
        };
        Ok(OptimizerState {
            config,
            m: zeros()?,
            v: zeros()?,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }
}

/// One bias-corrected Adam update from the gradients held in `store`.
/// Returns the gradient norm before clipping.
pub fn adam_step(store: &mut ParamStore, opt: &mut OptimizerState) -> Result<f64> {
    if opt.m.len() != store.len() {
        return Err(Error::Config(format!(
            "optimizer tracks {} tensors, store has {}",
            opt.m.len(),
            store.len()
        )));
    }
    if let Some((_, bad)) = store.iter().find(|(_, p)| !p.grad().all_finite()) {
        let dump: Vec<String> = store
            .iter()
            .map(|(_, p)| {
                let norm = p.grad().data().iter().map(|g| g * g).sum::<f64>().sqrt();
                format!("{}={norm:e}", p.name())
            })
            .collect();
        log::error!(
            "non-finite gradient; per-parameter grad norms: {}",
            dump.join(" ")
        );
        return Err(Error::Numeric {
            op: "adam_step",
            detail: format!("non-finite gradient in `{}`", bad.name()),
        });
    }
    let norm = store.grad_norm();
    let scale = match opt.config.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    opt.step += 1;
    let AdamConfig {
        learning_rate: lr,
        beta1: b1,
        beta2: b2,
        eps,
        ..
    } = opt.config;
    let t = opt.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        let grad = p.grad().data().to_vec();
        let m = opt.m[i].data_mut();
        let v = opt.v[i].data_mut();
        for (j, value) in p.value_mut().iter_mut().enumerate() {
            let g = grad[j] * scale;
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *value -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(norm)
}

/// Masked MAE of the inverse-scaled prediction, recorded on `tape`.
/// Returns the loss variable and the number of observed entries.
pub fn batch_loss(
    model: &PgcnModel,
    tape: &mut Tape,
    store: &ParamStore,
    batch: &Batch,
    scaler: &Scaler,
    mask_zero: bool,
) -> Result<(Var, usize)> {
    let out = model.forward_with(tape, store, &batch.inputs)?;
    let raw = tape.scale(out.prediction, scaler.std);
    let raw = tape.add_scalar(raw, scaler.mean);
    let target = tape.constant(batch.targets.clone());
    let diff = tape.sub(raw, target)?;
    let mut err = tape.abs(diff);
    let (m, count) = mask_weights(&batch.targets, mask_zero);
    if mask_zero {
        let mask = tape.constant(Tensor::new(batch.targets.shape().to_vec(), m)?);
        err = tape.hadamard(err, mask)?;
    }
    let total = tape.sum(err);
    Ok((tape.scale(total, 1.0 / count.max(1) as f64), count))
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Multiplies the learning rate after each epoch; 1.0 keeps it fixed.
    pub lr_decay: f64,
    pub mask_zero: bool,
    /// Directory receiving the best checkpoint, if any.
    pub checkpoint_dir: Option<PathBuf>,
    /// Extra manifest entries stored with every checkpoint.
    pub checkpoint_extra: KeyValues,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 100,
            batch_size: 64,
            seed: 0,
            adam: AdamConfig::default(),
            lr_decay: 1.0,
            mask_zero: true,
            checkpoint_dir: None,
            checkpoint_extra: KeyValues::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the lowest validation MAE.
    pub best_epoch: Option<usize>,
    pub best_val_mae: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
    pub seed: u64,
}

impl TrainReport {
    /// `epoch,train_mae,val_mae,seconds`; seconds are written as 0 unless
    /// `with_timing`, so logs of identical runs compare equal.
    pub fn to_csv(&self, with_timing: bool) -> String {
        let mut out = String::from("epoch,train_mae,val_mae,seconds\n");
        for e in &self.epochs {
            let secs = if with_timing { e.seconds } else { 0.0 };
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.train_mae, e.val_mae, secs);
        }
        out
    }

    pub fn write_csv(&self, path: &Path, with_timing: bool) -> Result<()> {
        fs::write(path, self.to_csv(with_timing)).map_err(|e| Error::io(path, e))
    }
}

/// Trains `model` in place and leaves it holding the best-validation parameters.
pub fn train(
    model: &mut PgcnModel,
    dataset: &WindowedDataset,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    let scaler = dataset
        .scaler()
        .ok_or_else(|| Error::Config("dataset has no scaler; fit one before training".into()))?;
    let train_range = dataset.split_range(Split::Train)?;
    if train_range.is_empty() || dataset.split_range(Split::Val)?.is_empty() {
        return Err(Error::Config(
            "train and validation splits must be non-empty".into(),
        ));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: None,
        best_val_mae: None,
        best_checkpoint: None,
        seed: opts.seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = OptimizerState::new(model.params(), opts.adam)?;
    let mut best_params: Option<ParamStore> = None;
    let mut order: Vec<usize> = train_range.collect();

    for epoch in 1..=opts.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut abs_sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            let batch = dataset.batch(chunk)?;
            let mut store = std::mem::take(model.params_mut());
            store.zero_grad();
            let result = (|| {
                let mut tape = Tape::new();
                let (loss, n) =
                    batch_loss(model, &mut tape, &store, &batch, &scaler, opts.mask_zero)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        detail: format!("training loss is {value}"),
                    });
                }
                if n > 0 {
                    tape.backward(loss, &mut store)?;
                    adam_step(&mut store, &mut opt).map_err(|e| match e {
                        Error::Numeric { detail, .. } => Error::Diverged { epoch, detail },
                        other => other,
                    })?;
                }
                Ok((value, n))
            })();
            *model.params_mut() = store;
            let (value, n) = result?;
            abs_sum += value * n as f64;
            count += n;
        }
        let train_mae = if count > 0 {
            abs_sum / count as f64
        } else {
            0.0
        };
        let val = evaluate(
            model,
            dataset,
            Split::Val,
            opts.mask_zero,
            opts.batch_size,
            &[],
        )?;
        let val_mae = val.overall.mae;
        if !val_mae.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("validation MAE is {val_mae}"),
            });
        }
        report.epochs.push(EpochRecord {
            epoch,
            train_mae,
            val_mae,
            seconds: started.elapsed().as_secs_f64(),
        });
        log::info!("epoch {epoch}: train_mae={train_mae:.5} val_mae={val_mae:.5}");
        if report.best_val_mae.is_none_or(|b| val_mae < b) {
            report.best_epoch = Some(epoch);
            report.best_val_mae = Some(val_mae);
            best_params = Some(model.params().clone());
            if let Some(dir) = &opts.checkpoint_dir {
                let meta = CheckpointMeta {
                    epoch,
                    val_mae,
                    scaler,
                    seed: opts.seed,
                    extra: opts.checkpoint_extra.clone(),
                };
                save_checkpoint(dir, model, &meta)?;
                report.best_checkpoint = Some(dir.clone());
            }
        }
        if opts.lr_decay != 1.0 {
            let lr = opt.config.learning_rate * opts.lr_decay;
            opt.set_learning_rate(lr);
        }
    }
    if let Some(best) = best_params {
        model.params_mut().copy_values_from(&best)?;
    }
    Ok(report)
}
