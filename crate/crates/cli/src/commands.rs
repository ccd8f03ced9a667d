//! Command implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use pgcn_core::checkpoint::{load_checkpoint, CheckpointMeta};
use pgcn_core::data::{
    format_timestamp, generate_synthetic, make_windows, parse_timestamp, Scaler, SignalTable,
    Split, SplitSpec, SyntheticSpec, WindowedDataset,
};
use pgcn_core::graph::RoadGraph;
use pgcn_core::kv::KeyValues;
use pgcn_core::model::{AdjacencyCombo, PgcnConfig, PgcnModel};
use pgcn_core::training::{
    self, evaluate, HistoricalAverage, MetricsReport, TrainReport, REPORT_HORIZONS,
};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::{CliError, CommonArgs, EvalArgs, ExportArgs, PlotArgs, SynthArgs};

pub const RUN_CONFIG: &str = "run_config.txt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const METRICS: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const ABLATION: &str = "ablation.csv";
pub const ABLATION_STATUS: &str = "ablation_status.csv";
pub const TRACE: &str = "adjacency_trace.csv";
pub const MATRIX: &str = "adjacency_matrix.csv";

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn apply_overrides(kv: &mut KeyValues, overrides: &[String]) -> Result<(), CliError> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("--set expects KEY=VALUE, got `{o}`")))?;
        kv.insert(k.trim(), v.trim());
    }
    Ok(())
}

/// Config file, then `--set` overrides, then the dedicated flags.
pub fn resolve_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let (mut kv, base) = match &common.config {
        Some(p) => (
            KeyValues::load(p).map_err(CliError::config_from)?,
            p.parent().map(Path::to_path_buf).unwrap_or_default(),
        ),
        None => (KeyValues::default(), PathBuf::new()),
    };
    apply_overrides(&mut kv, &common.overrides)?;
    let mut cfg = RunConfig::from_kv(&kv, &base)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(d) = &common.data {
        cfg.signals = Some(d.clone());
    }
    if let Some(g) = &common.graph {
        cfg.graph = Some(g.clone());
    }
    Ok(cfg)
}

/// Windowed, split and scaled data ready for training or evaluation.
pub struct Prepared {
    pub dataset: WindowedDataset,
    pub graph: RoadGraph,
    pub split_hash: String,
}

pub struct DataRequest<'a> {
    pub signals: Option<&'a Path>,
    pub graph: Option<&'a Path>,
    pub input_window: usize,
    pub output_window: usize,
    pub time_of_day: bool,
    pub split: SplitSpec,
    pub mask_zero: bool,
    /// Use this scaler instead of fitting one on the training split.
    pub scaler: Option<Scaler>,
}

pub fn prepare_data(req: &DataRequest<'_>) -> Result<Prepared, CliError> {
    let signals = req.signals.ok_or_else(|| {
        CliError::config("no signals file given (use --data or `signals=` in the config)")
    })?;
    let table = SignalTable::load_csv(signals)?;
    if table.missing_count() > 0 {
        log::info!(
            "{}: {} missing readings stored as 0",
            signals.display(),
            table.missing_count()
        );
    }
    let graph = match req.graph {
        Some(g) => RoadGraph::load_edge_csv(g)?.aligned_to(table.names())?,
        None => RoadGraph::empty(table.names().to_vec())?,
    };
    let mut dataset = make_windows(table, req.input_window, req.output_window, req.time_of_day)?
        .with_source(signals.display().to_string())
        .chronological_split(req.split)?;
    let scaler = match req.scaler {
        Some(s) => s,
        None => dataset.fit_scaler(req.mask_zero)?,
    };
    dataset.set_scaler(scaler);
    let split_hash = split_hash(&dataset);
    Ok(Prepared {
        dataset,
        graph,
        split_hash,
    })
}

/// SHA-256 over the sample ranges and boundary timestamps of each split.
pub fn split_hash(ds: &WindowedDataset) -> String {
    let mut h = Sha256::new();
    let table = ds.table();
    h.update(table.names().join(",").as_bytes());
    h.update(format!("T={},T'={};", ds.input_window(), ds.output_window()).as_bytes());
    for split in [Split::Train, Split::Val, Split::Test] {
        if let Ok(r) = ds.split_range(split) {
            let first = format_timestamp(&table.timestamps()[r.start]);
            let last = format_timestamp(&table.timestamps()[ds.last_input_row(r.end - 1)]);
            h.update(format!("{split:?}={}..{}@{first}..{last};", r.start, r.end).as_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn report_horizons(output_window: usize) -> Vec<usize> {
    let hs: Vec<usize> = REPORT_HORIZONS
        .iter()
        .copied()
        .filter(|&h| h <= output_window)
        .collect();
    if hs.is_empty() {
        vec![output_window]
    } else {
        hs
    }
}

/// Outcome of one training run.
pub struct RunOutcome {
    pub report: TrainReport,
    pub test_metrics: MetricsReport,
    pub split_hash: String,
}

/// Trains per `cfg` and writes every artifact into `cfg.out`.
pub fn train_run(cfg: &RunConfig) -> Result<RunOutcome, CliError> {
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join(RUN_CONFIG), &cfg.to_text())?;
    let prep = prepare_data(&DataRequest {
        signals: cfg.signals.as_deref(),
        graph: cfg.graph.as_deref(),
        input_window: cfg.model.input_window,
        output_window: cfg.model.output_window,
        time_of_day: cfg.time_of_day,
        split: cfg.split,
        mask_zero: cfg.mask_zero,
        scaler: None,
    })?;
    log::info!("split hash {}", prep.split_hash);
    if cfg.graph.is_none() && cfg.model.adjacency.transition {
        log::warn!("no graph file given; the transition term sees isolated sensors");
    }
    let mut model = PgcnModel::new(cfg.model.clone(), &prep.graph, cfg.seed)?;
    log::info!("{} parameters", model.parameter_count());

    let mut opts = cfg.train_options();
    opts.checkpoint_dir = Some(cfg.out.join(CHECKPOINT_DIR));
    let extra = &mut opts.checkpoint_extra;
    if let Some(s) = &cfg.signals {
        let abs = std::path::absolute(s).unwrap_or_else(|_| s.clone());
        extra.insert("signals", abs.display());
    }
    extra.insert("split", cfg.split);
    extra.insert("time_of_day", cfg.time_of_day);
    extra.insert("mask_zero", cfg.mask_zero);
    extra.insert("batch_size", cfg.batch_size);
    extra.insert("split_hash", &prep.split_hash);

    let report = training::train(&mut model, &prep.dataset, &opts)?;
    report
        .write_csv(&cfg.out.join(TRAIN_LOG), cfg.log_timing)
        .map_err(CliError::from)?;
    let metrics = evaluate(
        &model,
        &prep.dataset,
        Split::Test,
        cfg.mask_zero,
        cfg.batch_size,
        &report_horizons(cfg.model.output_window),
    )?;
    metrics.write_csv(&cfg.out.join(METRICS))?;
    Ok(RunOutcome {
        report,
        test_metrics: metrics,
        split_hash: prep.split_hash,
    })
}

pub fn train(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = resolve_config(args)?;
    let outcome = train_run(&cfg)?;
    match (outcome.report.best_epoch, outcome.report.best_val_mae) {
        (Some(e), Some(v)) => println!("best epoch {e}: validation MAE {v:.4}"),
        _ => println!("no epochs run"),
    }
    println!("test split\n{}", outcome.test_metrics.table());
    Ok(())
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    s.parse::<Split>().map_err(CliError::from)
}

/// First model key whose value differs between the two configurations.
fn config_conflict(saved: &PgcnConfig, requested: &PgcnConfig) -> Option<(String, String, String)> {
    let (mut a, mut b) = (KeyValues::default(), KeyValues::default());
    saved.write_kv(&mut a);
    requested.write_kv(&mut b);
    let key = a.keys().find(|k| a.get_str(k) != b.get_str(k))?.to_string();
    let value = |kv: &KeyValues| kv.get_str(&key).unwrap_or("").to_string();
    Some((key.clone(), value(&a), value(&b)))
}

struct Loaded {
    model: PgcnModel,
    meta: CheckpointMeta,
    prep: Prepared,
    mask_zero: bool,
    batch_size: usize,
}

fn load_for_eval(checkpoint: &Path, common: &CommonArgs) -> Result<Loaded, CliError> {
    let (model, meta) = load_checkpoint(checkpoint).map_err(|e| match e {
        pgcn_core::Error::Io { .. } => CliError::data(format!("cannot read checkpoint: {e}")),
        other => CliError::config(format!("checkpoint {}: {other}", checkpoint.display())),
    })?;
    let mut extra = meta.extra.clone();
    if common.config.is_some() {
        let cfg = resolve_config(common)?;
        if let Some((field, saved, requested)) = config_conflict(model.config(), &cfg.model) {
            return Err(CliError::config(format!(
                "checkpoint/config mismatch in field `{field}`: checkpoint has {saved}, config has {requested}"
            )));
        }
    }
    apply_overrides(&mut extra, &common.overrides)?;
    let signals = common
        .data
        .clone()
        .or_else(|| extra.get_str("signals").map(PathBuf::from));
    if common.graph.is_some() {
        log::warn!("--graph is ignored when evaluating a checkpoint; its saved graph is used");
    }
    let split: SplitSpec = extra.get_or("split", SplitSpec::default())?;
    let time_of_day = extra.get_or("time_of_day", false)?;
    let mask_zero = extra.get_or("mask_zero", true)?;
    let batch_size = extra.get_or("batch_size", 64usize)?;
    let cfg = model.config();
    let signals_path = signals
        .ok_or_else(|| CliError::config("no signals file recorded in checkpoint; pass --data"))?;
    let table_names = SignalTable::load_csv(&signals_path)?.names().to_vec();
    if table_names != model.graph().names() {
        return Err(CliError::config(format!(
            "checkpoint/data mismatch in field `nodes`: checkpoint has {} sensors, data has {}",
            model.num_nodes(),
            table_names.len()
        )));
    }
    let prep = prepare_data(&DataRequest {
        signals: Some(&signals_path),
        graph: None,
        input_window: cfg.input_window,
        output_window: cfg.output_window,
        time_of_day,
        split,
        mask_zero,
        scaler: Some(meta.scaler),
    })?;
    let prep = Prepared {
        graph: model.graph().clone(),
        ..prep
    };
    Ok(Loaded {
        model,
        meta,
        prep,
        mask_zero,
        batch_size,
    })
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let split = parse_split(&args.split)?;
    let out = args
        .common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("."));
    let report = match (&args.baseline, &args.checkpoint) {
        (Some(b), _) => {
            if b != "ha" {
                return Err(CliError::config(format!(
                    "unknown baseline `{b}` (available: ha)"
                )));
            }
            let cfg = resolve_config(&args.common)?;
            let prep = prepare_data(&DataRequest {
                signals: cfg.signals.as_deref(),
                graph: cfg.graph.as_deref(),
                input_window: cfg.model.input_window,
                output_window: cfg.model.output_window,
                time_of_day: cfg.time_of_day,
                split: cfg.split,
                mask_zero: cfg.mask_zero,
                scaler: None,
            })?;
            let ha = HistoricalAverage {
                output_window: cfg.model.output_window,
            };
            evaluate(
                &ha,
                &prep.dataset,
                split,
                cfg.mask_zero,
                cfg.batch_size,
                &report_horizons(cfg.model.output_window),
            )?
        }
        (None, Some(ckpt)) => {
            let l = load_for_eval(ckpt, &args.common)?;
            log::info!(
                "checkpoint epoch {} (validation MAE {})",
                l.meta.epoch,
                l.meta.val_mae
            );
            evaluate(
                &l.model,
                &l.prep.dataset,
                split,
                l.mask_zero,
                l.batch_size,
                &report_horizons(l.model.config().output_window),
            )?
        }
        (None, None) => return Err(CliError::config("eval needs --checkpoint or --baseline ha")),
    };
    create_dir(&out)?;
    report.write_csv(&out.join(METRICS))?;
    println!("{:?} split\n{}", split, report.table());
    Ok(())
}

fn combo_slug(combo: AdjacencyCombo) -> String {
    combo.to_string().to_lowercase().replace('+', "-")
}

pub fn ablate(args: &CommonArgs) -> Result<(), CliError> {
    let base = resolve_config(args)?;
    create_dir(&base.out)?;
    let mut rows = String::from("combo,horizon_minutes,mae,rmse,mape_percent\n");
    let mut status = String::from("combo,status,split_hash\n");
    let mut first_failure: Option<CliError> = None;
    let horizons = report_horizons(base.model.output_window);
    let freq_minutes = |m: &MetricsReport, h: usize| m.at(h).and_then(|x| x.horizon_minutes);
    for combo in AdjacencyCombo::ABLATIONS {
        let mut cfg = base.clone();
        cfg.model.adjacency = combo;
        cfg.out = base.out.join(combo_slug(combo));
        let label = combo.label();
        eprintln!("ablation: training {label}");
        match train_run(&cfg) {
            Ok(run) => {
                for &h in &horizons {
                    let m = run.test_metrics.at(h).expect("requested horizon");
                    let minutes = freq_minutes(&run.test_metrics, h).unwrap_or(h);
                    let _ = writeln!(
                        rows,
                        "{label},{minutes},{},{},{}",
                        m.mae, m.rmse, m.mape_percent
                    );
                }
                let _ = writeln!(status, "{label},ok,{}", run.split_hash);
            }
            Err(e) => {
                eprintln!("ablation: {label} failed: {}", e.message);
                for _ in &horizons {
                    let _ = writeln!(rows, "{label},,NaN,NaN,NaN");
                }
                let _ = writeln!(status, "{label},failed (exit {}),", e.code);
                first_failure.get_or_insert(e);
            }
        }
    }
    write_file(&base.out.join(ABLATION), &rows)?;
    write_file(&base.out.join(ABLATION_STATUS), &status)?;
    print!("{rows}");
    match first_failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn node_index(names: &[String], name: &str) -> Result<usize, CliError> {
    names.iter().position(|n| n == name).ok_or_else(|| {
        let shown: Vec<&str> = names.iter().take(20).map(String::as_str).collect();
        let more = if names.len() > 20 { ", ..." } else { "" };
        CliError::config(format!(
            "unknown node `{name}`; candidates: {}{more}",
            shown.join(", ")
        ))
    })
}

fn parse_time(s: &str) -> Result<chrono::NaiveDateTime, CliError> {
    parse_timestamp(s).ok_or_else(|| CliError::config(format!("bad timestamp `{s}`")))
}

/// Trailing moving average over at most `window` values.
pub fn trailing_average(values: &[f64], window: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

pub fn export_adjacency(args: &ExportArgs) -> Result<(), CliError> {
    if args.nodes.is_none() && args.at.is_none() {
        return Err(CliError::config(
            "export-adjacency needs --nodes i,j and/or --at TIMESTAMP",
        ));
    }
    let l = load_for_eval(&args.checkpoint, &args.common)?;
    if l.model.adjustor().is_none() {
        return Err(CliError::config(format!(
            "checkpoint uses adjacency {} which has no progressive term",
            l.model.config().adjacency
        )));
    }
    let ds = &l.prep.dataset;
    let names = ds.table().names().to_vec();
    let out = args
        .common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("."));
    create_dir(&out)?;
    let stamp = |s: usize| ds.table().timestamps()[ds.last_input_row(s)];
    let n = names.len();

    if let Some(pair) = &args.nodes {
        let (a, b) = pair
            .split_once(',')
            .ok_or_else(|| CliError::config(format!("--nodes expects `i,j`, got `{pair}`")))?;
        let (i, j) = (node_index(&names, a.trim())?, node_index(&names, b.trim())?);
        let start = args.start.as_deref().map(parse_time).transpose()?;
        let end = args.end.as_deref().map(parse_time).transpose()?;
        let samples: Vec<usize> = ds
            .split_range(parse_split(&args.split)?)?
            .filter(|&s| start.is_none_or(|t| stamp(s) >= t) && end.is_none_or(|t| stamp(s) <= t))
            .collect();
        if samples.is_empty() {
            return Err(CliError::config("no windows in the requested range"));
        }
        let (mut w_ij, mut w_ji) = (Vec::new(), Vec::new());
        for chunk in samples.chunks(l.batch_size.max(1)) {
            let batch = ds.batch(chunk)?;
            let w = l.model.progressive_weights(&batch.inputs)?;
            for b in 0..chunk.len() {
                w_ij.push(w.data()[(b * n + i) * n + j]);
                w_ji.push(w.data()[(b * n + j) * n + i]);
            }
        }
        let ma = trailing_average(&w_ij, 12);
        let mut text =
            String::from("timestamp,speed_i,speed_j,weight_ij,weight_ji,weight_ij_ma12\n");
        for (k, &s) in samples.iter().enumerate() {
            let row = ds.last_input_row(s);
            let _ = writeln!(
                text,
                "{},{},{},{},{},{}",
                format_timestamp(&stamp(s)),
                ds.table().value(row, i),
                ds.table().value(row, j),
                w_ij[k],
                w_ji[k],
                ma[k]
            );
        }
        write_file(&out.join(TRACE), &text)?;
        println!(
            "wrote {} windows to {}",
            samples.len(),
            out.join(TRACE).display()
        );
    }

    if let Some(at) = &args.at {
        let t = parse_time(at)?;
        let sample = (0..ds.num_samples())
            .find(|&s| stamp(s) == t)
            .ok_or_else(|| CliError::config(format!("no window ends at {at}")))?;
        let w = l.model.progressive_weights(&ds.batch(&[sample])?.inputs)?;
        let mut text = format!("node,{}\n", names.join(","));
        for (r, name) in names.iter().enumerate() {
            let row: Vec<String> = w.data()[r * n..(r + 1) * n]
                .iter()
                .map(f64::to_string)
                .collect();
            let _ = writeln!(text, "{name},{}", row.join(","));
        }
        write_file(&out.join(MATRIX), &text)?;
        println!("wrote {}", out.join(MATRIX).display());
    }
    Ok(())
}

pub fn plot(args: &PlotArgs) -> Result<(), CliError> {
    let (svg, csv) = crate::plot::plot(&args.csv, &args.kind, args.out.as_deref())?;
    println!("wrote {} and {}", svg.display(), csv.display());
    Ok(())
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let mut kv = match &args.spec {
        Some(p) => KeyValues::load(p).map_err(CliError::config_from)?,
        None => KeyValues::default(),
    };
    apply_overrides(&mut kv, &args.overrides)?;
    let spec = SyntheticSpec::from_kv(&kv)?;
    let data = generate_synthetic(&spec)?;
    create_dir(&args.out)?;
    data.table.write_csv(&args.out.join("signals.csv"))?;
    data.graph.write_edge_csv(&args.out.join("graph.csv"))?;
    write_file(
        &args.out.join("synthetic_spec.txt"),
        &spec.to_kv().to_text(),
    )?;
    let mut groups = format!("timestamp,regime,{}\n", data.table.names().join(","));
    for (s, ts) in data.table.timestamps().iter().enumerate() {
        let g: Vec<String> = data.groups_at(s).iter().map(usize::to_string).collect();
        let _ = writeln!(
            groups,
            "{},{},{}",
            format_timestamp(ts),
            spec.regime_at(s),
            g.join(",")
        );
    }
    write_file(&args.out.join("groups.csv"), &groups)?;
    println!(
        "wrote {} steps x {} sensors to {}",
        data.table.num_steps(),
        data.table.num_nodes(),
        args.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average() {
        assert!(trailing_average(&[0.4; 30], 12).iter().all(|v| (v - 0.4).abs() < 1e-12));
        let v: Vec<f64> = (0..14).map(f64::from).collect();
        let ma = trailing_average(&v, 12);
        assert_eq!(ma[0], 0.0);
        assert_eq!(ma[1], 0.5);
        assert_eq!(ma[13], (2..14).sum::<i32>() as f64 / 12.0);
    }

    #[test]
    fn slugs() {
        let slugs: Vec<String> = AdjacencyCombo::ABLATIONS
            .iter()
            .map(|&c| combo_slug(c))
            .collect();
        assert_eq!(slugs, ["p", "p-sa", "t-sa", "t-p", "t-p-sa"]);
    }
}
