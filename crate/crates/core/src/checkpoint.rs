//! Checkpoint directories: `manifest.txt` (key=value), `params.bin`
//! (little-endian f64 in manifest order) and `graph.csv`.

use std::fs;
use std::path::Path;

use crate::data::Scaler;
use crate::error::{Error, Result};
use crate::graph::RoadGraph;
use crate::kv::KeyValues;
use crate::model::{PgcnConfig, PgcnModel};
use crate::tensor::Tensor;

const FORMAT: &str = "pgcn-checkpoint-1";
pub const MANIFEST: &str = "manifest.txt";
pub const PARAMS: &str = "params.bin";
pub const GRAPH: &str = "graph.csv";

#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub val_mae: f64,
    pub scaler: Scaler,
    pub seed: u64,
    /// Caller-defined entries, stored under a `run.` prefix.
    pub extra: KeyValues,
}

pub fn save_checkpoint(dir: &Path, model: &PgcnModel, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut kv = KeyValues::default();
    kv.insert("format", FORMAT);
    kv.insert("epoch", meta.epoch);
    kv.insert("val_mae", meta.val_mae);
    kv.insert("seed", meta.seed);
    kv.insert("scaler.mean", meta.scaler.mean);
    kv.insert("scaler.std", meta.scaler.std);
    kv.insert("nodes", model.graph().names().join(","));
    model.config().write_kv(&mut kv);
    for key in meta.extra.keys() {
        kv.insert(format!("run.{key}"), meta.extra.get_str(key).unwrap_or(""));
    }
    let mut bytes = Vec::with_capacity(model.params().scalar_count() * 8);
    for (_, p) in model.params().iter() {
        let shape: Vec<String> = p.value().shape().iter().map(usize::to_string).collect();
        kv.insert(
            format!("param.{}", p.name()),
            format!("{}@{}", shape.join("x"), bytes.len() / 8),
        );
        for v in p.value().data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let write = |name: &str, data: &[u8]| {
        let path = dir.join(name);
        fs::write(&path, data).map_err(|e| Error::io(path, e))
    };
    write(PARAMS, &bytes)?;
    model.graph().write_edge_csv(&dir.join(GRAPH))?;
    write(MANIFEST, kv.to_text().as_bytes())
}

/// Rebuilds the model and metadata saved by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(PgcnModel, CheckpointMeta)> {
    let kv = KeyValues::load(&dir.join(MANIFEST))?;
    if kv.get_str("format") != Some(FORMAT) {
        return Err(Error::Config(format!(
            "{}: not a {FORMAT} manifest",
            dir.display()
        )));
    }
    let config = PgcnConfig::from_kv(&kv)?;
    let nodes: Vec<String> = kv
        .require::<String>("nodes")?
        .split(',')
        .map(str::to_string)
        .collect();
    let graph_path = dir.join(GRAPH);
    let edge_lines = fs::read_to_string(&graph_path)
        .map_err(|e| Error::io(&graph_path, e))?
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .count();
    // runs without a road graph save a header-only edge list
    let graph = if edge_lines == 0 {
        RoadGraph::empty(nodes.clone())?
    } else {
        RoadGraph::load_edge_csv(&graph_path)?.aligned_to(&nodes)?
    };
    let seed = kv.require("seed")?;
    let mut model = PgcnModel::new(config, &graph, seed)?;

    let path = dir.join(PARAMS);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Config(format!(
            "{}: truncated parameter file",
            path.display()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let stored = kv.keys().filter(|k| k.starts_with("param.")).count();
    if stored != model.params().len() {
        return Err(Error::Config(format!(
            "checkpoint holds {stored} parameters, configuration builds {}",
            model.params().len()
        )));
    }
    for p in model.params_mut().iter_mut() {
        let key = format!("param.{}", p.name());
        let entry: String = kv.require(&key)?;
        let bad = || Error::Config(format!("malformed entry `{key}={entry}`"));
        let (shape, offset) = entry.split_once('@').ok_or_else(bad)?;
        let shape: Vec<usize> = shape
            .split('x')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        let offset: usize = offset.parse().map_err(|_| bad())?;
        if shape != p.value().shape() {
            return Err(Error::Config(format!(
                "parameter `{}` has shape {:?} in checkpoint, {:?} in configuration",
                p.name(),
                shape,
                p.value().shape()
            )));
        }
        let n: usize = shape.iter().product();
        let data = values.get(offset..offset + n).ok_or_else(bad)?.to_vec();
        p.set_value(Tensor::new(shape, data)?)?;
    }

    let mut extra = KeyValues::default();
    for key in kv.keys() {
        if let Some(k) = key.strip_prefix("run.") {
            extra.insert(k, kv.get_str(key).unwrap_or(""));
        }
    }
    let meta = CheckpointMeta {
        epoch: kv.require("epoch")?,
        val_mae: kv.require("val_mae")?,
        scaler: Scaler {
            mean: kv.require("scaler.mean")?,
            std: kv.require("scaler.std")?,
        },
        seed,
        extra,
    };
    Ok((model, meta))
}
