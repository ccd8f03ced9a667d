//! Run configuration: model hyper-parameters plus data, split, optimizer and
//! output settings, read from and written to flat key=value files.

use std::path::{Path, PathBuf};

use pgcn_core::data::SplitSpec;
use pgcn_core::kv::KeyValues;
use pgcn_core::model::PgcnConfig;
use pgcn_core::training::{AdamConfig, TrainOptions};

use crate::CliError;

const RUN_KEYS: [&str; 14] = [
    "signals",
    "graph",
    "split",
    "epochs",
    "batch_size",
    "seed",
    "learning_rate",
    "beta1",
    "beta2",
    "adam_eps",
    "clip_norm",
    "lr_decay",
    "mask_zero",
    "time_of_day",
];
const EXTRA_KEYS: [&str; 2] = ["log_timing", "out"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: PgcnConfig,
    pub signals: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub split: SplitSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub lr_decay: f64,
    pub mask_zero: bool,
    pub time_of_day: bool,
    /// Write wall-clock seconds into train_log.csv (breaks bitwise reproducibility).
    pub log_timing: bool,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: PgcnConfig::default(),
            signals: None,
            graph: None,
            split: SplitSpec::default(),
            epochs: 100,
            batch_size: 64,
            seed: 0,
            adam: AdamConfig::default(),
            lr_decay: 1.0,
            mask_zero: true,
            time_of_day: false,
            log_timing: false,
            out: PathBuf::from("runs/pgcn"),
        }
    }
}

fn model_keys() -> Vec<String> {
    let mut kv = KeyValues::default();
    PgcnConfig::default().write_kv(&mut kv);
    kv.keys().map(str::to_string).collect()
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

impl RunConfig {
    /// Builds a config from `kv`; relative paths are taken relative to `base`.
    pub fn from_kv(kv: &KeyValues, base: &Path) -> Result<Self, CliError> {
        let known = model_keys();
        if let Some(k) = kv.keys().find(|k| {
            !known.iter().any(|m| m == k) && !RUN_KEYS.contains(k) && !EXTRA_KEYS.contains(k)
        }) {
            return Err(CliError::config(format!("unknown config key `{k}`")));
        }
        let d = RunConfig::default();
        let time_of_day = kv.get_or("time_of_day", d.time_of_day)?;
        let mut model_kv = kv.clone();
        let channels = 1 + usize::from(time_of_day);
        match kv.get::<usize>("input_channels")? {
            Some(c) if c != channels => {
                return Err(CliError::config(format!(
                    "input_channels={c} conflicts with time_of_day={time_of_day}"
                )))
            }
            _ => model_kv.insert("input_channels", channels),
        }
        let clip: f64 = kv.get_or("clip_norm", d.adam.clip_norm.unwrap_or(0.0))?;
        let cfg = RunConfig {
            model: PgcnConfig::from_kv(&model_kv)?,
            signals: kv.get_str("signals").map(|p| resolve(base, p)),
            graph: kv.get_str("graph").map(|p| resolve(base, p)),
            split: kv.get_or("split", d.split)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            seed: kv.get_or("seed", d.seed)?,
            adam: AdamConfig {
                learning_rate: kv.get_or("learning_rate", d.adam.learning_rate)?,
                beta1: kv.get_or("beta1", d.adam.beta1)?,
                beta2: kv.get_or("beta2", d.adam.beta2)?,
                eps: kv.get_or("adam_eps", d.adam.eps)?,
                clip_norm: (clip > 0.0).then_some(clip),
            },
            lr_decay: kv.get_or("lr_decay", d.lr_decay)?,
            mask_zero: kv.get_or("mask_zero", d.mask_zero)?,
            time_of_day,
            log_timing: kv.get_or("log_timing", d.log_timing)?,
            out: kv.get_str("out").map_or(d.out, |p| resolve(base, p)),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let kv = KeyValues::load(path).map_err(CliError::config_from)?;
        Self::from_kv(&kv, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.batch_size == 0 {
            return Err(CliError::config("batch_size must be positive"));
        }
        if !(self.adam.learning_rate > 0.0) || !(self.lr_decay > 0.0) {
            return Err(CliError::config(
                "learning_rate and lr_decay must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(CliError::config("beta1 and beta2 must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        self.model.write_kv(&mut kv);
        if let Some(p) = &self.signals {
            kv.insert("signals", absolute(p).display());
        }
        if let Some(p) = &self.graph {
            kv.insert("graph", absolute(p).display());
        }
        kv.insert("split", self.split);
        kv.insert("epochs", self.epochs);
        kv.insert("batch_size", self.batch_size);
        kv.insert("seed", self.seed);
        kv.insert("learning_rate", self.adam.learning_rate);
        kv.insert("beta1", self.adam.beta1);
        kv.insert("beta2", self.adam.beta2);
        kv.insert("adam_eps", self.adam.eps);
        kv.insert("clip_norm", self.adam.clip_norm.unwrap_or(0.0));
        kv.insert("lr_decay", self.lr_decay);
        kv.insert("mask_zero", self.mask_zero);
        kv.insert("time_of_day", self.time_of_day);
        kv.insert("log_timing", self.log_timing);
        kv.insert("out", absolute(&self.out).display());
        kv
    }

    pub fn to_text(&self) -> String {
        let mut text = String::from("# pgcn run configuration\n");
        text.push_str(&self.to_kv().to_text());
        text
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            adam: self.adam,
            lr_decay: self.lr_decay,
            mask_zero: self.mask_zero,
            checkpoint_dir: None,
            checkpoint_extra: KeyValues::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig {
            signals: Some("/data/s.csv".into()),
            epochs: 3,
            seed: 9,
            time_of_day: true,
            out: "/runs/a".into(),
            ..RunConfig::default()
        };
        cfg.model.input_channels = 2;
        cfg.adam.clip_norm = None;
        let kv = KeyValues::parse(&cfg.to_text(), "run").unwrap();
        assert_eq!(RunConfig::from_kv(&kv, Path::new("/")).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_conflicting_keys() {
        let kv = KeyValues::parse("epoch=3\n", "run").unwrap();
        assert_eq!(RunConfig::from_kv(&kv, Path::new(".")).unwrap_err().code, 2);
        let kv = KeyValues::parse("input_channels=2\n", "run").unwrap();
        assert_eq!(RunConfig::from_kv(&kv, Path::new(".")).unwrap_err().code, 2);
    }

    #[test]
    fn relative_paths_follow_config_dir() {
        let kv = KeyValues::parse("signals=s.csv\ngraph=/abs/g.csv\n", "run").unwrap();
        let cfg = RunConfig::from_kv(&kv, Path::new("/exp")).unwrap();
        assert_eq!(cfg.signals.unwrap(), PathBuf::from("/exp/s.csv"));
        assert_eq!(cfg.graph.unwrap(), PathBuf::from("/abs/g.csv"));
    }
}
