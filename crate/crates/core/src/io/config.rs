//! Flat `key = value` config files holding a [`TrainConfig`].
//!
//! Blank lines and lines starting with `#` are ignored. Missing keys keep
//! their MLP defaults; unknown or repeated keys are errors. Lists are
//! comma-separated and schedule entries are `epoch:multiplier`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::read_file;
use crate::error::{Error, Result};
use crate::netgraph::{AggregateMode, Init};
use crate::trainer::TrainConfig;

fn value<V: FromStr>(key: &str, raw: &str, line: usize) -> Result<V> {
    raw.parse()
        .map_err(|_| Error::Config(format!("line {line}: cannot parse {key} = {raw:?}")))
}

fn list<V: FromStr>(key: &str, raw: &str, line: usize) -> Result<Vec<V>> {
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|s| value(key, s.trim(), line)).collect()
}

fn flag(key: &str, raw: &str, line: usize) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("line {line}: {key} expects true or false, got {raw:?}"))),
    }
}

pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::mlp_defaults();
    let mut seen = HashSet::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw_line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, raw) = trimmed
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line}: expected key = value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        if !seen.insert(key.to_string()) {
            return Err(Error::Config(format!("line {line}: duplicate key {key}")));
        }
        match key {
            "epochs" => cfg.epochs = value(key, raw, line)?,
            "batch_size" => cfg.batch_size = value(key, raw, line)?,
            "learning_rate" => cfg.learning_rate = value(key, raw, line)?,
            "lr_schedule" => {
                cfg.lr_schedule = list::<String>(key, raw, line)?
                    .iter()
                    .map(|entry| {
                        let (e, m) = entry
                            .split_once(':')
                            .ok_or_else(|| Error::Config(format!("line {line}: schedule entry {entry:?} needs epoch:multiplier")))?;
                        Ok((value(key, e.trim(), line)?, value(key, m.trim(), line)?))
                    })
                    .collect::<Result<_>>()?
            }
            "momentum" => cfg.momentum = value(key, raw, line)?,
            "beta" => cfg.beta = value(key, raw, line)?,
            "row_fraction" => cfg.row_fraction = value(key, raw, line)?,
            "conv_row_fraction" => cfg.conv_row_fraction = value(key, raw, line)?,
            "weight_decay" => cfg.weight_decay = value(key, raw, line)?,
            "decay_all_layers" => cfg.decay_all_layers = flag(key, raw, line)?,
            "dropout" => cfg.dropout = value(key, raw, line)?,
            "architecture" => cfg.architecture = raw.parse().map_err(|e| Error::Config(format!("line {line}: {e}")))?,
            "hidden" => cfg.hidden = list(key, raw, line)?,
            "blocks" => cfg.blocks = value(key, raw, line)?,
            "aggregate" => {
                cfg.aggregate = match raw {
                    "convex" => AggregateMode::Convex,
                    "sum" => AggregateMode::Sum,
                    _ => return Err(Error::Config(format!("line {line}: aggregate expects convex or sum"))),
                }
            }
            "init" => {
                cfg.init = match raw {
                    "parseval" => Init::Parseval,
                    "gaussian" => Init::Gaussian,
                    _ => return Err(Error::Config(format!("line {line}: init expects parseval or gaussian"))),
                }
            }
            "adversarial" => cfg.adversarial = flag(key, raw, line)?,
            "adv_sigma" => cfg.adv_sigma = value(key, raw, line)?,
            "augment" => cfg.augment = flag(key, raw, line)?,
            "train_subset" => cfg.train_subset = value(key, raw, line)?,
            "seed" => cfg.seed = value(key, raw, line)?,
            "reproducible" => cfg.reproducible = flag(key, raw, line)?,
            _ => return Err(Error::Config(format!("line {line}: unknown key {key}"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Canonical text form; `parse_config(&format_config(c)) == c`.
pub fn format_config(cfg: &TrainConfig) -> String {
    let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let schedule = cfg
        .lr_schedule
        .iter()
        .map(|(e, m)| format!("{e}:{m}"))
        .collect::<Vec<_>>()
        .join(",");
    let mut out = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(out, "{k} = {v}");
    };
    put("epochs", cfg.epochs.to_string());
    put("batch_size", cfg.batch_size.to_string());
    put("learning_rate", cfg.learning_rate.to_string());
    put("lr_schedule", schedule);
    put("momentum", cfg.momentum.to_string());
    put("beta", cfg.beta.to_string());
    put("row_fraction", cfg.row_fraction.to_string());
    put("conv_row_fraction", cfg.conv_row_fraction.to_string());
    put("weight_decay", cfg.weight_decay.to_string());
    put("decay_all_layers", cfg.decay_all_layers.to_string());
    put("dropout", cfg.dropout.to_string());
    put("architecture", cfg.architecture.name().to_string());
    put("hidden", join(&cfg.hidden));
    put("blocks", cfg.blocks.to_string());
    put(
        "aggregate",
        match cfg.aggregate {
            AggregateMode::Convex => "convex",
            AggregateMode::Sum => "sum",
        }
        .to_string(),
    );
    put(
        "init",
        match cfg.init {
            Init::Parseval => "parseval",
            Init::Gaussian => "gaussian",
        }
        .to_string(),
    );
    put("adversarial", cfg.adversarial.to_string());
    put("adv_sigma", cfg.adv_sigma.to_string());
    put("augment", cfg.augment.to_string());
    put("train_subset", cfg.train_subset.to_string());
    put("seed", cfg.seed.to_string());
    put("reproducible", cfg.reproducible.to_string());
    out
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| {
        Error::format(path.display().to_string(), e.utf8_error().valid_up_to() as u64, "config is not UTF-8")
    })?;
    parse_config(&text)
}
