//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is typed;
//! unknown or repeated keys are rejected. `nodes`, `channels` and
//! `steps_per_day` default to 0, meaning "take from the dataset".

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SeriesTensor;
use crate::error::{config, Error, Result};
use crate::model::{ModelConfig, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub variant: Variant,
    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig { nodes: 0, channels: 0, steps_per_day: 0, ..ModelConfig::default() },
            variant: Variant::Full,
            data: None,
            out_dir: None,
            train_ratio: 0.7,
            val_ratio: 0.1,
            test_ratio: 0.2,
            seed: 0,
            batch_size: 16,
            epochs: 100,
            patience: 30,
            lr: 1e-3,
            parallel: true,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str, line: usize) -> Result<T> {
    raw.parse().map_err(|_| Error::Parse { line, msg: format!("invalid value `{raw}` for `{key}`") })
}

fn parse_bool(key: &str, raw: &str, line: usize) -> Result<bool> {
    match raw {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Parse { line, msg: format!("`{key}` expects true or false, got `{raw}`") }),
    }
}

macro_rules! keys {
    ($( $key:literal => $($field:ident).+ : $kind:ident ),* $(,)?) => {
        const KEYS: &[&str] = &[$($key),*];

        fn assign(cfg: &mut RunConfig, key: &str, raw: &str, line: usize) -> Result<()> {
            match key {
                $( $key => { cfg.$($field).+ = keys!(@parse $kind, key, raw, line)?; } )*
                "variant" => cfg.variant = raw.parse().map_err(|e: Error| Error::Parse { line, msg: e.to_string() })?,
                "data" => cfg.data = Some(PathBuf::from(raw)),
                "out_dir" => cfg.out_dir = Some(PathBuf::from(raw)),
                _ => return Err(Error::Parse { line, msg: format!("unknown key `{key}`") }),
            }
            Ok(())
        }

        fn write_keys(cfg: &RunConfig, out: &mut String) {
            $( writeln!(out, "{} = {}", $key, cfg.$($field).+).expect("write to string"); )*
        }
    };
    (@parse bool, $key:expr, $raw:expr, $line:expr) => { parse_bool($key, $raw, $line) };
    (@parse value, $key:expr, $raw:expr, $line:expr) => { parse_value($key, $raw, $line) };
}

keys! {
    "nodes" => model.nodes: value,
    "channels" => model.channels: value,
    "input_len" => model.input_len: value,
    "horizon" => model.horizon: value,
    "steps_per_day" => model.steps_per_day: value,
    "hidden" => model.hidden: value,
    "proto_dim" => model.proto_dim: value,
    "prototypes" => model.prototypes: value,
    "cheb_order" => model.cheb_order: value,
    "encoder_layers" => model.encoder_layers: value,
    "decoder_layers" => model.decoder_layers: value,
    "e_in" => model.e_in: value,
    "e_node" => model.e_node: value,
    "e_tod" => model.e_tod: value,
    "e_graph" => model.e_graph: value,
    "margin" => model.margin: value,
    "lambda_con" => model.lambda_con: value,
    "lambda_dev" => model.lambda_dev: value,
    "share_query_proj" => model.share_query_proj: bool,
    "naive_ssdl" => model.naive_ssdl: bool,
    "no_ssdl" => model.no_ssdl: bool,
    "disable_stopgrad" => model.disable_stopgrad: bool,
    "train_ratio" => train_ratio: value,
    "val_ratio" => val_ratio: value,
    "test_ratio" => test_ratio: value,
    "seed" => seed: value,
    "batch_size" => batch_size: value,
    "epochs" => epochs: value,
    "patience" => patience: value,
    "lr" => lr: value,
    "parallel" => parallel: bool,
}

impl RunConfig {
    pub fn known_keys() -> Vec<&'static str> {
        let mut k = KEYS.to_vec();
        k.extend(["variant", "data", "out_dir"]);
        k
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw_line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| Error::Parse { line, msg: format!("expected `key = value`, got `{trimmed}`") })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Parse { line, msg: format!("duplicate key `{key}`") });
            }
            assign(&mut cfg, key, value, line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; a relative `data` path is resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = RunConfig::parse(&text)?;
        if let (Some(data), Some(parent)) = (&cfg.data, path.parent()) {
            if data.is_relative() {
                cfg.data = Some(parent.join(data));
            }
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(d) = &self.data {
            writeln!(out, "data = {}", d.display()).expect("write to string");
        }
        if let Some(d) = &self.out_dir {
            writeln!(out, "out_dir = {}", d.display()).expect("write to string");
        }
        writeln!(out, "variant = {}", self.variant.name()).expect("write to string");
        write_keys(self, &mut out);
        out
    }

    pub fn validate(&self) -> Result<()> {
        let ratios = [self.train_ratio, self.val_ratio, self.test_ratio];
        if ratios.iter().any(|r| r.is_nan() || *r <= 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(config(format!("split ratios must be positive and sum to 1, got {ratios:?}")));
        }
        if self.batch_size == 0 {
            return Err(config("batch_size must be positive"));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(config("lr must be positive"));
        }
        Ok(())
    }

    /// Model configuration with the variant applied and dataset extents
    /// filled in; explicit extents must agree with the dataset.
    pub fn model_for(&self, data: &SeriesTensor) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        for (name, slot, actual) in [
            ("nodes", &mut m.nodes, data.nodes()),
            ("channels", &mut m.channels, data.channels()),
            ("steps_per_day", &mut m.steps_per_day, data.meta.steps_per_day),
        ] {
            if *slot == 0 {
                *slot = actual;
            } else if *slot != actual {
                return Err(config(format!("{name} = {} but the dataset has {actual}", *slot)));
            }
        }
        self.variant.apply(&mut m);
        m.validate()?;
        Ok(m)
    }

    /// Model configuration without a dataset; extents must be explicit.
    pub fn model_standalone(&self) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        if m.channels == 0 {
            m.channels = 1;
        }
        if m.nodes == 0 || m.steps_per_day == 0 {
            return Err(config("nodes and steps_per_day must be set when no dataset is given"));
        }
        self.variant.apply(&mut m);
        m.validate()?;
        Ok(m)
    }
}

/// `ModelConfig` alone, in the same format, for checkpoints.
pub fn model_config_to_text(m: &ModelConfig) -> String {
    let cfg = RunConfig { model: m.clone(), ..RunConfig::default() };
    let mut out = String::new();
    write_keys(&cfg, &mut out);
    out.lines()
        .filter(|l| {
            let key = l.split('=').next().unwrap_or("").trim();
            !matches!(
                key,
                "train_ratio" | "val_ratio" | "test_ratio" | "seed" | "batch_size" | "epochs" | "patience" | "lr" | "parallel"
            )
        })
        .map(|l| format!("{l}\n"))
        .collect()
}

pub fn model_config_from_text(text: &str) -> Result<ModelConfig> {
    let cfg = RunConfig::parse(text)?;
    cfg.model.validate()?;
    Ok(cfg.model)
}
