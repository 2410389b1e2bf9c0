//! Series ingestion, normalization, splitting, windowing and the synthetic
//! generator.
//!
//! ## File formats
//!
//! * `<name>.csv`: header `timestep,s0,s1,…`, then one row per timestep: an
//!   integer timestep followed by one decimal reading per sensor. Timesteps
//!   must increase by exactly one per row.
//! * `<name>.meta.json`: `{"name", "steps_per_day", "start_weekday",
//!   "null_value"}`; `null_value` may be omitted or `null`.
//!
//! Both are UTF-8 with LF line endings.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub name: String,
    pub steps_per_day: usize,
    /// 0 = Monday.
    pub start_weekday: usize,
    #[serde(default)]
    pub null_value: Option<f64>,
}

impl DatasetMeta {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_day == 0 {
            return Err(config("steps_per_day must be positive"));
        }
        if self.start_weekday > 6 {
            return Err(config(format!("start_weekday must be in 0..=6, got {}", self.start_weekday)));
        }
        Ok(())
    }

    pub fn steps_per_week(&self) -> usize {
        7 * self.steps_per_day
    }

    pub fn is_null(&self, v: f64) -> bool {
        self.null_value == Some(v)
    }
}

/// `[T, N, C]` observations. `start` is the absolute timestep of row 0, so
/// split views keep their calendar position.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesTensor {
    pub values: Tensor,
    pub meta: DatasetMeta,
    pub start: usize,
}

impl SeriesTensor {
    pub fn new(values: Tensor, meta: DatasetMeta) -> Result<Self> {
        if values.shape().len() != 3 || values.shape()[0] == 0 {
            return Err(contract(format!("series must be [T >= 1, N, C], got {:?}", values.shape())));
        }
        meta.validate()?;
        Ok(SeriesTensor { values, meta, start: 0 })
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nodes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    /// Values of one timestep (`N·C` entries, node-major).
    pub fn step(&self, t: usize) -> &[f64] {
        let w = self.nodes() * self.channels();
        &self.values.data()[t * w..(t + 1) * w]
    }

    pub fn get(&self, t: usize, n: usize, c: usize) -> f64 {
        self.step(t)[n * self.channels() + c]
    }

    /// Rows `[from, to)` as a new series, keeping the absolute timeline.
    pub fn slice(&self, from: usize, to: usize) -> SeriesTensor {
        let w = self.nodes() * self.channels();
        let data = self.values.data()[from * w..to * w].to_vec();
        let values = Tensor::new(vec![to - from, self.nodes(), self.channels()], data).expect("slice shape");
        SeriesTensor { values, meta: self.meta.clone(), start: self.start + from }
    }

    /// Time-of-day index of an absolute timestep.
    pub fn tod(&self, absolute_t: usize) -> usize {
        absolute_t % self.meta.steps_per_day
    }
}

/// Z-score normalization with a single mean/std per dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
    pub null_value: Option<f64>,
}

const STD_FLOOR: f64 = 1e-8;

impl Normalizer {
    /// Fits on the non-null entries of `train`.
    pub fn fit(train: &SeriesTensor) -> Result<Self> {
        let valid: Vec<f64> = train.values.data().iter().copied().filter(|v| !train.meta.is_null(*v)).collect();
        if valid.is_empty() {
            return Err(contract("cannot fit a normalizer: no valid training entries"));
        }
        let n = valid.len() as f64;
        let mean = valid.iter().sum::<f64>() / n;
        let var = valid.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Normalizer { mean, std: var.sqrt().max(STD_FLOOR), null_value: train.meta.null_value })
    }

    fn is_null(&self, v: f64) -> bool {
        self.null_value == Some(v)
    }

    pub fn apply(&self, v: f64) -> f64 {
        if self.is_null(v) {
            v
        } else {
            (v - self.mean) / self.std
        }
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }

    pub fn apply_tensor(&self, t: &Tensor) -> Tensor {
        t.map(|v| self.apply(v))
    }
}

/// One stride-1 training/evaluation sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// `[T, N, C]`, normalized.
    pub input: Tensor,
    /// `[T', N, C]`, original scale.
    pub target: Tensor,
    /// Absolute timestep of the first input step.
    pub start: usize,
    /// Time-of-day indices of the `T` input steps followed by the `T'` target steps.
    pub tod: Vec<usize>,
}

impl Window {
    pub fn input_len(&self) -> usize {
        self.input.shape()[0]
    }

    pub fn horizon(&self) -> usize {
        self.target.shape()[0]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WindowSet {
    pub windows: Vec<Window>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Stride-1 windows over `split`: inputs normalized, targets raw.
pub fn make_windows(split: &SeriesTensor, input_len: usize, horizon: usize, norm: &Normalizer) -> Result<WindowSet> {
    let need = input_len + horizon;
    if input_len == 0 || horizon == 0 {
        return Err(contract("window lengths must be positive"));
    }
    if split.len() < need {
        return Err(contract(format!("split of {} steps is shorter than T + T' = {}", split.len(), need)));
    }
    let (n, c) = (split.nodes(), split.channels());
    let windows = (0..=split.len() - need)
        .map(|s| {
            let input = split.slice(s, s + input_len).values;
            let input = Tensor::new(vec![input_len, n, c], norm.apply_tensor(&input).into_data()).expect("shape");
            let target = split.slice(s + input_len, s + need).values;
            let start = split.start + s;
            let tod = (0..need).map(|i| split.tod(start + i)).collect();
            Window { input, target, start, tod }
        })
        .collect();
    Ok(WindowSet { windows })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: SeriesTensor,
    pub val: SeriesTensor,
    pub test: SeriesTensor,
}

/// Contiguous chronological split by flooring; the remainder goes to test.
pub fn split_dataset(x: &SeriesTensor, ratios: (f64, f64, f64), min_len: usize) -> Result<Splits> {
    let (tr, va, te) = ratios;
    if !(tr > 0.0 && va > 0.0 && te > 0.0) || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(config(format!("split ratios must be positive and sum to 1, got {tr}/{va}/{te}")));
    }
    let len = x.len();
    let n_train = (len as f64 * tr + 1e-9).floor() as usize;
    let n_val = (len as f64 * va + 1e-9).floor() as usize;
    let n_test = len.saturating_sub(n_train + n_val);
    for (name, l) in [("train", n_train), ("val", n_val), ("test", n_test)] {
        if l < min_len.max(1) {
            return Err(contract(format!("{name} split has {l} steps, needs at least {}", min_len.max(1))));
        }
    }
    Ok(Splits {
        train: x.slice(0, n_train),
        val: x.slice(n_train, n_train + n_val),
        test: x.slice(n_train + n_val, len),
    })
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn parse_series_csv(text: &str) -> Result<(usize, usize, Vec<f64>)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty series file"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"timestep") || cols.len() < 2 {
        return Err(parse_err(1, "header must be `timestep,s0,s1,...`"));
    }
    let n = cols.len() - 1;
    let mut values = Vec::new();
    let mut first_t = None;
    let mut prev_t: Option<usize> = None;
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != n + 1 {
            return Err(parse_err(lineno, format!("expected {} fields, found {}", n + 1, fields.len())));
        }
        let t: usize = fields[0].parse().map_err(|_| parse_err(lineno, format!("bad timestep `{}`", fields[0])))?;
        if let Some(p) = prev_t {
            if t != p + 1 {
                return Err(parse_err(lineno, format!("timestep {t} does not follow {p}")));
            }
        }
        first_t.get_or_insert(t);
        prev_t = Some(t);
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| parse_err(lineno, format!("bad reading `{f}`")))?;
            if !v.is_finite() {
                return Err(parse_err(lineno, format!("non-finite reading `{f}`")));
            }
            values.push(v);
        }
    }
    let first_t = first_t.ok_or_else(|| parse_err(2, "series has no rows"))?;
    Ok((first_t, n, values))
}

pub fn parse_meta(text: &str) -> Result<DatasetMeta> {
    let meta: DatasetMeta = serde_json::from_str(text).map_err(|e| parse_err(e.line(), e.to_string()))?;
    meta.validate()?;
    Ok(meta)
}

pub fn load_dataset(series_path: &Path, meta_path: &Path) -> Result<SeriesTensor> {
    let meta = parse_meta(&fs::read_to_string(meta_path)?)?;
    let (first_t, n, values) = parse_series_csv(&fs::read_to_string(series_path)?)?;
    let t = values.len() / n;
    let mut s = SeriesTensor::new(Tensor::new(vec![t, n, 1], values)?, meta)?;
    s.start = first_t;
    Ok(s)
}

/// Locates `<name>.meta.json` and `<name>.csv` inside `dir`.
pub fn dataset_paths(dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let mut metas: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|f| f.to_str()).is_some_and(|f| f.ends_with(".meta.json")))
        .collect();
    metas.sort();
    match metas.as_slice() {
        [meta] => {
            let fname = meta.file_name().and_then(|f| f.to_str()).expect("utf-8 name");
            let stem = fname.trim_end_matches(".meta.json");
            Ok((dir.join(format!("{stem}.csv")), meta.clone()))
        }
        [] => Err(contract(format!("no *.meta.json in {}", dir.display()))),
        _ => Err(contract(format!("several *.meta.json files in {}", dir.display()))),
    }
}

pub fn load_dataset_dir(dir: &Path) -> Result<SeriesTensor> {
    let (series, meta) = dataset_paths(dir)?;
    load_dataset(&series, &meta)
}

pub fn series_to_csv(s: &SeriesTensor) -> String {
    let mut out = String::from("timestep");
    let (n, c) = (s.nodes(), s.channels());
    for i in 0..n * c {
        let _ = write!(out, ",s{i}");
    }
    out.push('\n');
    for t in 0..s.len() {
        let _ = write!(out, "{}", s.start + t);
        for v in s.step(t) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn meta_to_json(meta: &DatasetMeta) -> String {
    let mut s = serde_json::to_string_pretty(meta).expect("meta serializes");
    s.push('\n');
    s
}

/// Writes `<dir>/<name>.csv` and `<dir>/<name>.meta.json`.
pub fn write_dataset(dir: &Path, s: &SeriesTensor) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let series = dir.join(format!("{}.csv", s.meta.name));
    let meta = dir.join(format!("{}.meta.json", s.meta.name));
    fs::write(&series, series_to_csv(s))?;
    fs::write(&meta, meta_to_json(&s.meta))?;
    Ok((series, meta))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeviationLevel {
    Low,
    Medium,
    High,
}

impl DeviationLevel {
    /// Event amplitude as a fraction of the node's daily swing `b_n`.
    pub fn amplitude_fraction(self) -> f64 {
        match self {
            DeviationLevel::Low => 0.05,
            DeviationLevel::Medium => 0.25,
            DeviationLevel::High => 0.75,
        }
    }
}

impl std::str::FromStr for DeviationLevel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(DeviationLevel::Low),
            "medium" => Ok(DeviationLevel::Medium),
            "high" => Ok(DeviationLevel::High),
            other => Err(config(format!("deviation level must be low, medium or high, got `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub nodes: usize,
    pub weeks: usize,
    pub steps_per_day: usize,
    pub deviation: DeviationLevel,
    pub seed: u64,
    pub noise: bool,
    pub events: bool,
}

impl GenConfig {
    pub const DEFAULT_STEPS_PER_DAY: usize = 24;

    pub fn new(nodes: usize, weeks: usize, deviation: DeviationLevel, seed: u64) -> Self {
        GenConfig {
            nodes,
            weeks,
            steps_per_day: Self::DEFAULT_STEPS_PER_DAY,
            deviation,
            seed,
            noise: true,
            events: true,
        }
    }
}

/// Per-node constants of the base signal `a + b·sin(2π·tod/steps_per_day + φ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeSignal {
    pub level: f64,
    pub swing: f64,
    pub phase: f64,
}

impl NodeSignal {
    pub fn base(&self, t: usize, steps_per_day: usize) -> f64 {
        let tod = (t % steps_per_day) as f64 / steps_per_day as f64;
        self.level + self.swing * (2.0 * std::f64::consts::PI * tod + self.phase).sin()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeviationEvent {
    pub node: usize,
    pub start: usize,
    pub duration: usize,
    /// Signed peak amplitude.
    pub amplitude: f64,
}

impl DeviationEvent {
    /// Half-sine bump value at absolute timestep `t`.
    pub fn value_at(&self, t: usize) -> f64 {
        if t < self.start || t >= self.start + self.duration {
            return 0.0;
        }
        let k = (t - self.start) as f64;
        self.amplitude * (std::f64::consts::PI * (k + 0.5) / self.duration as f64).sin()
    }
}

#[derive(Clone, Debug)]
pub struct Synthetic {
    pub series: SeriesTensor,
    pub nodes: Vec<NodeSignal>,
    pub events: Vec<DeviationEvent>,
}

/// Daily sinusoids with seeded one-hour deviation bumps (one per node per day
/// on average) and 1% observation noise.
pub fn synth_generate(cfg: &GenConfig) -> Result<Synthetic> {
    if cfg.weeks < 2 {
        return Err(config("synthetic data needs at least two weeks"));
    }
    if cfg.nodes == 0 || cfg.steps_per_day == 0 {
        return Err(config("nodes and steps_per_day must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spd = cfg.steps_per_day;
    let total = cfg.weeks * 7 * spd;

    let nodes: Vec<NodeSignal> = (0..cfg.nodes)
        .map(|_| NodeSignal {
            level: rng.random_range(40.0..70.0),
            swing: rng.random_range(5.0..15.0),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        })
        .collect();

    let duration = (spd as f64 / 24.0).round().max(1.0) as usize;
    let frac = cfg.deviation.amplitude_fraction();
    let mut events = Vec::new();
    if cfg.events {
        for (n, sig) in nodes.iter().enumerate() {
            for _ in 0..cfg.weeks * 7 {
                let start = rng.random_range(0..total);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                events.push(DeviationEvent { node: n, start, duration, amplitude: sign * frac * sig.swing });
            }
        }
    }

    let mut data = vec![0.0; total * cfg.nodes];
    for t in 0..total {
        for (n, sig) in nodes.iter().enumerate() {
            data[t * cfg.nodes + n] = sig.base(t, spd);
        }
    }
    for e in &events {
        for t in e.start..(e.start + e.duration).min(total) {
            data[t * cfg.nodes + e.node] += e.value_at(t);
        }
    }
    if cfg.noise {
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        for t in 0..total {
            for (n, sig) in nodes.iter().enumerate() {
                data[t * cfg.nodes + n] += 0.01 * sig.swing * unit.sample(&mut rng);
            }
        }
    }

    let meta = DatasetMeta { name: "synthetic".into(), steps_per_day: spd, start_weekday: 0, null_value: None };
    let series = SeriesTensor::new(Tensor::new(vec![total, cfg.nodes, 1], data)?, meta)?;
    Ok(Synthetic { series, nodes, events })
}
