//! Optimization loop, evaluation, checkpoints and the gradient check.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod metrics;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, Objective};
pub use metrics::{compute_metrics, evaluate_hi, hi_baseline, hi_predictions, Metrics, MetricsReport};

use crate::config::RunConfig;
use crate::data::Window;
use crate::error::{contract, Error, Result};
use crate::losses::LossBreakdown;
use crate::model::{ForwardOutput, Model, ModelParams, Sample};
use crate::par::Execution;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub lr: f64,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { batch_size: 16, epochs: 100, patience: 30, lr: AdamState::DEFAULT_LR, seed: 0, execution: Execution::default() }
    }
}

impl TrainConfig {
    pub fn from_run(r: &RunConfig) -> Self {
        TrainConfig {
            batch_size: r.batch_size,
            epochs: r.epochs,
            patience: r.patience,
            lr: r.lr,
            seed: r.seed,
            execution: if r.parallel { Execution::Parallel } else { Execution::Sequential },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's training windows, taken before each batch update.
    pub losses: LossBreakdown,
    pub val_mae: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub const CSV_HEADER: &'static str = "epoch,l_mae,l_con,l_dev,total,val_mae";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            let l = &r.losses;
            writeln!(out, "{},{},{},{},{},{}", r.epoch, l.l_mae, l.l_con, l.l_dev, l.total, r.val_mae)
                .expect("write to string");
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: History,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub stopped_early: bool,
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let mut m = LossBreakdown { lambda_con: parts[0].lambda_con, lambda_dev: parts[0].lambda_dev, ..Default::default() };
    for p in parts {
        m.l_mae += p.l_mae;
        m.l_con += p.l_con;
        m.l_dev += p.l_dev;
        m.total += p.total;
    }
    m.l_mae /= n;
    m.l_con /= n;
    m.l_dev /= n;
    m.total /= n;
    m
}

/// Batch-mean gradient; per-window results are reduced in window order.
pub fn batch_gradient(
    model: &Model,
    samples: &[Sample],
    exec: Execution,
) -> Result<(Vec<LossBreakdown>, Vec<Tensor>)> {
    if samples.is_empty() {
        return Err(contract("empty batch"));
    }
    let results = exec.map(samples, |s| model.loss_and_grads(s));
    let mut parts = Vec::with_capacity(samples.len());
    let mut sum: Option<Vec<Tensor>> = None;
    for r in results {
        let (loss, grads) = r?;
        parts.push(loss);
        match &mut sum {
            None => sum = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.add_assign(g);
                }
            }
        }
    }
    let mut sum = sum.expect("non-empty batch");
    let inv = 1.0 / samples.len() as f64;
    for g in &mut sum {
        g.scale_assign(inv);
    }
    Ok((parts, sum))
}

/// Trains `model` in place and leaves it holding the best-validation parameters.
pub fn train(model: &mut Model, train_windows: &[Window], val_windows: &[Window], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, train_windows, val_windows, cfg, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    model: &mut Model,
    train_windows: &[Window],
    val_windows: &[Window],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(contract("training needs non-empty training and validation windows"));
    }
    if cfg.batch_size == 0 {
        return Err(contract("batch size must be positive"));
    }
    let samples: Vec<Sample> = train_windows.iter().map(|w| model.sample(w)).collect();
    let val_samples: Vec<Sample> = val_windows.iter().map(|w| model.sample(w)).collect();
    let mut adam = AdamState::new(model.params.flat(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();

    let mut history = History::default();
    let mut best: Option<(usize, f64, ModelParams<Tensor>)> = None;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_parts = Vec::with_capacity(samples.len());
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let at = |op: String| Error::Numeric { op: format!("epoch {epoch}, batch {}: {op}", b + 1) };
            let (parts, grads) = batch_gradient(model, &batch, cfg.execution).map_err(|e| match e {
                Error::Numeric { op } => at(op),
                other => other,
            })?;
            if let Some(p) = parts.iter().find(|p| !p.is_finite()) {
                return Err(at(format!("non-finite loss {p:?}")));
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(at("non-finite gradient".into()));
            }
            epoch_parts.extend(parts);
            let mut flat: Vec<Tensor> = model.params.flat().into_iter().cloned().collect();
            adam.step(&mut flat, &grads)?;
            model.params = model.params.with_flat(flat)?;
        }

        let val_mae = evaluate_samples(model, &val_samples, cfg.execution)?.average.mae;
        let record = EpochRecord { epoch, losses: mean_breakdown(&epoch_parts), val_mae };
        on_epoch(&record);
        history.records.push(record);

        let improved = best.as_ref().is_none_or(|(_, v, _)| val_mae < *v);
        if improved {
            best = Some((epoch, val_mae, model.params.clone()));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.0);
        if cfg.patience > 0 && epoch - best_epoch >= cfg.patience {
            stopped_early = true;
            break;
        }
    }

    let (best_epoch, best_val_mae) = match best {
        Some((e, v, params)) => {
            model.params = params;
            (e, v)
        }
        None => (0, f64::NAN),
    };
    Ok(TrainOutcome { history, best_epoch, best_val_mae, stopped_early })
}

/// Forward passes over `samples` with read-only parameters, in order.
pub fn predict_samples(model: &Model, samples: &[Sample], exec: Execution) -> Result<Vec<ForwardOutput>> {
    exec.map(samples, |s| model.predict(s)).into_iter().collect()
}

pub fn predict_windows(model: &Model, windows: &[Window], exec: Execution) -> Result<Vec<ForwardOutput>> {
    let samples: Vec<Sample> = windows.iter().map(|w| model.sample(w)).collect();
    predict_samples(model, &samples, exec)
}

fn evaluate_samples(model: &Model, samples: &[Sample], exec: Execution) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(contract("cannot evaluate an empty window set"));
    }
    let outputs = predict_samples(model, samples, exec)?;
    let preds: Vec<Tensor> = outputs.into_iter().map(|o| o.prediction).collect();
    let targets: Vec<Tensor> = samples
        .iter()
        .map(|s| s.target.clone().ok_or_else(|| contract("evaluation sample without a target")))
        .collect::<Result<_>>()?;
    compute_metrics(&preds, &targets, model.normalizer.null_value)
}

/// Per-horizon and average metrics of `model` on `windows`.
pub fn evaluate(model: &Model, windows: &[Window], exec: Execution) -> Result<MetricsReport> {
    let samples: Vec<Sample> = windows.iter().map(|w| model.sample(w)).collect();
    evaluate_samples(model, &samples, exec)
}
