use crate::data::{Normalizer, Window};
use crate::error::{contract, dim, Result};
use crate::tensor::Tensor;

/// MAPE only counts targets with a magnitude above this.
pub const MAPE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent; NaN when no target qualifies.
    pub mape: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// One row per forecast step, step 1 first.
    pub horizons: Vec<Metrics>,
    pub average: Metrics,
    pub windows: usize,
}

impl MetricsReport {
    pub fn to_csv_rows(&self, label: &str) -> String {
        let mut out = String::new();
        for (k, m) in self.horizons.iter().enumerate() {
            out.push_str(&format!("{label},{},{},{},{}\n", k + 1, m.mae, m.rmse, m.mape));
        }
        let a = self.average;
        out.push_str(&format!("{label},avg,{},{},{}\n", a.mae, a.rmse, a.mape));
        out
    }

    pub const CSV_HEADER: &'static str = "model,horizon,mae,rmse,mape";
}

#[derive(Clone, Copy, Debug, Default)]
struct Sums {
    abs: f64,
    sq: f64,
    n: usize,
    ape: f64,
    n_ape: usize,
}

impl Sums {
    fn add(&mut self, pred: f64, y: f64) {
        let e = pred - y;
        self.abs += e.abs();
        self.sq += e * e;
        self.n += 1;
        if y.abs() > MAPE_EPS {
            self.ape += (e / y).abs();
            self.n_ape += 1;
        }
    }

    fn merge(&mut self, o: &Sums) {
        self.abs += o.abs;
        self.sq += o.sq;
        self.n += o.n;
        self.ape += o.ape;
        self.n_ape += o.n_ape;
    }

    fn finish(&self) -> Metrics {
        let n = self.n as f64;
        Metrics {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: if self.n_ape == 0 { f64::NAN } else { 100.0 * self.ape / self.n_ape as f64 },
        }
    }
}

/// Metrics over paired `[T', N, C]` predictions and targets, original
/// scale. Entries whose target equals `null_value` are skipped.
pub fn compute_metrics(preds: &[Tensor], targets: &[Tensor], null_value: Option<f64>) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(contract("cannot evaluate an empty window set"));
    }
    if preds.len() != targets.len() {
        return Err(dim("compute_metrics", format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    let steps = targets[0].shape()[0];
    let mut per = vec![Sums::default(); steps];
    for (p, y) in preds.iter().zip(targets) {
        if p.shape() != y.shape() || y.shape()[0] != steps {
            return Err(dim("compute_metrics", format!("prediction {:?} vs target {:?}", p.shape(), y.shape())));
        }
        let width = y.len() / steps;
        for (i, (&pv, &yv)) in p.data().iter().zip(y.data()).enumerate() {
            if null_value != Some(yv) {
                per[i / width].add(pv, yv);
            }
        }
    }
    if per.iter().any(|s| s.n == 0) {
        return Err(contract("every target entry of some horizon is null"));
    }
    let mut all = Sums::default();
    for s in &per {
        all.merge(s);
    }
    Ok(MetricsReport { horizons: per.iter().map(Sums::finish).collect(), average: all.finish(), windows: preds.len() })
}

/// Repeats the last observed step `horizon` times.
pub fn hi_baseline(input: &Tensor, horizon: usize) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 3 || s[0] == 0 {
        return Err(dim("hi_baseline", format!("input {s:?}")));
    }
    let width = s[1] * s[2];
    let last = &input.data()[(s[0] - 1) * width..];
    let data = (0..horizon).flat_map(|_| last.iter().copied()).collect();
    Tensor::new(vec![horizon, s[1], s[2]], data)
}

/// HI predictions for windows whose inputs are normalized.
pub fn hi_predictions(windows: &[Window], norm: &Normalizer) -> Result<Vec<Tensor>> {
    windows
        .iter()
        .map(|w| {
            let raw = w.input.map(|v| if norm.null_value == Some(v) { v } else { norm.invert(v) });
            hi_baseline(&raw, w.horizon())
        })
        .collect()
}

pub fn evaluate_hi(windows: &[Window], norm: &Normalizer) -> Result<MetricsReport> {
    let preds = hi_predictions(windows, norm)?;
    let targets: Vec<Tensor> = windows.iter().map(|w| w.target.clone()).collect();
    compute_metrics(&preds, &targets, norm.null_value)
}
