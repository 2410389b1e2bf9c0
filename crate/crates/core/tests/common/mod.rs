#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use stssdl::autodiff::softmax_rows;
use stssdl::config::RunConfig;
use stssdl::data::{synth_generate, DatasetMeta, DeviationLevel, GenConfig, SeriesTensor};
use stssdl::experiment::{prepare, Prepared};
use stssdl::graph::ChebWeights;
use stssdl::model::ModelConfig;
use stssdl::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// The small configuration used for gradient checks.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        nodes: 4,
        input_len: 3,
        horizon: 2,
        steps_per_day: 24,
        hidden: 8,
        proto_dim: 8,
        prototypes: 3,
        cheb_order: 2,
        e_in: 4,
        e_node: 4,
        e_tod: 4,
        e_graph: 4,
        ..ModelConfig::default()
    }
}

/// Run configuration with the tiny model dimensions and a short schedule.
pub fn tiny_run(epochs: usize) -> RunConfig {
    let m = tiny_model();
    let mut run = RunConfig { epochs, patience: 0, seed: 3, train_ratio: 0.6, val_ratio: 0.2, test_ratio: 0.2, ..RunConfig::default() };
    run.model.input_len = m.input_len;
    run.model.horizon = m.horizon;
    run.model.hidden = m.hidden;
    run.model.proto_dim = m.proto_dim;
    run.model.prototypes = m.prototypes;
    run.model.cheb_order = m.cheb_order;
    run.model.e_in = m.e_in;
    run.model.e_node = m.e_node;
    run.model.e_tod = m.e_tod;
    run.model.e_graph = m.e_graph;
    run
}

/// Three weeks of four synthetic nodes, prepared with [`tiny_run`].
pub fn tiny_prepared(run: &RunConfig) -> Prepared {
    let syn = synth_generate(&GenConfig::new(4, 3, DeviationLevel::Medium, 11)).unwrap();
    prepare(syn.series, run).unwrap()
}

pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va.sqrt() * vb.sqrt())
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

pub fn dm(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

pub fn stochastic(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    softmax_rows(&normal_tensor(rng, &[n, n], 2.0))
}

pub fn random_cheb(rng: &mut ChaCha8Rng, order: usize, f_in: usize, f_out: usize) -> ChebWeights<Tensor> {
    ChebWeights::zeros(order, f_in, f_out).map(&mut |t: &Tensor| normal_tensor(rng, t.shape(), 0.5))
}

pub fn dense_conv(a: &DMatrix<f64>, z: &DMatrix<f64>, w: &ChebWeights<Tensor>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(z.nrows(), w.bias.cols());
    let mut power = DMatrix::identity(a.nrows(), a.nrows());
    for wk in &w.weights {
        out += &power * z * dm(wk);
        power = &power * a;
    }
    for mut row in out.row_iter_mut() {
        row += dm(&w.bias).row(0);
    }
    out
}

pub fn assert_close(actual: &Tensor, expected: &DMatrix<f64>, tol: f64) {
    assert_eq!((actual.rows(), actual.cols()), expected.shape());
    for r in 0..actual.rows() {
        for c in 0..actual.cols() {
            let (a, e) = (actual.get(r, c), expected[(r, c)]);
            assert!((a - e).abs() <= tol, "({r},{c}): {a} vs {e}");
        }
    }
}

/// Positional mean over every week that lies entirely inside the split,
/// found by enumerating timesteps.
pub fn brute_force_anchor(s: &SeriesTensor) -> Vec<f64> {
    let tw = s.meta.steps_per_week();
    let phase = s.meta.start_weekday * s.meta.steps_per_day;
    let width = s.nodes() * s.channels();
    let week_of = |t: usize| (phase + s.start + t) / tw;
    let whole = |w: usize| (0..s.len()).filter(|&t| week_of(t) == w).count() == tw;
    let mut out = vec![0.0; tw * width];
    for j in 0..width {
        let valid: Vec<f64> = (0..s.len()).map(|t| s.step(t)[j]).filter(|v| !s.meta.is_null(*v)).collect();
        let fallback = if valid.is_empty() { 0.0 } else { valid.iter().sum::<f64>() / valid.len() as f64 };
        for tau in 0..tw {
            let vals: Vec<f64> = (0..s.len())
                .filter(|&t| (phase + s.start + t) % tw == tau && whole(week_of(t)))
                .map(|t| s.step(t)[j])
                .filter(|v| !s.meta.is_null(*v))
                .collect();
            out[tau * width + j] = if vals.is_empty() { fallback } else { vals.iter().sum::<f64>() / vals.len() as f64 };
        }
    }
    out
}

pub fn random_series(r: &mut ChaCha8Rng) -> SeriesTensor {
    let spd = r.random_range(1..5);
    let tw = 7 * spd;
    let (n, c) = (r.random_range(1..4), r.random_range(1..3));
    let len = tw * r.random_range(1..4) + r.random_range(0..2 * tw);
    let null = r.random_bool(0.5).then_some(0.0);
    let data = (0..len * n * c)
        .map(|_| if null.is_some() && r.random_bool(0.2) { 0.0 } else { r.random_range(1.0..100.0) })
        .collect();
    let meta = DatasetMeta { name: "r".into(), steps_per_day: spd, start_weekday: r.random_range(0..7), null_value: null };
    let mut s = SeriesTensor::new(Tensor::new(vec![len, n, c], data).unwrap(), meta).unwrap();
    s.start = r.random_range(0..3 * tw);
    s
}
