//! Exports for looking at what the prototypes learned.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Window;
use crate::error::{contract, dim, Result};
use crate::model::{ForwardOutput, Model};
use crate::par::Execution;
use crate::prototype::top2;
use crate::tensor::Tensor;
use crate::trainer::predict_windows;

/// Pointwise statistics of the input sequences assigned to one prototype.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypePattern {
    pub prototype: usize,
    pub count: usize,
    /// Empty when `count == 0`.
    pub mean: Vec<f64>,
    /// Population standard deviation; empty when `count == 0`.
    pub std: Vec<f64>,
}

/// Group-by mean and standard deviation of `(prototype, sequence)` pairs.
pub fn group_patterns(assigned: &[(usize, Vec<f64>)], prototypes: usize) -> Result<Vec<PrototypePattern>> {
    let len = assigned.first().map_or(0, |a| a.1.len());
    let mut sum = vec![vec![0.0; len]; prototypes];
    let mut count = vec![0usize; prototypes];
    for (p, seq) in assigned {
        if *p >= prototypes || seq.len() != len {
            return Err(dim("group_patterns", format!("prototype {p} with a sequence of length {}", seq.len())));
        }
        count[*p] += 1;
        for (s, v) in sum[*p].iter_mut().zip(seq) {
            *s += v;
        }
    }
    let means: Vec<Vec<f64>> = sum.iter().zip(&count).map(|(s, &c)| s.iter().map(|v| v / c as f64).collect()).collect();
    let mut sq = vec![vec![0.0; len]; prototypes];
    for (p, seq) in assigned {
        for ((s, v), m) in sq[*p].iter_mut().zip(seq).zip(&means[*p]) {
            *s += (v - m) * (v - m);
        }
    }
    Ok((0..prototypes)
        .map(|p| {
            let c = count[p];
            if c == 0 {
                return PrototypePattern { prototype: p, count: 0, mean: Vec::new(), std: Vec::new() };
            }
            PrototypePattern {
                prototype: p,
                count: c,
                mean: means[p].clone(),
                std: sq[p].iter().map(|s| (s / c as f64).sqrt()).collect(),
            }
        })
        .collect())
}

/// Original-scale input sequence of `node` (channel-major per step), `[T·C]`.
pub fn node_sequence(model: &Model, w: &Window, node: usize) -> Vec<f64> {
    let s = w.input.shape();
    let (t_len, n, c) = (s[0], s[1], s[2]);
    let norm = &model.normalizer;
    let mut out = Vec::with_capacity(t_len * c);
    for t in 0..t_len {
        for ch in 0..c {
            let v = w.input.data()[(t * n + node) * c + ch];
            out.push(if norm.null_value == Some(v) { v } else { norm.invert(v) });
        }
    }
    out
}

fn require_prototypes(model: &Model) -> Result<usize> {
    match &model.params.ssdl {
        Some(s) => Ok(s.bank.prototypes.rows()),
        None => Err(contract("this model has no prototype bank")),
    }
}

/// Assigns every (window, node) input sequence to the positive prototype of
/// its current-stream query, then averages per prototype.
pub fn prototype_physical_patterns(model: &Model, windows: &[Window], exec: Execution) -> Result<Vec<PrototypePattern>> {
    let m = require_prototypes(model)?;
    if windows.is_empty() {
        return Err(contract("need at least one window"));
    }
    let outputs = predict_windows(model, windows, exec)?;
    let mut assigned = Vec::new();
    for (w, o) in windows.iter().zip(&outputs) {
        for (node, &p) in o.pos_c.iter().enumerate() {
            assigned.push((p, node_sequence(model, w, node)));
        }
    }
    group_patterns(&assigned, m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointKind {
    Prototype,
    Query,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaRow {
    pub kind: PointKind,
    pub x: f64,
    pub y: f64,
    /// The prototype itself, or the query's positive prototype.
    pub assigned: usize,
}

/// Two leading principal components of the rows of `points` found by
/// power iteration with deflation. Returns the centered projections
/// `[n, 2]` and the two unit directions.
pub fn pca_2d(points: &Tensor) -> Result<(Tensor, [Vec<f64>; 2])> {
    const ITERS: usize = 200;
    const TOL: f64 = 1e-9;
    if !points.is_matrix() || points.rows() < 2 {
        return Err(dim("pca_2d", format!("need at least two points, got {:?}", points.shape())));
    }
    let (n, d) = (points.rows(), points.cols());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(points.row(r)) {
            *m += v / n as f64;
        }
    }
    let centered = Tensor::matrix(n, d, (0..n).flat_map(|r| points.row(r).iter().zip(&mean).map(|(v, m)| v - m).collect::<Vec<_>>()).collect())?;
    let mut cov = centered.matmul_tn(&centered)?;
    let scale = (0..d).map(|i| cov.get(i, i)).sum::<f64>().max(f64::MIN_POSITIVE);

    let mut dirs: [Vec<f64>; 2] = [vec![0.0; d], vec![0.0; d]];
    for dir in dirs.iter_mut() {
        // start from the covariance column of largest norm
        let start = (0..d)
            .map(|j| (j, (0..d).map(|i| cov.get(i, j).powi(2)).sum::<f64>()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("d >= 1");
        if start.1.sqrt() <= 1e-12 * scale {
            break;
        }
        let mut v: Vec<f64> = (0..d).map(|i| cov.get(i, start.0)).collect();
        normalize(&mut v);
        for _ in 0..ITERS {
            let mut next: Vec<f64> = (0..d).map(|i| (0..d).map(|j| cov.get(i, j) * v[j]).sum()).collect();
            if normalize(&mut next) <= 1e-12 * scale {
                break;
            }
            let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            if delta < TOL {
                break;
            }
        }
        let lambda: f64 = (0..d).map(|i| v[i] * (0..d).map(|j| cov.get(i, j) * v[j]).sum::<f64>()).sum();
        if lambda <= 1e-12 * scale {
            break;
        }
        for i in 0..d {
            for j in 0..d {
                let c = cov.get(i, j) - lambda * v[i] * v[j];
                cov.set(i, j, c);
            }
        }
        *dir = v;
    }

    let mut proj = Vec::with_capacity(2 * n);
    for r in 0..n {
        let row = centered.row(r);
        for dir in &dirs {
            proj.push(row.iter().zip(dir).map(|(a, b)| a * b).sum());
        }
    }
    Ok((Tensor::matrix(n, 2, proj)?, dirs))
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Projects prototypes `[M, d]` and queries `[n_s, d]` together onto two
/// principal directions. Prototype rows come first.
pub fn pca_project_prototypes(prototypes: &Tensor, queries: &Tensor) -> Result<Vec<PcaRow>> {
    if queries.rows() < 2 || prototypes.cols() != queries.cols() {
        return Err(dim(
            "pca_project_prototypes",
            format!("prototypes {:?}, queries {:?}; need two or more queries", prototypes.shape(), queries.shape()),
        ));
    }
    let m = prototypes.rows();
    let mut stacked = prototypes.data().to_vec();
    stacked.extend_from_slice(queries.data());
    let (proj, _) = pca_2d(&Tensor::matrix(m + queries.rows(), queries.cols(), stacked)?)?;
    let scores = queries.matmul_nt(prototypes)?;
    Ok((0..proj.rows())
        .map(|r| {
            let (kind, assigned) = if r < m { (PointKind::Prototype, r) } else { (PointKind::Query, top2(scores.row(r - m)).0) };
            PcaRow { kind, x: proj.get(r, 0), y: proj.get(r, 1), assigned }
        })
        .collect())
}

/// Current-stream queries of every (window, node), `[windows·N, d]`.
pub fn collect_queries(outputs: &[ForwardOutput]) -> Result<Tensor> {
    let mut rows = Vec::new();
    let mut d = 0;
    for o in outputs {
        let q = o.query_c.as_ref().ok_or_else(|| contract("this model has no queries"))?;
        d = q.cols();
        rows.extend_from_slice(q.data());
    }
    Tensor::matrix(rows.len() / d.max(1), d, rows)
}

/// Seeded subsample of `count` rows (all rows if fewer).
pub fn sample_rows(x: &Tensor, count: usize, seed: u64) -> Tensor {
    if count >= x.rows() {
        return x.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, x.rows(), count).into_vec();
    idx.sort_unstable();
    let data = idx.iter().flat_map(|&r| x.row(r).iter().copied()).collect();
    Tensor::matrix(count, x.cols(), data).expect("shape")
}

/// The `k` most frequently assigned prototypes (ties broken by lower index).
pub fn top_k_prototypes(assigned: &[usize], prototypes: usize, k: usize) -> Vec<(usize, usize)> {
    let mut counts = vec![0usize; prototypes];
    for &a in assigned {
        if a < prototypes {
            counts[a] += 1;
        }
    }
    let mut ranked: Vec<(usize, usize)> = counts.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    ranked
}

/// Latent-space export: sampled queries plus the prototypes, keeping only
/// queries assigned to the `top_k` most used prototypes when `top_k > 0`.
pub fn latent_projection(
    model: &Model,
    windows: &[Window],
    sample_size: usize,
    top_k: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<PcaRow>> {
    let m = require_prototypes(model)?;
    let outputs = predict_windows(model, windows, exec)?;
    let queries = sample_rows(&collect_queries(&outputs)?, sample_size, seed);
    let protos = &model.params.ssdl.as_ref().expect("checked").bank.prototypes;
    let rows = pca_project_prototypes(protos, &queries)?;
    if top_k == 0 {
        return Ok(rows);
    }
    let assigned: Vec<usize> = rows.iter().filter(|r| r.kind == PointKind::Query).map(|r| r.assigned).collect();
    let keep: Vec<usize> = top_k_prototypes(&assigned, m, top_k).into_iter().map(|(p, _)| p).collect();
    Ok(rows.into_iter().filter(|r| keep.contains(&r.assigned)).collect())
}

/// Per (window, node) record of the top-2 selections of both streams.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub window_start: usize,
    pub node: usize,
    pub pos_c: usize,
    pub neg_c: usize,
    pub pos_a: usize,
    pub neg_a: usize,
    pub d_q: f64,
    pub d_p: f64,
}

pub fn assignments(model: &Model, windows: &[Window], exec: Execution) -> Result<Vec<Assignment>> {
    require_prototypes(model)?;
    let outputs = predict_windows(model, windows, exec)?;
    let mut out = Vec::new();
    for (w, o) in windows.iter().zip(&outputs) {
        let dev = o.deviation.as_ref().ok_or_else(|| contract("no deviation diagnostics"))?;
        for node in 0..o.pos_c.len() {
            out.push(Assignment {
                window_start: w.start,
                node,
                pos_c: o.pos_c[node],
                neg_c: o.neg_c[node],
                pos_a: o.pos_a[node],
                neg_a: o.neg_a[node],
                d_q: dev.d_q[node],
                d_p: dev.d_p[node],
            });
        }
    }
    Ok(out)
}
