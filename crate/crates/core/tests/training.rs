mod common;

use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::Rng;

use common::{normal_tensor, rng, tiny_prepared, tiny_run};
use stssdl::anchor::build_anchor_table;
use stssdl::data::{load_dataset_dir, synth_generate, write_dataset, DeviationLevel, GenConfig, Normalizer};
use stssdl::experiment::run_training;
use stssdl::inspect::{group_patterns, pca_2d, top_k_prototypes};
use stssdl::par::Execution;
use stssdl::tensor::Tensor;
use stssdl::trainer::{
    batch_gradient, compute_metrics, evaluate, hi_baseline, load_checkpoint, save_checkpoint, AdamState,
};

fn pair(r: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> (Tensor, Tensor) {
    let y = normal_tensor(r, shape, 10.0).map(|v| v + 50.0);
    let p = normal_tensor(r, shape, 3.0).zip_map(&y, |e, y| y + e);
    (p, y)
}

#[test]
fn metrics_match_direct_formulas() {
    let mut r = rng(1);
    let shape = [3, 4, 2];
    let (preds, targets): (Vec<_>, Vec<_>) = (0..100).map(|_| pair(&mut r, &shape)).unzip();
    let report = compute_metrics(&preds, &targets, None).unwrap();
    let width = 8;
    for h in 0..3 {
        let errs: Vec<(f64, f64)> = preds
            .iter()
            .zip(&targets)
            .flat_map(|(p, y)| (h * width..(h + 1) * width).map(move |i| (p.data()[i] - y.data()[i], y.data()[i])))
            .collect();
        let n = errs.len() as f64;
        let mae = errs.iter().map(|(e, _)| e.abs()).sum::<f64>() / n;
        let rmse = (errs.iter().map(|(e, _)| e * e).sum::<f64>() / n).sqrt();
        let mape = 100.0 * errs.iter().map(|(e, y)| (e / y).abs()).sum::<f64>() / n;
        let m = report.horizons[h];
        assert!((m.mae - mae).abs() <= 1e-12 && (m.rmse - rmse).abs() <= 1e-12 && (m.mape - mape).abs() <= 1e-12);
        assert!(m.rmse >= m.mae);
    }
    assert_eq!(report.windows, 100);
}

#[test]
fn null_targets_are_skipped_and_mape_can_be_undefined() {
    let y = Tensor::new(vec![1, 1, 3], vec![0.0, 2.0, 0.0]).unwrap();
    let p = Tensor::new(vec![1, 1, 3], vec![5.0, 3.0, 1.0]).unwrap();
    let with_null = compute_metrics(std::slice::from_ref(&p), std::slice::from_ref(&y), Some(0.0)).unwrap();
    assert_eq!(with_null.average.mae, 1.0);
    assert_eq!(with_null.average.mape, 50.0);
    let zeros = Tensor::new(vec![1, 1, 2], vec![0.0, 0.0]).unwrap();
    let undefined = compute_metrics(&[zeros.map(|v| v + 1.0)], &[zeros], None).unwrap();
    assert!(undefined.average.mape.is_nan());
    assert_eq!(undefined.average.mae, 1.0);
}

proptest! {
    #[test]
    fn rmse_never_below_mae(seed in any::<u64>(), t in 1usize..4, n in 1usize..4) {
        let mut r = rng(seed);
        let (p, y) = pair(&mut r, &[t, n, 1]);
        let m = compute_metrics(&[p], &[y], None).unwrap();
        for h in m.horizons.iter().chain(std::iter::once(&m.average)) {
            prop_assert!(h.rmse >= h.mae - 1e-12);
        }
    }
}

#[test]
fn historical_inertia_on_a_ramp_has_horizon_times_slope_error() {
    let slope = 1.5;
    let (t_in, horizon) = (4, 3);
    let ramp = |t: usize| 10.0 + slope * t as f64;
    let input = Tensor::new(vec![t_in, 1, 1], (0..t_in).map(ramp).collect()).unwrap();
    let target = Tensor::new(vec![horizon, 1, 1], (t_in..t_in + horizon).map(ramp).collect()).unwrap();
    let pred = hi_baseline(&input, horizon).unwrap();
    assert!(pred.data().iter().all(|v| *v == ramp(t_in - 1)));
    let m = compute_metrics(&[pred], &[target], None).unwrap();
    for (k, h) in m.horizons.iter().enumerate() {
        assert!((h.mae - slope * (k + 1) as f64).abs() <= 1e-12);
    }
}

#[test]
fn adam_matches_hand_unrolled_updates() {
    let grads = [0.5, -1.0, 2.0];
    let mut params = vec![Tensor::scalar(1.0)];
    let mut adam = AdamState::new(params.iter(), 0.01);
    let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
    for (t, &gr) in grads.iter().enumerate() {
        adam.step(&mut params, &[Tensor::scalar(gr)]).unwrap();
        m = 0.9 * m + 0.1 * gr;
        v = 0.999 * v + 0.001 * gr * gr;
        let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
        let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
        x -= 0.01 * mh / (vh.sqrt() + 1e-8);
        assert!((params[0].item() - x).abs() <= 1e-15);
    }
    assert!(adam.step(&mut params, &[]).is_err());
}

#[test]
fn pca_matches_symmetric_eigendecomposition() {
    let mut r = rng(9);
    for _ in 0..10 {
        let (n, d) = (r.random_range(5..30), r.random_range(2..6));
        // distinct spread per axis keeps the leading eigenvalues apart
        let pts = normal_tensor(&mut r, &[n, d], 1.0);
        let pts = Tensor::matrix(n, d, (0..n * d).map(|i| pts.data()[i] * (1.0 + 3.0 * (i % d) as f64)).collect()).unwrap();
        let (proj, dirs) = pca_2d(&pts).unwrap();

        let x = DMatrix::from_row_slice(n, d, pts.data());
        let mean = x.row_mean();
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let eig = SymmetricEigen::new(centered.transpose() * &centered);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for (k, dir) in dirs.iter().enumerate() {
            let e = eig.eigenvectors.column(order[k]);
            let cos: f64 = dir.iter().zip(e.iter()).map(|(a, b)| a * b).sum();
            assert!((cos.abs() - 1.0).abs() < 1e-6, "component {k}: |cos| = {}", cos.abs());
            for i in 0..n {
                let expected: f64 = centered.row(i).iter().zip(e.iter()).map(|(a, b)| a * b).sum();
                assert!((proj.get(i, k).abs() - expected.abs()).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn rank_deficient_pca_gives_zero_second_component() {
    let pts = Tensor::from_rows(&[&[0.0, 0.0], &[1.0, 1.0], &[2.0, 2.0]]);
    let (proj, dirs) = pca_2d(&pts).unwrap();
    assert!(dirs[1].iter().all(|v| *v == 0.0));
    assert!((0..3).all(|i| proj.get(i, 1) == 0.0));
}

#[test]
fn group_patterns_matches_group_by_oracle() {
    let mut r = rng(3);
    let m = 4;
    let assigned: Vec<(usize, Vec<f64>)> =
        (0..50).map(|_| (r.random_range(0..m - 1), (0..5).map(|_| r.random_range(-5.0..5.0)).collect())).collect();
    let pats = group_patterns(&assigned, m).unwrap();
    for p in &pats {
        let members: Vec<&Vec<f64>> = assigned.iter().filter(|a| a.0 == p.prototype).map(|a| &a.1).collect();
        assert_eq!(p.count, members.len());
        if members.is_empty() {
            assert!(p.mean.is_empty() && p.std.is_empty());
            continue;
        }
        for k in 0..5 {
            let vals: Vec<f64> = members.iter().map(|s| s[k]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!((p.mean[k] - mean).abs() <= 1e-12 && (p.std[k] - std).abs() <= 1e-12);
        }
    }
    assert_eq!(pats[m - 1].count, 0);
    assert_eq!(top_k_prototypes(&[2, 1, 2, 0, 1, 2], 3, 2), vec![(2, 3), (1, 2)]);
}

#[test]
fn synthetic_base_signal_is_the_closed_form_sinusoid() {
    let cfg = GenConfig { noise: false, events: false, ..GenConfig::new(3, 2, DeviationLevel::Low, 5) };
    let syn = synth_generate(&cfg).unwrap();
    assert_eq!(syn.series.len(), 2 * 7 * cfg.steps_per_day);
    assert!(syn.events.is_empty());
    for t in 0..syn.series.len() {
        for (n, sig) in syn.nodes.iter().enumerate() {
            let tod = (t % cfg.steps_per_day) as f64 / cfg.steps_per_day as f64;
            let expected = sig.level + sig.swing * (std::f64::consts::TAU * tod + sig.phase).sin();
            assert!((syn.series.get(t, n, 0) - expected).abs() <= 1e-12);
        }
    }
}

#[test]
fn weekly_means_of_a_clean_series_equal_the_base_signal() {
    let cfg = GenConfig { noise: false, events: false, ..GenConfig::new(2, 3, DeviationLevel::Low, 6) };
    let syn = synth_generate(&cfg).unwrap();
    let table = build_anchor_table(&syn.series).unwrap();
    assert_eq!(table.segments, 3);
    for tau in 0..table.steps_per_week {
        for (n, sig) in syn.nodes.iter().enumerate() {
            assert!((table.xbar.data()[tau * 2 + n] - sig.base(tau, cfg.steps_per_day)).abs() <= 1e-12);
        }
    }
}

#[test]
fn generation_is_bitwise_repeatable() {
    let cfg = GenConfig::new(3, 2, DeviationLevel::High, 17);
    let (a, b) = (synth_generate(&cfg).unwrap(), synth_generate(&cfg).unwrap());
    assert!(a.series.values.data().iter().zip(b.series.values.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(a.events, b.events);
    let other = synth_generate(&GenConfig { seed: 18, ..cfg }).unwrap();
    assert_ne!(a.series.values, other.series.values);
}

#[test]
fn deviation_levels_scale_event_amplitude() {
    for (level, frac) in [(DeviationLevel::Low, 0.05), (DeviationLevel::Medium, 0.25), (DeviationLevel::High, 0.75)] {
        let syn = synth_generate(&GenConfig::new(2, 2, level, 1)).unwrap();
        assert_eq!(syn.events.len(), 2 * 14);
        for e in &syn.events {
            assert!((e.amplitude.abs() - frac * syn.nodes[e.node].swing).abs() <= 1e-12);
            assert_eq!(e.duration, 1);
        }
    }
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let syn = synth_generate(&GenConfig::new(3, 2, DeviationLevel::High, 2)).unwrap();
    write_dataset(dir.path(), &syn.series).unwrap();
    let back = load_dataset_dir(dir.path()).unwrap();
    assert_eq!(back, syn.series);
}

#[test]
fn split_slices_and_windows_line_up_with_the_series() {
    let run = tiny_run(1);
    let prep = tiny_prepared(&run);
    let w = &prep.test.windows[5];
    let (t, h) = (w.input_len(), w.horizon());
    for i in 0..t + h {
        let abs = w.start + i;
        assert_eq!(w.tod[i], abs % prep.series.meta.steps_per_day);
        for n in 0..prep.series.nodes() {
            let raw = prep.series.get(abs, n, 0);
            if i < t {
                assert!((prep.normalizer.invert(w.input.data()[i * prep.series.nodes() + n]) - raw).abs() <= 1e-9);
            } else {
                assert_eq!(w.target.data()[(i - t) * prep.series.nodes() + n], raw);
            }
        }
    }
    assert_eq!(prep.splits.test.start, prep.splits.train.len() + prep.splits.val.len());
}

#[test]
fn normalizer_invert_undoes_apply() {
    let norm = Normalizer { mean: 3.5, std: 2.0, null_value: None };
    for v in [-4.0, 0.0, 3.5, 12.25] {
        assert!((norm.invert(norm.apply(v)) - v).abs() <= 1e-12);
    }
}

#[test]
fn sequential_and_parallel_batches_agree_bitwise() {
    let run = tiny_run(1);
    let prep = tiny_prepared(&run);
    let model = prep.fresh_model(1).unwrap();
    let samples: Vec<_> = prep.train.windows[..16].iter().map(|w| model.sample(w)).collect();
    let (ls, gs) = batch_gradient(&model, &samples, Execution::Sequential).unwrap();
    let (lp, gp) = batch_gradient(&model, &samples, Execution::Parallel).unwrap();
    assert_eq!(ls, lp);
    for (a, b) in gs.iter().zip(&gp) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn training_is_deterministic_and_lowers_the_loss() {
    let run = tiny_run(3);
    let prep = tiny_prepared(&run);
    let (m1, o1) = run_training(&prep, &run, |_| {}).unwrap();
    let (m2, o2) = run_training(&prep, &run, |_| {}).unwrap();
    assert_eq!(o1, o2);
    assert_eq!(m1.params, m2.params);
    let recs = &o1.history.records;
    assert!(recs[2].losses.total < recs[0].losses.total);
    for r in recs {
        assert!((r.losses.total - r.losses.recombined()).abs() <= 1e-9);
    }
}

#[test]
fn patience_stops_training_early() {
    let mut run = tiny_run(40);
    run.patience = 1;
    run.lr = 0.5;
    let prep = tiny_prepared(&run);
    let (_, out) = run_training(&prep, &run, |_| {}).unwrap();
    assert!(out.stopped_early);
    assert_eq!(out.history.records.len(), out.best_epoch + 1);
}

#[test]
fn checkpoint_round_trip_reproduces_metrics_bitwise() {
    let run = tiny_run(1);
    let prep = tiny_prepared(&run);
    let (model, _) = run_training(&prep, &run, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &model, &prep.series.meta).unwrap();
    let (loaded, meta) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(meta, prep.series.meta);
    assert_eq!(loaded.params, model.params);
    assert_eq!(loaded.cfg, model.cfg);
    let a = evaluate(&model, &prep.test.windows, Execution::Sequential).unwrap();
    let b = evaluate(&loaded, &prep.test.windows, Execution::Sequential).unwrap();
    assert_eq!(a.to_csv_rows("m"), b.to_csv_rows("m"));
    assert_eq!(a, b);
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let run = tiny_run(1);
    let prep = tiny_prepared(&run);
    let model = prep.fresh_model(0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &model, &prep.series.meta).unwrap();
    let blob = dir.path().join("params.bin");
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes.truncate(bytes.len() - 8);
    std::fs::write(&blob, bytes).unwrap();
    assert!(load_checkpoint(dir.path()).is_err());
}
