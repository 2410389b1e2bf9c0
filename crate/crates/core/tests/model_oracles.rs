mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

use common::{assert_close, brute_force_anchor, dense_conv, dm, normal_tensor, random_cheb, random_series, rng, stochastic, tiny_model};
use stssdl::anchor::{build_anchor_table, retrieve_anchor};
use stssdl::autodiff::Graph;
use stssdl::gcru::{gcru_cell, GcruParams};
use stssdl::graph::{adaptive_graph, cheb_graph_conv, node_embedding_graph, Adjacency, AdjacencyKind};
use stssdl::model::{embed_inputs, ModelParams, Variant};
use stssdl::prototype::prototype_attention;
use stssdl::tensor::Tensor;
use stssdl::trainer::gradcheck::{random_sample, standalone_model};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chebyshev_conv_equals_dense_expansion(n in 1usize..=5, order in 0usize..=3, f_in in 1usize..4, f_out in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = stochastic(&mut r, n);
        let z = normal_tensor(&mut r, &[n, f_in], 1.0);
        let w = random_cheb(&mut r, order, f_in, f_out);
        let mut g = Graph::new();
        let (av, zv) = (g.constant(a.clone()), g.constant(z.clone()));
        let wv = w.map(&mut |t: &Tensor| g.constant(t.clone()));
        let out = cheb_graph_conv(&mut g, zv, Adjacency { matrix: av, kind: AdjacencyKind::RowStochastic }, &wv).unwrap();
        assert_close(g.value(out), &dense_conv(&dm(&a), &dm(&z), &w), 1e-10);
    }

    #[test]
    fn gcru_cell_equals_dense_gates(n in 1usize..=5, order in 0usize..=3, f_in in 1usize..4, h in 1usize..5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = stochastic(&mut r, n);
        let x = normal_tensor(&mut r, &[n, f_in], 1.0);
        let hp = normal_tensor(&mut r, &[n, h], 1.0);
        let p = GcruParams::zeros(order, f_in, h).map(&mut |t: &Tensor| normal_tensor(&mut r, t.shape(), 0.5));

        let mut g = Graph::new();
        let (av, xv, hv) = (g.constant(a.clone()), g.constant(x.clone()), g.constant(hp.clone()));
        let pv = p.map(&mut |t: &Tensor| g.constant(t.clone()));
        let out = gcru_cell(&mut g, xv, hv, Adjacency { matrix: av, kind: AdjacencyKind::RowStochastic }, &pv).unwrap();

        let (ad, xd, hd) = (dm(&a), dm(&x), dm(&hp));
        let sig = |m: DMatrix<f64>| m.map(|v| 1.0 / (1.0 + (-v).exp()));
        let xh = DMatrix::from_fn(n, f_in + h, |i, j| if j < f_in { xd[(i, j)] } else { hd[(i, j - f_in)] });
        let reset = sig(dense_conv(&ad, &xh, &p.theta_r));
        let update = sig(dense_conv(&ad, &xh, &p.theta_u));
        let rh = reset.component_mul(&hd);
        let xrh = DMatrix::from_fn(n, f_in + h, |i, j| if j < f_in { xd[(i, j)] } else { rh[(i, j - f_in)] });
        let cand = dense_conv(&ad, &xrh, &p.theta_c).map(f64::tanh);
        let expected = update.component_mul(&hd) + update.map(|u| 1.0 - u).component_mul(&cand);
        assert_close(g.value(out), &expected, 1e-10);
    }

    #[test]
    fn graph_builders_are_row_stochastic(n in 1usize..7, h in 1usize..5, d in 1usize..5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut g = Graph::new();
        let e = g.constant(normal_tensor(&mut r, &[n, h], 1.5));
        let enc = node_embedding_graph(&mut g, e).unwrap();
        let parts: Vec<_> = [h, d, h, d].iter().map(|&w| g.constant(normal_tensor(&mut r, &[n, w], 1.0))).collect();
        let w = g.constant(normal_tensor(&mut r, &[2 * h + 2 * d, d], 1.0));
        let b = g.constant(normal_tensor(&mut r, &[1, d], 1.0));
        let dec = adaptive_graph(&mut g, parts[0], parts[1], parts[2], parts[3], w, b).unwrap();
        for adj in [enc, dec] {
            let m = g.value(adj.matrix);
            for row in 0..n {
                prop_assert!((m.row(row).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn attention_rows_and_top2_ordering_hold_on_random_instances() {
    let mut r = rng(42);
    for _ in 0..1000 {
        let (n, m, d) = (r.random_range(1..6), r.random_range(2..9), r.random_range(1..9));
        let mut g = Graph::new();
        let q = g.constant(normal_tensor(&mut r, &[n, d], 2.0));
        let p = g.constant(normal_tensor(&mut r, &[m, d], 2.0));
        let att = prototype_attention(&mut g, q, p).unwrap();
        let alpha = g.value(att.alpha);
        for row in 0..n {
            let a = alpha.row(row);
            assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            let (pos, neg) = (att.pos_idx[row], att.neg_idx[row]);
            assert_ne!(pos, neg);
            assert!(a[pos] >= a[neg]);
            for (j, &v) in a.iter().enumerate() {
                if j != pos && j != neg {
                    assert!(a[neg] >= v, "neg {neg} ({}) below {j} ({v})", a[neg]);
                }
            }
        }
    }
}

#[test]
fn top2_ties_go_to_the_lower_index() {
    assert_eq!(stssdl::prototype::top2(&[0.25, 0.25, 0.25, 0.25]), (0, 1));
    assert_eq!(stssdl::prototype::top2(&[0.1, 0.3, 0.3, 0.3]), (1, 2));
}

#[test]
fn anchor_table_equals_brute_force_positional_mean() {
    let mut r = rng(7);
    let mut checked = 0;
    while checked < 20 {
        let s = random_series(&mut r);
        let Ok(table) = build_anchor_table(&s) else {
            // fewer than one whole week after alignment
            assert!(s.len() < 2 * s.meta.steps_per_week());
            continue;
        };
        let expected = brute_force_anchor(&s);
        for (a, e) in table.xbar.data().iter().zip(&expected) {
            assert!((a - e).abs() <= 1e-12, "{a} vs {e}");
        }
        checked += 1;
    }
}

#[test]
fn anchor_retrieval_wraps_around_the_week() {
    let mut r = rng(8);
    for _ in 0..20 {
        let s = random_series(&mut r);
        let Ok(table) = build_anchor_table(&s) else { continue };
        let tw = table.steps_per_week;
        let width = table.nodes() * table.channels();
        let start = r.random_range(0..4 * tw);
        let len = r.random_range(1..2 * tw);
        let got = retrieve_anchor(&table, start, len);
        assert_eq!(got.shape(), &[len, table.nodes(), table.channels()]);
        for i in 0..len {
            let tau = (s.meta.start_weekday * s.meta.steps_per_day + start + i) % tw;
            assert_eq!(&got.data()[i * width..(i + 1) * width], &table.xbar.data()[tau * width..(tau + 1) * width]);
        }
    }
}

#[test]
fn embedded_inputs_concatenate_lift_node_and_time_of_day() {
    let cfg = tiny_model();
    let params = ModelParams::init(&cfg, 4).unwrap();
    let mut r = rng(5);
    let x = normal_tensor(&mut r, &[cfg.input_len, cfg.nodes, cfg.channels], 1.0);
    let tod = vec![23, 0, 1];
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let out = embed_inputs(&mut g, &x, &tod, &p).unwrap();
    let (n, c) = (cfg.nodes, cfg.channels);
    for (t, &v) in out.iter().enumerate() {
        let e = g.value(v);
        assert_eq!(e.cols(), cfg.e_in + cfg.e_node + cfg.e_tod);
        for node in 0..n {
            let xt = &x.data()[(t * n + node) * c..(t * n + node + 1) * c];
            let mut expected: Vec<f64> = (0..cfg.e_in)
                .map(|j| (0..c).map(|k| xt[k] * params.input_lift.get(k, j)).sum())
                .collect();
            expected.extend_from_slice(params.node_emb.row(node));
            expected.extend_from_slice(params.tod_emb.row(tod[t]));
            for (a, b) in e.row(node).iter().zip(&expected) {
                assert!((a - b).abs() <= 1e-14);
            }
        }
    }
}

#[test]
fn stopped_queries_get_bitwise_zero_gradients() {
    for seed in 0..5 {
        let cfg = tiny_model();
        let model = standalone_model(&cfg, seed).unwrap();
        let sample = random_sample(&cfg, seed + 100);
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, true);
        let f = model.forward_in(&mut g, &p, &sample).unwrap();
        let (qc, qa) = (f.query_c.unwrap(), f.query_a.unwrap());
        let con = g.backward(f.con.unwrap()).unwrap();
        let dev = g.backward(f.dev.unwrap()).unwrap();
        for (grads, q) in [(&con, qc), (&dev, qc), (&dev, qa)] {
            let gq = grads.wrt(q);
            assert_eq!(gq.shape(), g.value(q).shape());
            assert!(gq.data().iter().all(|v| v.to_bits() == 0), "seed {seed}: {:?}", gq.data());
        }

        let protos = p.ssdl.as_ref().unwrap().bank.prototypes;
        let gp = dev.wrt(protos);
        let pos_c = &f.attention_c.as_ref().unwrap().pos_idx;
        let pos_a = &f.attention_a.as_ref().unwrap().pos_idx;
        let mut any = false;
        for row in 0..gp.rows() {
            let nonzero = gp.row(row).iter().any(|v| *v != 0.0);
            any |= nonzero;
            if nonzero {
                assert!(pos_c.contains(&row) || pos_a.contains(&row), "seed {seed}: row {row} is not a positive");
            }
        }
        assert!(any, "seed {seed}: deviation loss left the prototypes untouched");
    }
}

#[test]
fn variants_without_stop_gradient_let_queries_move() {
    let mut cfg = tiny_model();
    cfg.disable_stopgrad = true;
    let model = standalone_model(&cfg, 1).unwrap();
    let sample = random_sample(&cfg, 2);
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    let f = model.forward_in(&mut g, &p, &sample).unwrap();
    let con = g.backward(f.con.unwrap()).unwrap();
    assert!(con.wrt(f.query_c.unwrap()).data().iter().any(|v| *v != 0.0));
}

#[test]
fn ablation_variants_switch_terms_off() {
    for v in Variant::ALL {
        let mut cfg = tiny_model();
        v.apply(&mut cfg);
        let model = standalone_model(&cfg, 2).unwrap();
        let out = model.predict(&random_sample(&cfg, 3)).unwrap();
        let l = out.losses;
        assert!((l.total - l.recombined()).abs() <= 1e-12, "{v:?}");
        match v {
            Variant::NoBoth | Variant::NoSsdl => assert_eq!(l.total, l.l_mae),
            Variant::NoCon | Variant::Naive => assert_eq!(l.lambda_con, 0.0),
            Variant::NoDev => assert_eq!(l.lambda_dev, 0.0),
            Variant::Full => assert!(l.lambda_con > 0.0 && l.lambda_dev > 0.0),
        }
        assert_eq!(model.params.ssdl.is_none(), v == Variant::NoSsdl);
    }
}
