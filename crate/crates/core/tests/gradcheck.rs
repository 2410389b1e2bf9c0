use stssdl::model::{ModelConfig, Variant};
use stssdl::trainer::gradcheck::{random_sample, standalone_model};
use stssdl::trainer::{grad_check, GradCheckConfig, Objective};

fn tiny() -> ModelConfig {
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

#[test]
fn full_loss_matches_finite_differences() {
    let cfg = tiny();
    let model = standalone_model(&cfg, 1).unwrap();
    let sample = random_sample(&cfg, 2);
    let report = grad_check(&model, &sample, &GradCheckConfig::default()).unwrap();
    assert!(report.passed(), "{:?} params={} redrawn={}", report.worst, report.param_count, report.redrawn);
    assert_eq!(report.probes.len(), 200);
}

#[test]
fn every_variant_matches_finite_differences() {
    for v in Variant::ALL {
        let mut cfg = tiny();
        v.apply(&mut cfg);
        let model = standalone_model(&cfg, 3).unwrap();
        let sample = random_sample(&cfg, 4);
        let report = grad_check(&model, &sample, &GradCheckConfig { probes: 60, seed: 5, ..Default::default() }).unwrap();
        assert!(report.passed(), "{v:?}: {:?}", report.worst);
    }
}

#[test]
fn query_projection_is_blocked_under_contrastive_loss() {
    let cfg = tiny();
    let model = standalone_model(&cfg, 6).unwrap();
    let sample = random_sample(&cfg, 7);
    let report = grad_check(
        &model,
        &sample,
        &GradCheckConfig { probes: 300, objective: Objective::Contrastive, ..Default::default() },
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.worst);
    let q: Vec<_> = report.probes.iter().filter(|p| p.tensor.starts_with("bank.query_proj")).collect();
    assert!(!q.is_empty());
    for p in q {
        assert_eq!(p.analytic, 0.0);
        assert_eq!(p.numeric, 0.0);
    }
}
