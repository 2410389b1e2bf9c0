//! Central finite differences against reverse-mode gradients.
//!
//! Perturbed evaluations hold every stop-gradient node at its unperturbed
//! value, so both sides differentiate the same surrogate objective. A probe
//! whose perturbation changes any top-2 prototype selection is discarded
//! and drawn again.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Graph;
use crate::data::Normalizer;
use crate::error::{contract, Result};
use crate::model::{forward_in, Forward, Model, ModelConfig, ModelParams, Sample};
use crate::tensor::Tensor;

/// Which scalar is differentiated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Total,
    Mae,
    Contrastive,
    Deviation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub probes: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
    pub objective: Objective,
    pub max_params: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            probes: 200,
            step: 1e-6,
            tolerance: 1e-4,
            floor: 1e-4,
            seed: 0,
            objective: Objective::Total,
            max_params: 5000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub max_rel_err: f64,
    pub worst: Option<Probe>,
    pub redrawn: usize,
    pub tolerance: f64,
    pub param_count: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.probes.is_empty() && self.max_rel_err < self.tolerance
    }
}

type Selection = Vec<Vec<usize>>;

fn selection(f: &Forward) -> Selection {
    let mut s = Vec::new();
    for a in [&f.attention_c, &f.attention_a].into_iter().flatten() {
        s.push(a.pos_idx.clone());
        s.push(a.neg_idx.clone());
    }
    s
}

fn root(f: &Forward, obj: Objective) -> Result<crate::autodiff::Var> {
    let v = match obj {
        Objective::Total => f.loss,
        Objective::Mae => f.mae,
        Objective::Contrastive => f.con,
        Objective::Deviation => f.dev,
    };
    v.ok_or_else(|| contract(format!("objective {obj:?} is not part of this configuration")))
}

fn evaluate(
    model: &Model,
    params: &ModelParams<Tensor>,
    sample: &Sample,
    obj: Objective,
    stops: &[Tensor],
) -> Result<(f64, Selection)> {
    let mut g = Graph::with_frozen_stops(stops.to_vec());
    let p = params.bind(&mut g, false);
    let f = forward_in(&mut g, &model.cfg, &model.normalizer, &p, sample)?;
    let r = root(&f, obj)?;
    Ok((g.value(r).item(), selection(&f)))
}

pub fn grad_check(model: &Model, sample: &Sample, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let param_count = model.params.scalar_count();
    if param_count > cfg.max_params {
        return Err(contract(format!(
            "gradient check is meant for tiny models: {param_count} parameters exceed {}",
            cfg.max_params
        )));
    }

    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    let f = forward_in(&mut g, &model.cfg, &model.normalizer, &p, sample)?;
    let base_sel = selection(&f);
    let r = root(&f, cfg.objective)?;
    let grads = g.backward(r)?;
    let stops = g.stop_values();
    let analytic: Vec<Tensor> = p.flat().into_iter().map(|v| grads.wrt(*v)).collect();

    let named = model.params.named();
    let base_values: Vec<Tensor> = named.iter().map(|(_, t)| (*t).clone()).collect();
    let sizes: Vec<usize> = base_values.iter().map(|t| t.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let draw = |rng: &mut ChaCha8Rng, k: usize| -> (usize, usize) {
        if k < sizes.len() && sizes[k] > 0 {
            return (k, rng.random_range(0..sizes[k]));
        }
        let mut c = rng.random_range(0..param_count);
        for (t, &s) in sizes.iter().enumerate() {
            if c < s {
                return (t, c);
            }
            c -= s;
        }
        unreachable!("coordinate within parameter count")
    };

    let mut probes = Vec::with_capacity(cfg.probes);
    let mut redrawn = 0;
    let max_redraws = 10 * cfg.probes.max(1);
    let mut k = 0;
    while probes.len() < cfg.probes {
        let (t, i) = draw(&mut rng, k);
        k += 1;
        let shifted = |delta: f64| -> Result<(f64, Selection)> {
            let mut values = base_values.clone();
            values[t].data_mut()[i] += delta;
            let params = model.params.with_flat(values)?;
            evaluate(model, &params, sample, cfg.objective, &stops)
        };
        let (up, sel_up) = shifted(cfg.step)?;
        let (down, sel_down) = shifted(-cfg.step)?;
        if sel_up != base_sel || sel_down != base_sel {
            redrawn += 1;
            if redrawn > max_redraws {
                return Err(contract("too many probes crossed a top-2 selection boundary"));
            }
            continue;
        }
        let numeric = (up - down) / (2.0 * cfg.step);
        let a = analytic[t].data()[i];
        let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
        probes.push(Probe { tensor: named[t].0.clone(), index: i, analytic: a, numeric, rel_err });
    }

    let worst = probes.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).cloned();
    Ok(GradCheckReport {
        max_rel_err: worst.as_ref().map_or(0.0, |w| w.rel_err),
        worst,
        probes,
        redrawn,
        tolerance: cfg.tolerance,
        param_count,
    })
}

/// A model on an identity normalizer, for checks that need no dataset.
pub fn standalone_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    Ok(Model {
        cfg: cfg.clone(),
        params: ModelParams::init(cfg, seed)?,
        normalizer: Normalizer { mean: 0.0, std: 1.0, null_value: None },
        anchors: None,
    })
}

/// Seeded random sample: standard-normal input, an anchor that differs by
/// a perturbation of scale 0.5, and a standard-normal target.
pub fn random_sample(cfg: &ModelConfig, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |len: usize| -> Vec<f64> { (0..len).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let shape = vec![cfg.input_len, cfg.nodes, cfg.channels];
    let len = cfg.input_len * cfg.nodes * cfg.channels;
    let input = normal(len);
    let noise = normal(len);
    let anchor: Vec<f64> = input.iter().zip(&noise).map(|(x, e)| x + 0.5 * e).collect();
    let target = normal(cfg.horizon * cfg.nodes * cfg.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let tod = (0..cfg.input_len + cfg.horizon).map(|_| rng.random_range(0..cfg.steps_per_day)).collect();
    Sample {
        input: Tensor::new(shape.clone(), input).expect("shape"),
        anchor: if cfg.uses_anchor() { Some(Tensor::new(shape, anchor).expect("shape")) } else { None },
        tod,
        target: Some(Tensor::new(vec![cfg.horizon, cfg.nodes, cfg.channels], target).expect("shape")),
    }
}
