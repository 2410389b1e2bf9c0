//! Full forward pass: embeddings, dual-stream encoding, prototype
//! interaction, adaptive graph, decoding and losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::anchor::{retrieve_anchor, AnchorTable};
use crate::autodiff::{Gradients, Graph, Var};
use crate::data::{Normalizer, Window};
use crate::error::{config, contract, dim, Error, Result};
use crate::gcru::{decode_stacked, encode_stacked, GcruParams};
use crate::graph::{adaptive_graph, node_embedding_graph, Adjacency};
use crate::losses::{
    contrastive_loss, deviation_loss, mae_loss, naive_deviation_loss, total_loss, DeviationDiagnostics,
    LossBreakdown,
};
use crate::prototype::{aggregate_value, gather_prototypes, project_query, prototype_attention, AttentionResult, PrototypeBank};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub nodes: usize,
    pub channels: usize,
    pub input_len: usize,
    pub horizon: usize,
    pub steps_per_day: usize,
    pub hidden: usize,
    pub proto_dim: usize,
    pub prototypes: usize,
    pub cheb_order: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub e_in: usize,
    pub e_node: usize,
    pub e_tod: usize,
    pub e_graph: usize,
    pub margin: f64,
    pub lambda_con: f64,
    pub lambda_dev: f64,
    pub share_query_proj: bool,
    pub naive_ssdl: bool,
    /// Drops the anchor stream and the prototype bank entirely.
    pub no_ssdl: bool,
    /// Only for studying collapse: lets the self-supervised losses reach the queries.
    pub disable_stopgrad: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            nodes: 1,
            channels: 1,
            input_len: 12,
            horizon: 12,
            steps_per_day: 288,
            hidden: 32,
            proto_dim: 64,
            prototypes: 20,
            cheb_order: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            e_in: 8,
            e_node: 8,
            e_tod: 8,
            e_graph: 8,
            margin: 1.0,
            lambda_con: 0.1,
            lambda_dev: 0.1,
            share_query_proj: false,
            naive_ssdl: false,
            no_ssdl: false,
            disable_stopgrad: false,
        }
    }
}

/// Ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoCon,
    NoDev,
    NoBoth,
    NoSsdl,
    Naive,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Full, Variant::NoCon, Variant::NoDev, Variant::NoBoth, Variant::NoSsdl, Variant::Naive];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCon => "no-con",
            Variant::NoDev => "no-dev",
            Variant::NoBoth => "no-both",
            Variant::NoSsdl => "no-ssdl",
            Variant::Naive => "naive",
        }
    }

    pub fn apply(self, cfg: &mut ModelConfig) {
        match self {
            Variant::Full => {}
            Variant::NoCon => cfg.lambda_con = 0.0,
            Variant::NoDev => cfg.lambda_dev = 0.0,
            Variant::NoBoth => {
                cfg.lambda_con = 0.0;
                cfg.lambda_dev = 0.0;
            }
            Variant::NoSsdl => {
                cfg.no_ssdl = true;
                cfg.lambda_con = 0.0;
                cfg.lambda_dev = 0.0;
            }
            Variant::Naive => {
                cfg.naive_ssdl = true;
                cfg.lambda_con = 0.0;
            }
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| config(format!("unknown variant `{s}` (full|no-con|no-dev|no-both|no-ssdl|naive)")))
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("nodes", self.nodes),
            ("channels", self.channels),
            ("input_len", self.input_len),
            ("horizon", self.horizon),
            ("steps_per_day", self.steps_per_day),
            ("hidden", self.hidden),
            ("proto_dim", self.proto_dim),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("e_in", self.e_in),
            ("e_node", self.e_node),
            ("e_tod", self.e_tod),
            ("e_graph", self.e_graph),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(config(format!("{name} must be positive")));
            }
        }
        if !self.no_ssdl && self.prototypes < 2 {
            return Err(config(format!("need at least two prototypes, got {}", self.prototypes)));
        }
        if self.lambda_con < 0.0 || self.lambda_dev < 0.0 {
            return Err(config("loss weights must be non-negative"));
        }
        if self.margin.is_nan() || self.margin <= 0.0 {
            return Err(config("margin must be positive"));
        }
        Ok(())
    }

    pub fn uses_anchor(&self) -> bool {
        !self.no_ssdl
    }

    pub fn encoder_input_width(&self) -> usize {
        self.e_in + self.e_node + self.e_tod
    }

    pub fn decoder_input_width(&self) -> usize {
        self.channels + self.e_node + self.e_tod
    }

    /// Closed-form trainable scalar count, independent of [`ModelParams::init`].
    pub fn expected_param_count(&self) -> usize {
        let (h, d, k1) = (self.hidden, self.proto_dim, self.cheb_order + 1);
        let gate = |f_in: usize| k1 * (f_in + h) * h + h;
        let stack = |f_first: usize, layers: usize| 3 * (gate(f_first) + (layers - 1) * gate(h));
        let mut n = stack(self.encoder_input_width(), self.encoder_layers)
            + stack(self.decoder_input_width(), self.decoder_layers)
            + self.nodes * self.e_node
            + self.steps_per_day * self.e_tod
            + self.channels * self.e_in
            + self.nodes * self.e_graph
            + h * self.channels;
        if !self.no_ssdl {
            let projections = if self.share_query_proj { 1 } else { 2 };
            n += self.prototypes * d + projections * h * d + (2 * h + 2 * d) * d + d + (h + d) * h;
        }
        n
    }
}

/// Parameters that exist only with the self-supervised branch.
#[derive(Clone, Debug, PartialEq)]
pub struct SsdlParams<T> {
    pub bank: PrototypeBank<T>,
    /// `[2h + 2d, d]` and `[1, d]`.
    pub adaptive_w: T,
    pub adaptive_b: T,
    /// `[h + d, h]`.
    pub decoder_init: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub encoder: Vec<GcruParams<T>>,
    pub decoder: Vec<GcruParams<T>>,
    pub node_emb: T,
    pub tod_emb: T,
    pub input_lift: T,
    pub graph_emb: T,
    pub ssdl: Option<SsdlParams<T>>,
    pub out_proj: T,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            encoder: self.encoder.iter().map(|l| l.map(f)).collect(),
            decoder: self.decoder.iter().map(|l| l.map(f)).collect(),
            node_emb: f(&self.node_emb),
            tod_emb: f(&self.tod_emb),
            input_lift: f(&self.input_lift),
            graph_emb: f(&self.graph_emb),
            ssdl: self.ssdl.as_ref().map(|s| SsdlParams {
                bank: s.bank.map(f),
                adaptive_w: f(&s.adaptive_w),
                adaptive_b: f(&s.adaptive_b),
                decoder_init: f(&s.decoder_init),
            }),
            out_proj: f(&self.out_proj),
        }
    }

    /// Visits every tensor with a stable dotted name, in a fixed order.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        for (i, l) in self.encoder.iter().enumerate() {
            l.visit(&format!("enc{i}"), f);
        }
        for (i, l) in self.decoder.iter().enumerate() {
            l.visit(&format!("dec{i}"), f);
        }
        f("node_emb".into(), &self.node_emb);
        f("tod_emb".into(), &self.tod_emb);
        f("input_lift".into(), &self.input_lift);
        f("graph_emb".into(), &self.graph_emb);
        if let Some(s) = &self.ssdl {
            s.bank.visit("bank", f);
            f("adaptive_w".into(), &s.adaptive_w);
            f("adaptive_b".into(), &s.adaptive_b);
            f("decoder_init".into(), &s.decoder_init);
        }
        f("out_proj".into(), &self.out_proj);
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }

    pub fn flat(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.push(t));
        out
    }
}

impl<T: Clone> ModelParams<T> {
    /// Rebuilds the same structure from values listed in visit order.
    pub fn with_flat<U: Clone>(&self, values: Vec<U>) -> Result<ModelParams<U>> {
        let expected = self.flat().len();
        if values.len() != expected {
            return Err(contract(format!("{} tensors for {} parameter slots", values.len(), expected)));
        }
        let mut it = values.into_iter();
        Ok(self.map(&mut |_| it.next().expect("length checked")))
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f64) -> Tensor {
    let limit = gain * (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

fn init_gcru(rng: &mut ChaCha8Rng, order: usize, f_in: usize, h: usize) -> GcruParams<Tensor> {
    let gain = 1.0 / ((order + 1) as f64).sqrt();
    let mut p = GcruParams::zeros(order, f_in, h);
    for gate in [&mut p.theta_r, &mut p.theta_u, &mut p.theta_c] {
        for w in gate.weights.iter_mut() {
            *w = xavier(rng, f_in + h, h, gain);
        }
    }
    p
}

impl ModelParams<Tensor> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, d, k) = (cfg.hidden, cfg.proto_dim, cfg.cheb_order);
        let stack = |rng: &mut ChaCha8Rng, f_first: usize, layers: usize| {
            (0..layers).map(|l| init_gcru(rng, k, if l == 0 { f_first } else { h }, h)).collect::<Vec<_>>()
        };
        let encoder = stack(&mut rng, cfg.encoder_input_width(), cfg.encoder_layers);
        let decoder = stack(&mut rng, cfg.decoder_input_width(), cfg.decoder_layers);
        let node_emb = normal(&mut rng, cfg.nodes, cfg.e_node, 0.1);
        let tod_emb = normal(&mut rng, cfg.steps_per_day, cfg.e_tod, 0.1);
        let input_lift = xavier(&mut rng, cfg.channels, cfg.e_in, 1.0);
        let graph_emb = normal(&mut rng, cfg.nodes, cfg.e_graph, 1.0 / (cfg.e_graph as f64).sqrt());
        let ssdl = if cfg.no_ssdl {
            None
        } else {
            let prototypes = normal(&mut rng, cfg.prototypes, d, 1.0 / (d as f64).sqrt());
            let query_proj_c = xavier(&mut rng, h, d, 1.0);
            let query_proj_a = if cfg.share_query_proj { None } else { Some(xavier(&mut rng, h, d, 1.0)) };
            Some(SsdlParams {
                bank: PrototypeBank { prototypes, query_proj_c, query_proj_a },
                adaptive_w: xavier(&mut rng, 2 * h + 2 * d, d, 1.0),
                adaptive_b: Tensor::zeros(&[1, d]),
                decoder_init: xavier(&mut rng, h + d, h, 1.0),
            })
        };
        let out_proj = xavier(&mut rng, h, cfg.channels, 1.0);
        let params =
            ModelParams { encoder, decoder, node_emb, tod_emb, input_lift, graph_emb, ssdl, out_proj };
        let count = params.scalar_count();
        if count != cfg.expected_param_count() {
            return Err(contract(format!(
                "parameter count {} differs from closed form {}",
                count,
                cfg.expected_param_count()
            )));
        }
        Ok(params)
    }

    pub fn scalar_count(&self) -> usize {
        self.flat().iter().map(|t| t.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelParams<Var> {
        self.map(&mut |t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
    }
}

/// Inputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `[T, N, C]`, normalized.
    pub input: Tensor,
    /// `[T, N, C]`, normalized; required unless the anchor stream is disabled.
    pub anchor: Option<Tensor>,
    /// Time-of-day index per input step followed by one per forecast step.
    pub tod: Vec<usize>,
    /// `[T', N, C]`, original scale.
    pub target: Option<Tensor>,
}

impl Sample {
    pub fn from_window(w: &Window, anchors: Option<&AnchorTable>, norm: &Normalizer) -> Sample {
        let anchor = anchors.map(|a| norm.apply_tensor(&retrieve_anchor(a, w.start, w.input_len())));
        Sample { input: w.input.clone(), anchor, tod: w.tod.clone(), target: Some(w.target.clone()) }
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Original-scale predictions, one `[N, C]` per forecast step.
    pub prediction: Vec<Var>,
    pub loss: Option<Var>,
    pub mae: Option<Var>,
    pub con: Option<Var>,
    pub dev: Option<Var>,
    pub losses: LossBreakdown,
    pub hidden_c: Var,
    pub hidden_a: Option<Var>,
    pub query_c: Option<Var>,
    pub query_a: Option<Var>,
    pub attention_c: Option<AttentionResult>,
    pub attention_a: Option<AttentionResult>,
    pub deviation: Option<DeviationDiagnostics>,
    pub adjacency: Adjacency,
    pub encoder_adjacency: Adjacency,
}

/// Plain-value result of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[T', N, C]`, original scale.
    pub prediction: Tensor,
    pub losses: LossBreakdown,
    pub deviation: Option<DeviationDiagnostics>,
    pub pos_c: Vec<usize>,
    pub neg_c: Vec<usize>,
    pub pos_a: Vec<usize>,
    pub neg_a: Vec<usize>,
    pub alpha_c: Option<Tensor>,
    pub alpha_a: Option<Tensor>,
    pub query_c: Option<Tensor>,
    pub query_a: Option<Tensor>,
    pub adjacency: Tensor,
}

impl ForwardOutput {
    pub fn from_graph(g: &Graph, f: &Forward) -> Result<Self> {
        let steps = f.prediction.len();
        let mut data = Vec::new();
        let mut shape = vec![steps];
        for (i, p) in f.prediction.iter().enumerate() {
            let v = g.value(*p);
            if i == 0 {
                shape.extend_from_slice(v.shape());
            }
            data.extend_from_slice(v.data());
        }
        let idx = |a: &Option<AttentionResult>| a.as_ref().map(|a| (a.pos_idx.clone(), a.neg_idx.clone())).unwrap_or_default();
        let (pos_c, neg_c) = idx(&f.attention_c);
        let (pos_a, neg_a) = idx(&f.attention_a);
        Ok(ForwardOutput {
            prediction: Tensor::new(shape, data)?,
            losses: f.losses,
            deviation: f.deviation.clone(),
            pos_c,
            neg_c,
            pos_a,
            neg_a,
            alpha_c: f.attention_c.as_ref().map(|a| g.value(a.alpha).clone()),
            alpha_a: f.attention_a.as_ref().map(|a| g.value(a.alpha).clone()),
            query_c: f.query_c.map(|q| g.value(q).clone()),
            query_a: f.query_a.map(|q| g.value(q).clone()),
            adjacency: g.value(f.adjacency.matrix).clone(),
        })
    }
}

/// Per-timestep `[X_t·lift | node_emb | tod_emb[tod_t]]`, each `[N, f_in]`.
pub fn embed_inputs(g: &mut Graph, x: &Tensor, tod: &[usize], p: &ModelParams<Var>) -> Result<Vec<Var>> {
    let s = x.shape();
    if s.len() != 3 || tod.len() < s[0] {
        return Err(dim("embed_inputs", format!("input {:?} with {} time-of-day indices", s, tod.len())));
    }
    let (t_len, n, c) = (s[0], s[1], s[2]);
    if g.value(p.node_emb).rows() != n {
        return Err(dim("embed_inputs", format!("{} nodes but {} node embeddings", n, g.value(p.node_emb).rows())));
    }
    let spd = g.value(p.tod_emb).rows();
    let mut out = Vec::with_capacity(t_len);
    for (t, &tod_t) in tod.iter().enumerate().take(t_len) {
        if tod_t >= spd {
            return Err(contract(format!("time-of-day index {tod_t} out of range for {spd} slots")));
        }
        let xt = g.constant(Tensor::matrix(n, c, x.data()[t * n * c..(t + 1) * n * c].to_vec())?);
        let lifted = g.matmul(xt, p.input_lift)?;
        let tod_rows = g.gather_rows(p.tod_emb, &vec![tod_t; n])?;
        out.push(g.concat(&[lifted, p.node_emb, tod_rows])?);
    }
    Ok(out)
}

fn decoder_embeddings(g: &mut Graph, future_tod: &[usize], p: &ModelParams<Var>) -> Result<Vec<Var>> {
    let n = g.value(p.node_emb).rows();
    let spd = g.value(p.tod_emb).rows();
    future_tod
        .iter()
        .map(|&t| {
            if t >= spd {
                return Err(contract(format!("time-of-day index {t} out of range for {spd} slots")));
            }
            let rows = g.gather_rows(p.tod_emb, &vec![t; n])?;
            g.concat(&[p.node_emb, rows])
        })
        .collect()
}

/// `[T, N, C]` to `[N, T·C]`.
pub fn flatten_per_node(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (t_len, n, c) = (s[0], s[1], s[2]);
    let mut data = Vec::with_capacity(x.len());
    for node in 0..n {
        for t in 0..t_len {
            let base = (t * n + node) * c;
            data.extend_from_slice(&x.data()[base..base + c]);
        }
    }
    Tensor::matrix(n, t_len * c, data).expect("shape")
}

/// Everything the forward pass needs besides parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ModelParams<Tensor>,
    pub normalizer: Normalizer,
    pub anchors: Option<AnchorTable>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64, normalizer: Normalizer, anchors: Option<AnchorTable>) -> Result<Self> {
        if cfg.uses_anchor() && anchors.is_none() {
            return Err(contract("the anchor stream needs an anchor table"));
        }
        let params = ModelParams::init(&cfg, seed)?;
        Ok(Model { cfg, params, normalizer, anchors })
    }

    pub fn sample(&self, w: &Window) -> Sample {
        Sample::from_window(w, if self.cfg.uses_anchor() { self.anchors.as_ref() } else { None }, &self.normalizer)
    }

    /// Builds the whole forward pass into `g`.
    pub fn forward_in(&self, g: &mut Graph, p: &ModelParams<Var>, sample: &Sample) -> Result<Forward> {
        forward_in(g, &self.cfg, &self.normalizer, p, sample)
    }

    /// Value-only forward pass.
    pub fn predict(&self, sample: &Sample) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let f = self.forward_in(&mut g, &p, sample)?;
        ForwardOutput::from_graph(&g, &f)
    }

    /// Loss breakdown and per-parameter gradients (visit order) of one sample.
    pub fn loss_and_grads(&self, sample: &Sample) -> Result<(LossBreakdown, Vec<Tensor>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, true);
        let f = self.forward_in(&mut g, &p, sample)?;
        let loss = f.loss.ok_or_else(|| contract("loss needs a target"))?;
        let mut grads: Gradients = g.backward(loss)?;
        let grads = p.flat().into_iter().map(|v| grads.take(*v)).collect();
        Ok((f.losses, grads))
    }
}

/// The forward pass as a free function over bound parameters.
pub fn forward_in(
    g: &mut Graph,
    cfg: &ModelConfig,
    norm: &Normalizer,
    p: &ModelParams<Var>,
    sample: &Sample,
) -> Result<Forward> {
    let t_len = cfg.input_len;
    let (n, c, h) = (cfg.nodes, cfg.channels, cfg.hidden);
    let expected = [t_len, n, c];
    if sample.input.shape() != expected {
        return Err(dim("st_ssdl_forward", format!("input {:?}, expected {:?}", sample.input.shape(), expected)));
    }
    if sample.tod.len() != t_len + cfg.horizon {
        return Err(dim("st_ssdl_forward", format!("{} time-of-day indices for T + T' = {}", sample.tod.len(), t_len + cfg.horizon)));
    }
    let stop = !cfg.disable_stopgrad;

    let enc_adj = node_embedding_graph(g, p.graph_emb)?;
    let h0: Vec<Var> = (0..cfg.encoder_layers).map(|_| g.constant(Tensor::zeros(&[n, h]))).collect();

    let xs_c = embed_inputs(g, &sample.input, &sample.tod, p)?;
    let hidden_c = *encode_stacked(g, &xs_c, enc_adj, &p.encoder, &h0)?.last().expect("layers >= 1");

    let mut out = Forward {
        prediction: Vec::new(),
        loss: None,
        mae: None,
        con: None,
        dev: None,
        losses: LossBreakdown::default(),
        hidden_c,
        hidden_a: None,
        query_c: None,
        query_a: None,
        attention_c: None,
        attention_a: None,
        deviation: None,
        adjacency: enc_adj,
        encoder_adjacency: enc_adj,
    };
    let mut con = None;
    let mut dev = None;

    let h_init = match &p.ssdl {
        None => hidden_c,
        Some(s) => {
            let anchor = sample.anchor.as_ref().ok_or_else(|| contract("anchor window required"))?;
            if anchor.shape() != expected {
                return Err(dim("st_ssdl_forward", format!("anchor {:?}, expected {:?}", anchor.shape(), expected)));
            }
            let xs_a = embed_inputs(g, anchor, &sample.tod, p)?;
            let hidden_a = *encode_stacked(g, &xs_a, enc_adj, &p.encoder, &h0)?.last().expect("layers >= 1");

            let protos = s.bank.prototypes;
            let qc = project_query(g, hidden_c, s.bank.query_proj_c)?;
            let qa = project_query(g, hidden_a, *s.bank.anchor_proj())?;
            let att_c = prototype_attention(g, qc, protos)?;
            let att_a = prototype_attention(g, qa, protos)?;

            if cfg.naive_ssdl {
                let xc = flatten_per_node(&sample.input);
                let xa = flatten_per_node(anchor);
                dev = Some(naive_deviation_loss(g, &xc, &xa, hidden_c, hidden_a)?);
                let (qcv, qav, pv) = (g.value(qc), g.value(qa), g.value(protos));
                let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
                out.deviation = Some(DeviationDiagnostics {
                    d_q: (0..n).map(|i| l1(qcv.row(i), qav.row(i))).collect(),
                    d_p: (0..n).map(|i| l1(pv.row(att_c.pos_idx[i]), pv.row(att_a.pos_idx[i]))).collect(),
                });
            } else {
                let pos_c = gather_prototypes(g, &att_c.pos_idx, protos)?;
                let neg_c = gather_prototypes(g, &att_c.neg_idx, protos)?;
                let pos_a = gather_prototypes(g, &att_a.pos_idx, protos)?;
                con = Some(contrastive_loss(g, qc, pos_c, neg_c, cfg.margin, stop)?);
                let (l_dev, diag) = deviation_loss(g, qc, qa, pos_c, pos_a, stop)?;
                dev = Some(l_dev);
                out.deviation = Some(diag);
            }

            let vc = aggregate_value(g, att_c.alpha, protos)?;
            let va = aggregate_value(g, att_a.alpha, protos)?;
            out.adjacency = adaptive_graph(g, hidden_c, vc, hidden_a, va, s.adaptive_w, s.adaptive_b)?;
            out.hidden_a = Some(hidden_a);
            out.query_c = Some(qc);
            out.query_a = Some(qa);
            out.attention_c = Some(att_c);
            out.attention_a = Some(att_a);
            let ctx = g.concat(&[hidden_c, vc])?;
            g.matmul(ctx, s.decoder_init)?
        }
    };

    out.con = con;
    out.dev = dev;
    let dec_init = vec![h_init; cfg.decoder_layers];
    let step_embs = decoder_embeddings(g, &sample.tod[t_len..], p)?;
    let preds = decode_stacked(g, &dec_init, out.adjacency, &p.decoder, p.out_proj, &step_embs)?;
    out.prediction = preds
        .into_iter()
        .map(|y| {
            let scaled = g.scale(y, norm.std)?;
            g.add_scalar(scaled, norm.mean)
        })
        .collect::<Result<_>>()?;

    if let Some(target) = &sample.target {
        let mae = mae_loss(g, &out.prediction, target, norm.null_value)?;
        let (total, parts) = total_loss(g, mae, con, dev, cfg.lambda_con, cfg.lambda_dev)?;
        out.loss = Some(total);
        out.losses = parts;
        out.mae = Some(mae);
    }

    if let Some((v, op)) = g.first_non_finite() {
        return Err(Error::Numeric { op: format!("{op} (node {})", v.index()) });
    }
    Ok(out)
}
