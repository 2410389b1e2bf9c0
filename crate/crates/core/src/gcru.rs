//! Graph Convolution Recurrent Unit and the encoder/decoder loops built on it.

use crate::autodiff::{Graph, Var};
use crate::error::{contract, dim, Result};
use crate::graph::{cheb_apply, cheb_basis, Adjacency, ChebWeights};
use crate::tensor::Tensor;

/// Reset, update and candidate convolutions. Each maps `f_in + h -> h`.
#[derive(Clone, Debug, PartialEq)]
pub struct GcruParams<T> {
    pub theta_r: ChebWeights<T>,
    pub theta_u: ChebWeights<T>,
    pub theta_c: ChebWeights<T>,
}

impl<T> GcruParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> GcruParams<U> {
        GcruParams { theta_r: self.theta_r.map(f), theta_u: self.theta_u.map(f), theta_c: self.theta_c.map(f) }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        self.theta_r.visit(&format!("{prefix}.r"), f);
        self.theta_u.visit(&format!("{prefix}.u"), f);
        self.theta_c.visit(&format!("{prefix}.c"), f);
    }
}

impl GcruParams<Tensor> {
    pub fn zeros(order: usize, f_in: usize, hidden: usize) -> Self {
        GcruParams {
            theta_r: ChebWeights::zeros(order, f_in + hidden, hidden),
            theta_u: ChebWeights::zeros(order, f_in + hidden, hidden),
            theta_c: ChebWeights::zeros(order, f_in + hidden, hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.theta_r.bias.len()
    }

    pub fn input_width(&self) -> usize {
        self.theta_r.weights[0].rows() - self.hidden()
    }
}

/// Intermediate gate activations of one cell step.
#[derive(Clone, Copy, Debug)]
pub struct CellTrace {
    pub reset: Var,
    pub update: Var,
    pub candidate: Var,
    pub hidden: Var,
}

/// One GCRU step; returns the new hidden state and the gate activations.
pub fn gcru_cell_traced(g: &mut Graph, x: Var, h_prev: Var, adj: Adjacency, p: &GcruParams<Var>) -> Result<CellTrace> {
    let (xr, hr) = (g.value(x).rows(), g.value(h_prev).rows());
    if xr != hr {
        return Err(dim("gcru_cell", format!("input has {xr} rows, hidden state has {hr}")));
    }
    let order = p.theta_r.order().ok_or_else(|| contract("GCRU gates need at least one weight"))?;
    if p.theta_u.weights.len() != order + 1 || p.theta_c.weights.len() != order + 1 {
        return Err(contract("GCRU gates must share a Chebyshev order"));
    }

    // r and u read the same [X | H], so they share the propagated basis.
    let xh = g.concat(&[x, h_prev])?;
    let basis = cheb_basis(g, xh, adj, order)?;
    let r_pre = cheb_apply(g, &basis, &p.theta_r)?;
    let reset = g.sigmoid(r_pre)?;
    let u_pre = cheb_apply(g, &basis, &p.theta_u)?;
    let update = g.sigmoid(u_pre)?;

    let rh = g.mul(reset, h_prev)?;
    let xrh = g.concat(&[x, rh])?;
    let c_basis = cheb_basis(g, xrh, adj, order)?;
    let c_pre = cheb_apply(g, &c_basis, &p.theta_c)?;
    let candidate = g.tanh(c_pre)?;

    // H = u⊙H_prev + (1 − u)⊙c = u⊙H_prev + c − u⊙c
    let keep = g.mul(update, h_prev)?;
    let uc = g.mul(update, candidate)?;
    let fresh = g.sub(candidate, uc)?;
    let hidden = g.add(keep, fresh)?;
    Ok(CellTrace { reset, update, candidate, hidden })
}

pub fn gcru_cell(g: &mut Graph, x: Var, h_prev: Var, adj: Adjacency, p: &GcruParams<Var>) -> Result<Var> {
    Ok(gcru_cell_traced(g, x, h_prev, adj, p)?.hidden)
}

/// Runs a stack of GCRU layers over `xs` and returns each layer's final
/// hidden state (bottom first).
pub fn encode_stacked(g: &mut Graph, xs: &[Var], adj: Adjacency, layers: &[GcruParams<Var>], h0: &[Var]) -> Result<Vec<Var>> {
    if xs.is_empty() {
        return Err(contract("cannot encode an empty sequence"));
    }
    if layers.len() != h0.len() || layers.is_empty() {
        return Err(contract(format!("{} layers but {} initial states", layers.len(), h0.len())));
    }
    let mut states = h0.to_vec();
    for &x in xs {
        let mut input = x;
        for (layer, state) in layers.iter().zip(states.iter_mut()) {
            *state = gcru_cell(g, input, *state, adj, layer)?;
            input = *state;
        }
    }
    Ok(states)
}

/// Left-to-right encoding; returns the final hidden state only.
pub fn encode_sequence(g: &mut Graph, xs: &[Var], adj: Adjacency, p: &GcruParams<Var>, h0: Var) -> Result<Var> {
    let states = encode_stacked(g, xs, adj, std::slice::from_ref(p), &[h0])?;
    Ok(states[0])
}

/// Autoregressive decoder. Step `t` reads `[prev_prediction | step_embeddings[t]]`,
/// with a zero go value at the first step; the top layer's state is
/// projected through `out_proj` (`[h, C]`) to produce each prediction.
pub fn decode_stacked(
    g: &mut Graph,
    h_init: &[Var],
    adj: Adjacency,
    layers: &[GcruParams<Var>],
    out_proj: Var,
    step_embeddings: &[Var],
) -> Result<Vec<Var>> {
    if step_embeddings.is_empty() {
        return Err(contract("decoder needs at least one step"));
    }
    if layers.len() != h_init.len() || layers.is_empty() {
        return Err(contract(format!("{} layers but {} initial states", layers.len(), h_init.len())));
    }
    let n = g.value(h_init[0]).rows();
    let channels = g.value(out_proj).cols();
    let mut prev = g.constant(Tensor::zeros(&[n, channels]));
    let mut states = h_init.to_vec();
    let mut preds = Vec::with_capacity(step_embeddings.len());
    for &emb in step_embeddings {
        let mut input = g.concat(&[prev, emb])?;
        for (layer, state) in layers.iter().zip(states.iter_mut()) {
            *state = gcru_cell(g, input, *state, adj, layer)?;
            input = *state;
        }
        let y = g.matmul(input, out_proj)?;
        preds.push(y);
        prev = y;
    }
    Ok(preds)
}

pub fn decode_sequence(
    g: &mut Graph,
    h_init: Var,
    adj: Adjacency,
    p_dec: &GcruParams<Var>,
    out_proj: Var,
    step_embeddings: &[Var],
) -> Result<Vec<Var>> {
    decode_stacked(g, &[h_init], adj, std::slice::from_ref(p_dec), out_proj, step_embeddings)
}
