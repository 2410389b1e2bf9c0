//! Prototype bank, query-prototype attention and top-2 retrieval.

use crate::autodiff::{Graph, Var};
use crate::error::{contract, dim, Result};

/// `M` prototypes of width `d` plus the query projections.
///
/// `query_proj_a` is `None` when both streams share `query_proj_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank<T> {
    pub prototypes: T,
    pub query_proj_c: T,
    pub query_proj_a: Option<T>,
}

impl<T> PrototypeBank<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> PrototypeBank<U> {
        PrototypeBank {
            prototypes: f(&self.prototypes),
            query_proj_c: f(&self.query_proj_c),
            query_proj_a: self.query_proj_a.as_ref().map(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.prototypes"), &self.prototypes);
        f(format!("{prefix}.query_proj_c"), &self.query_proj_c);
        if let Some(a) = &self.query_proj_a {
            f(format!("{prefix}.query_proj_a"), a);
        }
    }

    /// Projection used for the anchor stream.
    pub fn anchor_proj(&self) -> &T {
        self.query_proj_a.as_ref().unwrap_or(&self.query_proj_c)
    }
}

#[derive(Clone, Debug)]
pub struct AttentionResult {
    /// `[N, M]` attention weights.
    pub alpha: Var,
    pub pos_idx: Vec<usize>,
    pub neg_idx: Vec<usize>,
}

/// `Q = H · proj`, one query per node.
pub fn project_query(g: &mut Graph, h: Var, proj: Var) -> Result<Var> {
    g.matmul(h, proj).map_err(|_| {
        dim("project_query", format!("{:?} x {:?}", g.value(h).shape(), g.value(proj).shape()))
    })
}

/// Indices of the largest and second-largest entries; ties go to the lower index.
pub fn top2(row: &[f64]) -> (usize, usize) {
    debug_assert!(row.len() >= 2);
    let (mut first, mut second) = if row[1] > row[0] { (1, 0) } else { (0, 1) };
    for (j, &v) in row.iter().enumerate().skip(2) {
        if v > row[first] {
            second = first;
            first = j;
        } else if v > row[second] {
            second = j;
        }
    }
    (first, second)
}

/// `alpha = softmax(Q Pᵀ / √d)` with top-2 retrieval per row. Index
/// selection carries no gradient.
pub fn prototype_attention(g: &mut Graph, q: Var, prototypes: Var) -> Result<AttentionResult> {
    let (m, d) = (g.value(prototypes).rows(), g.value(prototypes).cols());
    if m < 2 {
        return Err(contract(format!("top-2 retrieval needs at least two prototypes, bank has {m}")));
    }
    if g.value(q).cols() != d {
        return Err(dim("prototype_attention", format!("query width {} vs prototype width {}", g.value(q).cols(), d)));
    }
    let logits = g.matmul_nt(q, prototypes)?;
    let scaled = g.scale(logits, 1.0 / (d as f64).sqrt())?;
    let alpha = g.softmax_rows(scaled)?;
    let a = g.value(alpha);
    let (pos_idx, neg_idx) = (0..a.rows()).map(|r| top2(a.row(r))).unzip();
    Ok(AttentionResult { alpha, pos_idx, neg_idx })
}

/// `V = alpha · P`.
pub fn aggregate_value(g: &mut Graph, alpha: Var, prototypes: Var) -> Result<Var> {
    g.matmul(alpha, prototypes)
}

/// Row `n` of the result is `P[idx[n]]`.
pub fn gather_prototypes(g: &mut Graph, idx: &[usize], prototypes: Var) -> Result<Var> {
    g.gather_rows(prototypes, idx)
}
