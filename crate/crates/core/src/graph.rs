//! Graph convolution over dense adjacency and the two graph builders.

use crate::autodiff::{Graph, Var};
use crate::error::{contract, dim, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdjacencyKind {
    RowStochastic,
    Raw,
}

/// An `[N, N]` adjacency living in a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct Adjacency {
    pub matrix: Var,
    pub kind: AdjacencyKind,
}

impl Adjacency {
    pub fn raw(matrix: Var) -> Self {
        Adjacency { matrix, kind: AdjacencyKind::Raw }
    }
}

/// Polynomial weights `W_0..W_K` plus a shared bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ChebWeights<T> {
    pub weights: Vec<T>,
    pub bias: T,
}

impl<T> ChebWeights<T> {
    pub fn order(&self) -> Option<usize> {
        self.weights.len().checked_sub(1)
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ChebWeights<U> {
        ChebWeights { weights: self.weights.iter().map(&mut *f).collect(), bias: f(&self.bias) }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        for (k, w) in self.weights.iter().enumerate() {
            f(format!("{prefix}.w{k}"), w);
        }
        f(format!("{prefix}.b"), &self.bias);
    }
}

impl ChebWeights<Tensor> {
    pub fn zeros(order: usize, h_in: usize, h_out: usize) -> Self {
        ChebWeights {
            weights: (0..=order).map(|_| Tensor::zeros(&[h_in, h_out])).collect(),
            bias: Tensor::zeros(&[1, h_out]),
        }
    }
}

/// Checks that every row is non-negative and sums to one within `1e-9`.
pub fn check_row_stochastic(t: &Tensor) -> Result<()> {
    for r in 0..t.rows() {
        let row = t.row(r);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 || row.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::Numeric { op: format!("row-stochastic adjacency (row {r} sums to {s})") });
        }
    }
    Ok(())
}

/// `[Z, ÃZ, Ã²Z, …, Ã^K Z]` by iterated multiplication.
pub fn cheb_basis(g: &mut Graph, z: Var, adj: Adjacency, order: usize) -> Result<Vec<Var>> {
    let a = g.value(adj.matrix);
    let n = g.value(z).rows();
    if a.rows() != a.cols() || a.rows() != n {
        return Err(dim("cheb_graph_conv", format!("adjacency {:?} for {} nodes", a.shape(), n)));
    }
    let mut basis = Vec::with_capacity(order + 1);
    basis.push(z);
    for _ in 0..order {
        let prev = *basis.last().expect("non-empty");
        basis.push(g.matmul(adj.matrix, prev)?);
    }
    Ok(basis)
}

/// `Σ_k basis[k] · W_k + bias`.
pub fn cheb_apply(g: &mut Graph, basis: &[Var], w: &ChebWeights<Var>) -> Result<Var> {
    if w.weights.is_empty() {
        return Err(contract("Chebyshev order must be non-negative (no weights given)"));
    }
    if basis.len() < w.weights.len() {
        return Err(dim("cheb_graph_conv", format!("{} basis terms for {} weights", basis.len(), w.weights.len())));
    }
    let mut out = g.linear(basis[0], w.weights[0], w.bias)?;
    for (zk, wk) in basis.iter().zip(&w.weights).skip(1) {
        let term = g.matmul(*zk, *wk)?;
        out = g.add(out, term)?;
    }
    Ok(out)
}

/// `Σ_{k=0..K} Ã^k Z W_k + b`.
pub fn cheb_graph_conv(g: &mut Graph, z: Var, adj: Adjacency, w: &ChebWeights<Var>) -> Result<Var> {
    let order = w
        .order()
        .ok_or_else(|| contract("Chebyshev order must be non-negative (no weights given)"))?;
    let basis = cheb_basis(g, z, adj, order)?;
    cheb_apply(g, &basis, w)
}

/// `softmax_rows(relu(H · Hᵀ))`, validated as row-stochastic.
pub fn gram_softmax_graph(g: &mut Graph, h: Var) -> Result<Adjacency> {
    let gram = g.matmul_nt(h, h)?;
    let act = g.relu(gram)?;
    let adj = g.softmax_rows(act)?;
    check_row_stochastic(g.value(adj))?;
    Ok(Adjacency { matrix: adj, kind: AdjacencyKind::RowStochastic })
}

/// Adaptive decoder graph from current/anchor hidden states and their
/// prototype-augmented values: `H' = [Hc|Vc|Ha|Va]·W + b`, then
/// `softmax(relu(H'H'ᵀ))`.
pub fn adaptive_graph(g: &mut Graph, hc: Var, vc: Var, ha: Var, va: Var, w: Var, b: Var) -> Result<Adjacency> {
    let n = g.value(hc).rows();
    for v in [vc, ha, va] {
        if g.value(v).rows() != n {
            return Err(dim("adaptive_graph", format!("inputs have {} and {} rows", n, g.value(v).rows())));
        }
    }
    let cat = g.concat(&[hc, vc, ha, va])?;
    let h_prime = g.linear(cat, w, b)?;
    gram_softmax_graph(g, h_prime)
}

/// Encoder-side graph over learnable node embeddings `E`:
/// `softmax(relu(E·Eᵀ))`.
pub fn node_embedding_graph(g: &mut Graph, e: Var) -> Result<Adjacency> {
    if g.value(e).cols() == 0 {
        return Err(dim("node_embedding_graph", "embedding width must be at least 1"));
    }
    gram_softmax_graph(g, e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_zero_ignores_adjacency() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, -1.0]]));
        let adj = Adjacency::raw(g.constant(Tensor::from_rows(&[&[5.0, 1.0], &[2.0, 7.0]])));
        let w0 = g.constant(Tensor::from_rows(&[&[1.0, 0.0, 2.0], &[0.5, 1.0, 0.0]]));
        let b = g.constant(Tensor::from_rows(&[&[0.1, 0.2, 0.3]]));
        let out = cheb_graph_conv(&mut g, z, adj, &ChebWeights { weights: vec![w0], bias: b }).unwrap();
        let expect = [2.1, 2.2, 2.3, 2.6, -0.8, 6.3];
        for (a, e) in g.value(out).data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_composition() {
        let mut g = Graph::new();
        let zt = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, -1.0], &[0.0, 4.0]]);
        let z = g.constant(zt.clone());
        let adj = Adjacency::raw(g.constant(Tensor::identity(3)));
        let w = ChebWeights {
            weights: vec![g.constant(Tensor::identity(2)), g.constant(Tensor::zeros(&[2, 2]))],
            bias: g.constant(Tensor::zeros(&[1, 2])),
        };
        let out = cheb_graph_conv(&mut g, z, adj, &w).unwrap();
        assert_eq!(g.value(out), &zt);
    }

    #[test]
    fn empty_weights_is_contract_error() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 2]));
        let adj = Adjacency::raw(g.constant(Tensor::identity(2)));
        let b = g.constant(Tensor::zeros(&[1, 2]));
        let w = ChebWeights { weights: vec![], bias: b };
        assert!(matches!(cheb_graph_conv(&mut g, z, adj, &w), Err(Error::Contract(_))));
    }

    #[test]
    fn adjacency_extent_mismatch() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[3, 2]));
        let adj = Adjacency::raw(g.constant(Tensor::identity(2)));
        let w = ChebWeights {
            weights: vec![g.constant(Tensor::zeros(&[2, 2])); 2],
            bias: g.constant(Tensor::zeros(&[1, 2])),
        };
        assert!(matches!(cheb_graph_conv(&mut g, z, adj, &w), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_projection_gives_uniform_adaptive_graph() {
        let mut g = Graph::new();
        let n = 5;
        let hc = g.constant(Tensor::full(&[n, 3], 0.7));
        let vc = g.constant(Tensor::full(&[n, 2], -0.2));
        let w = g.constant(Tensor::zeros(&[10, 4]));
        let b = g.constant(Tensor::zeros(&[1, 4]));
        let adj = adaptive_graph(&mut g, hc, vc, hc, vc, w, b).unwrap();
        assert!(g.value(adj.matrix).data().iter().all(|v| (v - 0.2).abs() < 1e-15));
        assert_eq!(adj.kind, AdjacencyKind::RowStochastic);
    }

    #[test]
    fn two_node_orthonormal_embedding() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::identity(2));
        let adj = node_embedding_graph(&mut g, e).unwrap();
        let hi = std::f64::consts::E / (std::f64::consts::E + 1.0);
        let a = g.value(adj.matrix);
        assert!((a.get(0, 0) - hi).abs() < 1e-15);
        assert!((a.get(0, 1) - (1.0 - hi)).abs() < 1e-15);
        assert!((a.get(0, 0) - 0.7311).abs() < 1e-4);
        assert!((a.get(1, 1) - hi).abs() < 1e-15);
    }

    #[test]
    fn adaptive_graph_rejects_row_mismatch() {
        let mut g = Graph::new();
        let hc = g.constant(Tensor::zeros(&[3, 2]));
        let vc = g.constant(Tensor::zeros(&[2, 2]));
        let w = g.constant(Tensor::zeros(&[8, 2]));
        let b = g.constant(Tensor::zeros(&[1, 2]));
        assert!(adaptive_graph(&mut g, hc, vc, hc, hc, w, b).is_err());
    }
}
