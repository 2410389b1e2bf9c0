//! Forecasting, contrastive and deviation objectives and their weighted sum.
//!
//! Node and batch reductions are arithmetic means throughout.

use crate::autodiff::{Graph, Var};
use crate::error::{config, contract, dim, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_mae: f64,
    pub l_con: f64,
    pub l_dev: f64,
    pub total: f64,
    pub lambda_con: f64,
    pub lambda_dev: f64,
}

impl LossBreakdown {
    /// `l_mae + λ_con·l_con + λ_dev·l_dev` recomputed from the parts.
    pub fn recombined(&self) -> f64 {
        self.l_mae + self.lambda_con * self.l_con + self.lambda_dev * self.l_dev
    }

    pub fn is_finite(&self) -> bool {
        self.l_mae.is_finite() && self.l_con.is_finite() && self.l_dev.is_finite() && self.total.is_finite()
    }
}

/// Per-node distances behind the deviation loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DeviationDiagnostics {
    /// `‖Q^c − Q^a‖₁` per node.
    pub d_q: Vec<f64>,
    /// `‖P^c − P^a‖₁` per node, between the two positive prototypes.
    pub d_p: Vec<f64>,
}

/// Mean absolute error over `T'` step predictions (`[N, C]` each) against an
/// original-scale `[T', N, C]` target. Entries whose target equals
/// `null_value` exactly are left out of the mean.
pub fn mae_loss(g: &mut Graph, preds: &[Var], target: &Tensor, null_value: Option<f64>) -> Result<Var> {
    let steps = target.shape().first().copied().unwrap_or(0);
    if preds.len() != steps {
        return Err(dim("mae_loss", format!("{} prediction steps for {} target steps", preds.len(), steps)));
    }
    let per_step = target.len().checked_div(steps).unwrap_or(0);
    let mut acc: Option<Var> = None;
    let mut count = 0usize;
    for (t, &p) in preds.iter().enumerate() {
        let pv = g.value(p);
        if pv.len() != per_step {
            return Err(dim("mae_loss", format!("prediction {:?} vs target step of {} values", pv.shape(), per_step)));
        }
        let shape = pv.shape().to_vec();
        let slice = &target.data()[t * per_step..(t + 1) * per_step];
        let tgt = g.constant(Tensor::new(shape.clone(), slice.to_vec())?);
        let diff = g.sub(p, tgt)?;
        let mut err = g.abs(diff)?;
        match null_value {
            Some(nv) if slice.contains(&nv) => {
                let mask: Vec<f64> = slice.iter().map(|v| if *v == nv { 0.0 } else { 1.0 }).collect();
                count += mask.iter().filter(|m| **m > 0.0).count();
                let mask = g.constant(Tensor::new(shape, mask)?);
                err = g.mul(err, mask)?;
            }
            _ => count += slice.len(),
        }
        let s = g.sum_all(err)?;
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    if count == 0 {
        return Err(contract("MAE over an empty set: every target entry is masked"));
    }
    let acc = acc.expect("count > 0 implies at least one step");
    g.scale(acc, 1.0 / count as f64)
}

fn maybe_stop(g: &mut Graph, v: Var, stop: bool) -> Var {
    if stop {
        g.stop_gradient(v)
    } else {
        v
    }
}

/// Triplet-style hinge with the query frozen:
/// `mean_n max(‖sg(Q_n) − pos_n‖² − ‖sg(Q_n) − neg_n‖² + δ, 0)`.
///
/// `stop = false` exists only to study collapse without the stop-gradient.
pub fn contrastive_loss(g: &mut Graph, qc: Var, pos: Var, neg: Var, margin: f64, stop: bool) -> Result<Var> {
    if margin.is_nan() || margin <= 0.0 {
        return Err(config(format!("contrastive margin must be positive, got {margin}")));
    }
    let q = maybe_stop(g, qc, stop);
    let dp = g.sub(q, pos)?;
    let dn = g.sub(q, neg)?;
    let sp = g.sq_l2_norm_rows(dp)?;
    let sn = g.sq_l2_norm_rows(dn)?;
    let gap = g.sub(sp, sn)?;
    let shifted = g.add_scalar(gap, margin)?;
    let hinge = g.max_with_zero(shifted)?;
    g.mean_all(hinge)
}

/// Distance-of-distances: `mean_n |sg(‖Q^c_n − Q^a_n‖₁) − ‖P^c_n − P^a_n‖₁|`.
pub fn deviation_loss(
    g: &mut Graph,
    qc: Var,
    qa: Var,
    pos_c: Var,
    pos_a: Var,
    stop: bool,
) -> Result<(Var, DeviationDiagnostics)> {
    let qdiff = g.sub(qc, qa)?;
    let dq_live = g.l1_norm_rows(qdiff)?;
    let dq = maybe_stop(g, dq_live, stop);
    let pdiff = g.sub(pos_c, pos_a)?;
    let dp = g.l1_norm_rows(pdiff)?;
    let gap = g.sub(dq, dp)?;
    let abs = g.abs(gap)?;
    let loss = g.mean_all(abs)?;
    let diag = DeviationDiagnostics { d_q: g.value(dq).data().to_vec(), d_p: g.value(dp).data().to_vec() };
    Ok((loss, diag))
}

const COS_FLOOR: f64 = 1e-12;

/// Row-wise `u·v / (‖u‖‖v‖ + 1e-12)` on plain tensors.
pub fn cosine_rows(u: &Tensor, v: &Tensor) -> Vec<f64> {
    (0..u.rows())
        .map(|r| {
            let (a, b) = (u.row(r), v.row(r));
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb + COS_FLOOR)
        })
        .collect()
}

fn cosine_rows_var(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let dot = g.row_dot(a, b)?;
    let sa = g.sq_l2_norm_rows(a)?;
    let sb = g.sq_l2_norm_rows(b)?;
    let na = g.sqrt(sa)?;
    let nb = g.sqrt(sb)?;
    let prod = g.mul(na, nb)?;
    let den = g.add_scalar(prod, COS_FLOOR)?;
    g.div(dot, den)
}

/// Prototype-free deviation loss of the naive ablation:
/// `mean_n |cos(X^c_n, X^a_n) − cos(H^c_n, H^a_n)|`. The physical-space
/// inputs are per-node flattened windows (`[N, T·C]`).
pub fn naive_deviation_loss(g: &mut Graph, xc: &Tensor, xa: &Tensor, hc: Var, ha: Var) -> Result<Var> {
    if xc.shape() != xa.shape() || xc.rows() != g.value(hc).rows() {
        return Err(dim(
            "naive_deviation_loss",
            format!("inputs {:?}/{:?} for hidden {:?}", xc.shape(), xa.shape(), g.value(hc).shape()),
        ));
    }
    let phys = cosine_rows(xc, xa);
    let phys = g.constant(Tensor::matrix(phys.len(), 1, phys)?);
    let latent = cosine_rows_var(g, hc, ha)?;
    let gap = g.sub(phys, latent)?;
    let abs = g.abs(gap)?;
    g.mean_all(abs)
}

/// `L = L_mae + λ_con·L_con + λ_dev·L_dev`; terms with a zero weight are
/// left out of the graph.
pub fn total_loss(
    g: &mut Graph,
    mae: Var,
    con: Option<Var>,
    dev: Option<Var>,
    lambda_con: f64,
    lambda_dev: f64,
) -> Result<(Var, LossBreakdown)> {
    if lambda_con < 0.0 || lambda_dev < 0.0 || lambda_con.is_nan() || lambda_dev.is_nan() {
        return Err(config(format!("loss weights must be non-negative, got {lambda_con} and {lambda_dev}")));
    }
    let mut total = mae;
    let mut parts = LossBreakdown { l_mae: g.value(mae).item(), lambda_con, lambda_dev, ..Default::default() };
    for (term, lambda, slot) in [(con, lambda_con, &mut parts.l_con), (dev, lambda_dev, &mut parts.l_dev)] {
        let Some(term) = term else { continue };
        *slot = g.value(term).item();
        if lambda > 0.0 {
            let weighted = g.scale(term, lambda)?;
            total = g.add(total, weighted)?;
        }
    }
    parts.total = g.value(total).item();
    Ok((total, parts))
}
