//! Training objectives recorded on an autodiff [`Graph`].
//!
//! Every function takes node ids and returns the node of a mean-reduced
//! scalar (or a per-sample vector for [`cub_per_sample`]), so the result
//! can be fed straight into [`Graph::backward`].
//!
//! ```
//! use certood::autodiff::Graph;
//! use certood::losses::{cross_entropy, oe_loss};
//! use certood::Tensor;
//!
//! let mut g = Graph::new();
//! let z = g.constant(Tensor::new(vec![2, 4], vec![0.0; 8]).unwrap());
//! let ce = cross_entropy(&mut g, z, &[1, 3]).unwrap();
//! let oe = oe_loss(&mut g, z).unwrap();
//! let log4 = 4f32.ln();
//! assert!((g.value(ce).item().unwrap() - log4).abs() < 1e-6);
//! assert!((g.value(oe).item().unwrap() - log4).abs() < 1e-6);
//! ```

use crate::attacks;
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::interval::training_logit_diff_bounds;
use crate::network::{forward_graph, BoundParams, NetworkSpec, ParamStore};
use crate::tensor::Tensor;

/// Mean of `−log p_y(x)` over the batch.
pub fn cross_entropy(graph: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let k = graph.value(logits).shape().get(1).copied().unwrap_or(0);
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Contract(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let lse = graph.log_sum_exp(logits)?;
    let picked = graph.pick(logits, labels)?;
    let per_sample = graph.sub(lse, picked)?;
    Ok(graph.mean(per_sample))
}

/// Cross-entropy against the uniform distribution:
/// mean of `LSE(z) − mean_k z_k`.
pub fn oe_loss(graph: &mut Graph, logits: NodeId) -> Result<NodeId> {
    let lse = graph.log_sum_exp(logits)?;
    let avg = graph.mean_last(logits)?;
    let per_sample = graph.sub(lse, avg)?;
    Ok(graph.mean(per_sample))
}

/// Mean log confidence: mean of `max_k z_k − LSE(z)`.
pub fn ceda_loss(graph: &mut Graph, logits: NodeId) -> Result<NodeId> {
    let lse = graph.log_sum_exp(logits)?;
    let max = graph.max_last(logits)?;
    let per_sample = graph.sub(max, lse)?;
    Ok(graph.mean(per_sample))
}

/// `ln(a²/2 + 1)` for a bound `a`.
pub fn cub_value(a: f32) -> f32 {
    (0.5 * a * a).ln_1p()
}

/// Per-sample CUB loss `[B]` from `[B, K²]` logit-difference bounds.
pub fn cub_per_sample(graph: &mut Graph, bounds: NodeId) -> Result<NodeId> {
    let max = graph.max_last(bounds)?;
    Ok(graph.log1p_half_square(max))
}

/// Per-sample CUB loss of `x` at radius `epsilon`.
pub fn cub_loss(
    graph: &mut Graph,
    spec: &NetworkSpec,
    params: &BoundParams,
    x: NodeId,
    epsilon: f32,
) -> Result<NodeId> {
    let ub = training_logit_diff_bounds(graph, spec, params, x, epsilon)?;
    cub_per_sample(graph, ub)
}

/// Scalars of one GOOD batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub ce_loss: f32,
    /// `(1/M) Σ` of the out-distribution terms, before the κ factor.
    pub ood_loss: f32,
    /// CUB loss of every out-sample at the training ε, in batch order.
    pub per_sample_cub: Vec<f32>,
    /// `⌊q·M⌋`.
    pub quantile_cut: usize,
    /// Whether each out-sample received the ε-term.
    pub eps_term: Vec<bool>,
    pub total: f32,
    /// `[B, K]` logits of the in-distribution half.
    pub in_logits: NodeId,
}

/// Batch indices sorted ascending by `values`, ties by index.
pub fn ascending_order(values: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    idx
}

/// `⌊q·M⌋` after validating `q ∈ [0, 1]`.
/// A tiny slack absorbs representation error, so `0.29·100` gives 29.
pub fn quantile_cut(q: f64, m: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Contract(format!(
            "quantile q must lie in [0, 1], got {q}"
        )));
    }
    Ok(((q * m as f64 + 1e-9).floor() as usize).min(m))
}

/// Which samples get the ε-term: the `⌊q·M⌋` smallest CUB values.
pub fn quantile_mask(cub_eps: &[f32], q: f64) -> Result<Vec<bool>> {
    let cut = quantile_cut(q, cub_eps.len())?;
    let mut mask = vec![false; cub_eps.len()];
    for &i in &ascending_order(cub_eps)[..cut] {
        mask[i] = true;
    }
    Ok(mask)
}

/// Inputs of one GOOD step.
pub struct GoodBatch<'a> {
    pub in_x: NodeId,
    pub in_labels: &'a [usize],
    pub out_x: NodeId,
}

/// Quantile-GOOD objective `CE + κ·(1/M)·Σ_j term_j`, where the `⌊q·M⌋`
/// out-samples with the smallest ε-CUB loss use it and the rest use the
/// CUB loss at ε = 0. Returns the total loss node and its report.
pub fn good_objective(
    graph: &mut Graph,
    spec: &NetworkSpec,
    params: &BoundParams,
    batch: &GoodBatch<'_>,
    epsilon: f32,
    kappa: f32,
    q: f64,
) -> Result<(NodeId, LossReport)> {
    let m = graph.value(batch.out_x).batch();
    let cut = quantile_cut(q, m)?;
    let in_logits = forward_graph(graph, spec, params, batch.in_x)?;
    let ce = cross_entropy(graph, in_logits, batch.in_labels)?;

    let cub_eps = cub_loss(graph, spec, params, batch.out_x, epsilon)?;
    let per_sample_cub = graph.value(cub_eps).data().to_vec();
    let mask = quantile_mask(&per_sample_cub, q)?;

    let terms = if cut == m {
        cub_eps
    } else {
        let cub0 = cub_loss(graph, spec, params, batch.out_x, 0.0)?;
        if cut == 0 {
            cub0
        } else {
            let on: Vec<f32> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let off: Vec<f32> = on.iter().map(|v| 1.0 - v).collect();
            let a = graph.mul_const(cub_eps, Tensor::new(vec![m], on)?)?;
            let b = graph.mul_const(cub0, Tensor::new(vec![m], off)?)?;
            graph.add(a, b)?
        }
    };
    let ood = graph.mean(terms);
    let total = if kappa == 0.0 {
        ce
    } else {
        let weighted = graph.scale(ood, kappa);
        graph.add(ce, weighted)?
    };
    let report = LossReport {
        ce_loss: graph.value(ce).data()[0],
        ood_loss: graph.value(ood).data()[0],
        per_sample_cub,
        quantile_cut: cut,
        eps_term: mask,
        total: graph.value(total).data()[0],
        in_logits,
    };
    Ok((total, report))
}

/// Steps of the ACET training attack; the step size is `2ε/(steps + 1)`.
pub const ACET_STEPS: usize = 40;

/// ACET out-distribution term: the training attack searches the clipped
/// ε-box around each out-sample, then the OE loss is recorded at the
/// returned points. Returns the loss node and the attacked batch.
pub fn acet_outer_loss(
    graph: &mut Graph,
    spec: &NetworkSpec,
    store: &ParamStore,
    params: &BoundParams,
    out_x: &Tensor,
    epsilon: f32,
) -> Result<(NodeId, Tensor)> {
    let attacked = if epsilon > 0.0 {
        attacks::acet_training_attack(spec, store, out_x, epsilon, ACET_STEPS)?
    } else {
        out_x.clone()
    };
    let x = graph.constant(attacked.clone());
    let logits = forward_graph(graph, spec, params, x)?;
    Ok((oe_loss(graph, logits)?, attacked))
}
