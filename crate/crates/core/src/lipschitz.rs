//! Compositional Lipschitz upper bounds.
//!
//! Every node gets a constant `Λ⁽ⁿ⁾ ≤ Σ_children Λ⁽ⁿ'ⁿ'⁾ Λ⁽ⁿ'⁾`, evaluated
//! children first with `Λ = 1` at the input. Biases are ignored (they do not
//! change differences) and dropout counts as the identity, so the bound is
//! for eval-mode networks.

use crate::attacks::Norm;
use crate::error::{Error, Result};
use crate::linalg::{inf_operator_norm, singular_values, spectral_norm, Matrix, POWER_ITERATION_MAX_ITER};
use crate::netgraph::{forward, AggregateMode, Graph, Mode, NodeId, NodeKind, Params};
use crate::scalar::Real;

/// Slack added to the bound before counting a violation.
pub const GAP_CHECK_SLACK: f64 = 1e-6;

/// Per-node bounds and the bound of the whole network.
#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzReport {
    pub norm: Norm,
    /// Indexed by node id.
    pub per_node: Vec<f64>,
    pub root: f64,
}

/// Operator norm of a weight matrix; power iteration with an exact fallback.
pub fn operator_norm<T: Real>(w: &Matrix<T>, norm: Norm) -> Result<f64> {
    match norm {
        Norm::Inf => Ok(inf_operator_norm(w).as_f64()),
        Norm::L2 => match spectral_norm(w, 1e-12, POWER_ITERATION_MAX_ITER) {
            Ok(s) => Ok(s.as_f64()),
            Err(Error::NonConvergence { .. }) => Ok(singular_values(w)?[0].as_f64()),
            Err(e) => Err(e),
        },
    }
}

/// Multiplicative factor a node applies on top of its (single) child's
/// constant. Aggregations have no single factor and are rejected here; see
/// [`graph_bound`].
pub fn node_constant<T: Real>(graph: &Graph, params: &Params<T>, id: NodeId, norm: Norm) -> Result<f64> {
    let kind = &graph.node(id).kind;
    match kind {
        NodeKind::Input { .. } | NodeKind::Relu { .. } | NodeKind::Dropout { .. } => Ok(1.0),
        NodeKind::Dense { .. } => operator_norm(weight(params, id)?, norm),
        NodeKind::Conv1d { .. } | NodeKind::Conv2d { .. } => {
            let w = operator_norm(weight(params, id)?, norm)?;
            let unfold = match norm {
                Norm::L2 => (kind.window() as f64).sqrt(),
                Norm::Inf => 1.0,
            };
            Ok(w * unfold * kind.rescale_factor())
        }
        NodeKind::Aggregate { .. } => Err(Error::InvalidArgument(format!(
            "{id} is an aggregation; its constant depends on its children"
        ))),
    }
}

fn weight<T: Real>(params: &Params<T>, id: NodeId) -> Result<&Matrix<T>> {
    params
        .weight(id)
        .ok_or_else(|| Error::Graph(format!("{id} has no weight matrix")))
}

/// Propagates per-node bounds through the DAG.
pub fn graph_bound<T: Real>(graph: &Graph, params: &Params<T>, norm: Norm) -> Result<LipschitzReport> {
    params.check(graph)?;
    let mut per_node = vec![0.0; graph.len()];
    for &id in graph.topo_order() {
        let spec = graph.node(id);
        per_node[id.0] = match &spec.kind {
            NodeKind::Input { .. } => 1.0,
            NodeKind::Aggregate { mode, .. } => {
                let alpha = params.alpha(id).expect("checked layout");
                spec.children
                    .iter()
                    .zip(alpha)
                    .map(|(c, &a)| {
                        let edge = match mode {
                            AggregateMode::Sum => 1.0,
                            AggregateMode::Convex => a.as_f64().abs(),
                        };
                        edge * per_node[c.0]
                    })
                    .sum()
            }
            _ => node_constant(graph, params, id, norm)? * per_node[spec.children[0].0],
        };
    }
    let root = per_node[graph.root().0];
    Ok(LipschitzReport { norm, per_node, root })
}

/// Counts pairs whose logit change exceeds `Λ·‖x − x̃‖ + slack`.
pub fn empirical_gap_check<T: Real>(
    graph: &Graph,
    params: &Params<T>,
    report: &LipschitzReport,
    clean: &Matrix<T>,
    perturbed: &Matrix<T>,
) -> Result<usize> {
    if clean.shape() != perturbed.shape() {
        return Err(Error::Dimension {
            op: "empirical_gap_check",
            left: clean.shape(),
            right: perturbed.shape(),
        });
    }
    let a = forward(graph, params, clean, Mode::Eval)?;
    let b = forward(graph, params, perturbed, Mode::Eval)?;
    let norm = report.norm;
    let mut violations = 0;
    for i in 0..clean.rows() {
        let dy: Vec<T> = a.logits().row(i).iter().zip(b.logits().row(i)).map(|(&p, &q)| p - q).collect();
        let dx: Vec<T> = clean.row(i).iter().zip(perturbed.row(i)).map(|(&p, &q)| p - q).collect();
        if norm.of(&dy).as_f64() > report.root * norm.of(&dx).as_f64() + GAP_CHECK_SLACK {
            violations += 1;
        }
    }
    Ok(violations)
}
