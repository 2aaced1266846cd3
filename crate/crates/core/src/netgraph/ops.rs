use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

use super::{ConvGeometry, Graph, NodeKind, NodeParams, Params};

/// Evaluation mode. Dropout only draws masks in `Train`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

/// Everything recorded by a forward pass that backpropagation needs.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    /// Output of every node, indexed by node id (`batch × out_dim`).
    pub outputs: Vec<Matrix<T>>,
    masks: Vec<Option<Matrix<T>>>,
    unfolded: Vec<Option<Matrix<T>>>,
    root: usize,
}

impl<T: Real> Trace<T> {
    pub fn logits(&self) -> &Matrix<T> {
        &self.outputs[self.root]
    }

    pub fn output(&self, id: super::NodeId) -> &Matrix<T> {
        &self.outputs[id.0]
    }
}

fn add_bias_rows<T: Real>(m: &mut Matrix<T>, bias: &[T]) {
    let c = bias.len();
    for chunk in m.as_mut_slice().chunks_exact_mut(c) {
        for (x, &b) in chunk.iter_mut().zip(bias) {
            *x += b;
        }
    }
}

/// Evaluates every node in topological order on the rows of `inputs`.
pub fn forward<T: Real>(graph: &Graph, params: &Params<T>, inputs: &Matrix<T>, mode: Mode<'_>) -> Result<Trace<T>> {
    if inputs.cols() != graph.input_dim() {
        return Err(Error::Dimension {
            op: "forward",
            left: inputs.shape(),
            right: (inputs.rows(), graph.input_dim()),
        });
    }
    params.check(graph)?;
    let (train, mut rng) = match mode {
        Mode::Eval => (false, None),
        Mode::Train(r) => (true, Some(r)),
    };
    let n_nodes = graph.len();
    let batch = inputs.rows();
    let mut outputs: Vec<Matrix<T>> = vec![Matrix::zeros(0, 0); n_nodes];
    let mut masks: Vec<Option<Matrix<T>>> = vec![None; n_nodes];
    let mut unfolded: Vec<Option<Matrix<T>>> = vec![None; n_nodes];

    for &id in graph.topo_order() {
        let spec = graph.node(id);
        let out = match &spec.kind {
            NodeKind::Input { .. } => inputs.clone(),
            NodeKind::Dense { .. } => {
                let NodeParams::Affine { weight, bias } = params.get(id) else {
                    unreachable!("checked layout")
                };
                let mut z = outputs[spec.children[0].0].matmul_t(weight)?;
                add_bias_rows(&mut z, bias);
                z
            }
            kind @ (NodeKind::Conv1d { .. } | NodeKind::Conv2d { .. }) => {
                let NodeParams::Affine { weight, bias } = params.get(id) else {
                    unreachable!("checked layout")
                };
                let geo = ConvGeometry::of(kind).expect("conv kind");
                let u = geo.unfold_batch(&outputs[spec.children[0].0]);
                let mut z = u.matmul_t(weight)?;
                let s = T::of(kind.rescale_factor());
                if s != T::one() {
                    z.as_mut_slice().iter_mut().for_each(|x| *x *= s);
                }
                add_bias_rows(&mut z, bias);
                unfolded[id.0] = Some(u);
                Matrix::from_vec(batch, kind.out_dim(), z.into_vec())?
            }
            NodeKind::Relu { .. } => outputs[spec.children[0].0].map(|x| x.max(T::zero())),
            NodeKind::Dropout { rate, .. } => {
                let x = &outputs[spec.children[0].0];
                match rng.as_deref_mut() {
                    Some(rng) if train && *rate > 0.0 => {
                        let keep = T::of(1.0 / (1.0 - rate));
                        let data = (0..x.as_slice().len())
                            .map(|_| if rng.random::<f64>() < *rate { T::zero() } else { keep })
                            .collect();
                        let mask = Matrix::from_vec(x.rows(), x.cols(), data)?;
                        let mut y = x.clone();
                        y.as_mut_slice()
                            .iter_mut()
                            .zip(mask.as_slice())
                            .for_each(|(v, &m)| *v *= m);
                        masks[id.0] = Some(mask);
                        y
                    }
                    _ => x.clone(),
                }
            }
            NodeKind::Aggregate { dim, .. } => {
                let alpha = params.alpha(id).expect("checked layout");
                let mut acc = Matrix::zeros(batch, *dim);
                for (c, &a) in spec.children.iter().zip(alpha) {
                    acc.axpy(a, &outputs[c.0])?;
                }
                acc
            }
        };
        outputs[id.0] = out;
    }
    Ok(Trace {
        outputs,
        masks,
        unfolded,
        root: graph.root().0,
    })
}

/// Log-loss `-z_y + log Σ exp(z)` with max subtraction.
pub fn log_loss<T: Real>(logits: &[T], label: usize) -> T {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = logits.iter().map(|&z| (z - m).exp()).sum();
    -logits[label] + m + s.ln()
}

/// Per-row log-loss of a logit matrix.
pub fn per_example_losses<T: Real>(logits: &Matrix<T>, labels: &[usize]) -> Result<Vec<T>> {
    check_labels(logits, labels)?;
    Ok(logits.row_iter().zip(labels).map(|(z, &y)| log_loss(z, y)).collect())
}

fn check_labels<T: Real>(logits: &Matrix<T>, labels: &[usize]) -> Result<()> {
    if logits.rows() != labels.len() {
        return Err(Error::Dimension {
            op: "loss",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    if logits.cols() < 2 {
        return Err(Error::InvalidArgument("log-loss needs at least two classes".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(())
}

/// Mean log-loss over the batch and its gradient with respect to the logits.
pub fn loss_and_logit_grad<T: Real>(logits: &Matrix<T>, labels: &[usize]) -> Result<(T, Matrix<T>)> {
    check_labels(logits, labels)?;
    let n = T::of(logits.rows() as f64);
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = T::zero();
    for (i, (z, &y)) in logits.row_iter().zip(labels).enumerate() {
        let m = z.iter().copied().fold(T::neg_infinity(), T::max);
        let g = grad.row_mut(i);
        let mut s = T::zero();
        for (gj, &zj) in g.iter_mut().zip(z) {
            *gj = (zj - m).exp();
            s += *gj;
        }
        total += -z[y] + m + s.ln();
        for gj in g.iter_mut() {
            *gj = *gj / s / n;
        }
        g[y] -= T::one() / n;
    }
    Ok((total / n, grad))
}

/// Gradients of the mean batch log-loss.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub params: Params<T>,
    /// `∇ₓ` of the mean loss, present when requested.
    pub input: Option<Matrix<T>>,
    pub loss: T,
}

/// Reverse-mode differentiation of the mean log-loss through `trace`.
///
/// Dropout reuses the masks recorded by the forward pass. The input gradient
/// is only propagated when `want_input_grad` is set.
pub fn backward<T: Real>(
    graph: &Graph,
    params: &Params<T>,
    trace: &Trace<T>,
    labels: &[usize],
    want_input_grad: bool,
) -> Result<Gradients<T>> {
    let (loss, dlogits) = loss_and_logit_grad(trace.logits(), labels)?;
    let mut grads = params.zeros_like();
    let mut deltas: Vec<Option<Matrix<T>>> = vec![None; graph.len()];
    deltas[graph.root().0] = Some(dlogits);
    let input = graph.input();

    let accumulate = |deltas: &mut Vec<Option<Matrix<T>>>, child: usize, g: Matrix<T>| -> Result<()> {
        match &mut deltas[child] {
            Some(acc) => acc.axpy(T::one(), &g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    };

    for &id in graph.topo_order().iter().rev() {
        let Some(delta) = deltas[id.0].take() else {
            continue;
        };
        let spec = graph.node(id);
        let needs = |c: super::NodeId| want_input_grad || c != input;
        match &spec.kind {
            NodeKind::Input { .. } => {
                deltas[id.0] = Some(delta);
            }
            NodeKind::Dense { .. } => {
                let child = spec.children[0];
                let x = &trace.outputs[child.0];
                let weight = params.weight(id).expect("checked layout");
                let gw = delta.t_matmul(x)?;
                let gb = column_sums(&delta);
                if let NodeParams::Affine { weight: w, bias: b } = &mut grads.nodes_mut()[id.0] {
                    *w = gw;
                    *b = gb;
                }
                if needs(child) {
                    accumulate(&mut deltas, child.0, delta.matmul(weight)?)?;
                }
            }
            kind @ (NodeKind::Conv1d { .. } | NodeKind::Conv2d { .. }) => {
                let child = spec.children[0];
                let geo = ConvGeometry::of(kind).expect("conv kind");
                let weight = params.weight(id).expect("checked layout");
                let u = trace.unfolded[id.0].as_ref().expect("recorded by forward");
                let c_out = weight.rows();
                let rows = delta.rows() * geo.positions();
                let d = Matrix::from_vec(rows, c_out, delta.into_vec())?;
                let gb = column_sums(&d);
                let s = T::of(kind.rescale_factor());
                let ds = if s != T::one() { d.scale(s) } else { d };
                let gw = ds.t_matmul(u)?;
                if let NodeParams::Affine { weight: w, bias: b } = &mut grads.nodes_mut()[id.0] {
                    *w = gw;
                    *b = gb;
                }
                if needs(child) {
                    let gu = ds.matmul(weight)?;
                    let x = &trace.outputs[child.0];
                    let mut gx = Matrix::zeros(x.rows(), x.cols());
                    geo.fold_batch_into(&gu, &mut gx);
                    accumulate(&mut deltas, child.0, gx)?;
                }
            }
            NodeKind::Relu { .. } => {
                let child = spec.children[0];
                if needs(child) {
                    let y = &trace.outputs[id.0];
                    let mut g = delta;
                    g.as_mut_slice()
                        .iter_mut()
                        .zip(y.as_slice())
                        .for_each(|(d, &v)| {
                            if v <= T::zero() {
                                *d = T::zero();
                            }
                        });
                    accumulate(&mut deltas, child.0, g)?;
                }
            }
            NodeKind::Dropout { .. } => {
                let child = spec.children[0];
                if needs(child) {
                    let mut g = delta;
                    if let Some(mask) = &trace.masks[id.0] {
                        g.as_mut_slice()
                            .iter_mut()
                            .zip(mask.as_slice())
                            .for_each(|(d, &m)| *d *= m);
                    }
                    accumulate(&mut deltas, child.0, g)?;
                }
            }
            NodeKind::Aggregate { .. } => {
                let alpha = params.alpha(id).expect("checked layout").to_vec();
                let mut galpha = Vec::with_capacity(alpha.len());
                for (c, &a) in spec.children.iter().zip(&alpha) {
                    let x = &trace.outputs[c.0];
                    galpha.push(
                        delta
                            .as_slice()
                            .iter()
                            .zip(x.as_slice())
                            .fold(T::zero(), |acc, (&d, &v)| acc + d * v),
                    );
                    if needs(*c) {
                        accumulate(&mut deltas, c.0, delta.scale(a))?;
                    }
                }
                if let NodeParams::Mix { alpha: ga } = &mut grads.nodes_mut()[id.0] {
                    *ga = galpha;
                }
            }
        }
    }
    let input_grad = if want_input_grad {
        Some(
            deltas[input.0]
                .take()
                .unwrap_or_else(|| Matrix::zeros(trace.outputs[input.0].rows(), graph.input_dim())),
        )
    } else {
        None
    };
    Ok(Gradients {
        params: grads,
        input: input_grad,
        loss,
    })
}

fn column_sums<T: Real>(m: &Matrix<T>) -> Vec<T> {
    let mut out = vec![T::zero(); m.cols()];
    for r in m.row_iter() {
        for (o, &x) in out.iter_mut().zip(r) {
            *o += x;
        }
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Predicted class of every row (eval mode).
pub fn predict<T: Real>(graph: &Graph, params: &Params<T>, inputs: &Matrix<T>) -> Result<Vec<usize>> {
    let trace = forward(graph, params, inputs, Mode::Eval)?;
    Ok(trace.logits().row_iter().map(argmax).collect())
}
