//! Networks as single-root DAGs of typed nodes.
//!
//! Each node is a function of its children. The input node is the only leaf
//! and the root produces the logits. Parameters live apart from the graph in
//! [`Params`] so that gradients and optimizer buffers can share its layout.

mod conv;
pub mod models;
mod ops;

use rand::Rng;

pub use conv::{fold, unfold, ConvGeometry};
pub use ops::{
    argmax, backward, forward, log_loss, loss_and_logit_grad, per_example_losses, predict,
    Gradients, Mode, Trace,
};

use crate::error::{Error, Result};
use crate::linalg::{orthonormal_rows_init, Matrix};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// How an aggregation node combines its children.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggregateMode {
    /// Fixed unit weights, as in residual networks.
    Sum,
    /// Learned weights kept on the probability simplex.
    Convex,
}

/// Node kinds. Convolutions are stride 1 with zero padding; their inputs and
/// outputs are flattened position-major (`position * channels + channel`).
#[derive(Clone, Debug, PartialEq)]
pub enum NodeKind {
    Input {
        dim: usize,
    },
    Dense {
        d_in: usize,
        d_out: usize,
    },
    Conv1d {
        length: usize,
        c_in: usize,
        c_out: usize,
        half_width: usize,
        rescale: bool,
    },
    Conv2d {
        height: usize,
        width: usize,
        c_in: usize,
        c_out: usize,
        half_h: usize,
        half_w: usize,
        rescale: bool,
    },
    Relu {
        dim: usize,
    },
    Dropout {
        dim: usize,
        rate: f64,
    },
    Aggregate {
        dim: usize,
        mode: AggregateMode,
    },
}

impl NodeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Input { .. } => "input",
            NodeKind::Dense { .. } => "dense",
            NodeKind::Conv1d { .. } => "conv1d",
            NodeKind::Conv2d { .. } => "conv2d",
            NodeKind::Relu { .. } => "relu",
            NodeKind::Dropout { .. } => "dropout",
            NodeKind::Aggregate { .. } => "aggregate",
        }
    }

    pub fn out_dim(&self) -> usize {
        match *self {
            NodeKind::Input { dim }
            | NodeKind::Relu { dim }
            | NodeKind::Dropout { dim, .. }
            | NodeKind::Aggregate { dim, .. } => dim,
            NodeKind::Dense { d_out, .. } => d_out,
            NodeKind::Conv1d { length, c_out, .. } => length * c_out,
            NodeKind::Conv2d {
                height,
                width,
                c_out,
                ..
            } => height * width * c_out,
        }
    }

    /// Dimension expected from each child.
    pub fn in_dim(&self) -> usize {
        match *self {
            NodeKind::Dense { d_in, .. } => d_in,
            NodeKind::Conv1d { length, c_in, .. } => length * c_in,
            NodeKind::Conv2d {
                height,
                width,
                c_in,
                ..
            } => height * width * c_in,
            _ => self.out_dim(),
        }
    }

    /// Number of input positions seen by one output position of a convolution.
    pub fn window(&self) -> usize {
        match *self {
            NodeKind::Conv1d { half_width, .. } => 2 * half_width + 1,
            NodeKind::Conv2d { half_h, half_w, .. } => (2 * half_h + 1) * (2 * half_w + 1),
            _ => 1,
        }
    }

    /// Output multiplier of a convolution (`window^-1/2` when rescaling).
    pub fn rescale_factor(&self) -> f64 {
        match *self {
            NodeKind::Conv1d { rescale: true, .. } | NodeKind::Conv2d { rescale: true, .. } => {
                crate::constraints::conv_rescale(self.window())
            }
            _ => 1.0,
        }
    }

    /// Weight matrix shape `(d_out, window * c_in)` for parametric kinds.
    pub fn weight_shape(&self) -> Option<(usize, usize)> {
        match *self {
            NodeKind::Dense { d_in, d_out } => Some((d_out, d_in)),
            NodeKind::Conv1d { c_in, c_out, .. } | NodeKind::Conv2d { c_in, c_out, .. } => {
                Some((c_out, self.window() * c_in))
            }
            _ => None,
        }
    }

    pub fn is_parametric(&self) -> bool {
        self.weight_shape().is_some()
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, NodeKind::Conv1d { .. } | NodeKind::Conv2d { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeSpec {
    pub id: NodeId,
    pub kind: NodeKind,
    pub children: Vec<NodeId>,
}

/// A validated computation graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    nodes: Vec<NodeSpec>,
    root: NodeId,
    input: NodeId,
    order: Vec<NodeId>,
}

impl Graph {
    /// Validates `nodes` (indexed by id) and computes a children-first order.
    pub fn new(nodes: Vec<NodeSpec>, root: NodeId) -> Result<Self> {
        let n = nodes.len();
        if n == 0 {
            return Err(Error::Graph("graph has no nodes".into()));
        }
        if root.0 >= n {
            return Err(Error::Graph(format!("root {root} out of range")));
        }
        let mut input = None;
        let mut has_parent = vec![false; n];
        for (idx, node) in nodes.iter().enumerate() {
            if node.id.0 != idx {
                return Err(Error::Graph(format!("node at position {idx} has id {}", node.id)));
            }
            for c in &node.children {
                if c.0 >= n {
                    return Err(Error::Graph(format!("{} references missing child {c}", node.id)));
                }
                has_parent[c.0] = true;
            }
            validate_arity(node, &nodes)?;
            if let NodeKind::Input { .. } = node.kind {
                if input.replace(node.id).is_some() {
                    return Err(Error::Graph("more than one input node".into()));
                }
            }
        }
        let input = input.ok_or_else(|| Error::Graph("no input node".into()))?;
        for (idx, &p) in has_parent.iter().enumerate() {
            if idx != root.0 && !p {
                return Err(Error::Graph(format!("n{idx} is a second root")));
            }
        }
        if has_parent[root.0] {
            return Err(Error::Graph(format!("root {root} has a parent")));
        }

        // Kahn's algorithm over "all children evaluated".
        let mut pending: Vec<usize> = nodes.iter().map(|s| s.children.len()).collect();
        let mut parents: Vec<Vec<usize>> = vec![Vec::new(); n];
        for node in &nodes {
            for c in &node.children {
                parents[c.0].push(node.id.0);
            }
        }
        let mut ready: Vec<usize> = (0..n).filter(|&i| pending[i] == 0).collect();
        ready.reverse();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop() {
            order.push(NodeId(i));
            for &p in parents[i].iter().rev() {
                pending[p] -= 1;
                if pending[p] == 0 {
                    ready.push(p);
                }
            }
        }
        if order.len() != n {
            return Err(Error::Graph("cycle detected".into()));
        }
        Ok(Self {
            nodes,
            root,
            input,
            order,
        })
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &NodeSpec {
        &self.nodes[id.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn input(&self) -> NodeId {
        self.input
    }

    pub fn input_dim(&self) -> usize {
        self.nodes[self.input.0].kind.out_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.nodes[self.root.0].kind.out_dim()
    }

    /// Children-before-parents evaluation order.
    pub fn topo_order(&self) -> &[NodeId] {
        &self.order
    }

    /// Parametric nodes reachable from the root through parameter-free
    /// nodes only. These are exempt from the orthonormality constraint.
    pub fn output_layers(&self) -> Vec<NodeId> {
        let mut seen = vec![false; self.len()];
        let mut stack = vec![self.root];
        let mut out = Vec::new();
        while let Some(id) = stack.pop() {
            if std::mem::replace(&mut seen[id.0], true) {
                continue;
            }
            let node = self.node(id);
            if node.kind.is_parametric() {
                out.push(id);
            } else {
                stack.extend(node.children.iter().copied());
            }
        }
        out.sort();
        out
    }

    pub fn is_output_layer(&self, id: NodeId) -> bool {
        self.output_layers().contains(&id)
    }

    /// Parametric nodes that are not output layers, in evaluation order.
    pub fn hidden_layers(&self) -> Vec<NodeId> {
        let outputs = self.output_layers();
        self.order
            .iter()
            .copied()
            .filter(|&id| self.node(id).kind.is_parametric() && !outputs.contains(&id))
            .collect()
    }

    pub fn aggregates(&self) -> Vec<NodeId> {
        self.order
            .iter()
            .copied()
            .filter(|&id| matches!(self.node(id).kind, NodeKind::Aggregate { .. }))
            .collect()
    }

    /// ReLU nodes in evaluation order; the `k`-th one is "hidden layer k+1".
    pub fn relu_nodes(&self) -> Vec<NodeId> {
        self.order
            .iter()
            .copied()
            .filter(|&id| matches!(self.node(id).kind, NodeKind::Relu { .. }))
            .collect()
    }
}

fn validate_arity(node: &NodeSpec, nodes: &[NodeSpec]) -> Result<()> {
    let err = |msg: String| Err(Error::Graph(format!("{} ({}): {msg}", node.id, node.kind.name())));
    let child_dim = |c: &NodeId| nodes.get(c.0).map(|s| s.kind.out_dim());
    match &node.kind {
        NodeKind::Input { dim } => {
            if !node.children.is_empty() {
                return err("input node cannot have children".into());
            }
            if *dim == 0 {
                return err("zero input dimension".into());
            }
        }
        NodeKind::Aggregate { dim, .. } => {
            if node.children.len() < 2 {
                return err("aggregation needs at least two children".into());
            }
            let mut sorted = node.children.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != node.children.len() {
                return err("duplicate child".into());
            }
            for c in &node.children {
                if child_dim(c) != Some(*dim) {
                    return err(format!("child {c} has dimension {:?}, expected {dim}", child_dim(c)));
                }
            }
        }
        kind => {
            if node.children.len() != 1 {
                return err(format!("expected exactly one child, got {}", node.children.len()));
            }
            let got = child_dim(&node.children[0]);
            if got != Some(kind.in_dim()) {
                return err(format!("child dimension {got:?} does not match input {}", kind.in_dim()));
            }
            if kind.out_dim() == 0 {
                return err("zero output dimension".into());
            }
            if let NodeKind::Dropout { rate, .. } = kind {
                if !(0.0..1.0).contains(rate) {
                    return err(format!("dropout rate {rate} outside [0, 1)"));
                }
            }
        }
    }
    Ok(())
}

/// Incremental graph construction. Structural errors surface in [`build`].
///
/// [`build`]: GraphBuilder::build
#[derive(Clone, Debug)]
pub struct GraphBuilder {
    nodes: Vec<NodeSpec>,
}

impl GraphBuilder {
    pub fn new(input_dim: usize) -> Self {
        Self {
            nodes: vec![NodeSpec {
                id: NodeId(0),
                kind: NodeKind::Input { dim: input_dim },
                children: Vec::new(),
            }],
        }
    }

    pub fn input(&self) -> NodeId {
        NodeId(0)
    }

    fn push(&mut self, kind: NodeKind, children: Vec<NodeId>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(NodeSpec { id, kind, children });
        id
    }

    fn dim(&self, id: NodeId) -> usize {
        self.nodes.get(id.0).map_or(0, |n| n.kind.out_dim())
    }

    pub fn dense(&mut self, child: NodeId, d_out: usize) -> NodeId {
        let d_in = self.dim(child);
        self.push(NodeKind::Dense { d_in, d_out }, vec![child])
    }

    /// 1-D convolution over `length` positions with `c_in` channels each.
    pub fn conv1d(
        &mut self,
        child: NodeId,
        length: usize,
        c_in: usize,
        c_out: usize,
        half_width: usize,
        rescale: bool,
    ) -> NodeId {
        self.push(
            NodeKind::Conv1d {
                length,
                c_in,
                c_out,
                half_width,
                rescale,
            },
            vec![child],
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        child: NodeId,
        height: usize,
        width: usize,
        c_in: usize,
        c_out: usize,
        half_h: usize,
        half_w: usize,
        rescale: bool,
    ) -> NodeId {
        self.push(
            NodeKind::Conv2d {
                height,
                width,
                c_in,
                c_out,
                half_h,
                half_w,
                rescale,
            },
            vec![child],
        )
    }

    pub fn relu(&mut self, child: NodeId) -> NodeId {
        let dim = self.dim(child);
        self.push(NodeKind::Relu { dim }, vec![child])
    }

    pub fn dropout(&mut self, child: NodeId, rate: f64) -> NodeId {
        let dim = self.dim(child);
        self.push(NodeKind::Dropout { dim, rate }, vec![child])
    }

    pub fn aggregate(&mut self, children: &[NodeId], mode: AggregateMode) -> NodeId {
        let dim = children.first().map_or(0, |&c| self.dim(c));
        self.push(NodeKind::Aggregate { dim, mode }, children.to_vec())
    }

    pub fn build(self, root: NodeId) -> Result<Graph> {
        Graph::new(self.nodes, root)
    }
}

/// Learnable parameters of one node.
#[derive(Clone, Debug, PartialEq)]
pub enum NodeParams<T> {
    None,
    Affine { weight: Matrix<T>, bias: Vec<T> },
    Mix { alpha: Vec<T> },
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Hidden layers get orthonormal rows; output layers a fan-in scaled
    /// Gaussian.
    Parseval,
    /// Every layer gets a fan-in scaled Gaussian.
    Gaussian,
}

/// Parameters of every node, indexed by node id.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    nodes: Vec<NodeParams<T>>,
}

impl<T: Real> Params<T> {
    /// Zero weights and biases; aggregation weights uniform (convex) or one
    /// (sum).
    pub fn zeros(graph: &Graph) -> Self {
        let nodes = graph
            .nodes()
            .iter()
            .map(|spec| match &spec.kind {
                NodeKind::Aggregate { mode, .. } => {
                    let k = spec.children.len();
                    let a = match mode {
                        AggregateMode::Convex => T::one() / T::of(k as f64),
                        AggregateMode::Sum => T::one(),
                    };
                    NodeParams::Mix { alpha: vec![a; k] }
                }
                kind => match kind.weight_shape() {
                    Some((r, c)) => NodeParams::Affine {
                        weight: Matrix::zeros(r, c),
                        bias: vec![T::zero(); r],
                    },
                    None => NodeParams::None,
                },
            })
            .collect();
        Self { nodes }
    }

    /// Same layout as `self` with every entry zero (used for gradients and
    /// momentum buffers).
    pub fn zeros_like(&self) -> Self {
        let nodes = self
            .nodes
            .iter()
            .map(|p| match p {
                NodeParams::None => NodeParams::None,
                NodeParams::Affine { weight, bias } => NodeParams::Affine {
                    weight: Matrix::zeros(weight.rows(), weight.cols()),
                    bias: vec![T::zero(); bias.len()],
                },
                NodeParams::Mix { alpha } => NodeParams::Mix {
                    alpha: vec![T::zero(); alpha.len()],
                },
            })
            .collect();
        Self { nodes }
    }

    pub fn init<R: Rng + ?Sized>(graph: &Graph, scheme: Init, rng: &mut R) -> Result<Self> {
        let mut params = Self::zeros(graph);
        let outputs = graph.output_layers();
        for &id in graph.topo_order() {
            let Some((r, c)) = graph.node(id).kind.weight_shape() else {
                continue;
            };
            let w = if scheme == Init::Parseval && !outputs.contains(&id) {
                orthonormal_rows_init(r, c, rng)?
            } else {
                Matrix::gaussian(r, c, rng).scale(T::of((1.0 / c as f64).sqrt()))
            };
            if let NodeParams::Affine { weight, .. } = &mut params.nodes[id.0] {
                *weight = w;
            }
        }
        Ok(params)
    }

    pub fn from_nodes(nodes: Vec<NodeParams<T>>) -> Self {
        Self { nodes }
    }

    pub fn nodes(&self) -> &[NodeParams<T>] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [NodeParams<T>] {
        &mut self.nodes
    }

    pub fn get(&self, id: NodeId) -> &NodeParams<T> {
        &self.nodes[id.0]
    }

    pub fn weight(&self, id: NodeId) -> Option<&Matrix<T>> {
        match self.nodes.get(id.0) {
            Some(NodeParams::Affine { weight, .. }) => Some(weight),
            _ => None,
        }
    }

    pub fn weight_mut(&mut self, id: NodeId) -> Option<&mut Matrix<T>> {
        match self.nodes.get_mut(id.0) {
            Some(NodeParams::Affine { weight, .. }) => Some(weight),
            _ => None,
        }
    }

    pub fn bias(&self, id: NodeId) -> Option<&[T]> {
        match self.nodes.get(id.0) {
            Some(NodeParams::Affine { bias, .. }) => Some(bias),
            _ => None,
        }
    }

    pub fn bias_mut(&mut self, id: NodeId) -> Option<&mut Vec<T>> {
        match self.nodes.get_mut(id.0) {
            Some(NodeParams::Affine { bias, .. }) => Some(bias),
            _ => None,
        }
    }

    pub fn alpha(&self, id: NodeId) -> Option<&[T]> {
        match self.nodes.get(id.0) {
            Some(NodeParams::Mix { alpha }) => Some(alpha),
            _ => None,
        }
    }

    pub fn alpha_mut(&mut self, id: NodeId) -> Option<&mut Vec<T>> {
        match self.nodes.get_mut(id.0) {
            Some(NodeParams::Mix { alpha }) => Some(alpha),
            _ => None,
        }
    }

    /// Checks that the parameter layout matches `graph`.
    pub fn check(&self, graph: &Graph) -> Result<()> {
        if self.nodes.len() != graph.len() {
            return Err(Error::Graph(format!(
                "{} parameter slots for {} nodes",
                self.nodes.len(),
                graph.len()
            )));
        }
        for (spec, p) in graph.nodes().iter().zip(&self.nodes) {
            let ok = match (&spec.kind, p) {
                (NodeKind::Aggregate { .. }, NodeParams::Mix { alpha }) => alpha.len() == spec.children.len(),
                (kind, NodeParams::Affine { weight, bias }) => {
                    kind.weight_shape() == Some(weight.shape()) && bias.len() == weight.rows()
                }
                (kind, NodeParams::None) => !kind.is_parametric() && !matches!(kind, NodeKind::Aggregate { .. }),
                _ => false,
            };
            if !ok {
                return Err(Error::Graph(format!("parameters of {} do not match its kind", spec.id)));
            }
        }
        Ok(())
    }

    /// Visits every scalar in a fixed order, pairing `self` with `other`.
    pub fn zip_scalars_mut(&mut self, other: &Self, mut f: impl FnMut(&mut T, T)) {
        for (a, b) in self.nodes.iter_mut().zip(&other.nodes) {
            match (a, b) {
                (NodeParams::Affine { weight: wa, bias: ba }, NodeParams::Affine { weight: wb, bias: bb }) => {
                    wa.as_mut_slice().iter_mut().zip(wb.as_slice()).for_each(|(x, &y)| f(x, y));
                    ba.iter_mut().zip(bb).for_each(|(x, &y)| f(x, y));
                }
                (NodeParams::Mix { alpha: aa }, NodeParams::Mix { alpha: ab }) => {
                    aa.iter_mut().zip(ab).for_each(|(x, &y)| f(x, y));
                }
                _ => {}
            }
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.nodes
            .iter()
            .map(|p| match p {
                NodeParams::None => 0,
                NodeParams::Affine { weight, bias } => weight.as_slice().len() + bias.len(),
                NodeParams::Mix { alpha } => alpha.len(),
            })
            .sum()
    }
}

/// Inputs with their class labels (`0..Y`).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub inputs: Matrix<T>,
    pub labels: Vec<usize>,
}

impl<T: Real> Batch<T> {
    pub fn new(inputs: Matrix<T>, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::Empty("batch"));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "batch",
                left: inputs.shape(),
                right: (labels.len(), 1),
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}
