//! Minimal neural-graph IR for dense RTNH-style 3D-CNN detectors.
//!
//! A graph is a DAG of [`Node`]s over named graph inputs. Source graphs may
//! carry `Conv3D` nodes over rank-5 tensors; a graph is "rank4-clean" when no
//! `Conv3D` remains and every inferred shape has rank <= 4 — that is this
//! artifact's stand-in for an accelerator-compilable executable.

mod io;

pub use io::{load_graph, load_weights, save_graph, save_weights};

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::tensor::Shape;
use crate::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("cycle detected involving node {0:?}")]
    Cycle(Vec<String>),
    #[error("node {node}: {message}")]
    Shape { node: String, message: String },
    #[error("unknown tensor reference {0:?}")]
    UnknownRef(String),
    #[error("graph does not validate: {0} violation(s), first: {1}")]
    Invalid(usize, String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {message}")]
    Parse { context: String, message: String },
    #[error("weights file {path}: truncated or malformed entry {name:?}")]
    WeightFormat { path: String, name: String },
}

/// One invariant breach found by [`Graph::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Offending node id, when the breach is attributable to one.
    pub node: Option<String>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.node {
            Some(n) => write!(f, "node {n}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", content = "attrs")]
pub enum OpKind {
    Conv3D {
        out_ch: usize,
        /// `(kD, kH, kW)`
        kernel: [usize; 3],
        /// `(sD, sH, sW)`
        stride: [usize; 3],
        /// `(pD, pH, pW)`
        pad: [usize; 3],
    },
    Conv2D {
        out_ch: usize,
        /// `(kH, kW)`
        kernel: [usize; 2],
        /// `(sH, sW)`
        stride: [usize; 2],
        /// `(pH, pW)`
        pad: [usize; 2],
    },
    ReLU,
    Add,
    Concat {
        axis: usize,
    },
    /// Copies channels `[start, start + len)` (axis 1).
    ChannelSlice {
        start: usize,
        len: usize,
    },
    /// Replicates each `(h, w)` cell `fh x fw` times (last two axes).
    NearestUpsample {
        fh: usize,
        fw: usize,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Conv3D { .. } => "Conv3D",
            OpKind::Conv2D { .. } => "Conv2D",
            OpKind::ReLU => "ReLU",
            OpKind::Add => "Add",
            OpKind::Concat { .. } => "Concat",
            OpKind::ChannelSlice { .. } => "ChannelSlice",
            OpKind::NearestUpsample { .. } => "NearestUpsample",
        }
    }

    fn arity(&self) -> (usize, usize) {
        match self {
            OpKind::Add => (2, 2),
            OpKind::Concat { .. } => (1, usize::MAX),
            _ => (1, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    #[serde(flatten)]
    pub kind: OpKind,
    /// Ordered references to node ids or graph-input names.
    pub inputs: Vec<String>,
    /// Conv nodes name their weight here; the bias vector lives under
    /// `"{weight}/bias"` in the graph's weight map.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<String>,
}

/// Bias key for a named conv weight.
pub fn bias_key(weight: &str) -> String {
    format!("{weight}/bias")
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Graph {
    /// Declared input shapes; all other shapes are inferred.
    pub inputs: BTreeMap<String, Shape>,
    pub nodes: Vec<Node>,
    /// Node ids whose values the graph produces, in order.
    pub outputs: Vec<String>,
    pub weights: BTreeMap<String, Tensor>,
}

impl Graph {
    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Check every structural invariant and run shape inference end to end.
    /// Returns an empty list iff the graph is well-formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut violations = Vec::new();
        let mut ids = HashSet::new();
        for node in &self.nodes {
            if self.inputs.contains_key(&node.id) {
                violations.push(Violation {
                    node: Some(node.id.clone()),
                    message: "node id collides with a graph input name".into(),
                });
            }
            if !ids.insert(node.id.as_str()) {
                violations.push(Violation {
                    node: Some(node.id.clone()),
                    message: "duplicate node id".into(),
                });
            }
        }

        for node in &self.nodes {
            let (min, max) = node.kind.arity();
            if node.inputs.len() < min || node.inputs.len() > max {
                violations.push(Violation {
                    node: Some(node.id.clone()),
                    message: format!(
                        "{} takes {} input(s), got {}",
                        node.kind.name(),
                        if min == max { min.to_string() } else { format!("{min}+") },
                        node.inputs.len()
                    ),
                });
            }
            for input in &node.inputs {
                if !self.inputs.contains_key(input) && !ids.contains(input.as_str()) {
                    violations.push(Violation {
                        node: Some(node.id.clone()),
                        message: format!("dangling reference to {input:?}"),
                    });
                }
            }
            violations.extend(self.check_attrs(node));
            violations.extend(self.check_weight_presence(node));
        }

        for out in &self.outputs {
            if !ids.contains(out.as_str()) && !self.inputs.contains_key(out) {
                violations.push(Violation {
                    node: None,
                    message: format!("graph output {out:?} is not a node"),
                });
            }
        }

        match self.topo_order() {
            Err(GraphError::Cycle(ids)) => violations.push(Violation {
                node: ids.first().cloned(),
                message: "graph contains a cycle".into(),
            }),
            _ => {
                // reachability: with all arities >= 1 and no dangling refs,
                // a node is grounded iff all of its inputs are grounded
                let mut reachable: BTreeSet<&str> =
                    self.inputs.keys().map(String::as_str).collect();
                if let Ok(order) = self.topo_order() {
                    for id in &order {
                        let node = self.node(id).expect("topo ids exist");
                        if !node.inputs.is_empty()
                            && node.inputs.iter().all(|i| reachable.contains(i.as_str()))
                        {
                            reachable.insert(&node.id);
                        }
                    }
                }
                for node in &self.nodes {
                    if !reachable.contains(node.id.as_str()) {
                        violations.push(Violation {
                            node: Some(node.id.clone()),
                            message: "not reachable from the graph inputs".into(),
                        });
                    }
                }
            }
        }

        // shape inference only makes sense on a structurally sound graph
        if violations.is_empty() {
            match self.infer_shapes() {
                Ok(shapes) => violations.extend(self.check_weight_shapes(&shapes)),
                Err(GraphError::Shape { node, message }) => violations.push(Violation {
                    node: Some(node),
                    message,
                }),
                Err(e) => violations.push(Violation {
                    node: None,
                    message: e.to_string(),
                }),
            }
        }

        violations
    }

    /// Like [`Graph::validate`] but as a `Result` for call sites that require
    /// a well-formed graph.
    pub fn require_valid(&self) -> Result<(), GraphError> {
        let violations = self.validate();
        match violations.first() {
            None => Ok(()),
            Some(first) => Err(GraphError::Invalid(violations.len(), first.to_string())),
        }
    }

    fn check_attrs(&self, node: &Node) -> Vec<Violation> {
        let mut v = Vec::new();
        let mut bad = |message: String| {
            v.push(Violation {
                node: Some(node.id.clone()),
                message,
            })
        };
        match &node.kind {
            OpKind::Conv3D { out_ch, kernel, stride, .. } => {
                if *out_ch == 0 || kernel.contains(&0) || stride.contains(&0) {
                    bad("conv extents and strides must be >= 1".into());
                }
            }
            OpKind::Conv2D { out_ch, kernel, stride, .. } => {
                if *out_ch == 0 || kernel.contains(&0) || stride.contains(&0) {
                    bad("conv extents and strides must be >= 1".into());
                }
            }
            OpKind::ChannelSlice { len, .. } => {
                if *len == 0 {
                    bad("slice len must be >= 1".into());
                }
            }
            OpKind::NearestUpsample { fh, fw } => {
                if *fh == 0 || *fw == 0 {
                    bad("upsample factors must be >= 1".into());
                }
            }
            _ => {}
        }
        v
    }

    fn check_weight_presence(&self, node: &Node) -> Vec<Violation> {
        let mut v = Vec::new();
        let is_conv = matches!(node.kind, OpKind::Conv3D { .. } | OpKind::Conv2D { .. });
        match (&node.weight, is_conv) {
            (None, true) => v.push(Violation {
                node: Some(node.id.clone()),
                message: "conv node has no weight reference".into(),
            }),
            (Some(w), true) => {
                if !self.weights.contains_key(w) {
                    v.push(Violation {
                        node: Some(node.id.clone()),
                        message: format!("missing weight {w:?}"),
                    });
                }
                if !self.weights.contains_key(&bias_key(w)) {
                    v.push(Violation {
                        node: Some(node.id.clone()),
                        message: format!("missing bias {:?}", bias_key(w)),
                    });
                }
            }
            (Some(_), false) => v.push(Violation {
                node: Some(node.id.clone()),
                message: format!("{} node must not reference a weight", node.kind.name()),
            }),
            (None, false) => {}
        }
        v
    }

    /// Conv weight shape agreement against *inferred* input channels.
    fn check_weight_shapes(&self, shapes: &BTreeMap<String, Shape>) -> Vec<Violation> {
        let mut v = Vec::new();
        for node in &self.nodes {
            let (out_ch, kdims): (usize, Vec<usize>) = match &node.kind {
                OpKind::Conv3D { out_ch, kernel, .. } => (*out_ch, kernel.to_vec()),
                OpKind::Conv2D { out_ch, kernel, .. } => (*out_ch, kernel.to_vec()),
                _ => continue,
            };
            let (Some(wname), Some(input)) = (&node.weight, node.inputs.first()) else {
                continue;
            };
            let (Some(weight), Some(in_shape)) = (self.weights.get(wname), shapes.get(input))
            else {
                continue;
            };
            let in_ch = in_shape.dim(1);
            let mut expected = vec![out_ch, in_ch];
            expected.extend(&kdims);
            if weight.shape().dims() != expected.as_slice() {
                v.push(Violation {
                    node: Some(node.id.clone()),
                    message: format!(
                        "weight {wname:?} has shape {}, expected ({})",
                        weight.shape(),
                        expected.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
                    ),
                });
            }
            if let Some(bias) = self.weights.get(&bias_key(wname)) {
                if bias.shape().dims() != [out_ch] {
                    v.push(Violation {
                        node: Some(node.id.clone()),
                        message: format!(
                            "bias {:?} has shape {}, expected ({out_ch})",
                            bias_key(wname),
                            bias.shape()
                        ),
                    });
                }
            }
        }
        v
    }

    /// Deterministic topological order: every node after all of its inputs,
    /// ties broken by lexicographic node id.
    pub fn topo_order(&self) -> Result<Vec<String>, GraphError> {
        use std::cmp::Reverse;
        use std::collections::BinaryHeap;

        let index: HashMap<&str, usize> =
            self.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
        let mut indegree = vec![0usize; self.nodes.len()];
        let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for input in &node.inputs {
                if let Some(&j) = index.get(input.as_str()) {
                    indegree[i] += 1;
                    dependents[j].push(i);
                }
            }
        }

        let mut ready: BinaryHeap<Reverse<&str>> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(i, _)| indegree[*i] == 0)
            .map(|(_, n)| Reverse(n.id.as_str()))
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(Reverse(id)) = ready.pop() {
            order.push(id.to_string());
            let i = index[id];
            for &dep in &dependents[i] {
                indegree[dep] -= 1;
                if indegree[dep] == 0 {
                    ready.push(Reverse(self.nodes[dep].id.as_str()));
                }
            }
        }
        if order.len() != self.nodes.len() {
            let stuck: Vec<String> = self
                .nodes
                .iter()
                .enumerate()
                .filter(|(i, _)| indegree[*i] > 0)
                .map(|(_, n)| n.id.clone())
                .collect();
            return Err(GraphError::Cycle(stuck));
        }
        Ok(order)
    }

    /// Shape of every node output, keyed by node id (graph inputs included
    /// under their own names). Standard conv arithmetic:
    /// `out = floor((in + 2p - k) / s) + 1` per spatial axis.
    pub fn infer_shapes(&self) -> Result<BTreeMap<String, Shape>, GraphError> {
        let mut shapes: BTreeMap<String, Shape> = self
            .inputs
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        for id in self.topo_order()? {
            let node = self.node(&id).expect("topo ids exist");
            let shape = infer_node_shape(node, &shapes)?;
            shapes.insert(id, shape);
        }
        Ok(shapes)
    }
}

fn conv_extent(input: usize, k: usize, s: usize, p: usize, node: &str, axis: &str) -> Result<usize, GraphError> {
    let padded = input + 2 * p;
    if padded < k {
        return Err(GraphError::Shape {
            node: node.to_string(),
            message: format!("kernel {k} exceeds padded {axis} extent {padded}"),
        });
    }
    Ok((padded - k) / s + 1)
}

fn infer_node_shape(node: &Node, shapes: &BTreeMap<String, Shape>) -> Result<Shape, GraphError> {
    let input_shape = |i: usize| -> Result<&Shape, GraphError> {
        let name = node.inputs.get(i).ok_or_else(|| GraphError::Shape {
            node: node.id.clone(),
            message: format!("missing input operand {i}"),
        })?;
        shapes.get(name).ok_or_else(|| GraphError::UnknownRef(name.clone()))
    };
    let want_rank = |shape: &Shape, rank: usize| -> Result<(), GraphError> {
        if shape.rank() != rank {
            return Err(GraphError::Shape {
                node: node.id.clone(),
                message: format!("expected rank-{rank} input, got {}", shape),
            });
        }
        Ok(())
    };

    let shape = match &node.kind {
        OpKind::Conv3D { out_ch, kernel, stride, pad } => {
            let s = input_shape(0)?;
            want_rank(s, 5)?;
            let d = conv_extent(s.dim(2), kernel[0], stride[0], pad[0], &node.id, "D")?;
            let h = conv_extent(s.dim(3), kernel[1], stride[1], pad[1], &node.id, "H")?;
            let w = conv_extent(s.dim(4), kernel[2], stride[2], pad[2], &node.id, "W")?;
            Shape::new([s.dim(0), *out_ch, d, h, w])
        }
        OpKind::Conv2D { out_ch, kernel, stride, pad } => {
            let s = input_shape(0)?;
            want_rank(s, 4)?;
            let h = conv_extent(s.dim(2), kernel[0], stride[0], pad[0], &node.id, "H")?;
            let w = conv_extent(s.dim(3), kernel[1], stride[1], pad[1], &node.id, "W")?;
            Shape::new([s.dim(0), *out_ch, h, w])
        }
        OpKind::ReLU => Ok(input_shape(0)?.clone()),
        OpKind::Add => {
            let a = input_shape(0)?;
            let b = input_shape(1)?;
            if a != b {
                return Err(GraphError::Shape {
                    node: node.id.clone(),
                    message: format!("Add operands differ: {a} vs {b}"),
                });
            }
            Ok(a.clone())
        }
        OpKind::Concat { axis } => {
            let first = input_shape(0)?.clone();
            if *axis >= first.rank() {
                return Err(GraphError::Shape {
                    node: node.id.clone(),
                    message: format!("concat axis {axis} out of range for {first}"),
                });
            }
            let mut dims = first.dims().to_vec();
            for i in 1..node.inputs.len() {
                let s = input_shape(i)?;
                let compatible = s.rank() == first.rank()
                    && s.dims()
                        .iter()
                        .enumerate()
                        .all(|(ax, &d)| ax == *axis || d == first.dim(ax));
                if !compatible {
                    return Err(GraphError::Shape {
                        node: node.id.clone(),
                        message: format!("concat operand {s} incompatible with {first} on axis {axis}"),
                    });
                }
                dims[*axis] += s.dim(*axis);
            }
            Shape::new(dims)
        }
        OpKind::ChannelSlice { start, len } => {
            let s = input_shape(0)?;
            if s.rank() < 2 {
                return Err(GraphError::Shape {
                    node: node.id.clone(),
                    message: format!("channel slice needs a channel axis, got {s}"),
                });
            }
            if start + len > s.dim(1) {
                return Err(GraphError::Shape {
                    node: node.id.clone(),
                    message: format!("slice [{start}, {}) exceeds {} channels", start + len, s.dim(1)),
                });
            }
            let mut dims = s.dims().to_vec();
            dims[1] = *len;
            Shape::new(dims)
        }
        OpKind::NearestUpsample { fh, fw } => {
            let s = input_shape(0)?;
            if s.rank() < 3 {
                return Err(GraphError::Shape {
                    node: node.id.clone(),
                    message: format!("upsample needs spatial axes, got {s}"),
                });
            }
            let mut dims = s.dims().to_vec();
            let r = dims.len();
            dims[r - 2] *= fh;
            dims[r - 1] *= fw;
            Shape::new(dims)
        }
    };
    shape.map_err(|e| GraphError::Shape {
        node: node.id.clone(),
        message: e.to_string(),
    })
}

/// Convenience constructor used by tests, the demo generator, and the
/// lowering pass.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    graph: Graph,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, name: &str, dims: impl Into<Vec<usize>>) -> &mut Self {
        self.graph
            .inputs
            .insert(name.to_string(), Shape::new(dims).expect("valid input shape"));
        self
    }

    pub fn node(&mut self, id: &str, kind: OpKind, inputs: &[&str]) -> &mut Self {
        self.graph.nodes.push(Node {
            id: id.to_string(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            weight: None,
        });
        self
    }

    /// Conv node whose weight and bias are registered under the node id.
    pub fn conv(
        &mut self,
        id: &str,
        kind: OpKind,
        input: &str,
        weight: Tensor,
        bias: Tensor,
    ) -> &mut Self {
        self.graph.weights.insert(id.to_string(), weight);
        self.graph.weights.insert(bias_key(id), bias);
        self.graph.nodes.push(Node {
            id: id.to_string(),
            kind,
            inputs: vec![input.to_string()],
            weight: Some(id.to_string()),
        });
        self
    }

    pub fn output(&mut self, id: &str) -> &mut Self {
        self.graph.outputs.push(id.to_string());
        self
    }

    pub fn finish(&mut self) -> Graph {
        std::mem::take(&mut self.graph)
    }

    /// Finish and require a clean [`Graph::validate`].
    pub fn build(&mut self) -> Result<Graph, GraphError> {
        let graph = self.finish();
        graph.require_valid()?;
        Ok(graph)
    }
}
