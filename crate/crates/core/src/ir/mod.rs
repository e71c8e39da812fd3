//! Graph intermediate representation.
//!
//! A [`Graph`] is a DAG of operation [`Node`]s connected through named
//! [`TensorDef`]s. Every later stage (fusion, scheduling, layout planning,
//! path discovery, tiling) consumes and produces this type. Graphs are plain
//! values: once built they are only read, so they can be shared freely
//! across worker threads.

mod json;
mod shape;
mod validate;

use std::collections::HashMap;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use shape::{infer_node, infer_shapes};
pub use validate::{validate, Violation};

/// Element type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataType {
    F32,
    I8,
    I32,
}

impl DataType {
    pub const fn byte_width(self) -> usize {
        match self {
            DataType::F32 | DataType::I32 => 4,
            DataType::I8 => 1,
        }
    }

    pub const fn is_integer(self) -> bool {
        !matches!(self, DataType::F32)
    }

    /// Type used for the result of multiply-accumulate ops on this input type.
    pub const fn accumulator(self) -> DataType {
        match self {
            DataType::F32 => DataType::F32,
            DataType::I8 | DataType::I32 => DataType::I32,
        }
    }
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataType::F32 => "f32",
            DataType::I8 => "i8",
            DataType::I32 => "i32",
        })
    }
}

/// Ordered tensor extents. Activations are NHWC; conv weights are
/// `(out, kh, kw, in)`, depthwise weights `(1, kh, kw, channels)` and dense
/// weights `(out, in)`.
///
/// An empty dimension list means "not yet inferred".
#[derive(Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TensorShape(Vec<usize>);

impl TensorShape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Self {
        TensorShape(dims.into())
    }

    pub fn unknown() -> Self {
        TensorShape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn is_known(&self) -> bool {
        !self.0.is_empty()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0[axis]
    }

    /// Product of all extents, `None` on overflow.
    pub fn element_count(&self) -> Option<usize> {
        self.0.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
    }

    /// Copy of this shape with `axis` replaced by `extent`.
    pub fn with_dim(&self, axis: usize, extent: usize) -> TensorShape {
        let mut dims = self.0.clone();
        dims[axis] = extent;
        TensorShape(dims)
    }
}

impl fmt::Debug for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", dims.join("x"))
    }
}

impl From<Vec<usize>> for TensorShape {
    fn from(dims: Vec<usize>) -> Self {
        TensorShape(dims)
    }
}

impl<const N: usize> From<[usize; N]> for TensorShape {
    fn from(dims: [usize; N]) -> Self {
        TensorShape(dims.to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Input,
    Output,
    Weight,
    Intermediate,
}

impl TensorKind {
    /// Model-level inputs and outputs are read and written as a whole by the
    /// application, so they are never tiled.
    pub fn is_model_io(self) -> bool {
        matches!(self, TensorKind::Input | TensorKind::Output)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDef {
    pub id: String,
    #[serde(default)]
    pub shape: TensorShape,
    pub dtype: DataType,
    pub kind: TensorKind,
    /// Little-endian constant payload; present iff `kind == Weight`.
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "json::base64_bytes"
    )]
    pub data: Option<Vec<u8>>,
}

impl TensorDef {
    pub fn new(
        id: impl Into<String>,
        shape: impl Into<TensorShape>,
        dtype: DataType,
        kind: TensorKind,
    ) -> Self {
        TensorDef {
            id: id.into(),
            shape: shape.into(),
            dtype,
            kind,
            data: None,
        }
    }

    pub fn weight_f32(
        id: impl Into<String>,
        shape: impl Into<TensorShape>,
        values: &[f32],
    ) -> Self {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        TensorDef {
            id: id.into(),
            shape: shape.into(),
            dtype: DataType::F32,
            kind: TensorKind::Weight,
            data: Some(data),
        }
    }

    pub fn weight_i8(id: impl Into<String>, shape: impl Into<TensorShape>, values: &[i8]) -> Self {
        let data = values.iter().map(|v| *v as u8).collect();
        TensorDef {
            id: id.into(),
            shape: shape.into(),
            dtype: DataType::I8,
            kind: TensorKind::Weight,
            data: Some(data),
        }
    }

    pub fn weight_i32(
        id: impl Into<String>,
        shape: impl Into<TensorShape>,
        values: &[i32],
    ) -> Self {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        TensorDef {
            id: id.into(),
            shape: shape.into(),
            dtype: DataType::I32,
            kind: TensorKind::Weight,
            data: Some(data),
        }
    }

    /// Weight payload decoded as `f64`, in row-major order.
    pub fn weight_values(&self) -> Option<Vec<f64>> {
        let data = self.data.as_ref()?;
        Some(match self.dtype {
            DataType::F32 => data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            DataType::I8 => data.iter().map(|b| *b as i8 as f64).collect(),
            DataType::I32 => data
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
        })
    }
}

/// Size in bytes of the buffer backing `tensor`.
pub fn buffer_size(tensor: &TensorDef) -> Result<usize, GraphError> {
    tensor
        .shape
        .element_count()
        .and_then(|n| n.checked_mul(tensor.dtype.byte_width()))
        .ok_or_else(|| GraphError::Overflow(tensor.id.clone()))
}

/// Per-edge spatial padding, serialized as `[top, bottom, left, right]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const ZERO: Padding = Padding {
        top: 0,
        bottom: 0,
        left: 0,
        right: 0,
    };

    pub const fn uniform(p: usize) -> Padding {
        Padding {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }
}

impl From<[usize; 4]> for Padding {
    fn from(p: [usize; 4]) -> Self {
        Padding {
            top: p[0],
            bottom: p[1],
            left: p[2],
            right: p[3],
        }
    }
}

impl From<Padding> for [usize; 4] {
    fn from(p: Padding) -> Self {
        [p.top, p.bottom, p.left, p.right]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

/// Operation kind and its attributes. Serialized as `"op": <name>` plus an
/// `"attrs"` object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "attrs", rename_all = "snake_case")]
pub enum OpKind {
    Conv2d {
        strides: [usize; 2],
        padding: Padding,
        kernel: [usize; 2],
    },
    DepthwiseConv2d {
        strides: [usize; 2],
        padding: Padding,
    },
    Dense {},
    BiasAdd {},
    Activation {
        function: Activation,
    },
    MaxPool {
        window: [usize; 2],
        strides: [usize; 2],
    },
    AvgPool {
        window: [usize; 2],
        strides: [usize; 2],
    },
    Pad {
        padding: Padding,
        #[serde(default)]
        value: f32,
    },
    Add {},
    Gather {
        axis: usize,
    },
    /// Mean over `axis`. When `count` is set the sum is divided by `count`
    /// instead of the axis extent, which lets a reduction over one partition
    /// produce a partial mean.
    ReduceMean {
        axis: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        count: Option<usize>,
    },
    Softmax {},
    Slice {
        axis: usize,
        begin: usize,
        end: usize,
    },
    Concat {
        axis: usize,
    },
    /// Element-wise sum of partial results followed by `activation`.
    Merge {
        activation: Activation,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::DepthwiseConv2d { .. } => "depthwise_conv2d",
            OpKind::Dense {} => "dense",
            OpKind::BiasAdd {} => "bias_add",
            OpKind::Activation { .. } => "activation",
            OpKind::MaxPool { .. } => "max_pool",
            OpKind::AvgPool { .. } => "avg_pool",
            OpKind::Pad { .. } => "pad",
            OpKind::Add {} => "add",
            OpKind::Gather { .. } => "gather",
            OpKind::ReduceMean { .. } => "reduce_mean",
            OpKind::Softmax {} => "softmax",
            OpKind::Slice { .. } => "slice",
            OpKind::Concat { .. } => "concat",
            OpKind::Merge { .. } => "merge",
        }
    }

    /// Accepted input counts as `(min, max)`.
    pub fn arity(&self) -> (usize, usize) {
        match self {
            OpKind::Conv2d { .. }
            | OpKind::DepthwiseConv2d { .. }
            | OpKind::Dense {}
            | OpKind::BiasAdd {}
            | OpKind::Add {}
            | OpKind::Gather { .. } => (2, 2),
            OpKind::Activation { .. }
            | OpKind::MaxPool { .. }
            | OpKind::AvgPool { .. }
            | OpKind::Pad { .. }
            | OpKind::ReduceMean { .. }
            | OpKind::Softmax {}
            | OpKind::Slice { .. } => (1, 1),
            OpKind::Concat { .. } => (1, usize::MAX),
            OpKind::Merge { .. } => (2, usize::MAX),
        }
    }

    /// Index of the input that carries the activation stream through the op.
    pub fn data_port(&self) -> usize {
        match self {
            OpKind::Gather { .. } => 1,
            _ => 0,
        }
    }

    pub fn relu() -> OpKind {
        OpKind::Activation {
            function: Activation::Relu,
        }
    }

    pub fn conv2d(kernel: [usize; 2], strides: [usize; 2], padding: Padding) -> OpKind {
        OpKind::Conv2d {
            strides,
            padding,
            kernel,
        }
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    #[serde(flatten)]
    pub op: OpKind,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// Forbids fusing this node with its consumers.
    #[serde(default, skip_serializing_if = "is_false")]
    pub no_fuse: bool,
}

impl Node {
    pub fn new<I, S>(
        id: impl Into<String>,
        op: OpKind,
        inputs: I,
        output: impl Into<String>,
    ) -> Node
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Node {
            id: id.into(),
            op,
            inputs: inputs.into_iter().map(Into::into).collect(),
            outputs: vec![output.into()],
            no_fuse: false,
        }
    }

    /// The single output tensor. Every supported op has exactly one.
    pub fn output(&self) -> &str {
        &self.outputs[0]
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("node `{node}` references unknown tensor `{tensor}`")]
    UnknownTensor { node: String, tensor: String },
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error(
        "shape mismatch at node `{node}` for tensor `{tensor}`: expected {expected}, found {found}"
    )]
    ShapeMismatch {
        node: String,
        tensor: String,
        expected: TensorShape,
        found: TensorShape,
    },
    #[error(
        "dtype mismatch at node `{node}` for tensor `{tensor}`: expected {expected}, found {found}"
    )]
    DTypeMismatch {
        node: String,
        tensor: String,
        expected: DataType,
        found: DataType,
    },
    #[error("node `{node}`: {reason}")]
    InvalidOp { node: String, reason: String },
    #[error("graph contains a cycle")]
    Cycle,
    #[error("size of tensor `{0}` overflows")]
    Overflow(String),
    #[error("graph is invalid: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A DNN inference graph. Tensors and nodes keep insertion order, which
/// makes serialization and every derived ordering deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Graph {
    tensors: IndexMap<String, TensorDef>,
    nodes: IndexMap<String, Node>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn add_tensor(&mut self, tensor: TensorDef) -> Result<(), GraphError> {
        if self.tensors.contains_key(&tensor.id) {
            return Err(GraphError::DuplicateId(tensor.id));
        }
        self.tensors.insert(tensor.id.clone(), tensor);
        Ok(())
    }

    pub fn add_node(&mut self, node: Node) -> Result<(), GraphError> {
        if self.nodes.contains_key(&node.id) {
            return Err(GraphError::DuplicateId(node.id));
        }
        self.nodes.insert(node.id.clone(), node);
        Ok(())
    }

    pub fn tensor(&self, id: &str) -> Option<&TensorDef> {
        self.tensors.get(id)
    }

    pub fn tensor_mut(&mut self, id: &str) -> Option<&mut TensorDef> {
        self.tensors.get_mut(id)
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut Node> {
        self.nodes.get_mut(id)
    }

    pub fn tensors(&self) -> impl ExactSizeIterator<Item = &TensorDef> {
        self.tensors.values()
    }

    pub fn nodes(&self) -> impl ExactSizeIterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn contains_tensor(&self, id: &str) -> bool {
        self.tensors.contains_key(id)
    }

    pub fn contains_node(&self, id: &str) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn remove_tensor(&mut self, id: &str) -> Option<TensorDef> {
        self.tensors.shift_remove(id)
    }

    pub fn remove_node(&mut self, id: &str) -> Option<Node> {
        self.nodes.shift_remove(id)
    }

    pub fn model_inputs(&self) -> impl Iterator<Item = &TensorDef> {
        self.tensors().filter(|t| t.kind == TensorKind::Input)
    }

    pub fn model_outputs(&self) -> impl Iterator<Item = &TensorDef> {
        self.tensors().filter(|t| t.kind == TensorKind::Output)
    }

    /// Producer and consumer relation derived from tensor ids.
    pub fn index(&self) -> GraphIndex<'_> {
        GraphIndex::new(self)
    }

    /// Kahn's algorithm; among ready nodes the earliest inserted goes first.
    pub fn topological_order(&self) -> Result<Vec<&str>, GraphError> {
        let index = self.index();
        let mut indegree: Vec<usize> = vec![0; self.nodes.len()];
        let position: HashMap<&str, usize> = self
            .nodes
            .keys()
            .enumerate()
            .map(|(i, k)| (k.as_str(), i))
            .collect();
        let mut succs: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (i, node) in self.nodes.values().enumerate() {
            let mut preds: Vec<usize> = node
                .inputs
                .iter()
                .filter_map(|t| index.producer(t))
                .map(|p| position[p])
                .collect();
            preds.sort_unstable();
            preds.dedup();
            indegree[i] = preds.len();
            for p in preds {
                succs[p].push(i);
            }
        }
        let mut ready: std::collections::BTreeSet<usize> = (0..self.nodes.len())
            .filter(|&i| indegree[i] == 0)
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &s in &succs[i] {
                indegree[s] -= 1;
                if indegree[s] == 0 {
                    ready.insert(s);
                }
            }
        }
        if order.len() != self.nodes.len() {
            return Err(GraphError::Cycle);
        }
        let keys: Vec<&str> = self.nodes.keys().map(String::as_str).collect();
        Ok(order.into_iter().map(|i| keys[i]).collect())
    }

    pub fn to_json(&self) -> Result<String, GraphError> {
        json::to_string(self)
    }

    pub fn from_json(text: &str) -> Result<Graph, GraphError> {
        json::from_str(text)
    }
}

/// Read-only adjacency of a graph.
#[derive(Debug, Clone)]
pub struct GraphIndex<'g> {
    producers: HashMap<&'g str, &'g str>,
    consumers: HashMap<&'g str, Vec<&'g str>>,
}

impl<'g> GraphIndex<'g> {
    fn new(graph: &'g Graph) -> Self {
        let mut producers = HashMap::new();
        let mut consumers: HashMap<&str, Vec<&str>> = HashMap::new();
        for node in graph.nodes() {
            for out in &node.outputs {
                producers.entry(out.as_str()).or_insert(node.id.as_str());
            }
            for input in &node.inputs {
                let list = consumers.entry(input.as_str()).or_default();
                if list.last() != Some(&node.id.as_str()) && !list.contains(&node.id.as_str()) {
                    list.push(node.id.as_str());
                }
            }
        }
        GraphIndex {
            producers,
            consumers,
        }
    }

    pub fn producer(&self, tensor: &str) -> Option<&'g str> {
        self.producers.get(tensor).copied()
    }

    /// Distinct consumer nodes in graph order.
    pub fn consumers(&self, tensor: &str) -> &[&'g str] {
        self.consumers.get(tensor).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffer_sizes() {
        let t = TensorDef::new("a", [1, 8, 8, 16], DataType::F32, TensorKind::Intermediate);
        assert_eq!(buffer_size(&t).unwrap(), 4096);
        let t = TensorDef::new("b", [1, 32, 16], DataType::I8, TensorKind::Intermediate);
        assert_eq!(buffer_size(&t).unwrap(), 512);
        let t = TensorDef::new("c", [1], DataType::I32, TensorKind::Intermediate);
        assert_eq!(buffer_size(&t).unwrap(), 4);
    }

    #[test]
    fn buffer_size_overflow() {
        let t = TensorDef::new(
            "a",
            [usize::MAX, 2],
            DataType::F32,
            TensorKind::Intermediate,
        );
        assert!(matches!(buffer_size(&t), Err(GraphError::Overflow(_))));
    }

    #[test]
    fn byte_widths_positive() {
        for dt in [DataType::F32, DataType::I8, DataType::I32] {
            assert!(dt.byte_width() > 0);
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut g = Graph::new();
        g.add_tensor(TensorDef::new("x", [1], DataType::F32, TensorKind::Input))
            .unwrap();
        assert!(matches!(
            g.add_tensor(TensorDef::new("x", [1], DataType::F32, TensorKind::Input)),
            Err(GraphError::DuplicateId(_))
        ));
    }
}
