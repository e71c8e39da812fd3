//! Reference interpreter and static MAC counter.
//!
//! The interpreter always runs the fine-grained graph. It is the oracle for
//! every equivalence check, so kernels favour obviously-correct loops over
//! speed.

mod io;
mod kernels;
mod macs;

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use thiserror::Error;

use crate::ir::{
    infer_shapes, DataType, Graph, GraphError, OpKind, TensorDef, TensorKind, TensorShape,
};
use kernels::{Element, Overflow, Window};

pub use io::{read_tensor, write_tensor, TensorIoError};
pub use macs::{count_macs, MacCount};

/// Relative tolerance for floating point equivalence.
pub const F32_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("missing value for model input `{0}`")]
    MissingInput(String),
    #[error("tensor `{tensor}`: expected {expected_dtype} {expected}, got {found_dtype} {found}")]
    ShapeMismatch {
        tensor: String,
        expected: TensorShape,
        expected_dtype: DataType,
        found: TensorShape,
        found_dtype: DataType,
    },
    #[error("integer overflow in node `{0}`")]
    NumericOverflow(String),
    #[error("node `{node}`: index {index} out of range")]
    IndexOutOfRange { node: String, index: i64 },
    #[error("node `{node}`: {reason}")]
    Unsupported { node: String, reason: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Flat row-major element storage. `i8` and `i32` tensors share the integer
/// variant; the `dtype` of the owning value tells them apart.
#[derive(Debug, Clone, PartialEq)]
pub enum Elements {
    F32(Vec<f32>),
    Int(Vec<i32>),
}

impl Elements {
    pub fn len(&self) -> usize {
        match self {
            Elements::F32(v) => v.len(),
            Elements::Int(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorValue {
    shape: TensorShape,
    dtype: DataType,
    elements: Elements,
}

fn fits(dtype: DataType, v: i32) -> bool {
    dtype != DataType::I8 || (i8::MIN as i32..=i8::MAX as i32).contains(&v)
}

impl TensorValue {
    /// Builds a value, checking the element count against the shape and the
    /// storage variant and range against the dtype.
    pub fn new(
        shape: impl Into<TensorShape>,
        dtype: DataType,
        elements: Elements,
    ) -> Option<TensorValue> {
        let shape = shape.into();
        let ok = shape.element_count() == Some(elements.len())
            && match (&elements, dtype) {
                (Elements::F32(_), DataType::F32) => true,
                (Elements::Int(v), DataType::I8 | DataType::I32) => {
                    v.iter().all(|&x| fits(dtype, x))
                }
                _ => false,
            };
        ok.then_some(TensorValue {
            shape,
            dtype,
            elements,
        })
    }

    pub fn f32(shape: impl Into<TensorShape>, values: Vec<f32>) -> Option<TensorValue> {
        TensorValue::new(shape, DataType::F32, Elements::F32(values))
    }

    pub fn int(
        shape: impl Into<TensorShape>,
        dtype: DataType,
        values: Vec<i32>,
    ) -> Option<TensorValue> {
        TensorValue::new(shape, dtype, Elements::Int(values))
    }

    /// Decodes the constant payload of a weight tensor.
    pub fn from_weight(def: &TensorDef) -> Option<TensorValue> {
        let data = def.data.as_ref()?;
        let elements = match def.dtype {
            DataType::F32 => Elements::F32(
                data.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DataType::I8 => Elements::Int(data.iter().map(|b| *b as i8 as i32).collect()),
            DataType::I32 => Elements::Int(
                data.chunks_exact(4)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
        };
        TensorValue::new(def.shape.clone(), def.dtype, elements)
    }

    pub fn shape(&self) -> &TensorShape {
        &self.shape
    }

    pub fn dtype(&self) -> DataType {
        self.dtype
    }

    pub fn elements(&self) -> &Elements {
        &self.elements
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.elements {
            Elements::F32(v) => Some(v),
            Elements::Int(_) => None,
        }
    }

    pub fn as_int(&self) -> Option<&[i32]> {
        match &self.elements {
            Elements::Int(v) => Some(v),
            Elements::F32(_) => None,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match &self.elements {
            Elements::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Elements::Int(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

/// Largest element-wise `|a - b| / max(|a|, 1)`, or `None` when the values
/// differ in shape or dtype.
pub fn max_relative_deviation(a: &TensorValue, b: &TensorValue) -> Option<f64> {
    if a.shape != b.shape || a.dtype != b.dtype {
        return None;
    }
    let dev = a
        .to_f64()
        .iter()
        .zip(b.to_f64())
        .map(|(&x, y)| (x - y).abs() / x.abs().max(1.0))
        .fold(0.0, f64::max);
    Some(dev)
}

/// Whether two output maps agree: bit-exact for integer tensors, within
/// [`F32_TOLERANCE`] for floating point ones.
pub fn outputs_match(a: &BTreeMap<String, TensorValue>, b: &BTreeMap<String, TensorValue>) -> bool {
    a.len() == b.len()
        && a.iter().all(|(id, x)| match b.get(id) {
            Some(y) if x.dtype.is_integer() => x == y,
            Some(y) => max_relative_deviation(x, y).is_some_and(|d| d <= F32_TOLERANCE),
            None => false,
        })
}

/// Random values for every model input: uniform in `[-1, 1]` for f32,
/// `[-127, 127]` for i8. Integer inputs feeding a gather as indices are drawn
/// from the valid index range of the table.
pub fn random_inputs<R: Rng>(graph: &Graph, rng: &mut R) -> BTreeMap<String, TensorValue> {
    let mut index_bound: HashMap<&str, usize> = HashMap::new();
    for node in graph.nodes() {
        if let OpKind::Gather { axis } = node.op {
            if let (Some(table), Some(idx)) = (graph.tensor(&node.inputs[0]), node.inputs.get(1)) {
                let bound = index_bound.entry(idx.as_str()).or_insert(usize::MAX);
                *bound = (*bound).min(table.shape.dim(axis));
            }
        }
    }
    let mut out = BTreeMap::new();
    for t in graph.model_inputs() {
        let n = t.shape.element_count().unwrap_or(0);
        let elements = match t.dtype {
            DataType::F32 => {
                Elements::F32((0..n).map(|_| rng.random_range(-1.0f32..=1.0)).collect())
            }
            DataType::I8 => Elements::Int((0..n).map(|_| rng.random_range(-127..=127)).collect()),
            DataType::I32 => {
                let hi = index_bound
                    .get(t.id.as_str())
                    .map_or(127, |&b| b.saturating_sub(1).min(i32::MAX as usize));
                let lo = if index_bound.contains_key(t.id.as_str()) {
                    0
                } else {
                    -127
                };
                Elements::Int((0..n).map(|_| rng.random_range(lo..=hi as i32)).collect())
            }
        };
        let value = TensorValue::new(t.shape.clone(), t.dtype, elements)
            .expect("generated value is consistent");
        out.insert(t.id.clone(), value);
    }
    out
}

/// Runs `graph` in its canonical topological order and returns the model
/// outputs.
pub fn execute(
    graph: &Graph,
    inputs: &BTreeMap<String, TensorValue>,
) -> Result<BTreeMap<String, TensorValue>, ExecError> {
    let order: Vec<String> = graph
        .topological_order()?
        .into_iter()
        .map(str::to_owned)
        .collect();
    execute_in_order(graph, inputs, &order)
}

/// Runs the nodes in the given order, which must be topological.
pub fn execute_in_order(
    graph: &Graph,
    inputs: &BTreeMap<String, TensorValue>,
    order: &[String],
) -> Result<BTreeMap<String, TensorValue>, ExecError> {
    let graph = infer_shapes(graph)?;
    let mut env: HashMap<String, TensorValue> = HashMap::new();
    for t in graph.tensors() {
        match t.kind {
            TensorKind::Input => {
                let v = inputs
                    .get(&t.id)
                    .ok_or_else(|| ExecError::MissingInput(t.id.clone()))?;
                if v.shape != t.shape || v.dtype != t.dtype {
                    return Err(ExecError::ShapeMismatch {
                        tensor: t.id.clone(),
                        expected: t.shape.clone(),
                        expected_dtype: t.dtype,
                        found: v.shape.clone(),
                        found_dtype: v.dtype,
                    });
                }
                env.insert(t.id.clone(), v.clone());
            }
            TensorKind::Weight => {
                let v = TensorValue::from_weight(t).ok_or_else(|| ExecError::Unsupported {
                    node: t.id.clone(),
                    reason: "weight payload does not match its shape".into(),
                })?;
                env.insert(t.id.clone(), v);
            }
            _ => {}
        }
    }
    for id in order {
        let node = graph
            .node(id)
            .ok_or_else(|| GraphError::UnknownNode(id.clone()))?;
        let args: Vec<&TensorValue> = node
            .inputs
            .iter()
            .map(|t| env.get(t).ok_or_else(|| ExecError::MissingInput(t.clone())))
            .collect::<Result<_, _>>()?;
        let out_def = graph.tensor(node.output()).expect("validated output");
        let value = run_node(id, &node.op, &args, out_def)?;
        env.insert(out_def.id.clone(), value);
    }
    graph
        .model_outputs()
        .map(|t| {
            env.remove(&t.id)
                .map(|v| (t.id.clone(), v))
                .ok_or_else(|| ExecError::MissingInput(t.id.clone()))
        })
        .collect()
}

fn window(
    x: &[usize],
    out: &[usize],
    kernel: [usize; 2],
    stride: [usize; 2],
    pad: crate::ir::Padding,
) -> Window {
    Window {
        in_h: x[1],
        in_w: x[2],
        out_h: out[1],
        out_w: out[2],
        k_h: kernel[0],
        k_w: kernel[1],
        stride,
        pad,
    }
}

fn compute<T: Element>(
    op: &OpKind,
    args: &[(&[T], &[usize])],
    out: &[usize],
) -> Result<Vec<T>, Overflow> {
    let (x, xd) = args[0];
    Ok(match *op {
        OpKind::Conv2d {
            strides,
            padding,
            kernel,
        } => {
            let (w, wd) = args[1];
            kernels::conv2d(
                x,
                w,
                window(xd, out, kernel, strides, padding),
                xd[3],
                wd[0],
            )?
        }
        OpKind::DepthwiseConv2d { strides, padding } => {
            let (w, wd) = args[1];
            kernels::depthwise_conv2d(
                x,
                w,
                window(xd, out, [wd[1], wd[2]], strides, padding),
                xd[3],
            )?
        }
        OpKind::Dense {} => {
            let (w, wd) = args[1];
            let cin = wd[1];
            kernels::dense(x, w, x.len() / cin, cin, wd[0])?
        }
        OpKind::BiasAdd {} => kernels::bias_add(x, args[1].0)?,
        OpKind::Activation { function } => kernels::activate(x, function),
        OpKind::MaxPool { window: k, strides } | OpKind::AvgPool { window: k, strides } => {
            let max = matches!(op, OpKind::MaxPool { .. });
            kernels::pool(
                x,
                window(xd, out, k, strides, Default::default()),
                xd[3],
                max,
            )?
        }
        OpKind::Pad { padding, value } => kernels::pad(x, xd, padding, T::from_f32(value)),
        OpKind::Add {} => kernels::add(x, args[1].0)?,
        OpKind::ReduceMean { axis, count } => {
            kernels::reduce_mean(x, xd, axis, count.unwrap_or(xd[axis]))?
        }
        OpKind::Slice { axis, begin, end } => kernels::slice(x, xd, axis, begin, end),
        OpKind::Concat { axis } => kernels::concat(args, axis),
        OpKind::Merge { activation } => {
            let parts: Vec<&[T]> = args.iter().map(|a| a.0).collect();
            kernels::merge(&parts, activation)?
        }
        OpKind::Gather { .. } | OpKind::Softmax {} => unreachable!("handled by run_node"),
    })
}

fn gather<T: Copy>(table: &[T], td: &[usize], axis: usize, idx: &[i32]) -> Result<Vec<T>, i64> {
    let (outer, len, inner) = kernels::around(td, axis);
    let mut out = Vec::with_capacity(outer * idx.len() * inner);
    for o in 0..outer {
        for &i in idx {
            let k = usize::try_from(i)
                .ok()
                .filter(|&k| k < len)
                .ok_or(i as i64)?;
            let base = (o * len + k) * inner;
            out.extend_from_slice(&table[base..base + inner]);
        }
    }
    Ok(out)
}

fn run_node(
    id: &str,
    op: &OpKind,
    args: &[&TensorValue],
    out: &TensorDef,
) -> Result<TensorValue, ExecError> {
    let overflow = |_| ExecError::NumericOverflow(id.to_owned());
    let dims = out.shape.dims();
    let elements = match op {
        OpKind::Gather { axis } => {
            let idx = args[1].as_int().ok_or_else(|| ExecError::Unsupported {
                node: id.to_owned(),
                reason: "gather indices must be integers".into(),
            })?;
            let td = args[0].shape.dims();
            let oob = |index| ExecError::IndexOutOfRange {
                node: id.to_owned(),
                index,
            };
            match &args[0].elements {
                Elements::F32(t) => Elements::F32(gather(t, td, *axis, idx).map_err(oob)?),
                Elements::Int(t) => Elements::Int(gather(t, td, *axis, idx).map_err(oob)?),
            }
        }
        OpKind::Softmax {} => match &args[0].elements {
            Elements::F32(x) => Elements::F32(kernels::softmax(
                x,
                *args[0].shape.dims().last().unwrap_or(&1),
            )),
            Elements::Int(_) => {
                return Err(ExecError::Unsupported {
                    node: id.to_owned(),
                    reason: "softmax needs f32 input".into(),
                })
            }
        },
        _ => {
            if args
                .iter()
                .any(|a| matches!(a.elements, Elements::F32(_)) != (args[0].dtype == DataType::F32))
            {
                return Err(ExecError::Unsupported {
                    node: id.to_owned(),
                    reason: "mixed element types".into(),
                });
            }
            match &args[0].elements {
                Elements::F32(_) => {
                    let a: Vec<(&[f32], &[usize])> = args
                        .iter()
                        .map(|v| (v.as_f32().unwrap(), v.shape.dims()))
                        .collect();
                    Elements::F32(compute(op, &a, dims).map_err(overflow)?)
                }
                Elements::Int(_) => {
                    let a: Vec<(&[i32], &[usize])> = args
                        .iter()
                        .map(|v| (v.as_int().unwrap(), v.shape.dims()))
                        .collect();
                    Elements::Int(compute(op, &a, dims).map_err(overflow)?)
                }
            }
        }
    };
    TensorValue::new(out.shape.clone(), out.dtype, elements)
        .ok_or_else(|| ExecError::NumericOverflow(id.to_owned()))
}
