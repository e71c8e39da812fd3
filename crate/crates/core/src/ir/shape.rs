//! Shape and dtype inference.

use super::{DataType, Graph, GraphError, Node, OpKind, Padding, TensorDef, TensorShape};

fn conv_extent(
    input: usize,
    pad_lo: usize,
    pad_hi: usize,
    kernel: usize,
    stride: usize,
) -> Option<usize> {
    let padded = input + pad_lo + pad_hi;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn spatial(
    x: &TensorShape,
    kernel: [usize; 2],
    strides: [usize; 2],
    pad: Padding,
) -> Result<(usize, usize), String> {
    let h = conv_extent(x.dim(1), pad.top, pad.bottom, kernel[0], strides[0])
        .ok_or_else(|| format!("window {}x{} does not fit input {x}", kernel[0], kernel[1]))?;
    let w = conv_extent(x.dim(2), pad.left, pad.right, kernel[1], strides[1])
        .ok_or_else(|| format!("window {}x{} does not fit input {x}", kernel[0], kernel[1]))?;
    Ok((h, w))
}

fn require_rank(t: &TensorDef, rank: usize) -> Result<(), String> {
    if t.shape.rank() != rank {
        return Err(format!(
            "tensor `{}` must have rank {rank}, has shape {}",
            t.id, t.shape
        ));
    }
    Ok(())
}

fn mac_dtype(x: &TensorDef, w: &TensorDef) -> Result<DataType, String> {
    if x.dtype.is_integer() != w.dtype.is_integer() {
        return Err(format!(
            "cannot mix {} input with {} weights",
            x.dtype, w.dtype
        ));
    }
    Ok(x.dtype.accumulator())
}

/// Output shape and dtype of `node` given its input tensors.
pub fn infer_node(node: &Node, inputs: &[&TensorDef]) -> Result<(TensorShape, DataType), String> {
    let (min, max) = node.op.arity();
    if inputs.len() < min || inputs.len() > max {
        return Err(format!(
            "{} takes {min}..{max} inputs, got {}",
            node.op.name(),
            inputs.len()
        ));
    }
    if let Some(t) = inputs.iter().find(|t| !t.shape.is_known()) {
        return Err(format!("input `{}` has no shape", t.id));
    }
    let x = inputs[0];
    match &node.op {
        OpKind::Conv2d {
            strides,
            padding,
            kernel,
        } => {
            let w = inputs[1];
            require_rank(x, 4)?;
            require_rank(w, 4)?;
            let wd = w.shape.dims();
            if wd[1] != kernel[0] || wd[2] != kernel[1] {
                return Err(format!(
                    "kernel attribute {kernel:?} disagrees with weight {}",
                    w.shape
                ));
            }
            if wd[3] != x.shape.dim(3) {
                return Err(format!(
                    "weight {} expects {} input channels, input is {}",
                    w.shape, wd[3], x.shape
                ));
            }
            let (h, wo) = spatial(&x.shape, *kernel, *strides, *padding)?;
            Ok((TensorShape::new([1, h, wo, wd[0]]), mac_dtype(x, w)?))
        }
        OpKind::DepthwiseConv2d { strides, padding } => {
            let w = inputs[1];
            require_rank(x, 4)?;
            require_rank(w, 4)?;
            let wd = w.shape.dims();
            if wd[0] != 1 || wd[3] != x.shape.dim(3) {
                return Err(format!(
                    "depthwise weight {} does not match input {}",
                    w.shape, x.shape
                ));
            }
            let (h, wo) = spatial(&x.shape, [wd[1], wd[2]], *strides, *padding)?;
            Ok((TensorShape::new([1, h, wo, wd[3]]), mac_dtype(x, w)?))
        }
        OpKind::Dense {} => {
            let w = inputs[1];
            require_rank(w, 2)?;
            let last = x.shape.rank() - 1;
            if w.shape.dim(1) != x.shape.dim(last) {
                return Err(format!(
                    "dense weight {} does not match input {}",
                    w.shape, x.shape
                ));
            }
            Ok((x.shape.with_dim(last, w.shape.dim(0)), mac_dtype(x, w)?))
        }
        OpKind::BiasAdd {} => {
            let b = inputs[1];
            require_rank(b, 1)?;
            if b.shape.dim(0) != x.shape.dim(x.shape.rank() - 1) {
                return Err(format!("bias {} does not match input {}", b.shape, x.shape));
            }
            Ok((x.shape.clone(), mac_dtype(x, b)?))
        }
        OpKind::Activation { .. } => Ok((x.shape.clone(), x.dtype)),
        OpKind::MaxPool { window, strides } | OpKind::AvgPool { window, strides } => {
            require_rank(x, 4)?;
            let (h, w) = spatial(&x.shape, *window, *strides, Padding::ZERO)?;
            Ok((TensorShape::new([1, h, w, x.shape.dim(3)]), x.dtype))
        }
        OpKind::Pad { padding, .. } => {
            require_rank(x, 4)?;
            let d = x.shape.dims();
            Ok((
                TensorShape::new([
                    d[0],
                    d[1] + padding.top + padding.bottom,
                    d[2] + padding.left + padding.right,
                    d[3],
                ]),
                x.dtype,
            ))
        }
        OpKind::Add {} => {
            let y = inputs[1];
            if x.shape != y.shape || x.dtype != y.dtype {
                return Err(format!(
                    "add operands differ: {} {} vs {} {}",
                    x.shape, x.dtype, y.shape, y.dtype
                ));
            }
            Ok((x.shape.clone(), x.dtype))
        }
        OpKind::Gather { axis } => {
            let (table, idx) = (inputs[0], inputs[1]);
            if *axis >= table.shape.rank() {
                return Err(format!(
                    "gather axis {axis} out of range for {}",
                    table.shape
                ));
            }
            if !idx.dtype.is_integer() {
                return Err("gather indices must be integers".into());
            }
            let td = table.shape.dims();
            let mut dims = td[..*axis].to_vec();
            dims.extend_from_slice(idx.shape.dims());
            dims.extend_from_slice(&td[axis + 1..]);
            Ok((TensorShape::new(dims), table.dtype))
        }
        OpKind::ReduceMean { axis, count } => {
            if *axis >= x.shape.rank() || x.shape.rank() < 2 {
                return Err(format!("cannot reduce axis {axis} of {}", x.shape));
            }
            if *count == Some(0) {
                return Err("reduce_mean count must be positive".into());
            }
            let mut dims = x.shape.dims().to_vec();
            dims.remove(*axis);
            Ok((TensorShape::new(dims), x.dtype))
        }
        OpKind::Softmax {} => {
            if x.dtype != DataType::F32 {
                return Err("softmax requires f32".into());
            }
            Ok((x.shape.clone(), x.dtype))
        }
        OpKind::Slice { axis, begin, end } => {
            if *axis >= x.shape.rank() || begin >= end || *end > x.shape.dim(*axis) {
                return Err(format!(
                    "slice {begin}..{end} on axis {axis} invalid for {}",
                    x.shape
                ));
            }
            Ok((x.shape.with_dim(*axis, end - begin), x.dtype))
        }
        OpKind::Concat { axis } => {
            if *axis >= x.shape.rank() {
                return Err(format!("concat axis {axis} out of range for {}", x.shape));
            }
            let mut total = 0;
            for t in inputs {
                let compatible = t.dtype == x.dtype
                    && t.shape.rank() == x.shape.rank()
                    && (0..x.shape.rank()).all(|a| a == *axis || t.shape.dim(a) == x.shape.dim(a));
                if !compatible {
                    return Err(format!(
                        "concat operand `{}` {} incompatible with {}",
                        t.id, t.shape, x.shape
                    ));
                }
                total += t.shape.dim(*axis);
            }
            Ok((x.shape.with_dim(*axis, total), x.dtype))
        }
        OpKind::Merge { .. } => {
            if let Some(t) = inputs
                .iter()
                .find(|t| t.shape != x.shape || t.dtype != x.dtype)
            {
                return Err(format!("merge operand `{}` differs from `{}`", t.id, x.id));
            }
            Ok((x.shape.clone(), x.dtype))
        }
    }
}

/// Checks every node output against inference and fills in unknown shapes.
///
/// Inference is idempotent: running it on its own result returns an
/// identical graph.
pub fn infer_shapes(graph: &Graph) -> Result<Graph, GraphError> {
    let mut out = graph.clone();
    let order: Vec<String> = graph
        .topological_order()?
        .into_iter()
        .map(str::to_owned)
        .collect();
    for node_id in order {
        let node = out.node(&node_id).expect("node from order").clone();
        let mut inputs = Vec::with_capacity(node.inputs.len());
        for t in &node.inputs {
            let def = out.tensor(t).ok_or_else(|| GraphError::UnknownTensor {
                node: node.id.clone(),
                tensor: t.clone(),
            })?;
            inputs.push(def);
        }
        let (shape, dtype) =
            infer_node(&node, &inputs).map_err(|reason| GraphError::InvalidOp {
                node: node.id.clone(),
                reason,
            })?;
        if node.outputs.len() != 1 {
            return Err(GraphError::InvalidOp {
                node: node.id.clone(),
                reason: format!("expected exactly one output, found {}", node.outputs.len()),
            });
        }
        let out_id = node.output();
        let def = out
            .tensor_mut(out_id)
            .ok_or_else(|| GraphError::UnknownTensor {
                node: node.id.clone(),
                tensor: out_id.to_owned(),
            })?;
        if def.shape.is_known() && def.shape != shape {
            return Err(GraphError::ShapeMismatch {
                node: node.id.clone(),
                tensor: def.id.clone(),
                expected: shape,
                found: def.shape.clone(),
            });
        }
        if def.dtype != dtype {
            return Err(GraphError::DTypeMismatch {
                node: node.id.clone(),
                tensor: def.id.clone(),
                expected: dtype,
                found: def.dtype,
            });
        }
        def.shape = shape;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use crate::ir::*;

    fn single(op: OpKind, inputs: Vec<TensorDef>, out_dtype: DataType) -> Graph {
        let mut g = Graph::new();
        let ids: Vec<String> = inputs.iter().map(|t| t.id.clone()).collect();
        for t in inputs {
            g.add_tensor(t).unwrap();
        }
        g.add_tensor(TensorDef::new(
            "out",
            TensorShape::unknown(),
            out_dtype,
            TensorKind::Output,
        ))
        .unwrap();
        g.add_node(Node::new("n", op, ids, "out")).unwrap();
        g
    }

    fn out_shape(g: &Graph) -> Vec<usize> {
        infer_shapes(g)
            .unwrap()
            .tensor("out")
            .unwrap()
            .shape
            .dims()
            .to_vec()
    }

    #[test]
    fn conv_same_padding() {
        let g = single(
            OpKind::conv2d([3, 3], [1, 1], Padding::uniform(1)),
            vec![
                TensorDef::new("x", [1, 8, 8, 3], DataType::F32, TensorKind::Input),
                TensorDef::weight_f32("w", [16, 3, 3, 3], &[0.0; 16 * 27]),
            ],
            DataType::F32,
        );
        assert_eq!(out_shape(&g), vec![1, 8, 8, 16]);
    }

    #[test]
    fn dense_shape() {
        let g = single(
            OpKind::Dense {},
            vec![
                TensorDef::new("x", [1, 64], DataType::F32, TensorKind::Input),
                TensorDef::weight_f32("w", [10, 64], &[0.0; 640]),
            ],
            DataType::F32,
        );
        assert_eq!(out_shape(&g), vec![1, 10]);
    }

    #[test]
    fn gather_then_mean() {
        let mut g = Graph::new();
        g.add_tensor(TensorDef::weight_f32(
            "table",
            [1000, 16],
            &vec![0.0; 16000],
        ))
        .unwrap();
        g.add_tensor(TensorDef::new(
            "idx",
            [1, 32],
            DataType::I32,
            TensorKind::Input,
        ))
        .unwrap();
        g.add_tensor(TensorDef::new(
            "emb",
            TensorShape::unknown(),
            DataType::F32,
            TensorKind::Intermediate,
        ))
        .unwrap();
        g.add_tensor(TensorDef::new(
            "mean",
            TensorShape::unknown(),
            DataType::F32,
            TensorKind::Output,
        ))
        .unwrap();
        g.add_node(Node::new(
            "gather",
            OpKind::Gather { axis: 0 },
            ["table", "idx"],
            "emb",
        ))
        .unwrap();
        g.add_node(Node::new(
            "mean",
            OpKind::ReduceMean {
                axis: 1,
                count: None,
            },
            ["emb"],
            "mean",
        ))
        .unwrap();
        let g = infer_shapes(&g).unwrap();
        assert_eq!(g.tensor("emb").unwrap().shape.dims(), &[1, 32, 16]);
        assert_eq!(g.tensor("mean").unwrap().shape.dims(), &[1, 16]);
    }

    #[test]
    fn integer_conv_accumulates_in_i32() {
        let g = single(
            OpKind::conv2d([1, 1], [1, 1], Padding::ZERO),
            vec![
                TensorDef::new("x", [1, 2, 2, 1], DataType::I8, TensorKind::Input),
                TensorDef::weight_i8("w", [2, 1, 1, 1], &[1, 2]),
            ],
            DataType::I32,
        );
        assert_eq!(out_shape(&g), vec![1, 2, 2, 2]);
    }

    #[test]
    fn mismatch_reported() {
        let mut g = single(
            OpKind::Dense {},
            vec![
                TensorDef::new("x", [1, 4], DataType::F32, TensorKind::Input),
                TensorDef::weight_f32("w", [2, 4], &[0.0; 8]),
            ],
            DataType::F32,
        );
        g.tensor_mut("out").unwrap().shape = TensorShape::new([1, 3]);
        match infer_shapes(&g) {
            Err(GraphError::ShapeMismatch {
                node,
                expected,
                found,
                ..
            }) => {
                assert_eq!(node, "n");
                assert_eq!(expected.dims(), &[1, 2]);
                assert_eq!(found.dims(), &[1, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_tensor_reported() {
        let mut g = Graph::new();
        g.add_tensor(TensorDef::new("y", [1], DataType::F32, TensorKind::Output))
            .unwrap();
        g.add_node(Node::new("n", OpKind::relu(), ["ghost"], "y"))
            .unwrap();
        assert!(matches!(
            infer_shapes(&g),
            Err(GraphError::UnknownTensor { .. })
        ));
    }

    #[test]
    fn idempotent() {
        let g = single(
            OpKind::MaxPool {
                window: [2, 2],
                strides: [2, 2],
            },
            vec![TensorDef::new(
                "x",
                [1, 8, 6, 3],
                DataType::F32,
                TensorKind::Input,
            )],
            DataType::F32,
        );
        let once = infer_shapes(&g).unwrap();
        assert_eq!(once.tensor("out").unwrap().shape.dims(), &[1, 4, 3, 3]);
        assert_eq!(infer_shapes(&once).unwrap(), once);
    }
}
