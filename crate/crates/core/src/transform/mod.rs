//! Rewriting a graph according to a [`TilingConfig`].
//!
//! Every path node is replaced by one replica per partition. Replicas of a
//! fan-out read the whole input and produce a slice of the channels; replicas
//! of a fan-in read a channel slice and produce a partial result that a
//! `Merge` node sums in ascending partition order. Feature-map replicas read
//! a spatial window of their input, halo included, and keep border padding
//! only where the window touches the tensor border.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::discovery::{
    fan_in_capable, fan_out_capable, ffmt_capable, part_capable, BlockKind, PartitionKind,
    TilingConfig,
};
use crate::ir::{
    infer_shapes, Activation, Graph, GraphError, Node, OpKind, Padding, TensorDef, TensorKind,
    TensorShape,
};

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("invalid tiling config: {0}")]
    InvalidConfig(String),
    #[error("cannot split extent {extent} of `{tensor}` into {partitions} partitions")]
    NonDivisibleExtent {
        tensor: String,
        extent: usize,
        partitions: usize,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn invalid(msg: impl Into<String>) -> TransformError {
    TransformError::InvalidConfig(msg.into())
}

/// Half-open index range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Span {
    pub begin: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.begin
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.begin
    }
}

/// The part of a tensor one partition covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Region {
    /// A range of the last axis.
    Depth(Span),
    /// Rows and columns of an NHWC tensor, all channels.
    Tile { rows: Span, cols: Span },
}

/// Per-partition regions of every tensor on a tiling path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PartitionSpec {
    pub kind: PartitionKind,
    pub count: usize,
    /// Data operand of each path node, in path order.
    pub inputs: Vec<String>,
    /// Output of each path node, in path order.
    pub outputs: Vec<String>,
    /// Region per partition of every partitioned tensor. Tensors read or
    /// written whole by all partitions are absent.
    pub regions: BTreeMap<String, Vec<Region>>,
    /// Feature-map tiling only: spatial padding of each replica of the
    /// convolutions and pad nodes on the path.
    pub paddings: BTreeMap<String, Vec<Padding>>,
}

/// Splits `extent` into `n` contiguous spans; the first `extent % n` spans
/// are one element longer.
pub fn split_extent(extent: usize, n: usize) -> Option<Vec<Span>> {
    if n == 0 || n > extent {
        return None;
    }
    let (base, extra) = (extent / n, extent % n);
    let mut begin = 0;
    Some(
        (0..n)
            .map(|p| {
                let end = begin + base + usize::from(p < extra);
                let s = Span { begin, end };
                begin = end;
                s
            })
            .collect(),
    )
}

/// `base` if no node or tensor of `graph` uses it, else `base_k` for the
/// smallest free `k`.
pub fn fresh_id(graph: &Graph, base: &str) -> String {
    let taken = |id: &str| graph.contains_node(id) || graph.contains_tensor(id);
    if !taken(base) {
        return base.to_owned();
    }
    (1..)
        .map(|k| format!("{base}_{k}"))
        .find(|id| !taken(id))
        .expect("unbounded suffix")
}

/// Input window of a sliding-window op for output positions `out`, plus the
/// padding the replica needs on each side. `None` if the window lies
/// entirely in the padding.
fn window_back(
    out: Span,
    extent: usize,
    kernel: usize,
    stride: usize,
    pad_lo: usize,
) -> Option<(Span, usize, usize)> {
    let a = (out.begin * stride) as isize - pad_lo as isize;
    let b = ((out.end - 1) * stride + kernel) as isize - pad_lo as isize;
    let i0 = a.max(0);
    let i1 = b.min(extent as isize);
    if i0 >= i1 {
        return None;
    }
    Some((
        Span {
            begin: i0 as usize,
            end: i1 as usize,
        },
        (i0 - a) as usize,
        (b - i1) as usize,
    ))
}

fn check_block(
    graph: &Graph,
    node: &Node,
    block: BlockKind,
    kind: PartitionKind,
) -> Result<(), TransformError> {
    let ok = match block {
        BlockKind::FdtFanOut => kind == PartitionKind::PdD && fan_out_capable(graph, node),
        BlockKind::FdtFanIn => kind == PartitionKind::PdD && fan_in_capable(graph, node),
        BlockKind::Part => part_capable(graph, node, kind),
        BlockKind::Ffmt => kind == PartitionKind::PdFm && ffmt_capable(node),
        BlockKind::Split | BlockKind::ConcatBlock => false,
    };
    if ok {
        Ok(())
    } else {
        Err(invalid(format!(
            "node `{}` ({}) cannot be a {block:?} block",
            node.id,
            node.op.name()
        )))
    }
}

fn known<'g>(graph: &'g Graph, id: &str) -> Result<&'g TensorDef, TransformError> {
    let t = graph
        .tensor(id)
        .ok_or_else(|| invalid(format!("unknown tensor `{id}`")))?;
    if !t.shape.is_known() {
        return Err(invalid(format!("tensor `{id}` has no inferred shape")));
    }
    Ok(t)
}

/// Checks `config` against `graph` and computes the partition regions.
pub fn plan_partitions(
    graph: &Graph,
    config: &TilingConfig,
) -> Result<PartitionSpec, TransformError> {
    config.check().map_err(TransformError::InvalidConfig)?;
    let index = graph.index();
    let mut nodes = Vec::with_capacity(config.path.len());
    for id in &config.path {
        let node = graph
            .node(id)
            .ok_or_else(|| invalid(format!("unknown node `{id}`")))?;
        check_block(graph, node, config.blocks[id], config.kind)?;
        nodes.push(node);
    }
    let inputs: Vec<String> = nodes
        .iter()
        .map(|n| n.inputs[n.op.data_port()].clone())
        .collect();
    let outputs: Vec<String> = nodes.iter().map(|n| n.output().to_owned()).collect();
    for (i, node) in nodes.iter().enumerate().skip(1) {
        let prev = &outputs[i - 1];
        if inputs[i] != *prev || node.inputs.iter().filter(|t| *t == prev).count() != 1 {
            return Err(invalid(format!(
                "`{}` does not consume `{prev}` as its data operand",
                node.id
            )));
        }
    }
    // tensors strictly inside the path exist only per partition
    for t in &outputs[..outputs.len() - 1] {
        let def = known(graph, t)?;
        if def.kind != TensorKind::Intermediate || index.consumers(t).len() != 1 {
            return Err(invalid(format!("`{t}` is model I/O or leaves the path")));
        }
    }
    if !outputs[..outputs.len() - 1].contains(&config.critical_buffer) {
        return Err(invalid(format!(
            "`{}` is not inside the path",
            config.critical_buffer
        )));
    }
    match config.kind {
        PartitionKind::PdD => plan_depthwise(graph, config, inputs, outputs),
        PartitionKind::PdFm => plan_feature_map(graph, config, &nodes, inputs, outputs),
    }
}

fn plan_depthwise(
    graph: &Graph,
    config: &TilingConfig,
    inputs: Vec<String>,
    outputs: Vec<String>,
) -> Result<PartitionSpec, TransformError> {
    let mut partitioned: Vec<&str> = Vec::new();
    if config.entry == BlockKind::Split {
        partitioned.push(&inputs[0]);
    }
    let inner = if config.exit == BlockKind::FdtFanIn {
        outputs.len() - 1
    } else {
        outputs.len()
    };
    partitioned.extend(outputs[..inner].iter().map(String::as_str));

    let crit = known(graph, &config.critical_buffer)?;
    let extent = crit.shape.dim(crit.shape.rank() - 1);
    for t in &partitioned {
        let def = known(graph, t)?;
        if def.shape.dim(def.shape.rank() - 1) != extent {
            return Err(invalid(format!(
                "`{t}` does not carry the {extent} partitioned channels"
            )));
        }
    }
    let spans = split_extent(extent, config.partitions).ok_or_else(|| {
        TransformError::NonDivisibleExtent {
            tensor: config.critical_buffer.clone(),
            extent,
            partitions: config.partitions,
        }
    })?;
    let regions: Vec<Region> = spans.into_iter().map(Region::Depth).collect();
    Ok(PartitionSpec {
        kind: PartitionKind::PdD,
        count: config.partitions,
        regions: partitioned
            .iter()
            .map(|t| (t.to_string(), regions.clone()))
            .collect(),
        inputs,
        outputs,
        paddings: BTreeMap::new(),
    })
}

/// Kernel, stride and leading padding along rows and columns.
fn window_of(graph: &Graph, node: &Node) -> Option<([usize; 2], [usize; 2], Padding)> {
    match &node.op {
        OpKind::Conv2d {
            kernel,
            strides,
            padding,
        } => Some((*kernel, *strides, *padding)),
        OpKind::DepthwiseConv2d { strides, padding } => {
            let w = graph.tensor(&node.inputs[1])?;
            Some(([w.shape.dim(1), w.shape.dim(2)], *strides, *padding))
        }
        OpKind::MaxPool { window, strides } | OpKind::AvgPool { window, strides } => {
            Some((*window, *strides, Padding::ZERO))
        }
        OpKind::Pad { padding, .. } => Some(([1, 1], [1, 1], *padding)),
        _ => None,
    }
}

fn plan_feature_map(
    graph: &Graph,
    config: &TilingConfig,
    nodes: &[&Node],
    inputs: Vec<String>,
    outputs: Vec<String>,
) -> Result<PartitionSpec, TransformError> {
    let g = config.partitions;
    for t in inputs.iter().chain(&outputs) {
        if known(graph, t)?.shape.rank() != 4 {
            return Err(invalid(format!("`{t}` is not an NHWC feature map")));
        }
    }
    let last = known(graph, outputs.last().expect("non-empty path"))?;
    let grid = |axis: usize| {
        split_extent(last.shape.dim(axis), g).ok_or_else(|| TransformError::NonDivisibleExtent {
            tensor: last.id.clone(),
            extent: last.shape.dim(axis),
            partitions: g,
        })
    };
    let (rows, cols) = (grid(1)?, grid(2)?);
    let mut current: Vec<(Span, Span)> = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect();

    let mut regions = BTreeMap::new();
    let mut paddings = BTreeMap::new();
    let tile = |v: &[(Span, Span)]| {
        v.iter()
            .map(|&(rows, cols)| Region::Tile { rows, cols })
            .collect::<Vec<_>>()
    };
    regions.insert(last.id.clone(), tile(&current));
    for (i, node) in nodes.iter().enumerate().rev() {
        let input = known(graph, &inputs[i])?;
        if let Some((kernel, strides, pad)) = window_of(graph, node) {
            let mut next = Vec::with_capacity(current.len());
            let mut pads = Vec::with_capacity(current.len());
            for &(r, c) in &current {
                let rb = window_back(r, input.shape.dim(1), kernel[0], strides[0], pad.top);
                let cb = window_back(c, input.shape.dim(2), kernel[1], strides[1], pad.left);
                let (Some((r_in, top, bottom)), Some((c_in, left, right))) = (rb, cb) else {
                    return Err(invalid(format!(
                        "a tile of `{}` reads only padding",
                        node.id
                    )));
                };
                let p = Padding {
                    top,
                    bottom,
                    left,
                    right,
                };
                if matches!(node.op, OpKind::MaxPool { .. } | OpKind::AvgPool { .. })
                    && p != Padding::ZERO
                {
                    return Err(invalid(format!(
                        "pooling tile of `{}` would need padding",
                        node.id
                    )));
                }
                next.push((r_in, c_in));
                pads.push(p);
            }
            if matches!(
                node.op,
                OpKind::Conv2d { .. } | OpKind::DepthwiseConv2d { .. } | OpKind::Pad { .. }
            ) {
                paddings.insert(node.id.clone(), pads);
            }
            current = next;
        }
        if i > 0 || config.entry == BlockKind::Split {
            regions.insert(inputs[i].clone(), tile(&current));
        }
    }
    Ok(PartitionSpec {
        kind: PartitionKind::PdFm,
        count: g * g,
        inputs,
        outputs,
        regions,
        paddings,
    })
}

/// Copy of weight `def` restricted to `span` on `axis`.
fn slice_weight(def: &TensorDef, axis: usize, span: Span, id: String) -> TensorDef {
    let dims = def.shape.dims();
    let width = def.dtype.byte_width();
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product::<usize>() * width;
    let data = def.data.as_deref().unwrap_or_default();
    let mut out = Vec::with_capacity(outer * span.len() * inner);
    for o in 0..outer {
        let base = o * dims[axis];
        out.extend_from_slice(&data[(base + span.begin) * inner..(base + span.end) * inner]);
    }
    TensorDef {
        id,
        shape: def.shape.with_dim(axis, span.len()),
        dtype: def.dtype,
        kind: TensorKind::Weight,
        data: Some(out),
    }
}

struct Rewriter<'a> {
    src: &'a Graph,
    out: Graph,
}

impl Rewriter<'_> {
    fn add_tensor(&mut self, base: &str, like: &TensorDef) -> Result<String, TransformError> {
        let id = fresh_id(&self.out, base);
        self.out.add_tensor(TensorDef::new(
            id.clone(),
            TensorShape::unknown(),
            like.dtype,
            TensorKind::Intermediate,
        ))?;
        Ok(id)
    }

    fn add_node(
        &mut self,
        base: &str,
        op: OpKind,
        inputs: Vec<String>,
        output: &str,
    ) -> Result<String, TransformError> {
        let id = fresh_id(&self.out, base);
        self.out
            .add_node(Node::new(id.clone(), op, inputs, output))?;
        Ok(id)
    }

    fn weight(
        &mut self,
        src: &str,
        axis: usize,
        span: Span,
        base: &str,
    ) -> Result<String, TransformError> {
        let def = self.src.tensor(src).expect("validated weight");
        if def.shape.dim(axis) == span.len() {
            return Ok(src.to_owned());
        }
        let id = fresh_id(&self.out, base);
        self.out
            .add_tensor(slice_weight(def, axis, span, id.clone()))?;
        Ok(id)
    }

    /// Restricts a tensor to `region`, with constant slicing for weights and
    /// `Slice` nodes otherwise. Axes already whole are left alone.
    fn restrict(
        &mut self,
        src: &str,
        region: Region,
        base: &str,
    ) -> Result<String, TransformError> {
        let def = self.src.tensor(src).expect("validated tensor");
        let rank = def.shape.rank();
        let cuts: Vec<(usize, Span)> = match region {
            Region::Depth(s) => vec![(rank - 1, s)],
            Region::Tile { rows, cols } => vec![(1, rows), (2, cols)],
        };
        let cuts: Vec<(usize, Span)> = cuts
            .into_iter()
            .filter(|(a, s)| s.len() != def.shape.dim(*a))
            .collect();
        if def.kind == TensorKind::Weight {
            let mut current = def.clone();
            for (axis, span) in &cuts {
                current = slice_weight(&current, *axis, *span, String::new());
            }
            if cuts.is_empty() {
                return Ok(src.to_owned());
            }
            let id = fresh_id(&self.out, base);
            current.id = id.clone();
            self.out.add_tensor(current)?;
            return Ok(id);
        }
        let mut current = src.to_owned();
        for (k, (axis, span)) in cuts.iter().enumerate() {
            let suffix = if cuts.len() > 1 {
                [".rows", ".cols"][k]
            } else {
                ""
            };
            let t = self.add_tensor(&format!("{base}{suffix}"), def)?;
            let op = OpKind::Slice {
                axis: *axis,
                begin: span.begin,
                end: span.end,
            };
            self.add_node(&format!("{base}{suffix}.slice"), op, vec![current], &t)?;
            current = t;
        }
        Ok(current)
    }
}

/// Applies `config` to `graph`, returning a validated, shape-inferred graph
/// that computes the same model outputs.
pub fn apply_tiling(graph: &Graph, config: &TilingConfig) -> Result<Graph, TransformError> {
    let spec = plan_partitions(graph, config)?;
    let last = config.path.len() - 1;
    let mut rw = Rewriter {
        src: graph,
        out: graph.clone(),
    };
    for (id, t) in config.path.iter().zip(&spec.outputs[..last]) {
        rw.out.remove_node(id);
        rw.out.remove_tensor(t);
    }
    let last_node = graph.node(&config.path[last]).expect("validated path");
    rw.out.remove_node(&last_node.id);
    let final_out = graph.tensor(&spec.outputs[last]).expect("validated tensor");

    let mut tails = Vec::with_capacity(spec.count);
    for p in 0..spec.count {
        let mut data = spec.inputs[0].clone();
        if config.entry == BlockKind::Split {
            let region = spec.regions[&spec.inputs[0]][p];
            data = rw.restrict(&spec.inputs[0], region, &format!("{}.p{p}", spec.inputs[0]))?;
        }
        for (i, id) in config.path.iter().enumerate() {
            let node = graph.node(id).expect("validated path");
            let out_def = graph.tensor(&spec.outputs[i]).expect("validated tensor");
            let output = match (i == last, config.exit) {
                (true, BlockKind::FdtFanIn) => {
                    rw.add_tensor(&format!("{}.partial{p}", out_def.id), out_def)?
                }
                _ => rw.add_tensor(&format!("{}.p{p}", out_def.id), out_def)?,
            };
            let replica = replicate(&mut rw, &spec, config, node, p, data)?;
            let rid = rw.add_node(&format!("{id}.p{p}"), replica.op, replica.inputs, &output)?;
            let n = rw.out.node_mut(&rid).expect("just added");
            n.no_fuse = node.no_fuse || i == last;
            data = output;
        }
        tails.push(data);
    }
    match config.exit {
        BlockKind::FdtFanIn => {
            rw.add_node(
                &format!("{}.merge", last_node.id),
                OpKind::Merge {
                    activation: Activation::None,
                },
                tails,
                &final_out.id,
            )?;
        }
        _ => concat_tiles(&mut rw, &spec, last_node, final_out, tails)?,
    }

    // drop weights that only the replaced nodes read
    let used: std::collections::HashSet<&str> = rw
        .out
        .nodes()
        .flat_map(|n| n.inputs.iter().map(String::as_str))
        .collect();
    let orphans: Vec<String> = graph
        .tensors()
        .filter(|t| t.kind == TensorKind::Weight && !used.contains(t.id.as_str()))
        .map(|t| t.id.clone())
        .collect();
    for id in orphans {
        rw.out.remove_tensor(&id);
    }
    let out = infer_shapes(&rw.out)?;
    out.check()?;
    Ok(out)
}

fn concat_tiles(
    rw: &mut Rewriter<'_>,
    spec: &PartitionSpec,
    last_node: &Node,
    final_out: &TensorDef,
    tails: Vec<String>,
) -> Result<(), TransformError> {
    let base = format!("{}.concat", last_node.id);
    if spec.kind == PartitionKind::PdD {
        let axis = final_out.shape.rank() - 1;
        rw.add_node(&base, OpKind::Concat { axis }, tails, &final_out.id)?;
        return Ok(());
    }
    let g = (spec.count as f64).sqrt().round() as usize;
    let mut rows = Vec::with_capacity(g);
    for (i, row) in tails.chunks(g).enumerate() {
        let t = rw.add_tensor(&format!("{}.row{i}", final_out.id), final_out)?;
        rw.add_node(
            &format!("{base}.row{i}"),
            OpKind::Concat { axis: 2 },
            row.to_vec(),
            &t,
        )?;
        rows.push(t);
    }
    rw.add_node(&base, OpKind::Concat { axis: 1 }, rows, &final_out.id)?;
    Ok(())
}

struct Replica {
    op: OpKind,
    inputs: Vec<String>,
}

fn replicate(
    rw: &mut Rewriter<'_>,
    spec: &PartitionSpec,
    config: &TilingConfig,
    node: &Node,
    p: usize,
    data: String,
) -> Result<Replica, TransformError> {
    let block = config.blocks[&node.id];
    let port = node.op.data_port();
    let mut inputs = node.inputs.clone();
    inputs[port] = data;
    let mut op = node.op.clone();
    let output = node.output();
    let input = &node.inputs[port];
    let depth = |t: &str| match spec.regions.get(t).map(|r| r[p]) {
        Some(Region::Depth(s)) => Some(s),
        _ => None,
    };
    let wname = |w: &str| format!("{w}.p{p}");
    match (spec.kind, block) {
        (PartitionKind::PdD, BlockKind::FdtFanOut) => {
            let span = depth(output).expect("fan-out output is partitioned");
            match node.op {
                OpKind::Gather { .. } => {
                    let table = &node.inputs[0];
                    let axis = rw.src.tensor(table).expect("validated").shape.rank() - 1;
                    inputs[0] = rw.weight(table, axis, span, &wname(table))?;
                }
                _ => inputs[1] = rw.weight(&node.inputs[1], 0, span, &wname(&node.inputs[1]))?,
            }
        }
        (PartitionKind::PdD, BlockKind::FdtFanIn) => {
            let span = depth(input).expect("fan-in input is partitioned");
            match &mut op {
                OpKind::Conv2d { .. } => {
                    inputs[1] = rw.weight(&node.inputs[1], 3, span, &wname(&node.inputs[1]))?
                }
                OpKind::Dense {} => {
                    inputs[1] = rw.weight(&node.inputs[1], 1, span, &wname(&node.inputs[1]))?
                }
                OpKind::ReduceMean { axis, count } => {
                    let full = rw.src.tensor(input).expect("validated").shape.dim(*axis);
                    *count = count.or(Some(full));
                }
                _ => unreachable!("checked fan-in op"),
            }
        }
        (PartitionKind::PdD, _) => {
            let span = depth(output).expect("part output is partitioned");
            match node.op {
                OpKind::BiasAdd {} => {
                    inputs[1] = rw.weight(&node.inputs[1], 0, span, &wname(&node.inputs[1]))?
                }
                OpKind::DepthwiseConv2d { .. } => {
                    inputs[1] = rw.weight(&node.inputs[1], 3, span, &wname(&node.inputs[1]))?
                }
                OpKind::Add {} => {
                    let side = &node.inputs[1 - port];
                    inputs[1 - port] = rw.restrict(
                        side,
                        Region::Depth(span),
                        &format!("{side}.{}.p{p}", node.id),
                    )?;
                }
                _ => {}
            }
        }
        (PartitionKind::PdFm, _) => {
            let region = spec.regions[output][p];
            if let Some(pads) = spec.paddings.get(&node.id) {
                match &mut op {
                    OpKind::Conv2d { padding, .. }
                    | OpKind::DepthwiseConv2d { padding, .. }
                    | OpKind::Pad { padding, .. } => *padding = pads[p],
                    _ => {}
                }
            }
            if let OpKind::Add {} = node.op {
                let side = &node.inputs[1 - port];
                inputs[1 - port] =
                    rw.restrict(side, region, &format!("{side}.{}.p{p}", node.id))?;
            }
        }
    }
    Ok(Replica { op, inputs })
}
