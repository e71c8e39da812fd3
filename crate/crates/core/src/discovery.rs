//! Critical buffers and candidate tiling paths.
//!
//! Discovery walks the fine-grained graph up and down from a critical
//! buffer, assigning each operation a block that says how it is split.
//! Depthwise partitioning (`PdD`) cuts the last axis; feature-map
//! partitioning (`PdFm`) cuts the two spatial axes of NHWC tensors into a
//! square grid.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::ir::{Graph, GraphIndex, Node, OpKind, TensorKind};
use crate::layout::{live_peak, plan_intervals, ConflictSet, MemoryLayout, PlanOptions};
use crate::schedule::LifetimeTable;
use crate::transform::plan_partitions;

/// Grid sides tried for feature-map tiling.
pub const GRIDS: [usize; 4] = [2, 3, 4, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum PartitionKind {
    #[serde(rename = "PD_D")]
    PdD,
    #[serde(rename = "PD_FM")]
    PdFm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum BlockKind {
    Split,
    FdtFanOut,
    Part,
    Ffmt,
    FdtFanIn,
    ConcatBlock,
}

/// One candidate rewrite.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct TilingConfig {
    pub critical_buffer: String,
    pub kind: PartitionKind,
    /// `N` for depthwise tiling, the grid side `g` for feature-map tiling.
    pub partitions: usize,
    /// Node ids from the start terminal to the end terminal.
    pub path: Vec<String>,
    pub blocks: BTreeMap<String, BlockKind>,
    /// `Split` or `FdtFanOut`.
    pub entry: BlockKind,
    /// `ConcatBlock` or `FdtFanIn`.
    pub exit: BlockKind,
}

impl TilingConfig {
    /// Number of partitions the path is cut into.
    pub fn n_partitions(&self) -> usize {
        match self.kind {
            PartitionKind::PdD => self.partitions,
            PartitionKind::PdFm => self.partitions * self.partitions,
        }
    }

    pub fn is_fdt(&self) -> bool {
        self.kind == PartitionKind::PdD
    }

    pub fn block(&self, node: &str) -> Option<BlockKind> {
        self.blocks.get(node).copied()
    }

    /// Checks the terminal and block-count invariants, returning the first
    /// one violated.
    pub fn check(&self) -> Result<(), String> {
        let (Some(first), Some(last)) = (self.path.first(), self.path.last()) else {
            return Err("empty path".into());
        };
        if self.path.len() != self.blocks.len()
            || self.path.iter().any(|n| !self.blocks.contains_key(n))
        {
            return Err("block assignment does not match the path".into());
        }
        if !matches!(self.entry, BlockKind::Split | BlockKind::FdtFanOut) {
            return Err(format!(
                "entry must be Split or FdtFanOut, is {:?}",
                self.entry
            ));
        }
        if !matches!(self.exit, BlockKind::ConcatBlock | BlockKind::FdtFanIn) {
            return Err(format!(
                "exit must be ConcatBlock or FdtFanIn, is {:?}",
                self.exit
            ));
        }
        if (self.entry == BlockKind::FdtFanOut) != (self.blocks[first] == BlockKind::FdtFanOut) {
            return Err("fan-out entry must be the first path node".into());
        }
        if (self.exit == BlockKind::FdtFanIn) != (self.blocks[last] == BlockKind::FdtFanIn) {
            return Err("fan-in exit must be the last path node".into());
        }
        let count = |k| self.blocks.values().filter(|&&b| b == k).count();
        if count(BlockKind::FdtFanOut) > 1 || count(BlockKind::FdtFanIn) > 1 {
            return Err("at most one fan-out and one fan-in per path".into());
        }
        if self
            .blocks
            .values()
            .any(|b| matches!(b, BlockKind::Split | BlockKind::ConcatBlock))
        {
            return Err("split and concat are terminals, not path nodes".into());
        }
        let fdt_only =
            matches!(self.entry, BlockKind::FdtFanOut) || matches!(self.exit, BlockKind::FdtFanIn);
        if self.kind == PartitionKind::PdFm && fdt_only {
            return Err("feature-map tiling has no fan-out or fan-in".into());
        }
        if self.kind == PartitionKind::PdD && self.blocks.values().any(|&b| b == BlockKind::Ffmt) {
            return Err("depthwise tiling has no Ffmt blocks".into());
        }
        let min = if self.kind == PartitionKind::PdFm {
            GRIDS[0]
        } else {
            2
        };
        if self.partitions < min {
            return Err(format!("{} partitions are too few", self.partitions));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CriticalBuffer {
    pub tensor: String,
    pub size: usize,
    /// Layout peak reduction when this buffer alone is halved.
    pub saving: usize,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DiscoveryError {
    #[error("no valid tiling path through `{0}`")]
    DiscoveryFailed(String),
    #[error("`{0}` is not an intermediate tensor of the graph")]
    NotIntermediate(String),
}

/// Buffers reaching the peak through a contiguous stack of conflicting
/// buffers: those ending at the peak, and recursively every conflicting
/// buffer ending exactly where a stacked one starts.
fn peak_stack(layout: &MemoryLayout, conflicts: &ConflictSet) -> Vec<bool> {
    let n = layout.sizes.len();
    let mut on = vec![false; n];
    let mut stack: Vec<usize> = (0..n).filter(|&i| layout.ends[i] == layout.peak).collect();
    for &i in &stack {
        on[i] = true;
    }
    while let Some(v) = stack.pop() {
        for u in conflicts.neighbors(v) {
            if !on[u] && layout.ends[u] == layout.offset(v) {
                on[u] = true;
                stack.push(u);
            }
        }
    }
    on
}

/// Buffers that alone set the layout peak: re-planning with the buffer
/// halved lowers the peak. Only buffers on a stack reaching the peak are
/// re-planned. Model inputs and outputs are never reported. Sorted by
/// descending size, then id.
pub fn find_critical_buffers(
    layout: &MemoryLayout,
    lifetimes: &LifetimeTable,
    conflicts: &ConflictSet,
    opts: &PlanOptions,
) -> Vec<CriticalBuffer> {
    let on_stack = peak_stack(layout, conflicts);
    let mut out = Vec::new();
    for (i, b) in lifetimes.buffers.iter().enumerate() {
        if b.kind.is_model_io() || !on_stack[i] {
            continue;
        }
        let mut sizes = layout.sizes.clone();
        sizes[i] = (sizes[i] / 2).max(1);
        let bound = live_peak(lifetimes, &sizes);
        if sizes[i] == layout.sizes[i] || bound >= layout.peak {
            continue;
        }
        let replanned = plan_intervals(lifetimes, &sizes, conflicts, opts).peak;
        if replanned < layout.peak {
            out.push(CriticalBuffer {
                tensor: b.tensor.clone(),
                size: b.size,
                saving: layout.peak - replanned,
            });
        }
    }
    out.sort_by(|a, b| b.size.cmp(&a.size).then_with(|| a.tensor.cmp(&b.tensor)));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscoveryOptions {
    pub depthwise: bool,
    pub feature_map: bool,
    pub max_partitions: usize,
}

impl Default for DiscoveryOptions {
    fn default() -> Self {
        DiscoveryOptions {
            depthwise: true,
            feature_map: true,
            max_partitions: 25,
        }
    }
}

/// Ops that terminate every walk.
pub(crate) fn is_stop(op: &OpKind) -> bool {
    matches!(
        op,
        OpKind::Softmax {} | OpKind::Slice { .. } | OpKind::Concat { .. } | OpKind::Merge { .. }
    )
}

pub(crate) fn fan_out_capable(graph: &Graph, node: &Node) -> bool {
    let weight_at = |port: usize| {
        node.inputs
            .get(port)
            .and_then(|t| graph.tensor(t))
            .is_some_and(|t| t.kind == TensorKind::Weight)
    };
    match node.op {
        OpKind::Conv2d { .. } | OpKind::Dense {} => weight_at(1),
        OpKind::Gather { axis } => {
            weight_at(0)
                && graph
                    .tensor(&node.inputs[0])
                    .is_some_and(|t| t.shape.rank() >= 2 && axis + 1 < t.shape.rank())
        }
        _ => false,
    }
}

pub(crate) fn fan_in_capable(graph: &Graph, node: &Node) -> bool {
    let rank = |t: &str| graph.tensor(t).map_or(0, |d| d.shape.rank());
    match node.op {
        OpKind::Conv2d { .. } | OpKind::Dense {} => node
            .inputs
            .get(1)
            .and_then(|t| graph.tensor(t))
            .is_some_and(|t| t.kind == TensorKind::Weight),
        // partial means are exact only in floating point
        OpKind::ReduceMean { axis, .. } => {
            axis + 1 == rank(&node.inputs[0])
                && graph
                    .tensor(&node.inputs[0])
                    .is_some_and(|t| !t.dtype.is_integer())
        }
        _ => false,
    }
}

fn side_operand_ok(node: &Node) -> bool {
    !matches!(node.op, OpKind::Add {}) || node.inputs[1] != node.inputs[0]
}

pub(crate) fn part_capable(graph: &Graph, node: &Node, kind: PartitionKind) -> bool {
    let rank = |t: &str| graph.tensor(t).map_or(0, |d| d.shape.rank());
    match (kind, &node.op) {
        (_, OpKind::BiasAdd {} | OpKind::Activation { .. } | OpKind::Pad { .. }) => true,
        (_, OpKind::Add {}) => side_operand_ok(node),
        (
            PartitionKind::PdD,
            OpKind::DepthwiseConv2d { .. } | OpKind::MaxPool { .. } | OpKind::AvgPool { .. },
        ) => true,
        (PartitionKind::PdD, OpKind::ReduceMean { axis, .. }) => axis + 1 < rank(&node.inputs[0]),
        _ => false,
    }
}

pub(crate) fn ffmt_capable(node: &Node) -> bool {
    matches!(
        node.op,
        OpKind::Conv2d { .. }
            | OpKind::DepthwiseConv2d { .. }
            | OpKind::MaxPool { .. }
            | OpKind::AvgPool { .. }
    )
}

/// Whether a feature-map tile of this op needs input beyond its own region.
pub(crate) fn overlaps(graph: &Graph, node: &Node) -> bool {
    let kernel = match node.op {
        OpKind::Conv2d {
            kernel, strides, ..
        } => Some((kernel, strides)),
        OpKind::DepthwiseConv2d { strides, .. } => graph
            .tensor(&node.inputs[1])
            .map(|w| ([w.shape.dim(1), w.shape.dim(2)], strides)),
        OpKind::MaxPool { window, strides } | OpKind::AvgPool { window, strides } => {
            Some((window, strides))
        }
        _ => None,
    };
    kernel.is_some_and(|(k, s)| k[0] > s[0] || k[1] > s[1])
}

/// A place the path may start or end, with the size of the buffer the
/// terminal reads (start) or writes (end).
#[derive(Debug, Clone)]
struct Terminal {
    /// Path nodes between the terminal and the critical buffer, outermost
    /// first for starts, innermost first for ends.
    nodes: Vec<(String, BlockKind)>,
    block: BlockKind,
    size: usize,
    /// Whether the path up to this terminal contains an overlapping op
    /// beyond the producer/consumer of the critical buffer.
    crosses_overlap: bool,
}

fn size_of(graph: &Graph, t: &str) -> usize {
    graph
        .tensor(t)
        .and_then(|d| crate::ir::buffer_size(d).ok())
        .unwrap_or(usize::MAX)
}

fn walk_up(
    graph: &Graph,
    index: &GraphIndex<'_>,
    producer: &str,
    kind: PartitionKind,
) -> Vec<Terminal> {
    let mut out = Vec::new();
    let mut chain: Vec<(String, BlockKind)> = Vec::new();
    let mut crosses = false;
    let mut current = graph.node(producer);
    while let Some(node) = current {
        if is_stop(&node.op) {
            break;
        }
        let data = &node.inputs[node.op.data_port()];
        let overlap_here =
            kind == PartitionKind::PdFm && overlaps(graph, node) && !chain.is_empty();
        if kind == PartitionKind::PdD && fan_out_capable(graph, node) {
            let mut nodes = vec![(node.id.clone(), BlockKind::FdtFanOut)];
            nodes.extend(chain.iter().rev().cloned());
            out.push(Terminal {
                nodes,
                block: BlockKind::FdtFanOut,
                size: size_of(graph, data),
                crosses_overlap: crosses,
            });
            break;
        }
        let block = if part_capable(graph, node, kind) {
            BlockKind::Part
        } else if kind == PartitionKind::PdFm && ffmt_capable(node) {
            BlockKind::Ffmt
        } else {
            break;
        };
        crosses |= overlap_here;
        chain.push((node.id.clone(), block));
        let nodes: Vec<(String, BlockKind)> = chain.iter().rev().cloned().collect();
        out.push(Terminal {
            nodes,
            block: BlockKind::Split,
            size: size_of(graph, data),
            crosses_overlap: crosses,
        });
        let Some(t) = graph.tensor(data) else { break };
        if t.kind != TensorKind::Intermediate || index.consumers(data).len() != 1 {
            break;
        }
        current = index.producer(data).and_then(|p| graph.node(p));
    }
    out
}

fn walk_down(
    graph: &Graph,
    index: &GraphIndex<'_>,
    consumer: &str,
    kind: PartitionKind,
) -> Vec<Terminal> {
    let mut out = Vec::new();
    let mut chain: Vec<(String, BlockKind)> = Vec::new();
    let mut crosses = false;
    let mut current = graph.node(consumer);
    let mut incoming = graph
        .node(consumer)
        .map(|n| n.inputs[n.op.data_port()].clone());
    while let (Some(node), Some(prev)) = (current, incoming.take()) {
        // the walked tensor must be the node's data operand, used once
        let uses = node.inputs.iter().filter(|t| **t == prev).count();
        if is_stop(&node.op) || uses != 1 || node.inputs[node.op.data_port()] != prev {
            break;
        }
        let output = node.output();
        let overlap_here =
            kind == PartitionKind::PdFm && overlaps(graph, node) && !chain.is_empty();
        if kind == PartitionKind::PdD && fan_in_capable(graph, node) {
            let mut nodes = chain.clone();
            nodes.push((node.id.clone(), BlockKind::FdtFanIn));
            out.push(Terminal {
                nodes,
                block: BlockKind::FdtFanIn,
                size: size_of(graph, output),
                crosses_overlap: crosses,
            });
            break;
        }
        let block = if part_capable(graph, node, kind) {
            BlockKind::Part
        } else if kind == PartitionKind::PdFm && ffmt_capable(node) {
            BlockKind::Ffmt
        } else {
            break;
        };
        crosses |= overlap_here;
        chain.push((node.id.clone(), block));
        out.push(Terminal {
            nodes: chain.clone(),
            block: BlockKind::ConcatBlock,
            size: size_of(graph, output),
            crosses_overlap: crosses,
        });
        let Some(t) = graph.tensor(output) else { break };
        if t.kind != TensorKind::Intermediate || index.consumers(output).len() != 1 {
            break;
        }
        current = graph.node(index.consumers(output)[0]);
        incoming = Some(output.to_owned());
    }
    out
}

/// Smallest terminal; on ties the one farthest from the critical buffer,
/// which tiles a superset of the buffers.
fn pick<'a>(terminals: impl Iterator<Item = &'a Terminal>) -> Option<&'a Terminal> {
    terminals.fold(None, |best: Option<&Terminal>, t| match best {
        Some(b) if b.size < t.size => Some(b),
        _ => Some(t),
    })
}

/// Enumerates tiling configurations through `crit`.
///
/// For each partition kind the full path uses the smallest terminals found
/// by the walks. Depthwise tiling also keeps the variant that ends in a
/// concat instead of a fan-in; feature-map tiling keeps the variant that
/// stops before the first op needing a halo.
pub fn enumerate_configs(
    graph: &Graph,
    crit: &str,
    opts: &DiscoveryOptions,
) -> Result<Vec<TilingConfig>, DiscoveryError> {
    let tensor = graph
        .tensor(crit)
        .filter(|t| t.kind == TensorKind::Intermediate);
    let tensor = tensor.ok_or_else(|| DiscoveryError::NotIntermediate(crit.to_owned()))?;
    let index = graph.index();
    let failed = || DiscoveryError::DiscoveryFailed(crit.to_owned());
    let producer = index.producer(crit).ok_or_else(failed)?;
    let consumers = index.consumers(crit);
    let [consumer] = consumers else {
        return Err(failed());
    };
    let cnode = graph.node(consumer).ok_or_else(failed)?;
    if cnode.inputs.iter().filter(|t| *t == crit).count() != 1
        || cnode.inputs[cnode.op.data_port()] != crit
    {
        return Err(failed());
    }

    let mut kinds = Vec::new();
    if opts.depthwise && tensor.shape.rank() >= 2 {
        kinds.push(PartitionKind::PdD);
    }
    if opts.feature_map && tensor.shape.rank() == 4 {
        kinds.push(PartitionKind::PdFm);
    }

    let mut configs: Vec<TilingConfig> = Vec::new();
    for kind in kinds {
        let ups = walk_up(graph, &index, producer, kind);
        let downs = walk_down(graph, &index, consumer, kind);
        let mut variants: Vec<(&Terminal, &Terminal)> = Vec::new();
        if let (Some(s), Some(e)) = (pick(ups.iter()), pick(downs.iter())) {
            variants.push((s, e));
            match kind {
                PartitionKind::PdD if e.block == BlockKind::FdtFanIn => {
                    if let Some(c) =
                        pick(downs.iter().filter(|t| t.block == BlockKind::ConcatBlock))
                    {
                        variants.push((s, c));
                    }
                }
                PartitionKind::PdFm => {
                    let s2 = pick(ups.iter().filter(|t| !t.crosses_overlap));
                    let e2 = pick(downs.iter().filter(|t| !t.crosses_overlap));
                    if let (Some(s2), Some(e2)) = (s2, e2) {
                        variants.push((s2, e2));
                    }
                }
                _ => {}
            }
        }
        let counts: Vec<usize> = match kind {
            PartitionKind::PdD => (2..=opts.max_partitions).collect(),
            PartitionKind::PdFm => GRIDS
                .iter()
                .copied()
                .filter(|g| g * g <= opts.max_partitions)
                .collect(),
        };
        for (start, end) in variants {
            let mut path: Vec<(String, BlockKind)> = start.nodes.clone();
            path.extend(end.nodes.iter().cloned());
            for &n in &counts {
                let config = TilingConfig {
                    critical_buffer: crit.to_owned(),
                    kind,
                    partitions: n,
                    path: path.iter().map(|(id, _)| id.clone()).collect(),
                    blocks: path.iter().cloned().collect(),
                    entry: start.block,
                    exit: end.block,
                };
                if !configs.contains(&config)
                    && config.check().is_ok()
                    && plan_partitions(graph, &config).is_ok()
                {
                    configs.push(config);
                }
            }
        }
    }
    if configs.is_empty() {
        return Err(failed());
    }
    Ok(configs)
}
