//! Operator fusion as an analysis overlay.
//!
//! A compute-heavy anchor (conv, depthwise conv, dense, merge) absorbs the
//! bias addition and activation that directly follow it. Buffers between
//! fused members never materialize, so they are invisible to scheduling and
//! layout planning. The executor always runs the fine-grained nodes; fusion
//! never changes numerics.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::Serialize;

use crate::ir::{Graph, OpKind, TensorKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FusedGroup {
    /// Member node ids in execution order; the first one is the anchor.
    pub members: Vec<String>,
    pub anchor: String,
    /// Tensors produced and consumed entirely inside the group.
    pub internal: Vec<String>,
}

/// A graph plus the fusion groups laid over it.
#[derive(Debug, Clone)]
pub struct FusedView<'g> {
    graph: &'g Graph,
    groups: Vec<FusedGroup>,
    barriers: BTreeSet<String>,
    node_group: HashMap<String, usize>,
    internal: HashSet<String>,
}

fn is_anchor(op: &OpKind) -> bool {
    matches!(
        op,
        OpKind::Conv2d { .. }
            | OpKind::DepthwiseConv2d { .. }
            | OpKind::Dense {}
            | OpKind::Merge { .. }
    )
}

fn is_absorbable(op: &OpKind) -> bool {
    matches!(op, OpKind::BiasAdd {} | OpKind::Activation { .. })
}

/// Greedy forward-maximal fusion.
///
/// Nodes listed in `barriers`, and nodes flagged `no_fuse` in the graph,
/// never fuse with their consumers.
pub fn fuse<'g>(graph: &'g Graph, barriers: &BTreeSet<String>) -> FusedView<'g> {
    let mut all_barriers = barriers.clone();
    all_barriers.extend(graph.nodes().filter(|n| n.no_fuse).map(|n| n.id.clone()));

    let index = graph.index();
    let order = graph
        .topological_order()
        .map(|o| o.into_iter().map(str::to_owned).collect::<Vec<_>>())
        .unwrap_or_else(|_| graph.nodes().map(|n| n.id.clone()).collect());

    let mut groups = Vec::new();
    let mut node_group = HashMap::new();
    for id in &order {
        let node = graph.node(id).expect("ordered node exists");
        if node_group.contains_key(id) || !is_anchor(&node.op) {
            continue;
        }
        let mut members = vec![id.clone()];
        let mut internal = Vec::new();
        let mut current = node;
        loop {
            if all_barriers.contains(&current.id) {
                break;
            }
            let out = current.output();
            match graph.tensor(out) {
                Some(t) if t.kind == TensorKind::Intermediate => {}
                _ => break,
            }
            let consumers = index.consumers(out);
            if consumers.len() != 1 {
                break;
            }
            let next = graph.node(consumers[0]).expect("consumer exists");
            let uses = next.inputs.iter().filter(|t| *t == out).count();
            if !is_absorbable(&next.op)
                || uses != 1
                || next.inputs[0] != out
                || node_group.contains_key(&next.id)
            {
                break;
            }
            internal.push(out.to_owned());
            members.push(next.id.clone());
            current = next;
        }
        if members.len() > 1 {
            let gi = groups.len();
            for m in &members {
                node_group.insert(m.clone(), gi);
            }
            groups.push(FusedGroup {
                anchor: members[0].clone(),
                members,
                internal,
            });
        }
    }
    let internal = groups
        .iter()
        .flat_map(|g: &FusedGroup| g.internal.iter().cloned())
        .collect();
    FusedView {
        graph,
        groups,
        barriers: barriers.clone(),
        node_group,
        internal,
    }
}

/// Drops the fusion overlay, returning the fine-grained graph.
pub fn unfuse(view: &FusedView<'_>) -> Graph {
    view.graph.clone()
}

impl<'g> FusedView<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn groups(&self) -> &[FusedGroup] {
        &self.groups
    }

    /// The explicit barrier set this view was built with.
    pub fn barriers(&self) -> &BTreeSet<String> {
        &self.barriers
    }

    pub fn group_of(&self, node: &str) -> Option<&FusedGroup> {
        self.node_group.get(node).map(|&i| &self.groups[i])
    }

    pub fn is_internal(&self, tensor: &str) -> bool {
        self.internal.contains(tensor)
    }
}
