use std::collections::BTreeMap;

use serde::Serialize;

use crate::ir::{Graph, OpKind};

/// Static multiply-accumulate count.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MacCount {
    pub total: u64,
    pub per_node: BTreeMap<String, u64>,
}

/// Counts MACs from tensor shapes alone. Only convolutions and dense layers
/// contribute; shapes must already be inferred.
pub fn count_macs(graph: &Graph) -> MacCount {
    let mut per_node = BTreeMap::new();
    for node in graph.nodes() {
        let dims = |i: usize| {
            graph
                .tensor(&node.inputs[i])
                .map(|t| t.shape.dims().to_vec())
                .unwrap_or_default()
        };
        let out = graph
            .tensor(node.output())
            .map(|t| t.shape.dims().to_vec())
            .unwrap_or_default();
        let n = match node.op {
            OpKind::Conv2d { kernel, .. } if out.len() == 4 => {
                let cin = dims(1).get(3).copied().unwrap_or(0);
                (out[1] * out[2] * out[3] * cin * kernel[0] * kernel[1]) as u64
            }
            OpKind::DepthwiseConv2d { .. } if out.len() == 4 => {
                let w = dims(1);
                let taps = w.get(1).copied().unwrap_or(0) * w.get(2).copied().unwrap_or(0);
                (out[1] * out[2] * out[3] * taps) as u64
            }
            OpKind::Dense {} => {
                let w = dims(1);
                let x = dims(0);
                let rows: usize = x.iter().rev().skip(1).product();
                (rows * w.first().copied().unwrap_or(0) * w.get(1).copied().unwrap_or(0)) as u64
            }
            _ => 0,
        };
        per_node.insert(node.id.clone(), n);
    }
    MacCount {
        total: per_node.values().sum(),
        per_node,
    }
}
