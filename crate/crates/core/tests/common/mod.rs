//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use deeptile::fusion::fuse;
use deeptile::ir::{buffer_size, Graph, Node, OpKind, TensorKind};
use deeptile::layout::ConflictSet;

/// Minimum layout peak over every acyclic orientation of the conflicting
/// pairs. An orientation says which buffer of each pair sits lower; the
/// offsets then follow by longest path. Pairs are oriented one at a time and
/// an orientation closing a cycle is dropped at once.
pub fn layout_brute_force(sizes: &[usize], conflicts: &ConflictSet) -> usize {
    let n = sizes.len();
    if n == 0 {
        return 0;
    }
    let pairs: Vec<(usize, usize)> = conflicts.pairs().collect();
    // below[v] lists buffers placed under v
    let mut below = vec![Vec::new(); n];
    let mut best = usize::MAX;
    orient(&pairs, sizes, &mut below, &mut best);
    best
}

fn reaches(below: &[Vec<usize>], from: usize, to: usize) -> bool {
    let mut stack = vec![from];
    let mut seen = vec![false; below.len()];
    while let Some(v) = stack.pop() {
        if v == to {
            return true;
        }
        if !std::mem::replace(&mut seen[v], true) {
            stack.extend(&below[v]);
        }
    }
    false
}

fn orient(
    pairs: &[(usize, usize)],
    sizes: &[usize],
    below: &mut Vec<Vec<usize>>,
    best: &mut usize,
) {
    let Some((&(u, v), rest)) = pairs.split_first() else {
        *best = (*best).min(longest_end(sizes, below));
        return;
    };
    for (lo, hi) in [(u, v), (v, u)] {
        // lo under hi closes a cycle iff lo already sits above hi
        if !reaches(below, lo, hi) {
            below[hi].push(lo);
            orient(rest, sizes, below, best);
            below[hi].pop();
        }
    }
}

fn longest_end(sizes: &[usize], below: &[Vec<usize>]) -> usize {
    fn end(v: usize, sizes: &[usize], below: &[Vec<usize>], memo: &mut [Option<usize>]) -> usize {
        if let Some(e) = memo[v] {
            return e;
        }
        let base = below[v]
            .iter()
            .map(|&u| end(u, sizes, below, memo))
            .max()
            .unwrap_or(0);
        memo[v] = Some(base + sizes[v]);
        base + sizes[v]
    }
    let mut memo = vec![None; sizes.len()];
    (0..sizes.len())
        .map(|v| end(v, sizes, below, &mut memo))
        .max()
        .unwrap_or(0)
}

/// Minimum over every unit order of the largest per-step live sum, found by
/// enumerating all topological orders of the fusion units.
///
/// A unit is a fusion group or a lone node. Model inputs are live from step
/// 0 to their last reader, model outputs from their producer to the end and
/// other buffers from their producer to their last reader. Weights and
/// group-internal tensors are not counted.
pub fn schedule_brute_force(graph: &Graph) -> usize {
    let view = fuse(graph, &BTreeSet::new());
    let mut unit_of: HashMap<&str, usize> = HashMap::new();
    let mut units: Vec<Vec<&Node>> = Vec::new();
    for g in view.groups() {
        for m in &g.members {
            unit_of.insert(m.as_str(), units.len());
        }
        units.push(g.members.iter().map(|m| graph.node(m).unwrap()).collect());
    }
    for n in graph.nodes() {
        if !unit_of.contains_key(n.id.as_str()) {
            unit_of.insert(n.id.as_str(), units.len());
            units.push(vec![n]);
        }
    }
    let producer: HashMap<&str, usize> = graph
        .nodes()
        .map(|n| (n.output(), unit_of[n.id.as_str()]))
        .collect();

    // planned buffers: (size, kind, producing unit, reading units)
    let mut buffers = Vec::new();
    for t in graph.tensors() {
        if t.kind == TensorKind::Weight || view.is_internal(&t.id) {
            continue;
        }
        let readers: BTreeSet<usize> = graph
            .nodes()
            .filter(|n| n.inputs.contains(&t.id))
            .map(|n| unit_of[n.id.as_str()])
            .filter(|&u| producer.get(t.id.as_str()) != Some(&u))
            .collect();
        buffers.push((
            buffer_size(t).unwrap(),
            t.kind,
            producer.get(t.id.as_str()).copied(),
            readers,
        ));
    }
    let preds: Vec<BTreeSet<usize>> = (0..units.len())
        .map(|u| {
            units[u]
                .iter()
                .flat_map(|n| n.inputs.iter())
                .filter_map(|t| producer.get(t.as_str()).copied())
                .filter(|&p| p != u)
                .collect()
        })
        .collect();

    let n = units.len();
    let mut best = usize::MAX;
    let mut order = Vec::with_capacity(n);
    let mut placed = vec![false; n];
    let mut step = vec![0; n];
    enumerate(
        &preds,
        &mut order,
        &mut placed,
        &mut step,
        &mut |step: &[usize]| {
            let mut profile = vec![0; n];
            for (size, kind, prod, readers) in &buffers {
                let last_read = readers.iter().map(|&r| step[r]).max();
                let span = match kind {
                    TensorKind::Input => last_read.map(|l| (0, l)),
                    TensorKind::Output => prod.map(|p| (step[p], n - 1)),
                    _ => prod.map(|p| (step[p], last_read.unwrap_or(step[p]))),
                };
                if let Some((lo, hi)) = span {
                    for p in &mut profile[lo..=hi] {
                        *p += size;
                    }
                }
            }
            best = best.min(profile.into_iter().max().unwrap_or(0));
        },
    );
    if best == usize::MAX {
        0
    } else {
        best
    }
}

fn enumerate(
    preds: &[BTreeSet<usize>],
    order: &mut Vec<usize>,
    placed: &mut [bool],
    step: &mut [usize],
    visit: &mut impl FnMut(&[usize]),
) {
    if order.len() == preds.len() {
        visit(step);
        return;
    }
    for u in 0..preds.len() {
        if !placed[u] && preds[u].iter().all(|&p| placed[p]) {
            placed[u] = true;
            step[u] = order.len();
            order.push(u);
            enumerate(preds, order, placed, step, visit);
            order.pop();
            placed[u] = false;
        }
    }
}

/// Multiply-accumulates from first principles: every output element of a
/// convolution or dense layer reads one window of its input.
pub fn macs_oracle(graph: &Graph) -> u64 {
    let dims = |t: &str| graph.tensor(t).unwrap().shape.dims().to_vec();
    graph
        .nodes()
        .map(|n| {
            let out: usize = dims(n.output()).iter().product();
            let window = match &n.op {
                OpKind::Conv2d { kernel, .. } => kernel[0] * kernel[1] * dims(&n.inputs[0])[3],
                OpKind::DepthwiseConv2d { .. } => {
                    let w = dims(&n.inputs[1]);
                    w[1] * w[2]
                }
                OpKind::Dense {} => *dims(&n.inputs[0]).last().unwrap(),
                _ => 0,
            };
            (out * window) as u64
        })
        .sum()
}
