//! Memory-aware operator scheduling and buffer lifetimes.
//!
//! Scheduling works on *units*: a fusion group, or a single node outside any
//! group. Members of a group always run back to back and share one step.
//!
//! Cost model: while a unit runs, its inputs and outputs are all resident,
//! together with every earlier buffer that still has a pending consumer.
//! Model outputs stay resident until the end; model inputs are resident from
//! step 0. Weights live in read-only memory and are not counted.

mod exact;
mod hill_valley;

use std::collections::{BTreeSet, HashMap};
use std::time::Duration;

use fixedbitset::FixedBitSet;
use serde::Serialize;
use thiserror::Error;

use crate::fusion::FusedView;
use crate::ir::{buffer_size, TensorKind};

pub use exact::schedule_exact;
pub use hill_valley::schedule_hill_valley;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("exact scheduling exceeded its budget")]
    Timeout,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

/// A total order of node ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct Schedule {
    pub order: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleOptions {
    pub timeout: Duration,
    /// Search states the exact scheduler may expand before giving up.
    pub max_states: usize,
    /// Round every buffer up to a multiple of four bytes.
    pub align4: bool,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        ScheduleOptions {
            timeout: Duration::from_secs(30),
            max_states: 50_000,
            align4: false,
        }
    }
}

/// A buffer visible to scheduling and layout planning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Lifetime {
    pub tensor: String,
    pub kind: TensorKind,
    pub size: usize,
    pub first: usize,
    pub last: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LifetimeTable {
    pub buffers: Vec<Lifetime>,
    pub steps: usize,
}

impl LifetimeTable {
    pub fn get(&self, tensor: &str) -> Option<&Lifetime> {
        self.buffers.iter().find(|b| b.tensor == tensor)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScheduleCost {
    pub peak_live: usize,
    pub profile: Vec<usize>,
}

pub(crate) fn round_size(size: usize, align4: bool) -> usize {
    if align4 {
        size.div_ceil(4) * 4
    } else {
        size
    }
}

/// Unit-level view of a fused graph, shared by every scheduler.
#[derive(Debug)]
pub(crate) struct Units {
    /// Node ids per unit, in execution order.
    pub nodes: Vec<Vec<String>>,
    pub buffers: Vec<(String, usize, TensorKind)>,
    pub inputs: Vec<Vec<usize>>,
    pub outputs: Vec<Vec<usize>>,
    pub preds: Vec<FixedBitSet>,
    pub succs: Vec<Vec<usize>>,
    /// Units consuming each buffer.
    pub consumers: Vec<Vec<usize>>,
    pub node_unit: HashMap<String, usize>,
}

impl Units {
    pub fn new(view: &FusedView<'_>, align4: bool) -> Units {
        let graph = view.graph();
        let order: Vec<&str> = graph
            .topological_order()
            .unwrap_or_else(|_| graph.nodes().map(|n| n.id.as_str()).collect());

        let mut nodes: Vec<Vec<String>> = Vec::new();
        let mut node_unit = HashMap::new();
        for id in order {
            if node_unit.contains_key(id) {
                continue;
            }
            let members = match view.group_of(id) {
                Some(g) => g.members.clone(),
                None => vec![id.to_owned()],
            };
            for m in &members {
                node_unit.insert(m.clone(), nodes.len());
            }
            nodes.push(members);
        }

        let mut buffers = Vec::new();
        let mut buffer_index = HashMap::new();
        for t in graph.tensors() {
            if t.kind == TensorKind::Weight || view.is_internal(&t.id) {
                continue;
            }
            let size = round_size(buffer_size(t).unwrap_or(0), align4);
            buffer_index.insert(t.id.clone(), buffers.len());
            buffers.push((t.id.clone(), size, t.kind));
        }

        let n = nodes.len();
        let mut inputs = vec![BTreeSet::new(); n];
        let mut outputs = vec![BTreeSet::new(); n];
        let mut consumers = vec![BTreeSet::new(); buffers.len()];
        let mut producer = vec![None; buffers.len()];
        for (u, members) in nodes.iter().enumerate() {
            for m in members {
                let node = graph.node(m).expect("unit member exists");
                for t in &node.inputs {
                    if let Some(&b) = buffer_index.get(t) {
                        inputs[u].insert(b);
                        consumers[b].insert(u);
                    }
                }
                for t in &node.outputs {
                    if let Some(&b) = buffer_index.get(t) {
                        outputs[u].insert(b);
                        producer[b] = Some(u);
                    }
                }
            }
        }
        let mut preds = vec![FixedBitSet::with_capacity(n); n];
        let mut succs = vec![BTreeSet::new(); n];
        for (b, cons) in consumers.iter().enumerate() {
            if let Some(p) = producer[b] {
                for &c in cons {
                    if c != p {
                        preds[c].insert(p);
                        succs[p].insert(c);
                    }
                }
            }
        }
        Units {
            nodes,
            buffers,
            inputs: inputs
                .into_iter()
                .map(|s| s.into_iter().collect())
                .collect(),
            outputs: outputs
                .into_iter()
                .map(|s| s.into_iter().collect())
                .collect(),
            preds,
            succs: succs.into_iter().map(|s| s.into_iter().collect()).collect(),
            consumers: consumers
                .into_iter()
                .map(|s| s.into_iter().collect())
                .collect(),
            node_unit,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn key(&self, u: usize) -> &str {
        &self.nodes[u][0]
    }

    /// Buffers resident before anything runs: consumed model inputs.
    pub fn initial_resident(&self) -> usize {
        (0..self.buffers.len())
            .filter(|&b| self.buffers[b].2 == TensorKind::Input && !self.consumers[b].is_empty())
            .map(|b| self.buffers[b].1)
            .sum()
    }

    pub fn out_size(&self, u: usize) -> usize {
        self.outputs[u].iter().map(|&b| self.buffers[b].1).sum()
    }

    /// Bytes released once `u` has run, given the units already done
    /// (`done` must include `u`).
    pub fn freed_after(&self, u: usize, done: &FixedBitSet) -> usize {
        self.inputs[u]
            .iter()
            .filter(|&&b| {
                self.buffers[b].2 != TensorKind::Output
                    && self.consumers[b].iter().all(|&c| done.contains(c))
            })
            .map(|&b| self.buffers[b].1)
            .sum()
    }

    pub fn is_ready(&self, u: usize, done: &FixedBitSet) -> bool {
        !done.contains(u) && self.preds[u].is_subset(done)
    }

    /// Resident bytes before step and step cost, for running `u` next.
    pub fn step(&self, u: usize, resident: usize, done: &mut FixedBitSet) -> (usize, usize) {
        let cost = resident + self.out_size(u);
        done.insert(u);
        let next = cost - self.freed_after(u, done);
        (cost, next)
    }

    /// Largest single-step footprint, a lower bound on any schedule's peak.
    pub fn lower_bound(&self) -> usize {
        (0..self.len())
            .map(|u| {
                let set: BTreeSet<usize> = self.inputs[u]
                    .iter()
                    .chain(&self.outputs[u])
                    .copied()
                    .collect();
                set.iter().map(|&b| self.buffers[b].1).sum::<usize>()
            })
            .max()
            .unwrap_or(0)
            .max(self.initial_resident())
    }

    /// Step costs of running units in `order`.
    pub fn profile(&self, order: &[usize]) -> Vec<usize> {
        let mut done = FixedBitSet::with_capacity(self.len());
        let mut resident = self.initial_resident();
        order
            .iter()
            .map(|&u| {
                let (cost, next) = self.step(u, resident, &mut done);
                resident = next;
                cost
            })
            .collect()
    }

    pub fn to_schedule(&self, order: &[usize]) -> Schedule {
        Schedule {
            order: order
                .iter()
                .flat_map(|&u| self.nodes[u].iter().cloned())
                .collect(),
        }
    }
}

/// Assigns steps to units, checking that `schedule` is a topological order
/// that keeps each fusion group contiguous.
fn unit_steps(units: &Units, schedule: &Schedule) -> Result<Vec<usize>, ScheduleError> {
    let mut steps = Vec::new();
    let mut done = FixedBitSet::with_capacity(units.len());
    let mut i = 0;
    while i < schedule.order.len() {
        let id = &schedule.order[i];
        let &u = units
            .node_unit
            .get(id)
            .ok_or_else(|| ScheduleError::InvalidSchedule(format!("unknown node `{id}`")))?;
        let members = &units.nodes[u];
        if schedule.order.get(i..i + members.len()) != Some(&members[..]) {
            return Err(ScheduleError::InvalidSchedule(format!(
                "fused group at `{}` is split",
                members[0]
            )));
        }
        if !units.is_ready(u, &done) {
            return Err(ScheduleError::InvalidSchedule(format!(
                "`{id}` runs before its inputs are produced"
            )));
        }
        done.insert(u);
        steps.push(u);
        i += members.len();
    }
    if steps.len() != units.len() {
        return Err(ScheduleError::InvalidSchedule(
            "schedule does not cover every node".into(),
        ));
    }
    Ok(steps)
}

/// Live interval of every planned buffer under `schedule`. Fused-internal
/// tensors and weights are absent.
pub fn compute_lifetimes(
    view: &FusedView<'_>,
    schedule: &Schedule,
    align4: bool,
) -> Result<LifetimeTable, ScheduleError> {
    let units = Units::new(view, align4);
    let order = unit_steps(&units, schedule)?;
    let mut step_of = vec![0; units.len()];
    for (s, &u) in order.iter().enumerate() {
        step_of[u] = s;
    }
    let last_step = order.len().saturating_sub(1);
    let mut first = vec![None; units.buffers.len()];
    for (u, outs) in units.outputs.iter().enumerate() {
        for &b in outs {
            first[b] = Some(step_of[u]);
        }
    }
    let buffers = units
        .buffers
        .iter()
        .enumerate()
        .filter_map(|(b, (tensor, size, kind))| {
            let last_use = units.consumers[b].iter().map(|&c| step_of[c]).max();
            let (lo, hi) = match kind {
                TensorKind::Input => (0, last_use?),
                TensorKind::Output => (first[b]?, last_step),
                _ => {
                    let lo = first[b]?;
                    (lo, last_use.unwrap_or(lo))
                }
            };
            Some(Lifetime {
                tensor: tensor.clone(),
                kind: *kind,
                size: *size,
                first: lo,
                last: hi,
            })
        })
        .collect();
    Ok(LifetimeTable {
        buffers,
        steps: order.len(),
    })
}

/// Per-step sum of live buffer sizes.
pub fn schedule_cost(lifetimes: &LifetimeTable) -> ScheduleCost {
    let mut profile = vec![0; lifetimes.steps];
    for b in &lifetimes.buffers {
        for p in &mut profile[b.first..=b.last] {
            *p += b.size;
        }
    }
    ScheduleCost {
        peak_live: profile.iter().copied().max().unwrap_or(0),
        profile,
    }
}

/// Exact scheduling, falling back to the hill-valley heuristic when the
/// search runs out of budget.
pub fn schedule(view: &FusedView<'_>, opts: &ScheduleOptions) -> Schedule {
    schedule_exact(view, opts).unwrap_or_else(|_| schedule_hill_valley(view, opts.align4))
}
