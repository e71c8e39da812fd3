//! Fuse, schedule and plan: the evaluation every candidate graph goes
//! through.

use std::collections::BTreeSet;

use serde::Serialize;
use thiserror::Error;

use crate::discovery::TilingConfig;
use crate::exec::count_macs;
use crate::fusion::{fuse, FusedGroup};
use crate::ir::Graph;
use crate::layout::{derive_conflicts, plan_intervals, ConflictSet, MemoryLayout, PlanOptions};
use crate::schedule::{
    compute_lifetimes, schedule, schedule_cost, LifetimeTable, Schedule, ScheduleCost,
    ScheduleError, ScheduleOptions,
};
use crate::transform::{apply_tiling, TransformError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

/// Solver settings shared by every evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pipeline {
    pub schedule: ScheduleOptions,
    pub plan: PlanOptions,
}

/// Placement of one buffer, as reported.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayoutEntry {
    pub tensor: String,
    pub offset: usize,
    pub size: usize,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub schedule: Schedule,
    pub lifetimes: LifetimeTable,
    pub cost: ScheduleCost,
    pub conflicts: ConflictSet,
    pub layout: MemoryLayout,
    pub macs: u64,
    pub groups: Vec<FusedGroup>,
}

impl Evaluation {
    pub fn peak(&self) -> usize {
        self.layout.peak
    }

    pub fn layout_entries(&self) -> Vec<LayoutEntry> {
        self.lifetimes
            .buffers
            .iter()
            .enumerate()
            .map(|(i, b)| LayoutEntry {
                tensor: b.tensor.clone(),
                offset: self.layout.offset(i),
                size: self.layout.sizes[i],
            })
            .collect()
    }
}

impl Pipeline {
    /// Both solvers with the same time limit.
    pub fn with_timeout(timeout: std::time::Duration) -> Pipeline {
        let mut p = Pipeline::default();
        p.schedule.timeout = timeout;
        p.plan.timeout = timeout;
        p
    }

    pub fn evaluate(&self, graph: &Graph) -> Result<Evaluation, PipelineError> {
        let view = fuse(graph, &BTreeSet::new());
        let schedule = schedule(&view, &self.schedule);
        let lifetimes = compute_lifetimes(&view, &schedule, self.schedule.align4)?;
        let cost = schedule_cost(&lifetimes);
        let conflicts = derive_conflicts(&lifetimes);
        let sizes: Vec<usize> = lifetimes.buffers.iter().map(|b| b.size).collect();
        let layout = plan_intervals(&lifetimes, &sizes, &conflicts, &self.plan);
        Ok(Evaluation {
            schedule,
            lifetimes,
            cost,
            conflicts,
            layout,
            macs: count_macs(graph).total,
            groups: view.groups().to_vec(),
        })
    }
}

/// Layout peak of `graph` after applying `config`, or of `graph` itself
/// when there is none.
pub fn peak_after(
    graph: &Graph,
    config: Option<&TilingConfig>,
    pipeline: &Pipeline,
) -> Result<usize, PipelineError> {
    match config {
        Some(c) => Ok(pipeline.evaluate(&apply_tiling(graph, c)?)?.peak()),
        None => Ok(pipeline.evaluate(graph)?.peak()),
    }
}
