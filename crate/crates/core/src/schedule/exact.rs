//! Exact minimum-peak scheduling.
//!
//! States are downsets of units. The resident set depends only on the
//! downset, so the best achievable peak to reach a state is a bottleneck
//! shortest-path problem, solved with Dijkstra. The hill-valley schedule
//! seeds the upper bound. Among optimal schedules the lexicographically
//! smallest one is then recovered by a depth-first pass at the optimal
//! threshold.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::time::Instant;

use fixedbitset::FixedBitSet;

use super::hill_valley::hill_valley_units;
use super::{Schedule, ScheduleError, ScheduleOptions, Units};
use crate::fusion::FusedView;

struct Budget {
    start: Instant,
    opts: ScheduleOptions,
    spent: usize,
}

impl Budget {
    fn tick(&mut self) -> Result<(), ScheduleError> {
        self.spent += 1;
        if self.spent > self.opts.max_states
            || (self.spent.is_multiple_of(1024) && self.start.elapsed() > self.opts.timeout)
        {
            return Err(ScheduleError::Timeout);
        }
        Ok(())
    }
}

/// Minimum-peak schedule, ties broken by the lexicographically smallest
/// node-id sequence. Fails with `Timeout` once `opts.max_states` states have
/// been expanded or `opts.timeout` has elapsed.
pub fn schedule_exact(
    view: &FusedView<'_>,
    opts: &ScheduleOptions,
) -> Result<Schedule, ScheduleError> {
    let units = Units::new(view, opts.align4);
    let mut budget = Budget {
        start: Instant::now(),
        opts: *opts,
        spent: 0,
    };
    let heuristic = hill_valley_units(&units);
    let ub = units.profile(&heuristic).into_iter().max().unwrap_or(0);

    let (optimum, witness) = if ub <= units.lower_bound() {
        (ub, heuristic)
    } else {
        match bottleneck_search(&units, ub, &mut budget)? {
            Some((peak, order)) => (peak, order),
            None => (ub, heuristic),
        }
    };

    let mut dfs = LexSearch {
        units: &units,
        threshold: optimum,
        dead: HashSet::new(),
        order: Vec::new(),
    };
    let done = FixedBitSet::with_capacity(units.len());
    let order = match dfs.run(done, units.initial_resident(), &mut budget) {
        Ok(true) => dfs.order,
        _ => witness,
    };
    Ok(units.to_schedule(&order))
}

/// Bottleneck Dijkstra over downsets, keeping only paths strictly below
/// `ub`. `None` means nothing beats `ub`.
fn bottleneck_search(
    units: &Units,
    ub: usize,
    budget: &mut Budget,
) -> Result<Option<(usize, Vec<usize>)>, ScheduleError> {
    let n = units.len();
    let start = FixedBitSet::with_capacity(n);
    // state -> (bottleneck, resident, parent, unit)
    let mut best: HashMap<FixedBitSet, (usize, usize, Option<FixedBitSet>, usize)> = HashMap::new();
    let mut heap = BinaryHeap::new();
    best.insert(
        start.clone(),
        (0, units.initial_resident(), None, usize::MAX),
    );
    heap.push(Reverse((0usize, start.count_ones(..), start)));
    while let Some(Reverse((dist, _, state))) = heap.pop() {
        let (d, resident, _, _) = best[&state];
        if dist > d {
            continue;
        }
        if state.count_ones(..) == n {
            let mut order = Vec::with_capacity(n);
            let mut cur = state;
            while let Some((_, _, Some(parent), u)) = best.get(&cur).cloned() {
                order.push(u);
                cur = parent;
            }
            order.reverse();
            return Ok(Some((d, order)));
        }
        budget.tick()?;
        for u in 0..n {
            if !units.is_ready(u, &state) {
                continue;
            }
            let mut next = state.clone();
            let (cost, next_resident) = units.step(u, resident, &mut next);
            let nd = d.max(cost);
            if nd >= ub {
                continue;
            }
            if best.get(&next).is_none_or(|e| nd < e.0) {
                best.insert(next.clone(), (nd, next_resident, Some(state.clone()), u));
                // more complete states first among equal bottlenecks
                heap.push(Reverse((nd, n - next.count_ones(..), next)));
            }
        }
    }
    Ok(None)
}

struct LexSearch<'u> {
    units: &'u Units,
    threshold: usize,
    dead: HashSet<FixedBitSet>,
    order: Vec<usize>,
}

impl LexSearch<'_> {
    fn ready_by_key(&self, done: &FixedBitSet) -> Vec<usize> {
        let mut ready: Vec<usize> = (0..self.units.len())
            .filter(|&u| self.units.is_ready(u, done))
            .collect();
        ready.sort_by(|&a, &b| self.units.key(a).cmp(self.units.key(b)));
        ready
    }

    fn run(
        &mut self,
        done: FixedBitSet,
        resident: usize,
        budget: &mut Budget,
    ) -> Result<bool, ScheduleError> {
        if self.order.len() == self.units.len() {
            return Ok(true);
        }
        budget.tick()?;
        for u in self.ready_by_key(&done) {
            let mut next = done.clone();
            let (cost, next_resident) = self.units.step(u, resident, &mut next);
            if cost > self.threshold || self.dead.contains(&next) {
                continue;
            }
            self.order.push(u);
            if self.run(next, next_resident, budget)? {
                return Ok(true);
            }
            self.order.pop();
        }
        self.dead.insert(done);
        Ok(false)
    }
}
