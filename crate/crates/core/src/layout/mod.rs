//! Static buffer offset assignment.
//!
//! Every planned buffer gets an end offset `e` in one linear arena and
//! occupies `[e - s, e)`. Buffers whose lifetimes overlap must not share
//! bytes. The objective is the largest end offset.

mod exact;

use std::collections::BTreeSet;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::schedule::LifetimeTable;

pub use exact::{plan_exact, plan_exact_bounded};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LayoutError {
    #[error("exact layout planning exceeded its budget")]
    Timeout,
}

/// Pairs of buffers that are live at the same time.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConflictSet {
    adjacency: Vec<BTreeSet<usize>>,
}

impl ConflictSet {
    pub fn new(n: usize) -> ConflictSet {
        ConflictSet {
            adjacency: vec![BTreeSet::new(); n],
        }
    }

    pub fn from_pairs(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> ConflictSet {
        let mut c = ConflictSet::new(n);
        for (u, v) in pairs {
            c.insert(u, v);
        }
        c
    }

    pub fn insert(&mut self, u: usize, v: usize) {
        if u != v {
            self.adjacency[u].insert(v);
            self.adjacency[v].insert(u);
        }
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn conflicts(&self, u: usize, v: usize) -> bool {
        self.adjacency[u].contains(&v)
    }

    pub fn neighbors(&self, u: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency[u].iter().copied()
    }

    /// Each pair once, with `u < v`.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(u, adj)| adj.range(u + 1..).map(move |&v| (u, v)))
    }
}

/// Buffers conflict iff their closed step intervals intersect.
pub fn derive_conflicts(lifetimes: &LifetimeTable) -> ConflictSet {
    let b = &lifetimes.buffers;
    let mut c = ConflictSet::new(b.len());
    for u in 0..b.len() {
        for v in u + 1..b.len() {
            if b[u].first <= b[v].last && b[v].first <= b[u].last {
                c.insert(u, v);
            }
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryLayout {
    pub ends: Vec<usize>,
    pub sizes: Vec<usize>,
    pub peak: usize,
}

impl MemoryLayout {
    fn from_ends(ends: Vec<usize>, sizes: &[usize]) -> MemoryLayout {
        let peak = ends.iter().copied().max().unwrap_or(0);
        MemoryLayout {
            ends,
            sizes: sizes.to_vec(),
            peak,
        }
    }

    pub fn offset(&self, i: usize) -> usize {
        self.ends[i] - self.sizes[i]
    }

    /// Checks offsets are non-negative, conflicting buffers are disjoint
    /// and `peak` is the largest end.
    pub fn is_valid(&self, conflicts: &ConflictSet) -> bool {
        let n = self.sizes.len();
        self.ends.len() == n
            && (0..n).all(|i| self.ends[i] >= self.sizes[i])
            && conflicts.pairs().all(|(u, v)| {
                self.ends[u] - self.sizes[u] >= self.ends[v]
                    || self.ends[v] - self.sizes[v] >= self.ends[u]
            })
            && self.peak == self.ends.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanOptions {
    pub timeout: Duration,
    /// Search nodes the exact planner may expand before giving up.
    pub max_nodes: usize,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            timeout: Duration::from_secs(30),
            max_nodes: 200_000,
        }
    }
}

/// Best-fit by decreasing size. Each buffer takes the tightest gap between
/// already placed conflicting buffers, lowest offset on ties, or goes on
/// top of them when no gap fits.
pub fn plan_heuristic(sizes: &[usize], conflicts: &ConflictSet) -> MemoryLayout {
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(sizes[i]), i));
    place_in_order(sizes, conflicts, &order, true)
}

/// Places buffers one by one in `order`, into the tightest fitting gap when
/// `best_fit` is set and into the lowest one otherwise.
fn place_in_order(
    sizes: &[usize],
    conflicts: &ConflictSet,
    order: &[usize],
    best_fit: bool,
) -> MemoryLayout {
    let mut ends: Vec<Option<usize>> = vec![None; sizes.len()];
    for &v in order {
        let mut busy: Vec<(usize, usize)> = conflicts
            .neighbors(v)
            .filter_map(|u| ends[u].map(|e| (e - sizes[u], e)))
            .collect();
        busy.sort_unstable();
        let mut best: Option<(usize, usize)> = None; // (gap, offset)
        let mut cursor = 0;
        for &(start, end) in &busy {
            if start > cursor {
                let gap = start - cursor;
                if gap >= sizes[v] && best.is_none_or(|(g, _)| best_fit && gap < g) {
                    best = Some((gap, cursor));
                }
            }
            cursor = cursor.max(end);
        }
        let offset = best.map_or(cursor, |(_, o)| o);
        ends[v] = Some(offset + sizes[v]);
    }
    MemoryLayout::from_ends(ends.into_iter().map(|e| e.unwrap_or(0)).collect(), sizes)
}

/// Heuristic layout for buffers with known lifetimes: the best of
/// [`plan_heuristic`] and placement by decreasing size times lifetime
/// length. Earlier candidates win ties.
pub fn plan_heuristic_intervals(
    lifetimes: &LifetimeTable,
    sizes: &[usize],
    conflicts: &ConflictSet,
) -> MemoryLayout {
    let b = &lifetimes.buffers;
    let mut by_area: Vec<usize> = (0..sizes.len()).collect();
    by_area.sort_by_key(|&i| {
        (
            std::cmp::Reverse((b[i].last - b[i].first + 1) * sizes[i]),
            i,
        )
    });
    [
        place_in_order(sizes, conflicts, &by_area, true),
        place_in_order(sizes, conflicts, &by_area, false),
    ]
    .into_iter()
    .fold(plan_heuristic(sizes, conflicts), |best, l| {
        if l.peak < best.peak {
            l
        } else {
            best
        }
    })
}

/// Planning for buffers with known lifetimes and sizes `sizes` (which may
/// differ from the recorded ones). Seeds the exact search with
/// [`plan_heuristic_intervals`] and bounds it by the largest live sum; on
/// timeout the seed is returned.
pub fn plan_intervals(
    lifetimes: &LifetimeTable,
    sizes: &[usize],
    conflicts: &ConflictSet,
    opts: &PlanOptions,
) -> MemoryLayout {
    let seed = plan_heuristic_intervals(lifetimes, sizes, conflicts);
    exact::search(
        sizes,
        conflicts,
        seed.clone(),
        live_peak(lifetimes, sizes),
        opts,
    )
    .unwrap_or(seed)
}

/// Exact planning with a fall back to the heuristic on timeout.
pub fn plan(sizes: &[usize], conflicts: &ConflictSet, opts: &PlanOptions) -> MemoryLayout {
    plan_bounded(sizes, conflicts, 0, opts)
}

/// [`plan`] given a known lower bound on the peak, such as the largest
/// live sum of a schedule.
pub fn plan_bounded(
    sizes: &[usize],
    conflicts: &ConflictSet,
    lower_bound: usize,
    opts: &PlanOptions,
) -> MemoryLayout {
    plan_exact_bounded(sizes, conflicts, lower_bound, opts)
        .unwrap_or_else(|_| plan_heuristic(sizes, conflicts))
}

/// Largest sum of `sizes` over buffers live at one step. Buffers live at
/// the same step pairwise conflict, so no layout can beat this.
pub fn live_peak(lifetimes: &LifetimeTable, sizes: &[usize]) -> usize {
    let mut profile = vec![0; lifetimes.steps];
    for (b, &s) in lifetimes.buffers.iter().zip(sizes) {
        for p in &mut profile[b.first..=b.last] {
            *p += s;
        }
    }
    profile.into_iter().max().unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::TensorKind;
    use crate::schedule::Lifetime;

    fn table(intervals: &[(usize, usize)]) -> LifetimeTable {
        LifetimeTable {
            buffers: intervals
                .iter()
                .enumerate()
                .map(|(i, &(first, last))| Lifetime {
                    tensor: format!("t{i}"),
                    kind: TensorKind::Intermediate,
                    size: 1,
                    first,
                    last,
                })
                .collect(),
            steps: intervals.iter().map(|i| i.1 + 1).max().unwrap_or(0),
        }
    }

    #[test]
    fn interval_boundaries() {
        assert!(!derive_conflicts(&table(&[(0, 2), (3, 5)])).conflicts(0, 1));
        assert!(derive_conflicts(&table(&[(0, 3), (3, 5)])).conflicts(0, 1));
    }

    #[test]
    fn chain_conflicts_are_op_neighbours() {
        // x -A-> a -B-> b -C-> c with x an input: x [0,0], a [0,1], b [1,2], c [2,2]
        let c = derive_conflicts(&table(&[(0, 0), (0, 1), (1, 2), (2, 2)]));
        let pairs: Vec<_> = c.pairs().collect();
        assert_eq!(pairs, vec![(0, 1), (1, 2), (2, 3)]);
    }

    #[test]
    fn heuristic_basics() {
        let free = plan_heuristic(&[5, 7, 3], &ConflictSet::new(3));
        assert_eq!(free.ends, vec![5, 7, 3]);
        assert!((0..3).all(|i| free.offset(i) == 0));
        let clique = ConflictSet::from_pairs(4, [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
        let l = plan_heuristic(&[8; 4], &clique);
        assert_eq!(l.peak, 32);
        assert!(l.is_valid(&clique));
    }

    #[test]
    fn heuristic_fills_gaps() {
        // 1 stacks on 0; 3 and 2 then share the space below 1
        let c = ConflictSet::from_pairs(4, [(0, 1), (1, 2), (2, 3), (1, 3)]);
        let l = plan_heuristic(&[10, 10, 4, 6], &c);
        assert!(l.is_valid(&c));
        assert_eq!(l.peak, 20);
    }
}
