//! Exact layout planning by branch and bound.
//!
//! Fixing, for every conflicting pair, which buffer sits below the other
//! turns the disjunctive program into a longest-path problem. Any acyclic
//! choice is a placement order in which each buffer lands directly on top of
//! the highest conflicting buffer placed before it, so the search enumerates
//! placement orders. Two adjacent non-conflicting buffers commute, so only
//! the order with the smaller index first is explored.

use std::time::Instant;

use super::{plan_heuristic, ConflictSet, LayoutError, MemoryLayout, PlanOptions};

struct Search<'a> {
    sizes: &'a [usize],
    conflicts: &'a ConflictSet,
    /// Branching order: larger buffers first.
    by_size: Vec<usize>,
    ends: Vec<Option<usize>>,
    best: Vec<usize>,
    best_peak: usize,
    lower_bound: usize,
    nodes: usize,
    opts: PlanOptions,
    start: Instant,
}

impl Search<'_> {
    fn floor(&self, v: usize) -> usize {
        self.conflicts
            .neighbors(v)
            .filter_map(|u| self.ends[u])
            .max()
            .unwrap_or(0)
    }

    fn bound(&self, peak: usize) -> usize {
        self.by_size
            .iter()
            .filter(|&&v| self.ends[v].is_none())
            .map(|&v| self.sizes[v] + self.floor(v))
            .fold(peak, usize::max)
    }

    fn run(&mut self, placed: usize, last: Option<usize>, peak: usize) -> Result<(), LayoutError> {
        self.nodes += 1;
        if self.nodes > self.opts.max_nodes
            || (self.nodes.is_multiple_of(1024) && self.start.elapsed() > self.opts.timeout)
        {
            return Err(LayoutError::Timeout);
        }
        if placed == self.sizes.len() {
            if peak < self.best_peak {
                self.best_peak = peak;
                self.best = self.ends.iter().map(|e| e.unwrap_or(0)).collect();
            }
            return Ok(());
        }
        if self.bound(peak) >= self.best_peak {
            return Ok(());
        }
        for i in 0..self.by_size.len() {
            let v = self.by_size[i];
            if self.ends[v].is_some() {
                continue;
            }
            if let Some(w) = last {
                if v < w && !self.conflicts.conflicts(v, w) {
                    continue;
                }
            }
            let end = self.floor(v) + self.sizes[v];
            self.ends[v] = Some(end);
            self.run(placed + 1, Some(v), peak.max(end))?;
            self.ends[v] = None;
            if self.best_peak <= self.lower_bound {
                break;
            }
        }
        Ok(())
    }
}

/// Weight of a clique grown greedily from each vertex, heaviest neighbours
/// first. Any clique must be stacked, so this bounds the peak from below.
fn greedy_clique_bound(sizes: &[usize], conflicts: &ConflictSet) -> usize {
    (0..sizes.len())
        .map(|v| {
            let mut cand: Vec<usize> = conflicts.neighbors(v).collect();
            cand.sort_by_key(|&u| (std::cmp::Reverse(sizes[u]), u));
            let mut clique = vec![v];
            for u in cand {
                if clique.iter().all(|&c| conflicts.conflicts(u, c)) {
                    clique.push(u);
                }
            }
            clique.iter().map(|&c| sizes[c]).sum::<usize>()
        })
        .max()
        .unwrap_or(0)
}

/// Minimum-peak layout. Fails with `Timeout` when the search exceeds
/// `opts.max_nodes` nodes or `opts.timeout`.
pub fn plan_exact(
    sizes: &[usize],
    conflicts: &ConflictSet,
    opts: &PlanOptions,
) -> Result<MemoryLayout, LayoutError> {
    plan_exact_bounded(sizes, conflicts, 0, opts)
}

/// [`plan_exact`] with a caller-supplied lower bound, which must be valid
/// for every layout of the instance.
pub fn plan_exact_bounded(
    sizes: &[usize],
    conflicts: &ConflictSet,
    lower_bound: usize,
    opts: &PlanOptions,
) -> Result<MemoryLayout, LayoutError> {
    search(
        sizes,
        conflicts,
        plan_heuristic(sizes, conflicts),
        lower_bound,
        opts,
    )
}

/// Branch and bound from a known valid `incumbent`.
pub(super) fn search(
    sizes: &[usize],
    conflicts: &ConflictSet,
    incumbent: MemoryLayout,
    lower_bound: usize,
    opts: &PlanOptions,
) -> Result<MemoryLayout, LayoutError> {
    let lower_bound = greedy_clique_bound(sizes, conflicts)
        .max(sizes.iter().copied().max().unwrap_or(0))
        .max(lower_bound);
    if incumbent.peak <= lower_bound {
        return Ok(incumbent);
    }
    let mut by_size: Vec<usize> = (0..sizes.len()).collect();
    by_size.sort_by_key(|&i| (std::cmp::Reverse(sizes[i]), i));
    let mut search = Search {
        sizes,
        conflicts,
        by_size,
        ends: vec![None; sizes.len()],
        best: incumbent.ends.clone(),
        best_peak: incumbent.peak,
        lower_bound,
        nodes: 0,
        opts: *opts,
        start: Instant::now(),
    };
    search.run(0, None, 0)?;
    Ok(MemoryLayout::from_ends(search.best, sizes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_and_pairs() {
        let opts = PlanOptions::default();
        assert_eq!(
            plan_exact(&[10], &ConflictSet::new(1), &opts).unwrap().peak,
            10
        );
        let both = ConflictSet::from_pairs(2, [(0, 1)]);
        assert_eq!(plan_exact(&[10, 6], &both, &opts).unwrap().peak, 16);
        assert_eq!(
            plan_exact(&[10, 6], &ConflictSet::new(2), &opts)
                .unwrap()
                .peak,
            10
        );
    }

    #[test]
    fn path_needs_middle_pair() {
        // 1 and 2 conflict, so nothing beats 6
        let c = ConflictSet::from_pairs(4, [(0, 1), (1, 2), (2, 3)]);
        let h = plan_heuristic(&[2, 3, 3, 2], &c);
        let e = plan_exact(&[2, 3, 3, 2], &c, &PlanOptions::default()).unwrap();
        assert!(e.is_valid(&c));
        assert!(e.peak <= h.peak);
        assert_eq!(e.peak, 6);
    }

    #[test]
    fn budget_exhaustion() {
        // a 5-cycle of unit buffers needs 3 bytes, but every edge only
        // certifies 2, so the search has to run
        let c = ConflictSet::from_pairs(5, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)]);
        let opts = PlanOptions {
            max_nodes: 0,
            ..Default::default()
        };
        let sizes = [1; 5];
        if plan_heuristic(&sizes, &c).peak > 2 {
            assert_eq!(plan_exact(&sizes, &c, &opts), Err(LayoutError::Timeout));
        }
        assert_eq!(
            plan_exact(&sizes, &c, &PlanOptions::default())
                .unwrap()
                .peak,
            3
        );
    }
}
