//! Hill-valley scheduling heuristic.
//!
//! The graph is cut into segments: maximal chains where each unit has one
//! successor and that successor has one predecessor. Whenever several
//! segments are ready, each is simulated from the current resident set; its
//! hill is the largest step cost and its valley the smallest cost at or after
//! the hill. The segment with the largest drop runs next, in full.

use fixedbitset::FixedBitSet;

use super::{Schedule, Units};
use crate::fusion::FusedView;

pub fn schedule_hill_valley(view: &FusedView<'_>, align4: bool) -> Schedule {
    let units = Units::new(view, align4);
    units.to_schedule(&hill_valley_units(&units))
}

fn segment(units: &Units, head: usize) -> Vec<usize> {
    let mut seg = vec![head];
    let mut cur = head;
    while let [next] = units.succs[cur][..] {
        if units.preds[next].count_ones(..) != 1 {
            break;
        }
        seg.push(next);
        cur = next;
    }
    seg
}

/// Drop from the highest step to the lowest step after it.
fn hill_valley_diff(costs: &[usize]) -> usize {
    let (hill, &max) = costs
        .iter()
        .enumerate()
        .rev()
        .max_by_key(|&(_, c)| *c)
        .unwrap_or((0, &0));
    let valley = costs[hill..].iter().copied().min().unwrap_or(max);
    max - valley
}

pub(crate) fn hill_valley_units(units: &Units) -> Vec<usize> {
    let n = units.len();
    let mut done = FixedBitSet::with_capacity(n);
    let mut resident = units.initial_resident();
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let mut best: Option<(usize, &str, Vec<usize>)> = None;
        for head in (0..n).filter(|&u| units.is_ready(u, &done)) {
            let seg = segment(units, head);
            let mut sim_done = done.clone();
            let mut sim_resident = resident;
            let costs: Vec<usize> = seg
                .iter()
                .map(|&u| {
                    let (cost, next) = units.step(u, sim_resident, &mut sim_done);
                    sim_resident = next;
                    cost
                })
                .collect();
            let diff = hill_valley_diff(&costs);
            let key = units.key(head);
            let better = match &best {
                None => true,
                Some((d, k, _)) => diff > *d || (diff == *d && key < *k),
            };
            if better {
                best = Some((diff, key, seg));
            }
        }
        let (_, _, seg) = best.expect("a DAG always has a ready unit");
        for u in seg {
            let (_, next) = units.step(u, resident, &mut done);
            resident = next;
            order.push(u);
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::fusion::fuse;
    use crate::schedule::tests::elementwise;

    #[test]
    fn larger_drop_runs_first() {
        // path b falls by 89 floats after its hill, path a by 5
        let g = elementwise(
            &[("x", 1)],
            &[
                ("a1", &["x"], "a", 10),
                ("a2", &["a"], "ar", 5),
                ("a3", &["ar"], "as", 5),
                ("b1", &["x"], "b", 90),
                ("b2", &["b"], "br", 1),
                ("b3", &["br"], "bs", 1),
                ("join", &["as", "bs"], "y", 6),
            ],
        );
        let view = fuse(&g, &BTreeSet::new());
        let s = schedule_hill_valley(&view, false);
        assert_eq!(s.order, vec!["b1", "b2", "b3", "a1", "a2", "a3", "join"]);
    }

    #[test]
    fn single_path_identity() {
        let g = elementwise(
            &[("x", 2)],
            &[
                ("a", &["x"], "t", 3),
                ("b", &["t"], "u", 2),
                ("c", &["u"], "v", 1),
            ],
        );
        let view = fuse(&g, &BTreeSet::new());
        assert_eq!(
            schedule_hill_valley(&view, false).order,
            vec!["a", "b", "c"]
        );
    }

    #[test]
    fn diff_measures_drop_after_hill() {
        assert_eq!(hill_valley_diff(&[5, 100, 10, 50]), 90);
        assert_eq!(hill_valley_diff(&[1, 2, 3]), 0);
        assert_eq!(hill_valley_diff(&[]), 0);
    }
}
