//! Shortest paths over the directed graph of collision-free connections.
//!
//! Dijkstra with edges generated on demand. When a vertex is settled, its
//! possible successors enter the queue keyed by a lower bound on the path
//! cost; a bound that reaches the top is replaced by the exact connection
//! cost, and an exact entry that reaches the top is collision-checked before
//! it may settle its head. An edge that could still change a distance is
//! therefore always examined, so the distances equal those of Dijkstra on the
//! fully built graph.

use std::collections::BTreeSet;
use std::time::Instant;

use super::{Bound, Neighborhood, NeighborCache, Plan, PlanEdge, PlanGraph, PlanStats, PlanningInstance};
use crate::steering::SteeringResult;

/// `(path cost or lower bound, head, tail, bound stage)`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry(f64, usize, usize, Bound);

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0
            .total_cmp(&other.0)
            .then(self.1.cmp(&other.1))
            .then(self.2.cmp(&other.2))
            .then(self.3.cmp(&other.3))
    }
}

pub(crate) fn run(inst: &PlanningInstance, cache: Option<&NeighborCache>) -> Plan {
    let start = Instant::now();
    let v = inst.vertices();
    let problem = inst.problem();
    let mut stats = PlanStats { cache_hit: cache.is_some(), ..Default::default() };
    let mut nbhd = Neighborhood::new(inst, cache);
    let mut graph = PlanGraph::new(v);
    let mut seg: Vec<Option<SteeringResult>> = vec![None; v.len()];
    let mut settled = vec![false; v.len()];
    let mut queue: BTreeSet<Entry> = BTreeSet::new();

    let mut next = Some((0usize, 0.0f64));
    let mut goal = None;
    while let Some((u, d)) = next.take() {
        settled[u] = true;
        graph.cost_to_come[u] = Some(d);
        if problem.in_goal(&v[u]) {
            goal = Some(u);
            break;
        }
        graph.expansion_order.push(u);
        for l in nbhd.successors(u, |w| !settled[w], &mut stats) {
            queue.insert(Entry(d + l.key(), l.to, u, l.bound()));
        }
        while let Some(Entry(key, w, from, bound)) = queue.pop_first() {
            if settled[w] {
                continue;
            }
            let d_from = graph.cost_to_come[from].expect("settled");
            match bound {
                Bound::Coarse(k) => {
                    let f = nbhd.fine_bound(from, w, k as usize);
                    if f < nbhd.radius() {
                        queue.insert(Entry((d_from + f).max(key), w, from, Bound::Fine(k)));
                    }
                    continue;
                }
                Bound::Fine(k) => {
                    if let Some(c) = nbhd.exact_cost(from, w, Some(k as usize), &mut stats) {
                        queue.insert(Entry(d_from + c, w, from, Bound::Exact));
                    }
                    continue;
                }
                Bound::Exact => {}
            }
            if let Some(s) = inst.checked_edge(from, w, &mut stats) {
                graph.parent[w] = Some(from);
                graph.edges.push(PlanEdge { from, to: w, cost: s.cost });
                seg[w] = Some(s);
                next = Some((w, key));
                break;
            }
        }
    }
    let segment = |_: usize, to: usize| seg[to].clone().expect("tree edge has a segment");
    inst.finish(graph, goal, &segment, stats, start)
}
