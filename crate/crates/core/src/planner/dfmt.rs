//! Differential Fast Marching Tree.
//!
//! Follows Algorithm 1 step by step. Two bookkeeping devices keep the
//! `Y_near` argmin cheap without changing its result:
//!
//! * every vertex `y` pushes `(c(y) + bound, y)` into the candidate heap of
//!   each possible successor when it joins `H`; the bound is a lower bound
//!   on `c*(y, x)` and is replaced by the exact cost once it reaches the top,
//!   so the first exact entry at the top is the true argmin (ties by index);
//! * entries whose vertex has left `H` are discarded lazily.
//!
//! `CollisionFree` is deterministic, so a pair that failed is not rechecked.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::time::Instant;

use super::{Bound, Neighborhood, NeighborCache, Plan, PlanEdge, PlanGraph, PlanStats, PlanningInstance};
use crate::steering::SteeringResult;

/// `(cost, vertex)` ordered by cost, ties broken by index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Keyed(pub f64, pub usize);

impl Eq for Keyed {}

impl PartialOrd for Keyed {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Keyed {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Candidate parent `y` of some `x`, keyed by `c(y) + c*(y, x)` or a lower
/// bound of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Candidate {
    key: Keyed,
    bound: Bound,
}

#[derive(Debug, Clone, Copy)]
enum Membership {
    Certain,
    Unknown(Option<usize>),
}

struct Frontier<'s> {
    r: f64,
    open: &'s mut BTreeSet<Keyed>,
    parents: &'s mut [BinaryHeap<Reverse<Candidate>>],
    /// Possible forward neighbors of open vertices; `true` marks certain ones.
    successors: &'s mut [Vec<(usize, Membership)>],
}

impl Frontier<'_> {
    /// Adds `y` to `H` and offers it as a parent to its possible successors.
    fn join(
        &mut self,
        y: usize,
        cost: f64,
        in_w: &[bool],
        in_h: &mut [bool],
        nbhd: &mut Neighborhood<'_>,
        stats: &mut PlanStats,
    ) {
        in_h[y] = true;
        self.open.insert(Keyed(cost, y));
        let links = nbhd.successors(y, |x| in_w[x], stats);
        self.successors[y] = links
            .iter()
            .map(|l| (l.to, if l.upper < self.r { Membership::Certain } else { Membership::Unknown(l.node) }))
            .collect();
        for l in links {
            self.parents[l.to].push(Reverse(Candidate { key: Keyed(cost + l.key(), y), bound: l.bound() }));
        }
    }
}

pub(crate) fn run(inst: &PlanningInstance, cache: Option<&NeighborCache>) -> Plan {
    let start = Instant::now();
    let v = inst.vertices();
    let problem = inst.problem();
    let mut stats = PlanStats { cache_hit: cache.is_some(), ..Default::default() };
    let mut nbhd = Neighborhood::new(inst, cache);
    let r = nbhd.radius();
    let mut graph = PlanGraph::new(v);
    let mut seg: Vec<Option<SteeringResult>> = vec![None; v.len()];
    let mut blocked: HashMap<usize, Vec<usize>> = HashMap::new();

    // W: unexplored, H: open wavefront ordered by cost-to-come.
    let mut in_w = vec![true; v.len()];
    let mut in_h = vec![false; v.len()];
    let mut open: BTreeSet<Keyed> = BTreeSet::new();
    let mut parents: Vec<BinaryHeap<Reverse<Candidate>>> = vec![BinaryHeap::new(); v.len()];
    let mut successors: Vec<Vec<(usize, Membership)>> = vec![Vec::new(); v.len()];

    in_w[0] = false;
    let mut frontier = Frontier { r, open: &mut open, parents: &mut parents, successors: &mut successors };
    frontier.join(0, 0.0, &in_w, &mut in_h, &mut nbhd, &mut stats);
    let mut z = 0;
    let goal = loop {
        if problem.in_goal(&v[z]) {
            break Some(z);
        }
        graph.expansion_order.push(z);
        // X_near = Near⁺(V ∖ {z}, z, r) ∩ W
        let mut x_near = Vec::new();
        for (x, m) in std::mem::take(&mut frontier.successors[z]) {
            let member = match m {
                Membership::Certain => true,
                Membership::Unknown(node) => {
                    node.is_none_or(|k| nbhd.fine_bound(z, x, k) < r)
                        && nbhd.exact_cost(z, x, node, &mut stats).is_some()
                }
            };
            if in_w[x] && member {
                x_near.push(x);
            }
        }
        let mut h_new = Vec::new();
        for x in x_near {
            // y_min = argmin over Near⁻(V ∖ {x}, x, r) ∩ H of c(y) + c*(y, x)
            let best = loop {
                let Some(&Reverse(top)) = frontier.parents[x].peek() else { break None };
                let y = top.key.1;
                if !in_h[y] {
                    frontier.parents[x].pop();
                    continue;
                }
                let c_y = graph.cost_to_come[y].expect("open vertices have a cost");
                let next = match top.bound {
                    Bound::Exact => break Some(top.key),
                    Bound::Coarse(k) => {
                        let f = nbhd.fine_bound(y, x, k as usize);
                        (f < r).then(|| Candidate { key: Keyed((c_y + f).max(top.key.0), y), bound: Bound::Fine(k) })
                    }
                    Bound::Fine(k) => nbhd
                        .exact_cost(y, x, Some(k as usize), &mut stats)
                        .map(|c| Candidate { key: Keyed(c_y + c, y), bound: Bound::Exact }),
                };
                frontier.parents[x].pop();
                if let Some(next) = next {
                    frontier.parents[x].push(Reverse(next));
                }
            };
            let Some(Keyed(cost, y_min)) = best else { continue };
            if blocked.get(&x).is_some_and(|b| b.contains(&y_min)) {
                continue;
            }
            match inst.checked_edge(y_min, x, &mut stats) {
                Some(s) => {
                    graph.parent[x] = Some(y_min);
                    graph.cost_to_come[x] = Some(cost);
                    graph.edges.push(PlanEdge { from: y_min, to: x, cost: s.cost });
                    seg[x] = Some(s);
                    h_new.push(x);
                    in_w[x] = false;
                    frontier.parents[x] = BinaryHeap::new();
                }
                None => blocked.entry(x).or_default().push(y_min),
            }
        }
        for x in h_new {
            let c = graph.cost_to_come[x].expect("just connected");
            frontier.join(x, c, &in_w, &mut in_h, &mut nbhd, &mut stats);
        }
        in_h[z] = false;
        frontier.open.remove(&Keyed(graph.cost_to_come[z].expect("expanded vertices have a cost"), z));
        match frontier.open.first() {
            Some(&Keyed(_, next)) => z = next,
            None => break None,
        }
    };
    let segment = |_: usize, to: usize| seg[to].clone().expect("tree edge has a segment");
    inst.finish(graph, goal, &segment, stats, start)
}
