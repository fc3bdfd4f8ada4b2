use dfmt::planner::{Plan, PlannerConfig, PlanningInstance, Variant};
use dfmt::scenario::{bundled, ScenarioSpec};
use dfmt::world::{Aabb, ProblemInstance};
use nalgebra::DVector;

fn free() -> ProblemInstance {
    bundled("free").unwrap()
}

fn with_obstacles(p: &ProblemInstance, obstacles: Vec<Aabb>) -> ProblemInstance {
    let mut spec = ScenarioSpec::from_problem(p);
    spec.obstacles = obstacles;
    spec.build().unwrap()
}

fn cfg(n: usize) -> PlannerConfig {
    PlannerConfig { n_samples: n, ..Default::default() }
}

fn goal_vertices(inst: &PlanningInstance) -> Vec<usize> {
    (0..inst.vertices().len()).filter(|&i| inst.problem().in_goal(&inst.vertices()[i])).collect()
}

/// Cheapest direct connection from `x_init` to a goal vertex of `V`.
fn direct_to_goal(inst: &PlanningInstance) -> f64 {
    let v = inst.vertices();
    goal_vertices(inst)
        .into_iter()
        .filter_map(|g| inst.steerer().connection_cost(&v[0], &v[g]))
        .fold(f64::INFINITY, f64::min)
}

/// Each segment collision-free at half the planning resolution, endpoints
/// chained, terminal state in the goal.
fn revalidate(inst: &PlanningInstance, plan: &Plan) {
    let v = inst.vertices();
    let p = inst.problem();
    let segs = &plan.trajectory.segments;
    assert_eq!(segs.len() + 1, plan.waypoints.len());
    for (s, w) in segs.iter().zip(plan.waypoints.windows(2)) {
        assert_eq!(s.x0, v[w[0]]);
        assert_eq!(s.x1, v[w[1]]);
        let dt = dfmt::world::default_collision_dt(s.tau_star) / 2.0;
        assert!(p.collision_free(inst.steerer(), s, dt), "segment {w:?} collides at half resolution");
    }
    let last = *plan.waypoints.last().unwrap();
    assert!(p.in_goal(&v[last]));
    let total: f64 = segs.iter().map(|s| s.cost).sum();
    assert!((total - plan.cost.unwrap()).abs() <= 1e-9 * total.max(1.0));
}

/// Tree invariants shared by both planners.
fn check_tree(plan: &Plan) {
    let g = &plan.graph;
    let mut seen = vec![false; g.vertices.len()];
    for e in &g.edges {
        assert!(!seen[e.to], "vertex {} entered twice", e.to);
        seen[e.to] = true;
        assert_eq!(g.parent[e.to], Some(e.from));
        let (a, b) = (g.cost_to_come[e.from].unwrap(), g.cost_to_come[e.to].unwrap());
        assert!((a + e.cost - b).abs() <= 1e-9 * b.max(1.0), "{a} + {} != {b}", e.cost);
    }
    assert!(!seen[0]);
}

#[test]
fn start_inside_goal_gives_empty_plan() {
    let p = free();
    let p = p.with_x_init(p.goal().center()).unwrap();
    let inst = PlanningInstance::new(p, cfg(50), 1).unwrap();
    for plan in [inst.dfmt(None).unwrap(), inst.dprm(None).unwrap()] {
        assert!(plan.success);
        assert_eq!(plan.waypoints, vec![0]);
        assert!(plan.trajectory.segments.is_empty());
        assert_eq!(plan.cost, Some(0.0));
    }
}

#[test]
fn separating_wall_fails() {
    let p = free();
    let wall = Aabb::new(vec![0.45, -1.0], vec![0.55, 2.0]);
    let p = with_obstacles(&p, vec![wall]);
    let inst = PlanningInstance::new(p, cfg(200), 3).unwrap();
    let dfmt = inst.dfmt(None).unwrap();
    assert!(!dfmt.success);
    assert_eq!(dfmt.cost, None);
    assert!(dfmt.waypoints.is_empty());
    assert!(!inst.dprm(None).unwrap().success);
}

#[test]
fn tiny_radius_disconnects_graph() {
    let c = PlannerConfig { radius_override: Some(1e-3), ..cfg(100) };
    let inst = PlanningInstance::new(free(), c, 2).unwrap();
    assert!(!inst.dfmt(None).unwrap().success);
    assert!(!inst.dprm(None).unwrap().success);
}

#[test]
fn free_world_costs_are_bracketed() {
    let inst = PlanningInstance::new(free(), cfg(200), 7).unwrap();
    let dfmt = inst.dfmt(None).unwrap();
    let dprm = inst.dprm(None).unwrap();
    assert!(dfmt.success && dprm.success);
    let (a, b) = (dfmt.cost.unwrap(), dprm.cost.unwrap());
    let direct = direct_to_goal(&inst);
    assert!(b >= direct * (1.0 - 1e-6), "graph path {b} beats direct steering {direct}");
    assert!(b <= a + 1e-9, "DPRM* {b} > DFMT* {a}");
    revalidate(&inst, &dfmt);
    revalidate(&inst, &dprm);
}

#[test]
fn wavefront_is_monotone_and_tree_consistent() {
    let inst = PlanningInstance::new(bundled("maze").unwrap(), cfg(400), 5).unwrap();
    for plan in [inst.dfmt(None).unwrap(), inst.dprm(None).unwrap()] {
        let g = &plan.graph;
        let costs: Vec<f64> = g.expansion_order.iter().map(|&z| g.cost_to_come[z].unwrap()).collect();
        assert!(costs.windows(2).all(|w| w[0] <= w[1]), "expansion costs decrease");
        let mut expanded = vec![false; g.vertices.len()];
        for &z in &g.expansion_order {
            assert!(!expanded[z]);
            expanded[z] = true;
        }
        check_tree(&plan);
    }
}

#[test]
fn maze_plans_revalidate() {
    let inst = PlanningInstance::new(bundled("maze").unwrap(), cfg(500), 1).unwrap();
    let plan = inst.dfmt(None).unwrap();
    assert!(plan.success);
    revalidate(&inst, &plan);
    let plan = inst.dprm(None).unwrap();
    assert!(plan.success);
    revalidate(&inst, &plan);
}

#[test]
fn dprm_never_loses_to_dfmt() {
    for seed in 0..4 {
        let inst = PlanningInstance::new(bundled("single_wall").unwrap(), cfg(300), seed).unwrap();
        let a = inst.dfmt(None).unwrap();
        let b = inst.dprm(None).unwrap();
        if let Some(a) = a.cost {
            let b = b.cost.expect("DPRM* succeeds whenever DFMT* does");
            assert!(b <= a + 1e-9, "seed {seed}: {b} > {a}");
        }
    }
}

#[test]
fn unlimited_radius_matches_direct_steering() {
    let c = PlannerConfig { radius_override: Some(f64::INFINITY), ..cfg(30) };
    let inst = PlanningInstance::new(free(), c, 11).unwrap();
    let plan = inst.dprm(None).unwrap();
    let direct = direct_to_goal(&inst);
    let cost = plan.cost.unwrap();
    assert!((cost - direct).abs() <= 1e-6 * direct, "{cost} vs {direct}");
}

/// Minimum over simple paths from 0 to a goal vertex, edges below `r`.
fn brute_force(inst: &PlanningInstance) -> Option<f64> {
    let v = inst.vertices();
    let n = v.len();
    let r = inst.radius();
    let w: Vec<Vec<Option<f64>>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        return None;
                    }
                    let c = inst.steerer().connection_cost(&v[i], &v[j])?;
                    let seg = inst.steerer().steer(&DVector::from_column_slice(&v[i]), &DVector::from_column_slice(&v[j])).ok()?;
                    let dt = dfmt::world::default_collision_dt(seg.tau_star);
                    (c < r && inst.problem().collision_free(inst.steerer(), &seg, dt)).then_some(c)
                })
                .collect()
        })
        .collect();
    fn go(u: usize, acc: f64, used: &mut Vec<bool>, w: &[Vec<Option<f64>>], inst: &PlanningInstance, best: &mut Option<f64>) {
        if inst.problem().in_goal(&inst.vertices()[u]) {
            if best.is_none_or(|b| acc < b) {
                *best = Some(acc);
            }
            return;
        }
        for next in 0..w.len() {
            if let (false, Some(c)) = (used[next], w[u][next]) {
                used[next] = true;
                go(next, acc + c, used, w, inst, best);
                used[next] = false;
            }
        }
    }
    let mut best = None;
    let mut used = vec![false; n];
    used[0] = true;
    go(0, 0.0, &mut used, &w, inst, &mut best);
    best
}

#[test]
fn dprm_matches_path_enumeration() {
    let mut checked = 0;
    for seed in 0..20 {
        for r in [0.8, 1.5, 3.0] {
            let c = PlannerConfig { radius_override: Some(r), goal_samples: Some(1), ..cfg(7) };
            let inst = PlanningInstance::new(free(), c, seed).unwrap();
            assert_eq!(inst.vertices().len(), 9);
            let plan = inst.dprm(None).unwrap();
            match (plan.cost, brute_force(&inst)) {
                (Some(a), Some(b)) => {
                    assert!((a - b).abs() <= 1e-9 * b.max(1.0), "seed {seed} r {r}: {a} vs {b}");
                    checked += 1;
                }
                (None, None) => {}
                other => panic!("seed {seed} r {r}: {other:?}"),
            }
        }
    }
    assert!(checked >= 10, "only {checked} solvable instances");
}

#[test]
fn cache_is_transparent() {
    let inst = PlanningInstance::new(bundled("single_wall").unwrap(), cfg(300), 4).unwrap();
    let cache = inst.build_cache();
    for (live, cached) in [
        (inst.dfmt(None).unwrap(), inst.dfmt(Some(&cache)).unwrap()),
        (inst.dprm(None).unwrap(), inst.dprm(Some(&cache)).unwrap()),
    ] {
        assert!(cached.stats.cache_hit);
        assert_eq!(live.cost, cached.cost);
        assert_eq!(live.waypoints, cached.waypoints);
        assert_eq!(live.graph, cached.graph);
        assert_eq!(live.stats.collision_checks, cached.stats.collision_checks);
    }
}

#[test]
fn cache_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("near.json");
    let inst = PlanningInstance::new(free(), cfg(120), 9).unwrap();
    let (built, hit) = inst.load_or_build_cache(&path).unwrap();
    assert!(!hit);
    let (loaded, hit) = inst.load_or_build_cache(&path).unwrap();
    assert!(hit);
    assert_eq!(built.forward, loaded.forward);
    let other = PlanningInstance::new(free(), cfg(120), 10).unwrap();
    assert!(other.load_or_build_cache(&path).is_err());
}

#[test]
fn plans_are_deterministic() {
    let run = || {
        let inst = PlanningInstance::new(bundled("maze").unwrap(), cfg(300), 21).unwrap();
        serde_json::to_string(&inst.dfmt(None).unwrap()).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn fixed_time_variant_plans() {
    let c = PlannerConfig { variant: Variant::Fixed(1.0), radius_override: Some(3.0), ..cfg(300) };
    let inst = PlanningInstance::new(free(), c, 1).unwrap();
    let plan = inst.dfmt(None).unwrap();
    assert!(plan.success);
    assert!(plan.trajectory.segments.iter().all(|s| s.tau_star == 1.0));
    revalidate(&inst, &plan);
    let best = inst.dprm(None).unwrap().cost.unwrap();
    assert!(best <= plan.cost.unwrap() + 1e-9);
}
