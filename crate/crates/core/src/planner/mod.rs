//! DFMT* and DPRM* over a sampled vertex set with the cost threshold `r_N`.

pub(crate) mod dfmt;
mod dprm;
pub mod near;
pub mod radius;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gramian::GramianError;
use crate::steering::{ConnectionMode, Direction, SteerConfig, Steerer, SteeringError, SteeringResult, Trajectory};
use crate::world::{default_collision_dt, ProblemInstance, WorldError};
use near::{vertex_hash, CacheError, CacheHeader, NearIndex, NeighborCache, CACHE_VERSION};

pub use near::Neighbor;

/// RNG stream for free-space samples; goal samples use the next one.
pub const FREE_STREAM: u64 = 0;
pub const GOAL_STREAM: u64 = 1;

/// Connection variant: optimal arrival time, or a prescribed one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    Optimal,
    Fixed(f64),
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Optimal => write!(f, "optimal"),
            Variant::Fixed(t) => write!(f, "fixed:{t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid variant {0:?}: expected `optimal` or `fixed:TAU` with TAU > 0")]
pub struct ParseVariantError(pub String);

impl FromStr for Variant {
    type Err = ParseVariantError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "optimal" {
            return Ok(Variant::Optimal);
        }
        let tau = s
            .strip_prefix("fixed:")
            .and_then(|t| t.trim().parse::<f64>().ok())
            .filter(|t| *t > 0.0 && t.is_finite())
            .ok_or_else(|| ParseVariantError(s.to_string()))?;
        Ok(Variant::Fixed(tau))
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Variant {
    pub fn mode(&self) -> ConnectionMode {
        match *self {
            Variant::Optimal => ConnectionMode::OptimalTime,
            Variant::Fixed(t) => ConnectionMode::FixedTime(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// Number of free-space samples `N`.
    pub n_samples: usize,
    pub eta: f64,
    /// Replaces the computed `r_N`.
    pub radius_override: Option<f64>,
    pub tau_max: f64,
    /// Collision resolution; `None` uses [`default_collision_dt`] per edge.
    pub collision_dt: Option<f64>,
    pub variant: Variant,
    pub cache_neighbors: bool,
    pub cost_cap: f64,
    pub steer_tol: f64,
    /// Extra samples inside the goal region; `None` means `max(1, N/100)`.
    pub goal_samples: Option<usize>,
    /// kd-tree pre-filtering of near-set candidates.
    pub prune: bool,
    /// Upper end of the `τ`-grid for `C_μ`.
    pub tau_mu: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            eta: 0.5,
            radius_override: None,
            tau_max: 10.0,
            collision_dt: None,
            variant: Variant::Optimal,
            cache_neighbors: false,
            cost_cap: 1e6,
            steer_tol: 1e-6,
            goal_samples: None,
            prune: true,
            tau_mu: 1.0,
        }
    }
}

impl PlannerConfig {
    pub fn steer_config(&self) -> SteerConfig {
        SteerConfig {
            tau_max: self.tau_max,
            tol: self.steer_tol,
            cost_cap: self.cost_cap,
            mode: self.variant.mode(),
            ..SteerConfig::default()
        }
    }

    pub fn goal_sample_count(&self) -> usize {
        self.goal_samples.unwrap_or((self.n_samples / 100).max(1))
    }

    pub fn validate(&self) -> Result<(), PlannerError> {
        let bad = |m: String| Err(PlannerError::InvalidConfig(m));
        if self.n_samples < 2 && self.radius_override.is_none() {
            return bad("N must be at least 2 unless the radius is overridden".into());
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be nonnegative, got {}", self.eta));
        }
        if let Some(r) = self.radius_override {
            if !(r > 0.0) {
                return bad(format!("radius override must be positive, got {r}"));
            }
        }
        if let Some(dt) = self.collision_dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return bad(format!("collision_dt must be positive, got {dt}"));
            }
        }
        if !(self.tau_mu > 0.0 && self.tau_mu.is_finite()) {
            return bad(format!("tau_mu must be positive, got {}", self.tau_mu));
        }
        self.steer_config().validate()?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("invalid planner configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Steering(#[from] SteeringError),
    #[error(transparent)]
    Gramian(#[from] GramianError),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanEdge {
    pub from: usize,
    pub to: usize,
    pub cost: f64,
}

/// The search tree (DFMT*) or the settled part of the graph (DPRM*).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanGraph {
    /// Index 0 is `x_init`.
    pub vertices: Vec<Vec<f64>>,
    /// Collision-free edges that were added to the tree or used as parents.
    pub edges: Vec<PlanEdge>,
    pub parent: Vec<Option<usize>>,
    pub cost_to_come: Vec<Option<f64>>,
    /// Vertices in the order they were expanded.
    pub expansion_order: Vec<usize>,
}

impl PlanGraph {
    fn new(vertices: &[Vec<f64>]) -> Self {
        let v = vertices.len();
        let mut g = Self {
            vertices: vertices.to_vec(),
            edges: Vec::new(),
            parent: vec![None; v],
            cost_to_come: vec![None; v],
            expansion_order: Vec::new(),
        };
        g.cost_to_come[0] = Some(0.0);
        g
    }

    /// Vertex indices from the root to `v`.
    pub fn path_to(&self, v: usize) -> Vec<usize> {
        let mut path = vec![v];
        let mut cur = v;
        while let Some(p) = self.parent[cur] {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanStats {
    /// Candidate edges handed to the collision checker.
    pub edges_evaluated: u64,
    /// States tested for collision.
    pub collision_checks: u64,
    /// Steering problems solved (cache lookups excluded).
    pub steer_calls: u64,
    /// Excluded from serialized plans so that they stay reproducible.
    #[serde(skip)]
    pub wall_ms: f64,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub success: bool,
    /// Vertex indices from `x_init` to the goal vertex.
    pub waypoints: Vec<usize>,
    pub trajectory: Trajectory,
    pub cost: Option<f64>,
    pub radius: f64,
    pub stats: PlanStats,
    #[serde(skip)]
    pub graph: PlanGraph,
}

/// A problem together with its sampled vertex set, steerer and `r_N`.
pub struct PlanningInstance {
    problem: ProblemInstance,
    cfg: PlannerConfig,
    seed: u64,
    steerer: Steerer,
    vertices: Vec<Vec<f64>>,
    radius: f64,
}

impl PlanningInstance {
    /// `V = {x_init} ∪ SampleFree(N) ∪ SampleGoal(N_goal)`.
    pub fn new(problem: ProblemInstance, cfg: PlannerConfig, seed: u64) -> Result<Self, PlannerError> {
        cfg.validate()?;
        let mut free_rng = ChaCha8Rng::seed_from_u64(seed);
        free_rng.set_stream(FREE_STREAM);
        let mut goal_rng = ChaCha8Rng::seed_from_u64(seed);
        goal_rng.set_stream(GOAL_STREAM);
        let mut vertices = vec![problem.x_init().to_vec()];
        vertices.extend(problem.sample_free(cfg.n_samples, &mut free_rng)?);
        vertices.extend(problem.sample_goal(cfg.goal_sample_count(), &mut goal_rng)?);
        Self::with_vertices(problem, cfg, seed, vertices)
    }

    /// Uses the given vertices; the first must be `x_init`.
    pub fn with_vertices(
        problem: ProblemInstance,
        cfg: PlannerConfig,
        seed: u64,
        vertices: Vec<Vec<f64>>,
    ) -> Result<Self, PlannerError> {
        cfg.validate()?;
        let n = problem.system().n();
        if vertices.first().map(Vec::as_slice) != Some(problem.x_init()) {
            return Err(PlannerError::InvalidConfig("the first vertex must be x_init".into()));
        }
        if vertices.iter().any(|v| v.len() != n) {
            return Err(WorldError::DimensionMismatch(format!("vertices must have {n} coordinates")).into());
        }
        let steerer = Steerer::new(problem.system().clone(), cfg.steer_config())?;
        let radius = match cfg.radius_override {
            Some(r) => r,
            None => {
                let info = problem.system().controllability_info();
                let c_mu = radius::estimate_c_mu(problem.system(), cfg.tau_mu)?;
                radius::radius(&info, problem.free_volume(), c_mu, cfg.eta, cfg.n_samples)
            }
        };
        Ok(Self { problem, cfg, seed, steerer, vertices, radius })
    }

    pub fn problem(&self) -> &ProblemInstance {
        &self.problem
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn steerer(&self) -> &Steerer {
        &self.steerer
    }

    pub fn vertices(&self) -> &[Vec<f64>] {
        &self.vertices
    }

    /// The connection-cost threshold `r_N`.
    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn near_index(&self) -> NearIndex<'_> {
        NearIndex::new(&self.steerer, &self.vertices, self.radius, self.cfg.prune)
    }

    pub fn cache_header(&self) -> CacheHeader {
        CacheHeader {
            version: CACHE_VERSION,
            system_hash: self.problem.system().fingerprint(),
            n: self.cfg.n_samples,
            seed: self.seed,
            r_n: self.radius,
            variant: self.cfg.variant.to_string(),
            vertex_hash: vertex_hash(&self.vertices),
        }
    }

    pub fn build_cache(&self) -> NeighborCache {
        NeighborCache::build(&self.near_index(), self.cache_header())
    }

    /// Loads the cache at `path` if present (rejecting a mismatched header),
    /// otherwise builds and writes it. The flag reports a load.
    pub fn load_or_build_cache(&self, path: &Path) -> Result<(NeighborCache, bool), PlannerError> {
        if path.exists() {
            let f = std::fs::File::open(path).map_err(CacheError::from)?;
            let cache = NeighborCache::load(std::io::BufReader::new(f), &self.cache_header())?;
            return Ok((cache, true));
        }
        let cache = self.build_cache();
        cache.save(path)?;
        Ok((cache, false))
    }

    fn check_cache(&self, cache: Option<&NeighborCache>) -> Result<(), PlannerError> {
        if let Some(c) = cache {
            c.check_header(&self.cache_header())?;
            if c.forward.len() != self.vertices.len() {
                return Err(CacheError::Inconsistent("vertex count differs".into()).into());
            }
        }
        Ok(())
    }

    /// Algorithm 1 (DFMT*).
    pub fn dfmt(&self, cache: Option<&NeighborCache>) -> Result<Plan, PlannerError> {
        self.check_cache(cache)?;
        Ok(dfmt::run(self, cache))
    }

    /// Shortest path over all collision-free connections below `r_N`.
    pub fn dprm(&self, cache: Option<&NeighborCache>) -> Result<Plan, PlannerError> {
        self.check_cache(cache)?;
        Ok(dprm::run(self, cache))
    }

    fn collision_dt(&self, tau: f64) -> f64 {
        self.cfg.collision_dt.unwrap_or_else(|| default_collision_dt(tau))
    }

    /// Steers `from → to` and checks the connection, updating `stats`.
    fn checked_edge(&self, from: usize, to: usize, stats: &mut PlanStats) -> Option<SteeringResult> {
        stats.edges_evaluated += 1;
        stats.steer_calls += 1;
        let x0 = DVector::from_column_slice(&self.vertices[from]);
        let x1 = DVector::from_column_slice(&self.vertices[to]);
        let seg = self.steerer.steer(&x0, &x1).ok()?;
        let dt = self.collision_dt(seg.tau_star);
        let (free, checks) = self.problem.collision_free_counted(&self.steerer, &seg, dt);
        stats.collision_checks += checks;
        free.then_some(seg)
    }

    fn finish(
        &self,
        graph: PlanGraph,
        goal: Option<usize>,
        segments: &dyn Fn(usize, usize) -> SteeringResult,
        mut stats: PlanStats,
        start: std::time::Instant,
    ) -> Plan {
        stats.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        match goal {
            Some(g) => {
                let waypoints = graph.path_to(g);
                let segs: Vec<SteeringResult> = waypoints.windows(2).map(|w| segments(w[0], w[1])).collect();
                let trajectory = Trajectory::new(segs);
                Plan {
                    success: true,
                    cost: Some(trajectory.cost),
                    waypoints,
                    trajectory,
                    radius: self.radius,
                    stats,
                    graph,
                }
            }
            None => Plan {
                success: false,
                waypoints: Vec::new(),
                trajectory: Trajectory::empty(),
                cost: None,
                radius: self.radius,
                stats,
                graph,
            },
        }
    }
}

/// Samples `V` and runs DFMT*.
pub fn dfmt_star(problem: ProblemInstance, cfg: PlannerConfig, seed: u64) -> Result<Plan, PlannerError> {
    let inst = PlanningInstance::new(problem, cfg, seed)?;
    let cache = inst.cfg.cache_neighbors.then(|| inst.build_cache());
    inst.dfmt(cache.as_ref())
}

/// Samples `V` and runs DPRM*.
pub fn dprm_star(problem: ProblemInstance, cfg: PlannerConfig, seed: u64) -> Result<Plan, PlannerError> {
    let inst = PlanningInstance::new(problem, cfg, seed)?;
    let cache = inst.cfg.cache_neighbors.then(|| inst.build_cache());
    inst.dprm(cache.as_ref())
}

/// A possible successor with an enclosure of the connection cost. When
/// `exact` holds, `lower == upper == c*`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Link {
    pub to: usize,
    pub lower: f64,
    pub upper: f64,
    /// Grid node for [`Steerer::refine_node`]; `None` when exact.
    pub node: Option<usize>,
}

impl Link {
    pub(crate) fn exact(&self) -> bool {
        self.node.is_none()
    }

    pub(crate) fn bound(&self) -> Bound {
        match self.node {
            Some(k) => Bound::Coarse(u16::try_from(k).expect("grid fits in u16")),
            None => Bound::Exact,
        }
    }

    /// The key contribution matching [`Link::bound`].
    pub(crate) fn key(&self) -> f64 {
        if self.exact() { self.upper } else { self.lower }
    }
}

/// How far a lazily evaluated connection cost has been resolved. Each stage
/// is a lower bound on the next; the grid node is kept for refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum Bound {
    Coarse(u16),
    Fine(u16),
    Exact,
}

/// Directed connection queries answered live through [`NearIndex`] or from a
/// [`NeighborCache`]. Live queries first bound each cost from the grid scan
/// and refine only on request; refined costs are memoized.
pub(crate) struct Neighborhood<'a> {
    index: NearIndex<'a>,
    cache: Option<&'a NeighborCache>,
    memo: HashMap<(usize, usize), Option<f64>>,
}

impl<'a> Neighborhood<'a> {
    pub(crate) fn new(inst: &'a PlanningInstance, cache: Option<&'a NeighborCache>) -> Self {
        Self { index: inst.near_index(), cache, memo: HashMap::new() }
    }

    pub(crate) fn radius(&self) -> f64 {
        self.index.radius()
    }

    /// Every `x` with `keep(x)` that may satisfy `c*(y, x) < r`, ascending.
    /// Links that are not exact may still turn out to be non-members.
    pub(crate) fn successors(&mut self, y: usize, keep: impl Fn(usize) -> bool, stats: &mut PlanStats) -> Vec<Link> {
        if let Some(c) = self.cache {
            return c.forward[y]
                .iter()
                .filter(|nb| keep(nb.index))
                .map(|nb| Link { to: nb.index, lower: nb.cost, upper: nb.cost, node: None })
                .collect();
        }
        let r = self.index.radius();
        let v = self.index.vertices();
        let steerer = self.index.steerer();
        let mut out = Vec::new();
        let mut src = steerer.prepare(&v[y]);
        for x in self.index.candidates(&v[y], Some(y), Direction::Forward) {
            if !keep(x) {
                continue;
            }
            stats.steer_calls += 1;
            let Some(b) = steerer.cost_bounds_prepared(&mut src, &v[x]) else { continue };
            if b.lower >= r {
                continue;
            }
            if b.is_exact() && b.upper >= r {
                continue;
            }
            out.push(Link { to: x, lower: b.lower, upper: b.upper, node: b.node() });
        }
        out
    }

    /// Second-stage lower bound on `c*(from, to)` for a [`Link`] with `node`.
    pub(crate) fn fine_bound(&self, from: usize, to: usize, node: usize) -> f64 {
        let v = self.index.vertices();
        self.index.steerer().fine_lower_bound(&v[from], &v[to], node)
    }

    /// `c*(from, to)` if it is below `r`. `node` may carry the grid node
    /// from an earlier [`Link`] to skip the scan.
    pub(crate) fn exact_cost(
        &mut self,
        from: usize,
        to: usize,
        node: Option<usize>,
        stats: &mut PlanStats,
    ) -> Option<f64> {
        if let Some(c) = self.cache {
            let list = &c.forward[from];
            return list.binary_search_by_key(&to, |nb| nb.index).ok().map(|i| list[i].cost);
        }
        let r = self.index.radius();
        let index = &self.index;
        *self.memo.entry((from, to)).or_insert_with(|| {
            stats.steer_calls += 1;
            let v = index.vertices();
            let c = match node {
                Some(k) => Some(index.steerer().refine_node(&v[from], &v[to], k)),
                None => index.steerer().connection_cost(&v[from], &v[to]),
            };
            c.filter(|c| *c < r)
        })
    }
}
