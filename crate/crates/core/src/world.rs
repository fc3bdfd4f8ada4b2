//! Problem instances: state bounds, box obstacles over the position
//! coordinates, a box goal region, uniform free-space sampling and
//! discretized trajectory collision checks.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::steering::{Steerer, SteeringResult};
use crate::system::LinearAffineSystem;

/// Rejection sampling gives up once this many draws have been made with an
/// acceptance rate below [`MIN_ACCEPTANCE`].
pub const STALL_DRAWS: u64 = 1_000_000;
pub const MIN_ACCEPTANCE: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("invalid box {name}: {reason}")]
    InvalidBox { name: String, reason: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("initial state is not in free space")]
    InitNotFree,
    #[error("goal region must lie inside the state bounds")]
    GoalOutsideBounds,
    #[error("rejection sampling stalled: {accepted} accepted out of {draws} draws")]
    RejectionStall { accepted: u64, draws: u64 },
}

/// Axis-aligned box `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// Obstacles are boxes over the position coordinates only.
pub type Obstacle = Aabb;

impl Aabb {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        Self { lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    fn check(&self, name: &str, dim: usize) -> Result<(), WorldError> {
        let bad = |reason: String| WorldError::InvalidBox { name: name.to_string(), reason };
        if self.lo.len() != dim || self.hi.len() != dim {
            return Err(bad(format!(
                "expected {dim} coordinates, got lo {} / hi {}",
                self.lo.len(),
                self.hi.len()
            )));
        }
        for (i, (l, h)) in self.lo.iter().zip(&self.hi).enumerate() {
            if !(l.is_finite() && h.is_finite()) {
                return Err(bad(format!("non-finite bound on axis {i}")));
            }
            if l >= h {
                return Err(bad(format!("lo >= hi on axis {i} ({l} >= {h})")));
            }
        }
        Ok(())
    }

    pub fn contains_closed(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.lo).zip(&self.hi).all(|((v, l), h)| *l <= *v && *v <= *h)
    }

    pub fn contains_open(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.lo).zip(&self.hi).all(|((v, l), h)| *l < *v && *v < *h)
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).product()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| rng.gen_range(*l..*h)).collect()
    }
}

/// A validated planning problem.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    sys: LinearAffineSystem,
    bounds: Aabb,
    position_dims: Vec<usize>,
    obstacles: Vec<Obstacle>,
    x_init: Vec<f64>,
    goal: Aabb,
}

impl ProblemInstance {
    pub fn new(
        sys: LinearAffineSystem,
        bounds: Aabb,
        position_dims: Vec<usize>,
        obstacles: Vec<Obstacle>,
        x_init: Vec<f64>,
        goal: Aabb,
    ) -> Result<Self, WorldError> {
        let n = sys.n();
        bounds.check("bounds", n)?;
        goal.check("goal", n)?;
        if position_dims.is_empty() {
            return Err(WorldError::DimensionMismatch("position_dims is empty".into()));
        }
        let mut seen = vec![false; n];
        for &d in &position_dims {
            if d >= n || seen[d] {
                return Err(WorldError::DimensionMismatch(format!(
                    "position_dims entry {d} is out of range or repeated"
                )));
            }
            seen[d] = true;
        }
        for (i, o) in obstacles.iter().enumerate() {
            o.check(&format!("obstacles[{i}]"), position_dims.len())?;
        }
        if x_init.len() != n {
            return Err(WorldError::DimensionMismatch(format!(
                "x_init has {} entries, system has {n} states",
                x_init.len()
            )));
        }
        if !bounds.contains_closed(&goal.lo) || !bounds.contains_closed(&goal.hi) {
            return Err(WorldError::GoalOutsideBounds);
        }
        let p = Self { sys, bounds, position_dims, obstacles, x_init, goal };
        if !p.state_free(&p.x_init) {
            return Err(WorldError::InitNotFree);
        }
        Ok(p)
    }

    pub fn system(&self) -> &LinearAffineSystem {
        &self.sys
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn position_dims(&self) -> &[usize] {
        &self.position_dims
    }

    pub fn obstacles(&self) -> &[Obstacle] {
        &self.obstacles
    }

    pub fn x_init(&self) -> &[f64] {
        &self.x_init
    }

    pub fn goal(&self) -> &Aabb {
        &self.goal
    }

    /// Same problem with a different start state.
    pub fn with_x_init(&self, x_init: Vec<f64>) -> Result<Self, WorldError> {
        Self::new(
            self.sys.clone(),
            self.bounds.clone(),
            self.position_dims.clone(),
            self.obstacles.clone(),
            x_init,
            self.goal.clone(),
        )
    }

    /// Same problem with the obstacles removed.
    pub fn without_obstacles(&self) -> Self {
        Self { obstacles: Vec::new(), ..self.clone() }
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.position_dims.iter().map(|&d| x[d]).collect()
    }

    /// Inside the closed bounds and outside every (open) obstacle.
    pub fn state_free(&self, x: &[f64]) -> bool {
        if x.len() != self.sys.n() || !self.bounds.contains_closed(x) {
            return false;
        }
        !self.obstacles.iter().any(|o| {
            o.lo.iter()
                .zip(&o.hi)
                .zip(&self.position_dims)
                .all(|((l, h), &d)| *l < x[d] && x[d] < *h)
        })
    }

    /// Strict interior of the goal box.
    pub fn in_goal(&self, x: &[f64]) -> bool {
        x.len() == self.sys.n() && self.goal.contains_open(x)
    }

    /// `count` i.i.d. uniform samples from the free space.
    pub fn sample_free<R: Rng + ?Sized>(
        &self,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>, WorldError> {
        rejection_sample(&self.bounds, count, rng, |x| self.state_free(x))
    }

    /// `count` i.i.d. uniform samples from the free part of the goal region.
    pub fn sample_goal<R: Rng + ?Sized>(
        &self,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>, WorldError> {
        rejection_sample(&self.goal, count, rng, |x| self.state_free(x) && self.in_goal(x))
    }

    /// Whether every sample of the connection at times `0, dt, 2dt, …` and at
    /// `τ*` is free. Returns the verdict and the number of states checked.
    pub fn collision_free_counted(
        &self,
        steerer: &Steerer,
        r: &SteeringResult,
        dt: f64,
    ) -> (bool, u64) {
        assert!(dt > 0.0, "collision resolution must be positive");
        if !self.state_free(&r.x0) {
            return (false, 1);
        }
        let mut checked = 1;
        if r.is_degenerate() {
            return (true, checked);
        }
        let steps = (r.tau_star / dt).ceil() as u64;
        let mut sampler = steerer.sampler(r);
        for k in 1..steps {
            let t = k as f64 * dt;
            if t >= r.tau_star {
                break;
            }
            checked += 1;
            match sampler.state(t) {
                Ok(x) if self.state_free(x) => {}
                _ => return (false, checked),
            }
        }
        checked += 1;
        (self.state_free(&r.x1), checked)
    }

    pub fn collision_free(&self, steerer: &Steerer, r: &SteeringResult, dt: f64) -> bool {
        self.collision_free_counted(steerer, r, dt).0
    }

    /// Lebesgue measure of the free space: bounds volume minus the union of
    /// the obstacle cylinders, computed exactly by coordinate compression.
    pub fn free_volume(&self) -> f64 {
        let pd = &self.position_dims;
        let pos_lo: Vec<f64> = pd.iter().map(|&d| self.bounds.lo[d]).collect();
        let pos_hi: Vec<f64> = pd.iter().map(|&d| self.bounds.hi[d]).collect();
        let other: f64 = (0..self.sys.n())
            .filter(|d| !pd.contains(d))
            .map(|d| self.bounds.hi[d] - self.bounds.lo[d])
            .product();
        let pos_area: f64 = pos_lo.iter().zip(&pos_hi).map(|(l, h)| h - l).product();
        let clipped: Vec<Aabb> = self
            .obstacles
            .iter()
            .filter_map(|o| {
                let lo: Vec<f64> = o.lo.iter().zip(&pos_lo).map(|(a, b)| a.max(*b)).collect();
                let hi: Vec<f64> = o.hi.iter().zip(&pos_hi).map(|(a, b)| a.min(*b)).collect();
                lo.iter().zip(&hi).all(|(l, h)| l < h).then(|| Aabb::new(lo, hi))
            })
            .collect();
        (pos_area - union_volume(&clipped)).max(0.0) * other
    }
}

fn rejection_sample<R: Rng + ?Sized>(
    region: &Aabb,
    count: usize,
    rng: &mut R,
    accept: impl Fn(&[f64]) -> bool,
) -> Result<Vec<Vec<f64>>, WorldError> {
    let mut out = Vec::with_capacity(count);
    let mut draws: u64 = 0;
    while out.len() < count {
        let x = region.sample(rng);
        draws += 1;
        if accept(&x) {
            out.push(x);
        }
        if draws >= STALL_DRAWS && (out.len() as f64) < MIN_ACCEPTANCE * draws as f64 {
            return Err(WorldError::RejectionStall { accepted: out.len() as u64, draws });
        }
    }
    Ok(out)
}

/// Volume of a union of boxes, by coordinate compression.
fn union_volume(boxes: &[Aabb]) -> f64 {
    let Some(first) = boxes.first() else {
        return 0.0;
    };
    let dim = first.dim();
    let axes: Vec<Vec<f64>> = (0..dim)
        .map(|d| {
            let mut c: Vec<f64> = boxes.iter().flat_map(|b| [b.lo[d], b.hi[d]]).collect();
            c.sort_by(f64::total_cmp);
            c.dedup();
            c
        })
        .collect();
    let cells: Vec<usize> = axes.iter().map(|a| a.len() - 1).collect();
    let total: usize = cells.iter().product();
    let mut idx = vec![0usize; dim];
    let mut volume = 0.0;
    for _ in 0..total {
        let mid: Vec<f64> = (0..dim).map(|d| 0.5 * (axes[d][idx[d]] + axes[d][idx[d] + 1])).collect();
        if boxes.iter().any(|b| b.contains_open(&mid)) {
            volume += (0..dim).map(|d| axes[d][idx[d] + 1] - axes[d][idx[d]]).product::<f64>();
        }
        for d in 0..dim {
            idx[d] += 1;
            if idx[d] < cells[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    volume
}

/// Default collision resolution for a connection of duration `tau`.
pub fn default_collision_dt(tau: f64) -> f64 {
    (tau / 32.0).min(5e-3)
}
