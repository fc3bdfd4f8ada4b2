//! Obstacle-free two-point boundary value problem.
//!
//! For a travel time `τ` the minimum cost is
//! `c(τ) = τ + (x₁ − x̄(τ))ᵀ G(τ)⁻¹ (x₁ − x̄(τ))`, achieved by
//! `u(t) = R⁻¹Bᵀ exp(Aᵀ(τ − t)) d` with `d = G(τ)⁻¹(x₁ − x̄(τ))`. The optimal
//! connection minimizes `c` over `τ ∈ [τ_min, τ_max]`: a log-spaced grid scan
//! brackets the best node and golden-section search refines inside it.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gramian::{GramianAt, GramianError, GramianKernel};
use crate::linalg::{self, dvec, lower_matvec_sq, lower_matvec_sq_fixed, lower_solve_sq, to_row_major};
use crate::system::LinearAffineSystem;

const INV_PHI: f64 = 0.618_033_988_749_894_9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SteeringError {
    #[error("no connection: minimum cost {min_cost:e} exceeds cap {cap:e}")]
    NoConnection { min_cost: f64, cap: f64 },
    #[error("Gramian failure: {0}")]
    GramianFailure(#[from] GramianError),
    #[error("time {t} outside [0, {tau}]")]
    OutOfDomain { t: f64, tau: f64 },
    #[error("invalid steering configuration: {0}")]
    InvalidConfig(String),
}

/// How a pair of states is connected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectionMode {
    /// Minimize over the arrival time.
    OptimalTime,
    /// Always use the given travel time.
    FixedTime(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteeringKind {
    OptimalTime,
    FixedTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `c*(x, y)`: from the query state to the candidate.
    Forward,
    /// `c*(y, x)`: from the candidate to the query state.
    Backward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerConfig {
    pub tau_min: f64,
    pub tau_max: f64,
    /// Relative accuracy of the refined arrival time.
    pub tol: f64,
    pub cost_cap: f64,
    pub grid_points: usize,
    pub mode: ConnectionMode,
}

impl Default for SteerConfig {
    fn default() -> Self {
        Self {
            tau_min: 1e-4,
            tau_max: 10.0,
            tol: 1e-6,
            cost_cap: 1e6,
            grid_points: 64,
            mode: ConnectionMode::OptimalTime,
        }
    }
}

impl SteerConfig {
    pub fn validate(&self) -> Result<(), SteeringError> {
        let bad = |m: String| Err(SteeringError::InvalidConfig(m));
        if !(self.tau_min > 0.0 && self.tau_min.is_finite()) {
            return bad(format!("tau_min must be positive, got {}", self.tau_min));
        }
        if !(self.tau_max > self.tau_min && self.tau_max.is_finite()) {
            return bad(format!("tau_max must exceed tau_min, got {}", self.tau_max));
        }
        if !(self.tol > 0.0 && self.tol <= 1e-2) {
            return bad(format!("tol must lie in (0, 1e-2], got {}", self.tol));
        }
        if !(self.cost_cap > 0.0) {
            return bad(format!("cost_cap must be positive, got {}", self.cost_cap));
        }
        if self.grid_points < 3 {
            return bad("grid_points must be at least 3".into());
        }
        if let ConnectionMode::FixedTime(t) = self.mode {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("fixed travel time must be positive, got {t}"));
            }
        }
        Ok(())
    }
}

/// An optimal (or fixed-time) connection between two states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringResult {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub tau_star: f64,
    pub cost: f64,
    /// `G(τ*)⁻¹ (x₁ − x̄(τ*))`
    pub d: Vec<f64>,
    pub kind: SteeringKind,
}

impl SteeringResult {
    pub fn is_degenerate(&self) -> bool {
        self.tau_star == 0.0
    }
}

/// Concatenated connections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub segments: Vec<SteeringResult>,
    pub duration: f64,
    pub cost: f64,
}

impl Trajectory {
    /// Panics if consecutive segments do not share endpoints exactly.
    pub fn new(segments: Vec<SteeringResult>) -> Self {
        for w in segments.windows(2) {
            assert_eq!(w[0].x1, w[1].x0, "trajectory segments must chain");
        }
        let duration = segments.iter().map(|s| s.tau_star).sum();
        let cost = segments.iter().map(|s| s.cost).sum();
        Self { segments, duration, cost }
    }

    pub fn empty() -> Self {
        Self { segments: Vec::new(), duration: 0.0, cost: 0.0 }
    }

    /// State at global time `t ∈ [0, duration]`.
    pub fn state_at(&self, steerer: &Steerer, t: f64) -> Result<DVector<f64>, SteeringError> {
        if !(0.0..=self.duration).contains(&t) {
            return Err(SteeringError::OutOfDomain { t, tau: self.duration });
        }
        let mut start = 0.0;
        for (i, s) in self.segments.iter().enumerate() {
            let last = i + 1 == self.segments.len();
            if t <= start + s.tau_star || last {
                let local = (t - start).clamp(0.0, s.tau_star);
                return steerer.state_at(s, local);
            }
            start += s.tau_star;
        }
        Err(SteeringError::OutOfDomain { t, tau: self.duration })
    }
}

/// Precomputed data at one node of the arrival-time grid.
#[derive(Debug, Clone)]
struct GridNode {
    tau: f64,
    /// `exp(Aτ)`, row-major
    phi: Vec<f64>,
    h: Vec<f64>,
    /// `L⁻¹` for the Cholesky factor `L` of `G(τ)`, row-major; `None` if
    /// `G(τ)` is not numerically SPD.
    l_inv: Option<Vec<f64>>,
    /// Upper bound on `‖L₊⁻¹ exp(As)‖₂` over `s` up to the next node, where
    /// `L₊` is the next node's factor; `+∞` on the last node.
    step_bound: f64,
}

impl GridNode {
    fn build(kernel: &GramianKernel, tau: f64) -> Result<Self, GramianError> {
        let p = kernel.propagate(tau)?;
        let n = p.drift.len();
        let l_inv = GramianAt::new(tau, p.gramian)
            .ok()
            .and_then(|g| g.factor().solve_lower_triangular(&DMatrix::identity(n, n)))
            .map(|m| to_row_major(&m));
        Ok(Self {
            tau,
            phi: to_row_major(&p.transition),
            h: p.drift.iter().copied().collect(),
            l_inv,
            step_bound: f64::INFINITY,
        })
    }

    /// Sets `step_bound` from the following node. Frobenius norms bound the
    /// spectral ones, and `exp(A(s − τ))` is bounded by `e^{‖A‖(s − τ)}`.
    fn bound_step(&mut self, next: &GridNode, a_norm: f64) {
        let Some(l_inv) = &next.l_inv else { return };
        let n = self.h.len();
        let m = DMatrix::from_row_slice(n, n, l_inv) * DMatrix::from_row_slice(n, n, &self.phi);
        let growth = (a_norm * (1.0 + 1e-6) * (next.tau - self.tau)).exp();
        self.step_bound = m.norm() * growth * (1.0 + 1e-6);
    }

    /// Lower bound on `c(τ)` for `τ` between this node and `next`, given
    /// `x̄` at this node and `‖Ax₀ + c‖`.
    ///
    /// `G(τ) ⪯ G₊` gives `c(τ) ≥ τ + ‖L₊⁻¹(x₁ − x̄(τ))‖²`, and `x̄(τ)` moves
    /// from `x̄` by at most `∫ exp(As)(Ax₀ + c) ds`.
    fn step_lower_bound(&self, next: &GridNode, free: &[f64], x1: &[f64], flow: f64, v: &mut [f64]) -> f64 {
        let Some(l_inv) = &next.l_inv else {
            return self.tau;
        };
        for ((vi, x), f) in v.iter_mut().zip(x1).zip(free) {
            *vi = x - f;
        }
        let head = lower_matvec_sq(l_inv, v).sqrt();
        let drift = (next.tau - self.tau) * self.step_bound * flow;
        let margin = (head - drift).max(0.0);
        self.tau + margin * margin
    }

    /// Writes `x̄(τ)` from `x0` into `out`.
    #[inline]
    fn free_response(&self, x0: &[f64], out: &mut [f64]) {
        let n = x0.len();
        for i in 0..n {
            let row = &self.phi[i * n..(i + 1) * n];
            let mut s = self.h[i];
            for (a, b) in row.iter().zip(x0) {
                s += a * b;
            }
            out[i] = s;
        }
    }

    /// `c(τ)` given `x̄(τ)`, or `+∞` where the Gramian could not be factored.
    #[inline]
    fn cost_from_free(&self, free: &[f64], x1: &[f64], v: &mut [f64]) -> f64 {
        let Some(l_inv) = &self.l_inv else {
            return f64::INFINITY;
        };
        for ((vi, x), f) in v.iter_mut().zip(x1).zip(free) {
            *vi = x - f;
        }
        self.tau + lower_matvec_sq(l_inv, v)
    }

    #[inline]
    fn cost(&self, x0: &[f64], x1: &[f64], v: &mut [f64]) -> f64 {
        if self.l_inv.is_none() {
            return f64::INFINITY;
        }
        let mut free = [0.0; 16];
        let mut heap;
        let free: &mut [f64] = if x0.len() <= 16 {
            &mut free[..x0.len()]
        } else {
            heap = vec![0.0; x0.len()];
            &mut heap
        };
        self.free_response(x0, free);
        self.cost_from_free(free, x1, v)
    }
}

/// A start state with its free response at every grid node, for evaluating
/// many connections out of the same state.
#[derive(Debug, Clone)]
pub struct PreparedSource {
    x0: Vec<f64>,
    /// `‖Ax₀ + c‖`
    flow: f64,
    /// `x̄(τ_k)`, node-major.
    free: Vec<f64>,
    v: Vec<f64>,
}

impl PreparedSource {
    pub fn state(&self) -> &[f64] {
        &self.x0
    }
}

/// Steering engine for one system: owns the Gramian kernel and the cached
/// arrival-time grid. Immutable after construction, so it can be shared
/// across threads.
#[derive(Debug, Clone)]
pub struct Steerer {
    sys: LinearAffineSystem,
    kernel: GramianKernel,
    cfg: SteerConfig,
    grid: Vec<GridNode>,
    fixed: Option<GridNode>,
    /// `FINE_STEPS` nodes per grid interval, for the second-stage bound.
    fine: Vec<GridNode>,
    a_rows: Vec<f64>,
    poly: Option<PolyCost>,
}

/// Subdivisions of each grid interval in [`Steerer::fine_lower_bound`].
const FINE_STEPS: usize = 8;

/// Allocation-free `c(τ)` for nilpotent `A`, where `exp(Aτ)`, `h(τ)` and
/// `G(τ)` are polynomials in `τ`. Coefficients are row-major, lowest power
/// first.
#[derive(Debug, Clone)]
struct PolyCost {
    n: usize,
    transition: Vec<Vec<f64>>,
    drift: Vec<Vec<f64>>,
    gramian: Vec<Vec<f64>>,
}

impl PolyCost {
    fn new(kernel: &GramianKernel) -> Option<Self> {
        let GramianKernel::Polynomial { transition, drift, gramian } = kernel else {
            return None;
        };
        // trailing zero coefficients cost time in Horner's scheme
        fn trim(mut c: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
            while c.len() > 1 && c.last().is_some_and(|m| m.iter().all(|v| *v == 0.0)) {
                c.pop();
            }
            c
        }
        Some(Self {
            n: drift[0].len(),
            transition: trim(transition.iter().map(to_row_major).collect()),
            drift: trim(drift.iter().map(|d| d.iter().copied().collect()).collect()),
            gramian: trim(gramian.iter().map(to_row_major).collect()),
        })
    }

    fn horner(coeffs: &[Vec<f64>], t: f64, out: &mut [f64]) {
        out.copy_from_slice(coeffs.last().expect("non-empty"));
        for c in coeffs.iter().rev().skip(1) {
            for (o, ci) in out.iter_mut().zip(c) {
                *o = *o * t + ci;
            }
        }
    }

    /// `c(τ)`, or `+∞` if `G(τ)` is not numerically positive definite.
    fn cost(&self, x0: &[f64], x1: &[f64], tau: f64, s: &mut Option<PolyScratch>) -> f64 {
        match self.n {
            2 => self.cost_fixed::<2>(x0, x1, tau),
            4 => self.cost_fixed::<4>(x0, x1, tau),
            6 => self.cost_fixed::<6>(x0, x1, tau),
            n => self.cost_any(x0, x1, tau, s.get_or_insert_with(|| PolyScratch::new(n))),
        }
    }

    /// [`PolyCost::cost_any`] unrolled for small state dimensions, with the
    /// same operation order.
    fn cost_fixed<const N: usize>(&self, x0: &[f64], x1: &[f64], tau: f64) -> f64 {
        #[inline(always)]
        fn horner<const N: usize, const M: usize>(coeffs: &[Vec<f64>], t: f64) -> [[f64; M]; N] {
            let mut out = [[0.0; M]; N];
            let last = coeffs.last().expect("non-empty");
            for i in 0..N {
                out[i].copy_from_slice(&last[i * M..(i + 1) * M]);
            }
            for c in coeffs.iter().rev().skip(1) {
                let c = &c[..N * M];
                for i in 0..N {
                    for j in 0..M {
                        out[i][j] = out[i][j] * t + c[i * M + j];
                    }
                }
            }
            out
        }
        let (x0, x1) = (&x0[..N], &x1[..N]);
        let phi = horner::<N, N>(&self.transition, tau);
        let h = horner::<1, N>(&self.drift, tau)[0];
        let mut g = horner::<N, N>(&self.gramian, tau);
        let mut v = [0.0; N];
        for i in 0..N {
            let free: f64 = h[i] + phi[i].iter().zip(x0).map(|(a, b)| a * b).sum::<f64>();
            v[i] = x1[i] - free;
        }
        for j in 0..N {
            let mut d = g[j][j];
            for k in 0..j {
                d -= g[j][k] * g[j][k];
            }
            if !(d > 0.0) {
                return f64::INFINITY;
            }
            let d = d.sqrt();
            g[j][j] = d;
            for i in j + 1..N {
                let mut v = 0.5 * (g[i][j] + g[j][i]);
                for k in 0..j {
                    v -= g[i][k] * g[j][k];
                }
                g[i][j] = v / d;
            }
        }
        let mut acc = 0.0;
        let mut z = [0.0; N];
        for i in 0..N {
            let mut s = v[i];
            for j in 0..i {
                s -= g[i][j] * z[j];
            }
            let zi = s / g[i][i];
            z[i] = zi;
            acc += zi * zi;
        }
        tau + acc
    }

    fn cost_any(&self, x0: &[f64], x1: &[f64], tau: f64, s: &mut PolyScratch) -> f64 {
        let n = self.n;
        Self::horner(&self.transition, tau, &mut s.phi);
        Self::horner(&self.drift, tau, &mut s.h);
        Self::horner(&self.gramian, tau, &mut s.g);
        for i in 0..n {
            let row = &s.phi[i * n..(i + 1) * n];
            let free: f64 = s.h[i] + row.iter().zip(x0).map(|(a, b)| a * b).sum::<f64>();
            s.v[i] = x1[i] - free;
        }
        // in-place Cholesky of the symmetrized lower triangle
        let g = &mut s.g;
        for j in 0..n {
            let mut d = g[j * n + j];
            for k in 0..j {
                d -= g[j * n + k] * g[j * n + k];
            }
            if !(d > 0.0) {
                return f64::INFINITY;
            }
            let d = d.sqrt();
            g[j * n + j] = d;
            for i in j + 1..n {
                let mut v = 0.5 * (g[i * n + j] + g[j * n + i]);
                for k in 0..j {
                    v -= g[i * n + k] * g[j * n + k];
                }
                g[i * n + j] = v / d;
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                g[i * n + j] = 0.0;
            }
        }
        tau + lower_solve_sq(g, &s.v, &mut s.z)
    }
}

/// See [`Steerer::sampler`].
pub struct StateSampler<'a> {
    steerer: &'a Steerer,
    r: &'a SteeringResult,
    scratch: Option<PolyScratch>,
    rest: Vec<f64>,
    costate: Vec<f64>,
    out: Vec<f64>,
}

impl StateSampler<'_> {
    pub fn state(&mut self, t: f64) -> Result<&[f64], SteeringError> {
        let (Some(p), Some(s)) = (&self.steerer.poly, &mut self.scratch) else {
            let x = self.steerer.state_at(self.r, t)?;
            self.out.copy_from_slice(x.as_slice());
            return Ok(&self.out);
        };
        Steerer::check_domain(self.r, t)?;
        let n = p.n;
        let x0 = &self.r.x0;
        if t == 0.0 {
            self.out.copy_from_slice(x0);
            return Ok(&self.out);
        }
        PolyCost::horner(&p.transition, self.r.tau_star - t, &mut self.rest);
        for j in 0..n {
            self.costate[j] = (0..n).map(|i| self.rest[i * n + j] * self.r.d[i]).sum();
        }
        PolyCost::horner(&p.transition, t, &mut s.phi);
        PolyCost::horner(&p.drift, t, &mut s.h);
        PolyCost::horner(&p.gramian, t, &mut s.g);
        for i in 0..n {
            let free: f64 = s.h[i] + (0..n).map(|j| s.phi[i * n + j] * x0[j]).sum::<f64>();
            let pull: f64 = (0..n).map(|j| s.g[i * n + j] * self.costate[j]).sum();
            self.out[i] = free + pull;
        }
        Ok(&self.out)
    }
}

struct PolyScratch {
    phi: Vec<f64>,
    h: Vec<f64>,
    g: Vec<f64>,
    v: Vec<f64>,
    z: Vec<f64>,
}

impl PolyScratch {
    fn new(n: usize) -> Self {
        Self { phi: vec![0.0; n * n], h: vec![0.0; n], g: vec![0.0; n * n], v: vec![0.0; n], z: vec![0.0; n] }
    }
}

/// `lower ≤ connection_cost ≤ upper`; `upper` is the best grid value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBounds {
    pub lower: f64,
    pub upper: f64,
    /// Grid node to refine around; `None` when `upper` is already exact.
    node: Option<usize>,
}

impl CostBounds {
    pub fn is_exact(&self) -> bool {
        self.node.is_none()
    }

    /// Grid node to pass to [`Steerer::refine_node`] when not exact.
    pub fn node(&self) -> Option<usize> {
        self.node
    }
}

/// Outcome of the arrival-time search, before the control coefficient is
/// assembled.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Minimizer {
    tau: f64,
    cost: f64,
}

impl Steerer {
    pub fn new(sys: LinearAffineSystem, cfg: SteerConfig) -> Result<Self, SteeringError> {
        cfg.validate()?;
        let kernel = GramianKernel::new(&sys);
        let k = cfg.grid_points;
        let ratio = (cfg.tau_max / cfg.tau_min).ln();
        let mut grid = Vec::with_capacity(k);
        for i in 0..k {
            let tau = if i + 1 == k {
                cfg.tau_max
            } else {
                cfg.tau_min * (ratio * i as f64 / (k - 1) as f64).exp()
            };
            match GridNode::build(&kernel, tau) {
                Ok(node) => grid.push(node),
                // beyond the exponential's reliable range: larger τ is unusable too
                Err(GramianError::Overflow { .. }) => break,
                Err(e) => return Err(e.into()),
            }
        }
        if grid.is_empty() {
            return Err(SteeringError::InvalidConfig(
                "no usable arrival time on the grid".into(),
            ));
        }
        let fixed = match cfg.mode {
            ConnectionMode::FixedTime(t) => Some(GridNode::build(&kernel, t)?),
            ConnectionMode::OptimalTime => None,
        };
        let a_norm = linalg::norm2(sys.a());
        let mut fine = Vec::with_capacity(grid.len() * FINE_STEPS);
        for pair in grid.windows(2) {
            fine.push(pair[0].clone());
            let step = (pair[1].tau / pair[0].tau).ln() / FINE_STEPS as f64;
            for s in 1..FINE_STEPS {
                fine.push(GridNode::build(&kernel, pair[0].tau * (step * s as f64).exp())?);
            }
        }
        fine.extend(grid.last().cloned());
        for nodes in [&mut grid, &mut fine] {
            for j in 1..nodes.len() {
                let (head, tail) = nodes.split_at_mut(j);
                head[j - 1].bound_step(&tail[0], a_norm);
            }
        }
        let poly = PolyCost::new(&kernel);
        let a_rows = to_row_major(sys.a());
        Ok(Self { sys, kernel, cfg, grid, fixed, fine, a_rows, poly })
    }

    pub fn system(&self) -> &LinearAffineSystem {
        &self.sys
    }

    pub fn kernel(&self) -> &GramianKernel {
        &self.kernel
    }

    pub fn config(&self) -> &SteerConfig {
        &self.cfg
    }

    pub fn mode(&self) -> ConnectionMode {
        self.cfg.mode
    }

    /// Largest travel time a connection in the current mode can take.
    pub fn max_travel_time(&self) -> f64 {
        match self.cfg.mode {
            ConnectionMode::FixedTime(t) => t,
            ConnectionMode::OptimalTime => self.grid.last().map_or(self.cfg.tau_max, |g| g.tau),
        }
    }

    /// `c(τ) = τ + ‖x₁ − x̄(τ)‖²_{G(τ)⁻¹}`.
    pub fn cost_fixed_time(
        &self,
        x0: &DVector<f64>,
        x1: &DVector<f64>,
        tau: f64,
    ) -> Result<f64, SteeringError> {
        let p = self.kernel.propagate(tau)?;
        let g = GramianAt::new(tau, p.gramian.clone())?;
        let v = x1 - p.free_response(x0);
        Ok(tau + g.weighted_norm_sq(&v))
    }

    fn eval(&self, x0: &[f64], x1: &[f64], tau: f64) -> f64 {
        self.cost_fixed_time(&dvec(x0), &dvec(x1), tau).unwrap_or(f64::INFINITY)
    }

    fn is_equilibrium_self_pair(&self, x0: &[f64], x1: &[f64]) -> bool {
        if x0 != x1 {
            return false;
        }
        let x = dvec(x0);
        let flow = self.sys.a() * &x + self.sys.c();
        flow.amax() <= 1e-12 * (1.0 + x.amax())
    }

    /// Index of the best grid node and its cost (lowest index among ties),
    /// or `None` if every node failed.
    fn scan(&self, x0: &[f64], x1: &[f64]) -> Option<(usize, f64)> {
        self.scan_prepared(&mut self.prepare(x0), x1)
    }

    fn scan_prepared(&self, src: &mut PreparedSource, x1: &[f64]) -> Option<(usize, f64)> {
        match src.x0.len() {
            2 => self.scan_fixed::<2>(src, x1),
            4 => self.scan_fixed::<4>(src, x1),
            6 => self.scan_fixed::<6>(src, x1),
            _ => self.scan_any(src, x1),
        }
    }

    /// [`Steerer::scan_any`] unrolled for small state dimensions.
    fn scan_fixed<const N: usize>(&self, src: &PreparedSource, x1: &[f64]) -> Option<(usize, f64)> {
        let x1 = &x1[..N];
        let mut best: Option<(usize, f64)> = None;
        for (k, (node, free)) in self.grid.iter().zip(src.free.chunks_exact(N)).enumerate() {
            if best.is_some_and(|(_, b)| node.tau >= b) {
                break;
            }
            let Some(l_inv) = &node.l_inv else { continue };
            let mut v = [0.0; N];
            for i in 0..N {
                v[i] = x1[i] - free[i];
            }
            let c = node.tau + lower_matvec_sq_fixed::<N>(l_inv, &v);
            if c.is_finite() && best.map_or(true, |(_, b)| c < b) {
                best = Some((k, c));
            }
        }
        best
    }

    fn scan_any(&self, src: &mut PreparedSource, x1: &[f64]) -> Option<(usize, f64)> {
        let n = src.x0.len();
        let mut best: Option<(usize, f64)> = None;
        for (k, node) in self.grid.iter().enumerate() {
            // c(τ) ≥ τ, so no later node can win
            if best.is_some_and(|(_, b)| node.tau >= b) {
                break;
            }
            let free = &src.free[k * n..(k + 1) * n];
            let c = node.cost_from_free(free, x1, &mut src.v);
            if c.is_finite() && best.map_or(true, |(_, b)| c < b) {
                best = Some((k, c));
            }
        }
        best
    }

    /// Precomputes the free response of `x0` on the arrival-time grid.
    pub fn prepare(&self, x0: &[f64]) -> PreparedSource {
        let n = x0.len();
        let mut free = vec![0.0; n * self.grid.len()];
        for (k, node) in self.grid.iter().enumerate() {
            node.free_response(x0, &mut free[k * n..(k + 1) * n]);
        }
        PreparedSource { x0: x0.to_vec(), flow: self.flow_norm(x0), free, v: vec![0.0; n] }
    }

    /// `‖Ax₀ + c‖`
    fn flow_norm(&self, x0: &[f64]) -> f64 {
        let n = x0.len();
        let c = self.sys.c();
        (0..n)
            .map(|i| {
                let row = &self.a_rows[i * n..(i + 1) * n];
                c[i] + row.iter().zip(x0).map(|(a, x)| a * x).sum::<f64>()
            })
            .map(|f| f * f)
            .sum::<f64>()
            .sqrt()
    }

    /// Golden-section refinement inside the bracket around grid node `k`;
    /// never returns anything worse than the node itself.
    fn refine(&self, x0: &[f64], x1: &[f64], k: usize, c_k: f64) -> Minimizer {
        let mut lo = if k == 0 { self.grid[0].tau } else { self.grid[k - 1].tau };
        let mut hi = self.grid.get(k + 1).map_or(self.grid[k].tau, |g| g.tau);
        let mut best = Minimizer { tau: self.grid[k].tau, cost: c_k };
        let consider = |tau: f64, c: f64, best: &mut Minimizer| {
            if c < best.cost {
                *best = Minimizer { tau, cost: c };
            }
        };
        let mut scratch = None;
        let mut eval = |tau: f64| match &self.poly {
            Some(p) => p.cost(x0, x1, tau, &mut scratch),
            None => self.eval(x0, x1, tau),
        };
        let mut a = hi - INV_PHI * (hi - lo);
        let mut b = lo + INV_PHI * (hi - lo);
        let mut fa = eval(a);
        let mut fb = eval(b);
        consider(a, fa, &mut best);
        consider(b, fb, &mut best);
        while hi - lo > self.cfg.tol * 0.5 * (hi + lo) {
            if fa <= fb {
                hi = b;
                b = a;
                fb = fa;
                a = hi - INV_PHI * (hi - lo);
                fa = eval(a);
                consider(a, fa, &mut best);
            } else {
                lo = a;
                a = b;
                fa = fb;
                b = lo + INV_PHI * (hi - lo);
                fb = eval(b);
                consider(b, fb, &mut best);
            }
        }
        best
    }

    fn minimize(&self, x0: &[f64], x1: &[f64]) -> Result<Minimizer, SteeringError> {
        if self.is_equilibrium_self_pair(x0, x1) {
            return Ok(Minimizer { tau: 0.0, cost: 0.0 });
        }
        if let Some(node) = &self.fixed {
            let n = x0.len();
            let c = node.cost(x0, x1, &mut vec![0.0; n]);
            if !c.is_finite() {
                return Err(GramianError::NotPositiveDefinite { t: node.tau }.into());
            }
            if c > self.cfg.cost_cap {
                return Err(SteeringError::NoConnection { min_cost: c, cap: self.cfg.cost_cap });
            }
            return Ok(Minimizer { tau: node.tau, cost: c });
        }
        let (k, c_k) = self
            .scan(x0, x1)
            .ok_or(GramianError::NotPositiveDefinite { t: self.grid[0].tau })?;
        if c_k > self.cfg.cost_cap {
            return Err(SteeringError::NoConnection { min_cost: c_k, cap: self.cfg.cost_cap });
        }
        Ok(self.refine(x0, x1, k, c_k))
    }

    /// Connection cost from `x0` to `x1` in the configured mode, `None` when
    /// no connection exists under the cost cap.
    pub fn connection_cost(&self, x0: &[f64], x1: &[f64]) -> Option<f64> {
        let b = self.cost_bounds(x0, x1)?;
        Some(self.refine_bounds(x0, x1, &b))
    }

    /// Encloses `connection_cost(x0, x1)` using the grid scan alone, or
    /// `None` when there is no connection under the cost cap.
    pub fn cost_bounds(&self, x0: &[f64], x1: &[f64]) -> Option<CostBounds> {
        self.cost_bounds_prepared(&mut self.prepare(x0), x1)
    }

    /// [`Steerer::cost_bounds`] from a prepared start state.
    pub fn cost_bounds_prepared(&self, src: &mut PreparedSource, x1: &[f64]) -> Option<CostBounds> {
        let x0 = &src.x0;
        if self.fixed.is_some() || self.is_equilibrium_self_pair(x0, x1) {
            let c = self.minimize(x0, x1).ok()?.cost;
            return Some(CostBounds { lower: c, upper: c, node: None });
        }
        let (k, c_k) = self.scan_prepared(src, x1)?;
        if c_k > self.cfg.cost_cap {
            return None;
        }
        // deflated so that rounding in the refined value cannot undercut it
        let lower = (self.bracket_lower_bound(src, x1, k) * (1.0 - 1e-9)).min(c_k);
        Some(CostBounds { lower, upper: c_k, node: Some(k) })
    }

    /// The exact `connection_cost` for bounds from [`Steerer::cost_bounds`]
    /// on the same pair.
    pub fn refine_bounds(&self, x0: &[f64], x1: &[f64], b: &CostBounds) -> f64 {
        match b.node {
            Some(k) => self.refine(x0, x1, k, b.upper).cost,
            None => b.upper,
        }
    }

    /// Same as [`Steerer::refine_bounds`] given only `CostBounds::node`.
    pub fn refine_node(&self, x0: &[f64], x1: &[f64], node: usize) -> f64 {
        let n = x0.len();
        let c_k = self.grid[node].cost(x0, x1, &mut vec![0.0; n]);
        self.refine(x0, x1, node, c_k).cost
    }

    /// Optimal connection over `τ ∈ [τ_min, τ_max]`.
    pub fn optimal_steer(
        &self,
        x0: &DVector<f64>,
        x1: &DVector<f64>,
    ) -> Result<SteeringResult, SteeringError> {
        let (s0, s1) = (x0.as_slice(), x1.as_slice());
        let m = if self.is_equilibrium_self_pair(s0, s1) {
            Minimizer { tau: 0.0, cost: 0.0 }
        } else {
            let (k, c_k) = self
                .scan(s0, s1)
                .ok_or(GramianError::NotPositiveDefinite { t: self.grid[0].tau })?;
            if c_k > self.cfg.cost_cap {
                return Err(SteeringError::NoConnection { min_cost: c_k, cap: self.cfg.cost_cap });
            }
            self.refine(s0, s1, k, c_k)
        };
        self.assemble(x0, x1, m, SteeringKind::OptimalTime)
    }

    /// Connection with a prescribed travel time.
    pub fn fixed_time_steer(
        &self,
        x0: &DVector<f64>,
        x1: &DVector<f64>,
        tau: f64,
    ) -> Result<SteeringResult, SteeringError> {
        let cost = self.cost_fixed_time(x0, x1, tau)?;
        self.assemble(x0, x1, Minimizer { tau, cost }, SteeringKind::FixedTime)
    }

    /// Connection in the configured mode.
    pub fn steer(&self, x0: &DVector<f64>, x1: &DVector<f64>) -> Result<SteeringResult, SteeringError> {
        match self.cfg.mode {
            ConnectionMode::OptimalTime => self.optimal_steer(x0, x1),
            ConnectionMode::FixedTime(_) => {
                let m = self.minimize(x0.as_slice(), x1.as_slice())?;
                self.assemble(x0, x1, m, SteeringKind::FixedTime)
            }
        }
    }

    fn assemble(
        &self,
        x0: &DVector<f64>,
        x1: &DVector<f64>,
        m: Minimizer,
        kind: SteeringKind,
    ) -> Result<SteeringResult, SteeringError> {
        let d = if m.tau == 0.0 {
            DVector::zeros(x0.len())
        } else {
            let p = self.kernel.propagate(m.tau)?;
            let g = GramianAt::new(m.tau, p.gramian.clone())?;
            g.solve(&(x1 - p.free_response(x0)))
        };
        Ok(SteeringResult {
            x0: x0.iter().copied().collect(),
            x1: x1.iter().copied().collect(),
            tau_star: m.tau,
            cost: m.cost,
            d: d.iter().copied().collect(),
            kind,
        })
    }

    fn check_domain(r: &SteeringResult, t: f64) -> Result<(), SteeringError> {
        if t.is_nan() || t < 0.0 || t > r.tau_star {
            return Err(SteeringError::OutOfDomain { t, tau: r.tau_star });
        }
        Ok(())
    }

    /// `u(t) = R⁻¹Bᵀ exp(Aᵀ(τ* − t)) d`.
    pub fn control_at(&self, r: &SteeringResult, t: f64) -> Result<DVector<f64>, SteeringError> {
        Self::check_domain(r, t)?;
        let phi = self.kernel.transition(r.tau_star - t)?;
        let costate = phi.transpose() * dvec(&r.d);
        Ok(self.sys.r_inv() * self.sys.b().transpose() * costate)
    }

    /// `x(t) = x̄(t) + G(t) exp(Aᵀ(τ* − t)) d`.
    pub fn state_at(&self, r: &SteeringResult, t: f64) -> Result<DVector<f64>, SteeringError> {
        Self::check_domain(r, t)?;
        let x0 = dvec(&r.x0);
        if t == 0.0 {
            return Ok(x0);
        }
        let p = self.kernel.propagate(t)?;
        let phi_rest = self.kernel.transition(r.tau_star - t)?;
        Ok(p.free_response(&x0) + p.gramian * (phi_rest.transpose() * dvec(&r.d)))
    }

    /// Evaluates [`Steerer::state_at`] along one connection without
    /// allocating per sample.
    pub fn sampler<'a>(&'a self, r: &'a SteeringResult) -> StateSampler<'a> {
        let n = r.x0.len();
        StateSampler {
            steerer: self,
            r,
            scratch: self.poly.as_ref().map(|_| PolyScratch::new(n)),
            rest: vec![0.0; n * n],
            costate: vec![0.0; n],
            out: vec![0.0; n],
        }
    }

    /// Whether `c*(x, y) < r` (forward) or `c*(y, x) < r` (backward).
    ///
    /// Agrees exactly with `connection_cost(..) < r`, but usually decides
    /// from the grid alone: it stops at the first node already below `r`,
    /// and skips refinement when a lower bound on the bracket rules it out.
    pub fn reachable(&self, x: &[f64], y: &[f64], r: f64, direction: Direction) -> bool {
        let (from, to) = match direction {
            Direction::Forward => (x, y),
            Direction::Backward => (y, x),
        };
        if self.fixed.is_some() || self.is_equilibrium_self_pair(from, to) {
            return self.connection_cost(from, to).is_some_and(|c| c < r);
        }
        let n = from.len();
        let mut v = vec![0.0; n];
        // c(τ) ≥ τ, so only nodes below r can certify; near-threshold pairs
        // usually do so close to τ = r, hence the descending order.
        let below = self.grid.partition_point(|g| g.tau < r);
        let order = (0..below).rev().chain(below..self.grid.len());
        let mut best: Option<(usize, f64)> = None;
        for k in order {
            let c = self.grid[k].cost(from, to, &mut v);
            if c < r && c <= self.cfg.cost_cap {
                return true;
            }
            // same choice as `scan`: lowest cost, then lowest index
            if c.is_finite() && best.map_or(true, |(bk, b)| c < b || (c == b && k < bk)) {
                best = Some((k, c));
            }
        }
        let Some((k, c_k)) = best else {
            return false;
        };
        if c_k > self.cfg.cost_cap {
            return false;
        }
        if self.bracket_lower_bound(&mut self.prepare(from), to, k) >= r * (1.0 + 1e-6) {
            return false;
        }
        self.refine(from, to, k, c_k).cost < r
    }

    /// A tighter lower bound than [`CostBounds::lower`] for the pair whose
    /// grid scan picked `node`, from the subdivided grid around it.
    pub fn fine_lower_bound(&self, x0: &[f64], x1: &[f64], node: usize) -> f64 {
        let n = x0.len();
        let (mut free, mut v) = ([0.0; 16], [0.0; 16]);
        if n > 16 {
            return self.bracket_lower_bound(&mut self.prepare(x0), x1, node) * (1.0 - 1e-9);
        }
        let flow = self.flow_norm(x0);
        let lo = node.saturating_sub(1) * FINE_STEPS;
        let hi = ((node + 1) * FINE_STEPS).min(self.fine.len() - 1);
        if lo == hi {
            return self.grid[node].tau;
        }
        let mut lower = f64::INFINITY;
        for j in lo..hi {
            let (a, b) = (&self.fine[j], &self.fine[j + 1]);
            a.free_response(x0, &mut free[..n]);
            let c = a.step_lower_bound(b, &free[..n], x1, flow, &mut v[..n]);
            lower = lower.min(c);
        }
        lower * (1.0 - 1e-9)
    }

    /// Lower bound on `c(τ)` over the refinement bracket around node `k`,
    /// taken over the grid intervals on either side of it.
    fn bracket_lower_bound(&self, src: &mut PreparedSource, x1: &[f64], k: usize) -> f64 {
        let n = src.x0.len();
        let steps = k.saturating_sub(1)..(k + 1).min(self.grid.len() - 1);
        if steps.is_empty() {
            return self.grid[k].tau;
        }
        steps
            .map(|j| {
                let free = &src.free[j * n..(j + 1) * n];
                self.grid[j].step_lower_bound(&self.grid[j + 1], free, x1, src.flow, &mut src.v)
            })
            .fold(f64::INFINITY, f64::min)
    }
}
