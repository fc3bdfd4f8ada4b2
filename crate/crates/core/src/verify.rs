//! Property suites: small-time Gramian asymptotics, the analytic steering
//! case, and a Monte-Carlo tracing probe.

use std::collections::BinaryHeap;
use std::cmp::Reverse;
use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::gramian::{gramian, spectrum, GramianError};
use crate::planner::dfmt::Keyed;
use crate::planner::radius;
use crate::scenario::bundled;
use crate::steering::{SteerConfig, Steerer, SteeringError};
use crate::system::LinearAffineSystem;
use crate::world::ProblemInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Spectral,
    Steering,
    Exhaustivity,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Spectral, Suite::Steering, Suite::Exhaustivity];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Spectral => "spectral",
            Suite::Steering => "steering",
            Suite::Exhaustivity => "exhaustivity",
        })
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Suite::ALL
            .into_iter()
            .find(|x| x.to_string() == s)
            .ok_or_else(|| format!("unknown suite {s:?}: expected spectral, steering or exhaustivity"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }

    /// `|value - want| <= tol`.
    fn near(name: &str, value: f64, want: f64, tol: f64) -> Self {
        Self::new(name, (value - want).abs() <= tol, format!("{value:.9} (want {want:.9} ± {tol:e})"))
    }

    fn at_most(name: &str, value: f64, bound: f64) -> Self {
        Self::new(name, value <= bound, format!("{value:.3e} (bound {bound:e})"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {}/{}: {}", if c.passed { "PASS" } else { "FAIL" }, self.suite, c.name, c.detail)?;
        }
        write!(f, "{} {}", if self.passed() { "PASS" } else { "FAIL" }, self.suite)
    }
}

pub fn run_property_suite(suite: Suite) -> Report {
    let checks = match suite {
        Suite::Spectral => spectral_checks(),
        Suite::Steering => steering_checks(),
        Suite::Exhaustivity => exhaustivity_checks(),
    };
    Report { suite, checks }
}

/// `k` points log-spaced over `[lo, hi]`, endpoints included.
pub fn log_space(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    assert!(k >= 2 && lo > 0.0 && hi > lo);
    let (a, b) = (lo.ln(), hi.ln());
    (0..k).map(|i| (a + (b - a) * i as f64 / (k - 1) as f64).exp()).collect()
}

/// Least-squares slope of `y` against `x`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Log-log slopes of the Gramian spectrum against `t`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralSlopes {
    /// One slope per eigenvalue rank, ascending.
    pub eigen: Vec<f64>,
    pub det: f64,
    pub min: f64,
}

pub fn spectral_slopes(sys: &LinearAffineSystem, ts: &[f64]) -> Result<SpectralSlopes, GramianError> {
    let n = sys.n();
    let lt: Vec<f64> = ts.iter().map(|t| t.ln()).collect();
    let mut by_rank = vec![Vec::with_capacity(ts.len()); n];
    let mut log_det = Vec::with_capacity(ts.len());
    for &t in ts {
        let ev = spectrum(&gramian(sys, t)?);
        for (k, l) in ev.iter().enumerate() {
            by_rank[k].push(l.ln());
        }
        log_det.push(ev.iter().map(|l| l.ln()).sum());
    }
    let mut eigen: Vec<f64> = by_rank.iter().map(|y| slope(&lt, y)).collect();
    let min = eigen[n - 1];
    eigen.sort_by(f64::total_cmp);
    Ok(SpectralSlopes { eigen, det: slope(&lt, &log_det), min })
}

fn spectral_checks() -> Vec<Check> {
    let sys = LinearAffineSystem::double_integrator(2, 1.0);
    let s = match spectral_slopes(&sys, &log_space(1e-3, 1e-2, 8)) {
        Ok(s) => s,
        Err(e) => return vec![Check::new("gramian", false, e.to_string())],
    };
    let mut checks: Vec<Check> = s
        .eigen
        .iter()
        .zip([1.0, 1.0, 3.0, 3.0])
        .enumerate()
        .map(|(k, (&got, want))| Check::near(&format!("eigenvalue slope {k}"), got, want, 0.05))
        .collect();
    checks.push(Check::near("determinant slope", s.det, 8.0, 0.1));
    checks.push(Check::near("smallest eigenvalue slope", s.min, 3.0, 0.05));
    checks
}

/// The 1D double integrator steered from rest at 0 to rest at 1.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteeringOracle {
    pub tau_star: f64,
    pub cost: f64,
    /// Largest coordinate error of `x(0)` and `x(τ*)` against the endpoints.
    pub endpoint_error: f64,
    /// `τ* + ∫uᵀRu` by composite Simpson, relative to the reported cost.
    pub quadrature_error: f64,
    /// Largest coordinate of `ẋ − (Ax + Bu + c)` with central differences.
    pub residual: f64,
}

pub fn steering_oracle() -> Result<SteeringOracle, SteeringError> {
    let s = Steerer::new(LinearAffineSystem::double_integrator(1, 1.0), SteerConfig::default())?;
    let (x0, x1) = (DVector::from_vec(vec![0.0, 0.0]), DVector::from_vec(vec![1.0, 0.0]));
    let r = s.optimal_steer(&x0, &x1)?;
    let endpoint_error = (s.state_at(&r, 0.0)? - &x0).amax().max((s.state_at(&r, r.tau_star)? - &x1).amax());

    let sys = s.system();
    let k = 2000;
    let h = r.tau_star / k as f64;
    let effort = |t: f64| -> Result<f64, SteeringError> {
        let u = s.control_at(&r, t.min(r.tau_star))?;
        Ok((u.transpose() * sys.r() * &u)[0])
    };
    let mut sum = effort(0.0)? + effort(r.tau_star)?;
    for i in 1..k {
        sum += effort(i as f64 * h)? * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let quadrature = r.tau_star + sum * h / 3.0;

    let dt = 1e-5;
    let mut residual: f64 = 0.0;
    for i in 1..20 {
        let t = r.tau_star * i as f64 / 20.0;
        let xdot = (s.state_at(&r, t + dt)? - s.state_at(&r, t - dt)?) / (2.0 * dt);
        let rhs = sys.a() * s.state_at(&r, t)? + sys.b() * s.control_at(&r, t)? + sys.c();
        residual = residual.max((xdot - rhs).amax());
    }
    Ok(SteeringOracle {
        tau_star: r.tau_star,
        cost: r.cost,
        endpoint_error,
        quadrature_error: (quadrature - r.cost).abs() / r.cost,
        residual,
    })
}

fn steering_checks() -> Vec<Check> {
    let o = match steering_oracle() {
        Ok(o) => o,
        Err(e) => return vec![Check::new("steer", false, e.to_string())],
    };
    // c(τ) = τ + 12/τ³ is stationary where 1 = 36/τ⁴
    let tau = 6f64.sqrt();
    vec![
        Check::near("arrival time", o.tau_star, tau, 1e-5),
        Check::near("cost", o.cost, tau + 12.0 / tau.powi(3), 1e-5),
        Check::at_most("endpoints", o.endpoint_error, 1e-8),
        Check::at_most("quadrature", o.quadrature_error, 1e-6),
        Check::at_most("dynamics residual", o.residual, 1e-5),
    ]
}

/// Searches random sample sets for waypoints tracing a coasting reference
/// trajectory of the free planar double integrator.
///
/// The reference moves at constant velocity `(speed, 0)` from `start` for
/// `horizon` time units, so its cost is `horizon`. A waypoint sequence
/// traces it when it starts at the reference start, ends within `p_N` of
/// the reference end, every connection costs at most `r_N` and stays within
/// `p_N` of the reference (checked at `edge_samples` interior times), and
/// the total cost is at most `(1 + epsilon)` times the reference cost.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TracingProbe {
    pub start: [f64; 2],
    pub speed: f64,
    pub horizon: f64,
    pub epsilon: f64,
    pub eta: f64,
    pub c_p: f64,
    pub trials: usize,
    pub edge_samples: usize,
    pub seed: u64,
}

impl Default for TracingProbe {
    fn default() -> Self {
        Self {
            start: [0.2, 0.5],
            speed: 0.3,
            horizon: 2.0,
            epsilon: 0.5,
            eta: 0.5,
            c_p: 0.026,
            trials: 200,
            edge_samples: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeResult {
    pub n: usize,
    pub r_n: f64,
    pub p_n: f64,
    pub trials: usize,
    pub successes: usize,
    /// Mean number of vertices within `p_N` of the reference.
    pub mean_tube: f64,
}

impl ProbeResult {
    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.trials as f64
    }
}

impl TracingProbe {
    pub fn world(&self) -> ProblemInstance {
        let p = bundled("free").expect("bundled");
        p.with_x_init(self.state(0.0).to_vec()).expect("the reference start is free")
    }

    /// Reference state at time `s`.
    pub fn state(&self, s: f64) -> [f64; 4] {
        [self.start[0] + self.speed * s, self.start[1], self.speed, 0.0]
    }

    /// Euclidean distance from `x` to the reference trajectory as a set.
    pub fn distance(&self, x: &[f64]) -> f64 {
        let len = self.speed * self.horizon;
        let along = (x[0] - self.start[0]).clamp(0.0, len);
        let d = [x[0] - self.start[0] - along, x[1] - self.start[1], x[2] - self.speed, x[3]];
        d.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `r_N` from the free-world volume and `p_N = C_p r_N`.
    pub fn radii(&self, world: &ProblemInstance, n: usize) -> Result<(f64, f64), GramianError> {
        let sys = world.system();
        let c_mu = radius::estimate_c_mu(sys, 1.0)?;
        let r = radius::radius(&sys.controllability_info(), world.free_volume(), c_mu, self.eta, n);
        Ok((r, self.c_p * r))
    }

    /// Cheapest tracing cost for one sample set, if any sequence qualifies.
    pub fn trace(&self, steerer: &Steerer, samples: &[Vec<f64>], r: f64, p: f64) -> Option<f64> {
        self.trace_path(steerer, samples, r, p).map(|(c, _)| c)
    }

    /// [`TracingProbe::trace`] together with the waypoints, starting at the
    /// reference start.
    pub fn trace_path(&self, steerer: &Steerer, samples: &[Vec<f64>], r: f64, p: f64) -> Option<(f64, Vec<Vec<f64>>)> {
        let mut tube = vec![self.state(0.0).to_vec()];
        tube.extend(samples.iter().filter(|x| self.distance(x) <= p).cloned());
        let end = self.state(self.horizon);
        let is_end = |x: &[f64]| x.iter().zip(end).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() <= p;
        let budget = (1.0 + self.epsilon) * self.horizon;

        let mut dist = vec![f64::INFINITY; tube.len()];
        let mut parent = vec![usize::MAX; tube.len()];
        let mut done = vec![false; tube.len()];
        let mut heap = BinaryHeap::from([Reverse(Keyed(0.0, 0))]);
        dist[0] = 0.0;
        while let Some(Reverse(Keyed(d, u))) = heap.pop() {
            if done[u] {
                continue;
            }
            done[u] = true;
            if d > budget {
                return None;
            }
            if u != 0 && is_end(&tube[u]) {
                let mut path = vec![u];
                while path[path.len() - 1] != 0 {
                    path.push(parent[path[path.len() - 1]]);
                }
                return Some((d, path.into_iter().rev().map(|i| tube[i].clone()).collect()));
            }
            let mut src = steerer.prepare(&tube[u]);
            for w in 0..tube.len() {
                if done[w] {
                    continue;
                }
                let Some(b) = steerer.cost_bounds_prepared(&mut src, &tube[w]) else { continue };
                if b.lower > r || d + b.lower >= dist[w] {
                    continue;
                }
                let c = match b.node() {
                    Some(k) => steerer.refine_node(&tube[u], &tube[w], k),
                    None => b.upper,
                };
                if c > r || d + c >= dist[w] || !self.edge_stays_close(steerer, &tube[u], &tube[w], p) {
                    continue;
                }
                dist[w] = d + c;
                parent[w] = u;
                heap.push(Reverse(Keyed(d + c, w)));
            }
        }
        None
    }

    fn edge_stays_close(&self, steerer: &Steerer, a: &[f64], b: &[f64], p: f64) -> bool {
        let Ok(seg) = steerer.steer(&DVector::from_column_slice(a), &DVector::from_column_slice(b)) else {
            return false;
        };
        let mut sampler = steerer.sampler(&seg);
        (1..self.edge_samples).all(|i| {
            let t = seg.tau_star * i as f64 / self.edge_samples as f64;
            sampler.state(t).is_ok_and(|x| self.distance(x) <= p)
        })
    }

    /// The sample set of one trial.
    pub fn samples(&self, world: &ProblemInstance, n: usize, trial: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (n as u64).rotate_left(32));
        rng.set_stream(trial as u64);
        world.sample_free(n, &mut rng).expect("the free world has positive volume")
    }

    /// Runs `trials` independent sample sets of size `n`.
    pub fn run(&self, n: usize) -> Result<ProbeResult, GramianError> {
        let world = self.world();
        let (r, p) = self.radii(&world, n)?;
        let steerer = Steerer::new(world.system().clone(), SteerConfig::default()).expect("default steering config");
        let outcomes: Vec<(bool, usize)> = (0..self.trials)
            .into_par_iter()
            .map(|trial| {
                let samples = self.samples(&world, n, trial);
                let tube = samples.iter().filter(|x| self.distance(x) <= p).count();
                (self.trace(&steerer, &samples, r, p).is_some(), tube)
            })
            .collect();
        let successes = outcomes.iter().filter(|o| o.0).count();
        let mean_tube = outcomes.iter().map(|o| o.1 as f64).sum::<f64>() / self.trials as f64;
        Ok(ProbeResult { n, r_n: r, p_n: p, trials: self.trials, successes, mean_tube })
    }
}

/// Sample sizes of the exhaustivity suite.
pub const PROBE_SIZES: [usize; 3] = [1000, 4000, 16000];

fn exhaustivity_checks() -> Vec<Check> {
    let probe = TracingProbe::default();
    let mut results = Vec::new();
    for n in PROBE_SIZES {
        match probe.run(n) {
            Ok(r) => results.push(r),
            Err(e) => return vec![Check::new("radius", false, e.to_string())],
        }
    }
    let mut checks: Vec<Check> = results
        .iter()
        .map(|r| {
            Check::new(
                &format!("N={}", r.n),
                true,
                format!(
                    "{}/{} traced, rate {:.3}, r_N {:.4}, p_N {:.4}, mean tube {:.1}",
                    r.successes,
                    r.trials,
                    r.rate(),
                    r.r_n,
                    r.p_n,
                    r.mean_tube
                ),
            )
        })
        .collect();
    let rates: Vec<f64> = results.iter().map(ProbeResult::rate).collect();
    checks.push(Check::new("increasing", rates.windows(2).all(|w| w[0] < w[1]), format!("rates {rates:?}")));
    let last = *rates.last().expect("nonempty");
    checks.push(Check::new("largest N", last > 0.9, format!("rate {last:.3} (want > 0.9)")));
    checks
}
