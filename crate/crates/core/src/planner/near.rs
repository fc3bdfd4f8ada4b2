//! Directed near sets `Near±[V, x, r]` and the on-disk neighbor cache.
//!
//! Candidates are pre-filtered with a per-coordinate box that every state
//! reachable at cost below `r` must lie in, so pruning never changes the
//! result. If `c*(x, y) < r` then `τ* < r` and
//! `y − x̄(τ*) = G(τ*)^{1/2} w` with `|w|² < r`, hence
//! `|yᵢ − xᵢ| ≤ √(r Gᵢᵢ(τ_hi)) + δᵢ(x)` where `δᵢ(x)` bounds the drift
//! `|x̄(τ) − x|ᵢ` over `τ ≤ τ_hi`.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg;
use crate::spatial::KdTree;
use crate::steering::{ConnectionMode, Direction, Steerer};
use crate::system::hex;

/// Relative and absolute slack added to every pruning bound against rounding.
const BOX_REL_SLACK: f64 = 1e-9;
const BOX_ABS_SLACK: f64 = 1e-12;

struct PruneBoxes {
    tree: KdTree,
    /// `√(r Gᵢᵢ(τ_hi))`
    half_width: Vec<f64>,
    /// `δ(v)` for every vertex.
    drift: Vec<Vec<f64>>,
    drift_max: Vec<f64>,
}

/// Near-set oracle over a fixed vertex set and threshold.
pub struct NearIndex<'a> {
    steerer: &'a Steerer,
    vertices: &'a [Vec<f64>],
    r: f64,
    prune: Option<PruneBoxes>,
    tau_hi: f64,
    a_powers: Vec<DMatrix<f64>>,
    tail: f64,
    steer_calls: AtomicU64,
}

impl<'a> NearIndex<'a> {
    pub fn new(steerer: &'a Steerer, vertices: &'a [Vec<f64>], r: f64, prune: bool) -> Self {
        assert!(r > 0.0, "near-set threshold must be positive");
        let sys = steerer.system();
        let n = sys.n();
        let tau_hi = match steerer.mode() {
            ConnectionMode::FixedTime(t) => t,
            ConnectionMode::OptimalTime => r.min(steerer.max_travel_time()),
        };
        let mut a_powers = vec![DMatrix::identity(n, n)];
        for k in 1..=n {
            let next = sys.a() * &a_powers[k - 1];
            a_powers.push(next);
        }
        let a_n = linalg::norm2(&a_powers[n]);
        let fact: f64 = (1..=n + 1).map(|k| k as f64).product();
        let tail = a_n * tau_hi.powi(n as i32 + 1) * (linalg::norm2(sys.a()) * tau_hi).exp() / fact;
        let mut index = Self {
            steerer,
            vertices,
            r,
            prune: None,
            tau_hi,
            a_powers,
            tail,
            steer_calls: AtomicU64::new(0),
        };
        if prune {
            let diag = steerer
                .kernel()
                .propagate(tau_hi)
                .map(|p| p.gramian.diagonal())
                .ok();
            if let Some(diag) = diag.filter(|d| d.iter().all(|v| v.is_finite())) {
                let half_width: Vec<f64> = diag.iter().map(|g| inflate((r * g.max(0.0)).sqrt())).collect();
                let drift: Vec<Vec<f64>> = vertices.iter().map(|v| index.drift_bound(v)).collect();
                let mut drift_max = vec![0.0f64; n];
                for d in &drift {
                    for i in 0..n {
                        drift_max[i] = drift_max[i].max(d[i]);
                    }
                }
                index.prune = Some(PruneBoxes {
                    tree: KdTree::new(vertices.to_vec()),
                    half_width,
                    drift,
                    drift_max,
                });
            }
        }
        index
    }

    pub fn radius(&self) -> f64 {
        self.r
    }

    pub fn steerer(&self) -> &Steerer {
        self.steerer
    }

    pub fn vertices(&self) -> &[Vec<f64>] {
        self.vertices
    }

    /// Steering evaluations performed so far by [`NearIndex::near`].
    pub fn steer_calls(&self) -> u64 {
        self.steer_calls.load(Ordering::Relaxed)
    }

    /// Per-coordinate bound on `|x̄(τ) − x|` for `τ ∈ [0, τ_hi]`.
    fn drift_bound(&self, x: &[f64]) -> Vec<f64> {
        let sys = self.steerer.system();
        let n = x.len();
        let f = sys.a() * DVector::from_column_slice(x) + sys.c();
        let mut out = vec![0.0; n];
        let mut coeff = 1.0;
        for k in 1..=n {
            coeff *= self.tau_hi / k as f64;
            let term = &self.a_powers[k - 1] * &f;
            for i in 0..n {
                out[i] += coeff * term[i].abs();
            }
        }
        let tail = self.tail * f.norm();
        out.iter().map(|v| inflate(v + tail)).collect()
    }

    /// Indices that may satisfy the threshold (all of `V` without pruning),
    /// ascending, excluding `exclude`.
    pub fn candidates(&self, x: &[f64], exclude: Option<usize>, direction: Direction) -> Vec<usize> {
        let Some(p) = &self.prune else {
            return (0..self.vertices.len()).filter(|&i| Some(i) != exclude).collect();
        };
        let n = x.len();
        let own = match direction {
            Direction::Forward => match exclude {
                Some(i) => p.drift[i].clone(),
                None => self.drift_bound(x),
            },
            Direction::Backward => p.drift_max.clone(),
        };
        let lo: Vec<f64> = (0..n).map(|i| x[i] - p.half_width[i] - own[i]).collect();
        let hi: Vec<f64> = (0..n).map(|i| x[i] + p.half_width[i] + own[i]).collect();
        let mut out = p.tree.query_box(&lo, &hi);
        out.retain(|&j| Some(j) != exclude);
        if direction == Direction::Backward {
            out.retain(|&j| {
                let y = &self.vertices[j];
                (0..n).all(|i| (y[i] - x[i]).abs() <= p.half_width[i] + p.drift[j][i])
            });
        }
        out
    }

    /// `Near±[V ∖ {exclude}, x, r]`, ascending.
    pub fn near(&self, x: &[f64], exclude: Option<usize>, direction: Direction) -> Vec<usize> {
        let cands = self.candidates(x, exclude, direction);
        self.steer_calls.fetch_add(cands.len() as u64, Ordering::Relaxed);
        cands
            .into_iter()
            .filter(|&j| self.steerer.reachable(x, &self.vertices[j], self.r, direction))
            .collect()
    }
}

fn inflate(v: f64) -> f64 {
    v * (1.0 + BOX_REL_SLACK) + BOX_ABS_SLACK
}

/// SHA-256 over the bit patterns of a vertex list.
pub fn vertex_hash(vertices: &[Vec<f64>]) -> String {
    let mut h = Sha256::new();
    h.update((vertices.len() as u64).to_le_bytes());
    for v in vertices {
        h.update((v.len() as u64).to_le_bytes());
        for x in v {
            h.update(x.to_bits().to_le_bytes());
        }
    }
    hex(&h.finalize())
}

pub const CACHE_VERSION: u32 = 1;

/// Identifies what a neighbor cache was computed for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub version: u32,
    pub system_hash: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub seed: u64,
    pub r_n: f64,
    pub variant: String,
    pub vertex_hash: String,
}

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("neighbor cache I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("neighbor cache is malformed at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("neighbor cache header mismatch in {field}: file has {found}, expected {expected}")]
    HeaderMismatch { field: &'static str, found: String, expected: String },
    #[error("neighbor cache is inconsistent: {0}")]
    Inconsistent(String),
}

/// One neighbor and the connection cost to (forward) or from (backward) it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    pub cost: f64,
}

/// Per-vertex forward and backward near sets with connection costs. They do
/// not depend on the obstacles, only on the vertex set and threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborCache {
    pub header: CacheHeader,
    pub forward: Vec<Vec<Neighbor>>,
    pub backward: Vec<Vec<Neighbor>>,
}

impl fmt::Display for CacheHeader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "N={} seed={} r_N={} variant={}", self.n, self.seed, self.r_n, self.variant)
    }
}

impl NeighborCache {
    /// Builds the cache in parallel over vertices; the result does not depend
    /// on the thread count.
    pub fn build(index: &NearIndex<'_>, header: CacheHeader) -> Self {
        let vertices = index.vertices();
        let steerer = index.steerer();
        let r = index.radius();
        let forward: Vec<Vec<Neighbor>> = (0..vertices.len())
            .into_par_iter()
            .map(|i| {
                index
                    .candidates(&vertices[i], Some(i), Direction::Forward)
                    .into_iter()
                    .filter_map(|j| {
                        steerer
                            .connection_cost(&vertices[i], &vertices[j])
                            .filter(|c| *c < r)
                            .map(|cost| Neighbor { index: j, cost })
                    })
                    .collect()
            })
            .collect();
        let mut backward = vec![Vec::new(); vertices.len()];
        for (i, list) in forward.iter().enumerate() {
            for nb in list {
                backward[nb.index].push(Neighbor { index: i, cost: nb.cost });
            }
        }
        Self { header, forward, backward }
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<(), CacheError> {
        serde_json::to_writer(w, self).map_err(|e| CacheError::Io(e.into()))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CacheError> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(f)
    }

    /// Parses and structurally validates a cache without checking the header.
    pub fn parse(text: &str) -> Result<Self, CacheError> {
        let cache: Self = serde_json::from_str(text).map_err(|e| CacheError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cache.check_structure()?;
        Ok(cache)
    }

    /// Reads a cache and rejects it unless its header equals `expected`.
    pub fn load<R: Read>(mut reader: R, expected: &CacheHeader) -> Result<Self, CacheError> {
        let mut text = String::new();
        reader.read_to_string(&mut text)?;
        let cache = Self::parse(&text)?;
        cache.check_header(expected)?;
        Ok(cache)
    }

    pub fn check_header(&self, expected: &CacheHeader) -> Result<(), CacheError> {
        let h = &self.header;
        let mismatch = |field: &'static str, found: String, expected: String| {
            Err(CacheError::HeaderMismatch { field, found, expected })
        };
        if h.version != expected.version {
            return mismatch("version", h.version.to_string(), expected.version.to_string());
        }
        if h.system_hash != expected.system_hash {
            return mismatch("system_hash", h.system_hash.clone(), expected.system_hash.clone());
        }
        if h.n != expected.n {
            return mismatch("N", h.n.to_string(), expected.n.to_string());
        }
        if h.seed != expected.seed {
            return mismatch("seed", h.seed.to_string(), expected.seed.to_string());
        }
        if h.r_n.to_bits() != expected.r_n.to_bits() {
            return mismatch("r_N", h.r_n.to_string(), expected.r_n.to_string());
        }
        if h.variant != expected.variant {
            return mismatch("variant", h.variant.clone(), expected.variant.clone());
        }
        if h.vertex_hash != expected.vertex_hash {
            return mismatch("vertex_hash", h.vertex_hash.clone(), expected.vertex_hash.clone());
        }
        Ok(())
    }

    fn check_structure(&self) -> Result<(), CacheError> {
        let v = self.forward.len();
        if self.backward.len() != v {
            return Err(CacheError::Inconsistent(format!(
                "{v} forward lists but {} backward lists",
                self.backward.len()
            )));
        }
        let mut fwd: HashMap<(usize, usize), u64> = HashMap::new();
        for (i, list) in self.forward.iter().enumerate() {
            for nb in list {
                if nb.index >= v || nb.index == i || !(nb.cost >= 0.0) {
                    return Err(CacheError::Inconsistent(format!("bad forward entry at vertex {i}")));
                }
                fwd.insert((i, nb.index), nb.cost.to_bits());
            }
            if list.windows(2).any(|w| w[0].index >= w[1].index) {
                return Err(CacheError::Inconsistent(format!("forward list {i} not sorted")));
            }
        }
        let mut count = 0;
        for (j, list) in self.backward.iter().enumerate() {
            for nb in list {
                if nb.index >= v || fwd.get(&(nb.index, j)) != Some(&nb.cost.to_bits()) {
                    return Err(CacheError::Inconsistent(format!("bad backward entry at vertex {j}")));
                }
                count += 1;
            }
        }
        if count != fwd.len() {
            return Err(CacheError::Inconsistent("backward lists do not mirror forward lists".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::steering::SteerConfig;
    use crate::system::LinearAffineSystem;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, count: usize) -> (Steerer, Vec<Vec<f64>>) {
        let s = Steerer::new(LinearAffineSystem::double_integrator(2, 1.0), SteerConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..count)
            .map(|_| {
                vec![
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ]
            })
            .collect();
        (s, v)
    }

    #[test]
    fn tiny_radius_gives_empty_sets() {
        let (s, v) = setup(1, 30);
        let idx = NearIndex::new(&s, &v, 1e-3, true);
        for i in 0..v.len() {
            assert!(idx.near(&v[i], Some(i), Direction::Forward).is_empty());
        }
    }

    #[test]
    fn pruning_and_cache_are_transparent() {
        let (s, v) = setup(2, 40);
        let r = 0.8;
        let pruned = NearIndex::new(&s, &v, r, true);
        let plain = NearIndex::new(&s, &v, r, false);
        let header = CacheHeader {
            version: CACHE_VERSION,
            system_hash: s.system().fingerprint(),
            n: v.len(),
            seed: 2,
            r_n: r,
            variant: "optimal".into(),
            vertex_hash: vertex_hash(&v),
        };
        let cache = NeighborCache::build(&pruned, header);
        for i in 0..v.len() {
            for dir in [Direction::Forward, Direction::Backward] {
                let a = pruned.near(&v[i], Some(i), dir);
                assert_eq!(a, plain.near(&v[i], Some(i), dir));
                let list = if dir == Direction::Forward { &cache.forward[i] } else { &cache.backward[i] };
                let mut from_cache: Vec<usize> = list.iter().map(|n| n.index).collect();
                from_cache.sort_unstable();
                assert_eq!(a, from_cache);
            }
        }
        assert!(pruned.steer_calls() < plain.steer_calls());
    }

    #[test]
    fn cache_round_trip_and_header_checks() {
        let (s, v) = setup(3, 20);
        let idx = NearIndex::new(&s, &v, 1.0, true);
        let header = CacheHeader {
            version: CACHE_VERSION,
            system_hash: s.system().fingerprint(),
            n: 20,
            seed: 3,
            r_n: 1.0,
            variant: "optimal".into(),
            vertex_hash: vertex_hash(&v),
        };
        let cache = NeighborCache::build(&idx, header.clone());
        let mut buf = Vec::new();
        cache.write_to(&mut buf).unwrap();
        let back = NeighborCache::load(buf.as_slice(), &header).unwrap();
        assert_eq!(back, cache);

        let wrong_seed = CacheHeader { seed: 4, ..header.clone() };
        assert!(matches!(
            NeighborCache::load(buf.as_slice(), &wrong_seed),
            Err(CacheError::HeaderMismatch { field: "seed", .. })
        ));
        let wrong_r = CacheHeader { r_n: 1.0 + 1e-15, ..header.clone() };
        assert!(matches!(
            NeighborCache::load(buf.as_slice(), &wrong_r),
            Err(CacheError::HeaderMismatch { field: "r_N", .. })
        ));
        let wrong_variant = CacheHeader { variant: "fixed:0.5".into(), ..header.clone() };
        assert!(matches!(
            NeighborCache::load(buf.as_slice(), &wrong_variant),
            Err(CacheError::HeaderMismatch { field: "variant", .. })
        ));
        assert!(matches!(
            NeighborCache::load(&b"{\"header\": 3"[..], &header),
            Err(CacheError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn inconsistent_cache_is_rejected() {
        let (s, v) = setup(4, 15);
        let idx = NearIndex::new(&s, &v, 1.5, true);
        let header = CacheHeader {
            version: CACHE_VERSION,
            system_hash: String::new(),
            n: 15,
            seed: 0,
            r_n: 1.5,
            variant: "optimal".into(),
            vertex_hash: String::new(),
        };
        let mut cache = NeighborCache::build(&idx, header);
        let i = (0..15).find(|&i| !cache.backward[i].is_empty()).unwrap();
        cache.backward[i][0].cost += 1.0;
        let text = serde_json::to_string(&cache).unwrap();
        assert!(matches!(NeighborCache::parse(&text), Err(CacheError::Inconsistent(_))));
    }
}
