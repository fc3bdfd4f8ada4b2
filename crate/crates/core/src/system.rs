//! Linear-affine dynamics `ẋ = Ax + Bu + c` with the mixed time/energy cost
//! `∫ (1 + uᵀRu) dt`, plus the controllability structure of `(A, B)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Symmetry tolerance for `R`.
const SYMMETRY_TOL: f64 = 1e-12;
/// Relative threshold of the column-scan independence test.
const INDEPENDENCE_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SystemError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("(A, B) is not controllable: controllability matrix has rank {rank} < {n}")]
    NotControllable { rank: usize, n: usize },
    #[error("R is not symmetric positive definite: {0}")]
    RNotSpd(String),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
}

/// The tuple `(A, B, c, R)`. Construction validates every assumption, so a
/// value of this type is always controllable with SPD `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearAffineSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DVector<f64>,
    r: DMatrix<f64>,
    /// `B R⁻¹ Bᵀ`
    q: DMatrix<f64>,
    r_inv: DMatrix<f64>,
}

impl LinearAffineSystem {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DVector<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self, SystemError> {
        validate(&a, &b, &c, &r)?;
        let r_inv = r
            .clone()
            .cholesky()
            .expect("validated SPD")
            .inverse();
        let q = &b * &r_inv * b.transpose();
        let q = (&q + q.transpose()) * 0.5;
        Ok(Self { a, b, c, r, q, r_inv })
    }

    /// Builds from row-major nested arrays, as found in scenario files.
    pub fn from_rows(
        a: &[Vec<f64>],
        b: &[Vec<f64>],
        c: &[f64],
        r: &[Vec<f64>],
    ) -> Result<Self, SystemError> {
        Self::new(
            matrix_from_rows(a, "A")?,
            matrix_from_rows(b, "B")?,
            DVector::from_column_slice(c),
            matrix_from_rows(r, "R")?,
        )
    }

    /// `d`-axis double integrator: state `(p₁..p_d, v₁..v_d)`, `u = v̇`, `R = ρI`.
    pub fn double_integrator(dims: usize, rho: f64) -> Self {
        let n = 2 * dims;
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, dims);
        for i in 0..dims {
            a[(i, dims + i)] = 1.0;
            b[(dims + i, i)] = 1.0;
        }
        Self::new(a, b, DVector::zeros(n), DMatrix::identity(dims, dims) * rho)
            .expect("double integrator is controllable")
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn r_inv(&self) -> &DMatrix<f64> {
        &self.r_inv
    }

    /// `B R⁻¹ Bᵀ`, the Gramian integrand at `s = 0`.
    pub fn input_weight(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// Controllability indices, exponents and the derived constants.
    pub fn controllability_info(&self) -> ControllabilityInfo {
        controllability_scan(&self.a, &self.b).expect("validated system is controllable")
    }

    /// SHA-256 over the bit patterns of `A`, `B`, `c`, `R`.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for m in [&self.a, &self.b, &self.r] {
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
            for v in m.transpose().iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        for v in self.c.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex(&h.finalize())
    }

    pub fn to_spec(&self) -> SystemSpec {
        SystemSpec {
            a: rows_of(&self.a),
            b: rows_of(&self.b),
            c: self.c.iter().copied().collect(),
            r: rows_of(&self.r),
        }
    }
}

/// JSON form of a system: row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
}

impl SystemSpec {
    pub fn build(&self) -> Result<LinearAffineSystem, SystemError> {
        LinearAffineSystem::from_rows(&self.a, &self.b, &self.c, &self.r)
    }
}

/// Checks dimensions, `R` symmetric positive definite, and `(A, B)` controllable.
pub fn validate(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DVector<f64>,
    r: &DMatrix<f64>,
) -> Result<(), SystemError> {
    let n = a.nrows();
    if n == 0 || !a.is_square() {
        return Err(SystemError::DimensionMismatch(format!(
            "A must be square and non-empty, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if b.nrows() != n || b.ncols() == 0 {
        return Err(SystemError::DimensionMismatch(format!(
            "B must be {n}xm with m > 0, got {}x{}",
            b.nrows(),
            b.ncols()
        )));
    }
    if c.len() != n {
        return Err(SystemError::DimensionMismatch(format!(
            "c must have length {n}, got {}",
            c.len()
        )));
    }
    let m = b.ncols();
    if r.nrows() != m || r.ncols() != m {
        return Err(SystemError::DimensionMismatch(format!(
            "R must be {m}x{m}, got {}x{}",
            r.nrows(),
            r.ncols()
        )));
    }
    for (name, ok) in [
        ("A", a.iter().all(|v| v.is_finite())),
        ("B", b.iter().all(|v| v.is_finite())),
        ("c", c.iter().all(|v| v.is_finite())),
        ("R", r.iter().all(|v| v.is_finite())),
    ] {
        if !ok {
            return Err(SystemError::NonFinite(name));
        }
    }
    let asym = (r - r.transpose()).abs().max();
    if asym > SYMMETRY_TOL * r.abs().max().max(1.0) {
        return Err(SystemError::RNotSpd(format!("asymmetry {asym:e}")));
    }
    let eig = r.clone().symmetric_eigen();
    let min_eig = eig.eigenvalues.min();
    if min_eig <= 0.0 {
        return Err(SystemError::RNotSpd(format!("eigenvalue {min_eig}")));
    }
    controllability_scan(a, b).map(|_| ())
}

/// Controllability structure from the left-to-right column scan of
/// `[B AB … Aⁿ⁻¹B]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllabilityInfo {
    /// `ν_k` per input column; sums to `n`.
    pub indices: Vec<usize>,
    /// Power of `A` attached to each selected column, ascending.
    pub exponents: Vec<usize>,
    /// Controllability index `ν = max ν_k`.
    pub nu: usize,
    /// `D = Σ ν_k²`.
    pub d: usize,
}

impl ControllabilityInfo {
    pub fn n(&self) -> usize {
        self.exponents.len()
    }

    /// `D̃ = (n + D) / 2`.
    pub fn d_tilde(&self) -> f64 {
        (self.n() + self.d) as f64 / 2.0
    }
}

/// Scans the columns of the controllability matrix left to right, keeping
/// each column whose residual after projection onto the kept set exceeds
/// `1e-10 × (largest column norm)`.
pub fn controllability_scan(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<ControllabilityInfo, SystemError> {
    let n = a.nrows();
    let m = b.ncols();
    // (power, input column, vector)
    let mut columns = Vec::with_capacity(n * m);
    let mut block = b.clone();
    for power in 0..n {
        for k in 0..m {
            columns.push((power, k, block.column(k).into_owned()));
        }
        block = a * block;
    }
    let max_norm = columns.iter().map(|c| c.2.norm()).fold(0.0, f64::max);
    let tol = INDEPENDENCE_TOL * max_norm;

    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut indices = vec![0usize; m];
    let mut exponents = Vec::with_capacity(n);
    // once A^j b_k is dependent, so is every higher power
    let mut exhausted = vec![false; m];
    for (power, k, col) in columns {
        if basis.len() == n {
            break;
        }
        if exhausted[k] {
            continue;
        }
        let mut res = col;
        // two passes of modified Gram-Schmidt
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&res);
                res.axpy(-proj, q, 1.0);
            }
        }
        let norm = res.norm();
        if norm > tol && norm > 0.0 {
            basis.push(res / norm);
            indices[k] += 1;
            exponents.push(power);
        } else {
            exhausted[k] = true;
        }
    }
    if basis.len() < n {
        return Err(SystemError::NotControllable { rank: basis.len(), n });
    }
    let nu = indices.iter().copied().max().unwrap_or(0);
    let d = indices.iter().map(|v| v * v).sum();
    Ok(ControllabilityInfo { indices, exponents, nu, d })
}

fn matrix_from_rows(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>, SystemError> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(SystemError::DimensionMismatch(format!("{name} has ragged rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
