//! Weighted controllability Gramian
//! `G(t) = ∫₀ᵗ exp(As) B R⁻¹ Bᵀ exp(Aᵀs) ds`, the zero-input response
//! `x̄(t) = exp(At) x₀ + ∫₀ᵗ exp(As) c ds`, and the `‖·‖_{G⁻¹}` norm.
//!
//! Both integrals come out of a single primitive, the matrix exponential of
//! an augmented block matrix (Van Loan). When `A` is nilpotent the series
//! terminate and [`GramianKernel`] evaluates them as matrix polynomials in
//! `t` instead, which is exact and an order of magnitude cheaper.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

use crate::linalg::{self, EXPM_NORM_CAP};
use crate::system::LinearAffineSystem;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GramianError {
    #[error("matrix exponential argument norm {norm:.3e} exceeds cap {cap}")]
    Overflow { norm: f64, cap: f64 },
    #[error("non-finite value in matrix exponential")]
    NonFinite,
    #[error("Gramian at t = {t:e} is not numerically positive definite")]
    NotPositiveDefinite { t: f64 },
    #[error("time must be positive and finite, got {0}")]
    InvalidTime(f64),
}

/// `exp(M t)`.
pub fn matrix_exponential(m: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>, GramianError> {
    linalg::expm(&(m * t), EXPM_NORM_CAP)
}

/// A Gramian sample `G(t)` with its Cholesky factor `G = LLᵀ`.
#[derive(Debug, Clone)]
pub struct GramianAt {
    t: f64,
    g: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl GramianAt {
    /// Symmetrizes `g` and factors it; fails if `g` is not numerically SPD.
    pub fn new(t: f64, g: DMatrix<f64>) -> Result<Self, GramianError> {
        let g = (&g + g.transpose()) * 0.5;
        let chol = g
            .clone()
            .cholesky()
            .filter(|c| c.l_dirty().diagonal().iter().all(|d| *d > 0.0 && d.is_finite()))
            .ok_or(GramianError::NotPositiveDefinite { t })?;
        Ok(Self { t, g, chol })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.g
    }

    /// Lower-triangular factor `L`.
    pub fn factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// `‖v‖²_{G⁻¹} = ‖L⁻¹v‖²`.
    pub fn weighted_norm_sq(&self, v: &DVector<f64>) -> f64 {
        let mut z = v.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut z);
        z.norm_squared()
    }

    /// `G⁻¹ v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    /// `det G`, from the factor diagonal.
    pub fn determinant(&self) -> f64 {
        self.chol.l_dirty().diagonal().iter().map(|d| d * d).product()
    }

    /// `√det G`.
    pub fn sqrt_determinant(&self) -> f64 {
        self.chol.l_dirty().diagonal().iter().product()
    }
}

/// `√(vᵀ G⁻¹ v)` via the triangular solve `‖L⁻¹v‖`.
pub fn weighted_norm(g: &GramianAt, v: &DVector<f64>) -> f64 {
    g.weighted_norm_sq(v).sqrt()
}

/// Eigenvalues of `G`, descending.
pub fn spectrum(g: &GramianAt) -> Vec<f64> {
    let mut ev: Vec<f64> = g.g.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// `G(t)` by the Van Loan construction.
pub fn gramian(sys: &LinearAffineSystem, t: f64) -> Result<GramianAt, GramianError> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(GramianError::InvalidTime(t));
    }
    let (_, g) = van_loan(sys.a(), sys.input_weight(), t)?;
    GramianAt::new(t, g)
}

/// `x̄(t)` via the `(n+1)`-augmented exponential `exp([[A, c], [0, 0]] t)`.
pub fn zero_input_response(
    sys: &LinearAffineSystem,
    x0: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>, GramianError> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(GramianError::InvalidTime(t));
    }
    let (phi, h) = drift_exponential(sys.a(), sys.c(), t)?;
    Ok(phi * x0 + h)
}

/// Returns `(exp(At), G(t))` from `exp([[-A, Q], [0, Aᵀ]] t)`. `Q` is
/// normalized before exponentiation and the result rescaled, so the scale
/// of `R` does not count against the exponential's norm cap.
fn van_loan(
    a: &DMatrix<f64>,
    q: &DMatrix<f64>,
    t: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>), GramianError> {
    let n = a.nrows();
    let q_scale = linalg::norm1(q);
    let q_scale = if q_scale > 0.0 { q_scale } else { 1.0 };
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(&(-a * t));
    m.view_mut((0, n), (n, n)).copy_from(&(q * (t / q_scale)));
    m.view_mut((n, n), (n, n)).copy_from(&(a.transpose() * t));
    let e = linalg::expm(&m, EXPM_NORM_CAP)?;
    let f12 = e.view((0, n), (n, n));
    let phi = e.view((n, n), (n, n)).transpose();
    let g = &phi * f12 * q_scale;
    Ok((phi, g))
}

/// `(exp(At), ∫₀ᵗ exp(As) c ds)`.
fn drift_exponential(
    a: &DMatrix<f64>,
    c: &DVector<f64>,
    t: f64,
) -> Result<(DMatrix<f64>, DVector<f64>), GramianError> {
    let n = a.nrows();
    let mut m = DMatrix::zeros(n + 1, n + 1);
    m.view_mut((0, 0), (n, n)).copy_from(&(a * t));
    m.view_mut((0, n), (n, 1)).copy_from(&(c * t));
    let e = linalg::expm(&m, EXPM_NORM_CAP)?;
    Ok((e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, 1)).column(0).into_owned()))
}

/// Everything steering needs at one time `t`: `exp(At)`, the drift integral
/// `h(t)`, and `G(t)`.
#[derive(Debug, Clone)]
pub struct Propagation {
    pub transition: DMatrix<f64>,
    pub drift: DVector<f64>,
    pub gramian: DMatrix<f64>,
}

impl Propagation {
    /// `x̄(t)` from `x0`.
    pub fn free_response(&self, x0: &DVector<f64>) -> DVector<f64> {
        &self.transition * x0 + &self.drift
    }
}

/// Precomputed evaluator for `exp(At)`, `h(t)` and `G(t)` of one system.
#[derive(Debug, Clone)]
pub enum GramianKernel {
    /// `A` nilpotent: all three are polynomials in `t` with the stored
    /// coefficients (index = power of `t`).
    Polynomial {
        transition: Vec<DMatrix<f64>>,
        drift: Vec<DVector<f64>>,
        gramian: Vec<DMatrix<f64>>,
    },
    VanLoan {
        a: DMatrix<f64>,
        q: DMatrix<f64>,
        c: DVector<f64>,
    },
}

impl GramianKernel {
    pub fn new(sys: &LinearAffineSystem) -> Self {
        let n = sys.n();
        let a = sys.a();
        let mut powers = vec![DMatrix::<f64>::identity(n, n)];
        for k in 1..=n {
            let next = a * &powers[k - 1];
            powers.push(next);
        }
        if powers[n].iter().any(|v| *v != 0.0) {
            return GramianKernel::VanLoan {
                a: a.clone(),
                q: sys.input_weight().clone(),
                c: sys.c().clone(),
            };
        }
        powers.truncate(n);
        let fact: Vec<f64> = (0..=2 * n)
            .scan(1.0, |f, k| {
                if k > 0 {
                    *f *= k as f64;
                }
                Some(*f)
            })
            .collect();
        let transition = (0..n).map(|k| &powers[k] / fact[k]).collect();
        // h(t) = Σ A^k c t^{k+1} / (k+1)!
        let mut drift = vec![DVector::zeros(n)];
        drift.extend((0..n).map(|k| &powers[k] * sys.c() / fact[k + 1]));
        // G(t) = Σ_{j,k} A^j Q (A^k)ᵀ t^{j+k+1} / (j! k! (j+k+1))
        let q = sys.input_weight();
        let mut gramian = vec![DMatrix::zeros(n, n); 2 * n];
        for j in 0..n {
            let left = &powers[j] * q;
            for k in 0..n {
                let p = j + k + 1;
                gramian[p] += &left * powers[k].transpose() / (fact[j] * fact[k] * p as f64);
            }
        }
        GramianKernel::Polynomial { transition, drift, gramian }
    }

    pub fn is_polynomial(&self) -> bool {
        matches!(self, GramianKernel::Polynomial { .. })
    }

    /// Raw propagation data at `t ≥ 0` (no definiteness check on `G`).
    pub fn propagate(&self, t: f64) -> Result<Propagation, GramianError> {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(GramianError::InvalidTime(t));
        }
        match self {
            GramianKernel::Polynomial { transition, drift, gramian } => Ok(Propagation {
                transition: horner_m(transition, t),
                drift: horner_v(drift, t),
                gramian: horner_m(gramian, t),
            }),
            GramianKernel::VanLoan { a, q, c } => {
                let n = a.nrows();
                if t == 0.0 {
                    return Ok(Propagation {
                        transition: DMatrix::identity(n, n),
                        drift: DVector::zeros(n),
                        gramian: DMatrix::zeros(n, n),
                    });
                }
                let (phi, g) = van_loan(a, q, t)?;
                let (_, h) = drift_exponential(a, c, t)?;
                Ok(Propagation { transition: phi, drift: h, gramian: g })
            }
        }
    }

    /// `exp(At)` only.
    pub fn transition(&self, t: f64) -> Result<DMatrix<f64>, GramianError> {
        match self {
            GramianKernel::Polynomial { transition, .. } => Ok(horner_m(transition, t)),
            GramianKernel::VanLoan { a, .. } => matrix_exponential(a, t),
        }
    }

    /// Factored `G(t)` for `t > 0`.
    pub fn gramian_at(&self, t: f64) -> Result<GramianAt, GramianError> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(GramianError::InvalidTime(t));
        }
        let p = self.propagate(t)?;
        GramianAt::new(t, p.gramian)
    }
}

fn horner_m(coeffs: &[DMatrix<f64>], t: f64) -> DMatrix<f64> {
    let mut acc = coeffs.last().expect("non-empty").clone();
    for c in coeffs.iter().rev().skip(1) {
        acc *= t;
        acc += c;
    }
    acc
}

fn horner_v(coeffs: &[DVector<f64>], t: f64) -> DVector<f64> {
    let mut acc = coeffs.last().expect("non-empty").clone();
    for c in coeffs.iter().rev().skip(1) {
        acc *= t;
        acc += c;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn di(dims: usize) -> LinearAffineSystem {
        LinearAffineSystem::double_integrator(dims, 1.0)
    }

    fn random_system(seed: u64, n: usize, m: usize) -> LinearAffineSystem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let b = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
            let c = DVector::from_fn(n, |_, _| rng.gen_range(-0.5..0.5));
            let l = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-0.5..0.5));
            let r = &l * l.transpose() + DMatrix::identity(m, m);
            if let Ok(s) = LinearAffineSystem::new(a, b, c, r) {
                return s;
            }
        }
    }

    /// Adaptive Simpson quadrature of the Gramian integrand, entrywise.
    fn gramian_quadrature(sys: &LinearAffineSystem, t: f64) -> DMatrix<f64> {
        let integrand = |s: f64| {
            let e = matrix_exponential(sys.a(), s).unwrap();
            &e * sys.input_weight() * e.transpose()
        };
        fn simpson(
            f: &dyn Fn(f64) -> DMatrix<f64>,
            a: f64,
            b: f64,
            fa: DMatrix<f64>,
            fm: DMatrix<f64>,
            fb: DMatrix<f64>,
            whole: DMatrix<f64>,
            tol: f64,
            depth: u32,
        ) -> DMatrix<f64> {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (&fa + &flm * 4.0 + &fm) * ((m - a) / 6.0);
            let right = (&fm + &frm * 4.0 + &fb) * ((b - m) / 6.0);
            let delta = &left + &right - &whole;
            if depth == 0 || delta.abs().max() <= 15.0 * tol {
                return left + right + delta / 15.0;
            }
            simpson(f, a, m, fa, flm, fm.clone(), left, tol / 2.0, depth - 1)
                + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
        let (fa, fm, fb) = (integrand(0.0), integrand(t / 2.0), integrand(t));
        let whole = (&fa + &fm * 4.0 + &fb) * (t / 6.0);
        simpson(&integrand, 0.0, t, fa, fm, fb, whole, 1e-13, 40)
    }

    #[test]
    fn di1_gramian_closed_form() {
        for t in [0.1, 1.0, 2.5] {
            let g = gramian(&di(1), t).unwrap();
            let want = DMatrix::from_row_slice(2, 2, &[t.powi(3) / 3.0, t * t / 2.0, t * t / 2.0, t]);
            assert!((g.matrix() - &want).abs().max() < 1e-13 * t.powi(3).max(1.0), "t = {t}");
        }
        let g1 = gramian(&di(1), 1.0).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[1.0 / 3.0, 0.5, 0.5, 1.0]);
        assert!((g1.matrix() - want).abs().max() < 1e-14);
    }

    #[test]
    fn pure_input_gramian_is_scalar() {
        let n = 3;
        let sys = LinearAffineSystem::new(
            DMatrix::zeros(n, n),
            DMatrix::identity(n, n),
            DVector::zeros(n),
            DMatrix::identity(n, n),
        )
        .unwrap();
        let g = gramian(&sys, 0.7).unwrap();
        assert!((g.matrix() - DMatrix::identity(n, n) * 0.7).abs().max() < 1e-15);
    }

    #[test]
    fn di2_determinant_matches_quadrature() {
        let t = 0.5;
        let g = gramian(&di(2), t).unwrap();
        let exact = t.powi(8) / 144.0;
        assert!((g.determinant() - exact).abs() / exact < 1e-10);
        assert!((exact - 2.7127e-5).abs() < 1e-9);
        let quad = gramian_quadrature(&di(2), t);
        assert!((quad.determinant() - exact).abs() / exact < 1e-8);
    }

    #[test]
    fn van_loan_matches_quadrature_on_random_systems() {
        for seed in 0..5 {
            let sys = random_system(seed, 3, 2);
            let t = 0.9;
            let g = gramian(&sys, t).unwrap();
            let quad = gramian_quadrature(&sys, t);
            assert!((g.matrix() - &quad).norm() / quad.norm() < 1e-9, "seed {seed}");
        }
    }

    #[test]
    fn zero_input_response_cases() {
        let x0 = DVector::from_vec(vec![0.3, -1.2]);
        assert_eq!(zero_input_response(&di(1), &x0, 0.0).unwrap(), x0);
        let t = 1.7;
        let x = zero_input_response(&di(1), &x0, t).unwrap();
        assert!((x[0] - (0.3 - 1.2 * t)).abs() < 1e-14);
        assert!((x[1] + 1.2).abs() < 1e-15);

        let drift = LinearAffineSystem::new(
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![0.5, -2.0]),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let x = zero_input_response(&drift, &x0, t).unwrap();
        assert!((x - (&x0 + drift.c() * t)).abs().max() < 1e-14);
    }

    #[test]
    fn weighted_norm_cases() {
        let g = gramian(&di(1), 1.0).unwrap();
        assert_eq!(weighted_norm(&g, &DVector::zeros(2)), 0.0);
        let v = DVector::from_vec(vec![1.0, 0.0]);
        assert!((weighted_norm(&g, &v) - 12f64.sqrt()).abs() < 1e-12);

        let scalar = GramianAt::new(2.0, DMatrix::identity(3, 3) * 2.0).unwrap();
        let v = DVector::from_vec(vec![1.0, 2.0, 2.0]);
        assert!((weighted_norm(&scalar, &v) - 3.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn weighted_norm_agrees_with_explicit_inverse() {
        // the explicit inverse is itself only accurate to about ε·cond(G),
        // so stay in a well-conditioned regime
        let sys = random_system(3, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for t in [0.5, 0.8, 1.5] {
            let g = gramian(&sys, t).unwrap();
            let inv = g.matrix().clone().try_inverse().unwrap();
            for _ in 0..10 {
                let v = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
                let explicit = (v.transpose() * &inv * &v)[0];
                let via_chol = g.weighted_norm_sq(&v);
                let rel = (explicit - via_chol).abs() / explicit;
                let cond = g.matrix().clone().symmetric_eigen().eigenvalues;
                assert!(rel < 1e-10, "t {t} rel {rel:e} cond {:e}", cond.max() / cond.min());
            }
        }
    }

    #[test]
    fn spectrum_cases() {
        let scalar = GramianAt::new(0.3, DMatrix::identity(3, 3) * 0.3).unwrap();
        assert!(spectrum(&scalar).iter().all(|l| (l - 0.3).abs() < 1e-15));

        let t = 1e-3;
        let g = gramian(&di(1), t).unwrap();
        let ev = spectrum(&g);
        assert!((ev[0] / t - 1.0).abs() < 1e-3);
        assert!((ev[1] / (t.powi(3) / 12.0) - 1.0).abs() < 1e-3);

        let sys = random_system(1, 4, 2);
        let g = gramian(&sys, 0.6).unwrap();
        let prod: f64 = spectrum(&g).iter().product();
        assert!((prod - g.determinant()).abs() / g.determinant() < 1e-9);
    }

    #[test]
    fn cholesky_failure_is_reported() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            GramianAt::new(0.1, bad),
            Err(GramianError::NotPositiveDefinite { .. })
        ));
        assert!(matches!(gramian(&di(1), 0.0), Err(GramianError::InvalidTime(_))));
    }

    #[test]
    fn polynomial_kernel_matches_van_loan() {
        for dims in [1, 2, 3] {
            let sys = di(dims);
            let kernel = GramianKernel::new(&sys);
            assert!(kernel.is_polynomial());
            let x0 = DVector::from_fn(2 * dims, |i, _| 0.1 * i as f64 - 0.2);
            for t in [1e-3, 0.05, 0.7, 3.0] {
                let p = kernel.propagate(t).unwrap();
                let g = gramian(&sys, t).unwrap();
                let scale = g.matrix().abs().max();
                assert!((&p.gramian - g.matrix()).abs().max() < 1e-12 * scale);
                let xbar = zero_input_response(&sys, &x0, t).unwrap();
                assert!((p.free_response(&x0) - xbar).abs().max() < 1e-13);
            }
        }
    }

    #[test]
    fn van_loan_kernel_handles_general_dynamics() {
        let sys = random_system(4, 3, 1);
        let kernel = GramianKernel::new(&sys);
        assert!(!kernel.is_polynomial());
        let p = kernel.propagate(0.0).unwrap();
        assert_eq!(p.transition, DMatrix::identity(3, 3));
        let p = kernel.propagate(0.4).unwrap();
        let phi = matrix_exponential(sys.a(), 0.4).unwrap();
        assert!((p.transition - phi).abs().max() < 1e-14);
    }

    #[test]
    fn lyapunov_residual_on_random_systems() {
        for seed in 0..6 {
            let sys = random_system(100 + seed, 4, 2);
            let q = sys.input_weight();
            for t in [0.1, 0.7, 1.3, 2.0] {
                let h = 1e-5;
                let gp = gramian(&sys, t + h).unwrap();
                let gm = gramian(&sys, t - h).unwrap();
                let g = gramian(&sys, t).unwrap();
                let gdot = (gp.matrix() - gm.matrix()) / (2.0 * h);
                let resid = sys.a() * g.matrix() + g.matrix() * sys.a().transpose() + q - gdot;
                assert!(resid.norm() <= 1e-6 * q.norm(), "seed {seed} t {t}: {}", resid.norm());
            }
        }
    }

    #[test]
    fn gramian_is_monotone_in_time() {
        let sys = random_system(21, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let times = [0.1, 0.3, 0.6, 1.0, 1.8];
        for w in times.windows(2) {
            let g1 = gramian(&sys, w[0]).unwrap();
            let g2 = gramian(&sys, w[1]).unwrap();
            let diff = g2.matrix() - g1.matrix();
            let min_eig = diff.symmetric_eigen().eigenvalues.min();
            assert!(min_eig > -1e-12 * g2.matrix().norm());
            for _ in 0..20 {
                let x = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
                assert!(weighted_norm(&g2, &x) <= weighted_norm(&g1, &x) * (1.0 + 1e-10));
            }
        }
    }

    #[test]
    fn norm_equivalence_sandwich() {
        let sys = random_system(8, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let t = rng.gen_range(0.05..1.0);
            let g = gramian(&sys, t).unwrap();
            let l = g.factor();
            let l_inv = l.clone().try_inverse().unwrap();
            let x = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
            let w = weighted_norm(&g, &x);
            let lo = x.norm() / linalg::norm2(&l);
            let hi = linalg::norm2(&l_inv) * x.norm();
            assert!(lo <= w * (1.0 + 1e-12) && w <= hi * (1.0 + 1e-12));
        }
    }

    #[test]
    fn perturbation_ball_volume_matches_monte_carlo() {
        // n = 2: {z : ‖x − z‖_{G⁻¹} ≤ r} has area r² π √det G.
        let g = gramian(&di(1), 0.8).unwrap();
        let r = 0.6;
        let predicted = r * r * std::f64::consts::PI * g.sqrt_determinant();
        let half = [r * g.matrix()[(0, 0)].sqrt(), r * g.matrix()[(1, 1)].sqrt()];
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let trials = 200_000;
        let mut hits = 0usize;
        for _ in 0..trials {
            let v = DVector::from_vec(vec![
                rng.gen_range(-half[0]..half[0]),
                rng.gen_range(-half[1]..half[1]),
            ]);
            if g.weighted_norm_sq(&v) <= r * r {
                hits += 1;
            }
        }
        let mc = hits as f64 / trials as f64 * 4.0 * half[0] * half[1];
        assert!((mc - predicted).abs() / predicted < 0.05, "mc {mc} vs {predicted}");
    }
}
