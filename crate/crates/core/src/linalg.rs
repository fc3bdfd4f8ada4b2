//! Dense linear-algebra helpers shared by the Gramian kernel and the planners.

use nalgebra::{DMatrix, DVector};

use crate::gramian::GramianError;

/// Default cap on `‖Mt‖₁` accepted by [`expm`].
pub const EXPM_NORM_CAP: f64 = 50.0;

// Padé (13/13) numerator coefficients.
const PADE13: [f64; 14] = [
    64_764_752_532_480_000.0,
    32_382_376_266_240_000.0,
    7_771_770_303_897_600.0,
    1_187_353_796_428_800.0,
    129_060_195_264_000.0,
    10_559_470_521_600.0,
    670_442_572_800.0,
    33_522_128_640.0,
    1_323_241_920.0,
    40_840_800.0,
    960_960.0,
    16_380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371_920_351_148_152;

/// Maximum absolute column sum.
pub fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `exp(M)` by scaling and squaring around a fixed Padé (13/13) approximant.
///
/// `cap` bounds `‖M‖₁`; beyond it the squaring phase amplifies rounding more
/// than we are willing to accept and [`GramianError::Overflow`] is returned.
pub fn expm(m: &DMatrix<f64>, cap: f64) -> Result<DMatrix<f64>, GramianError> {
    assert!(m.is_square(), "matrix exponential of a non-square matrix");
    if m.iter().any(|v| !v.is_finite()) {
        return Err(GramianError::NonFinite);
    }
    let norm = norm1(m);
    if norm > cap {
        return Err(GramianError::Overflow { norm, cap });
    }
    let n = m.nrows();
    let squarings = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let a = m / 2f64.powi(squarings);
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = &PADE13;

    let u_hi = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
    let u = &a * (u_hi + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1]);
    let v_hi = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
    let v = v_hi + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &ident * b[0];

    let p = &v + &u;
    let q = &v - &u;
    let mut r = q.lu().solve(&p).ok_or(GramianError::NonFinite)?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(GramianError::NonFinite);
    }
    Ok(r)
}

/// Spectral norm (largest singular value).
pub fn norm2(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Solves `L z = v` for lower-triangular `L` stored row-major in `l`,
/// returning `‖z‖²`. `z` is scratch of length `n`.
#[inline]
pub(crate) fn lower_solve_sq(l: &[f64], v: &[f64], z: &mut [f64]) -> f64 {
    // small fixed sizes unroll; same operation order as the generic loop
    match v.len() {
        1 => lower_solve_sq_fixed::<1>(l, v, z),
        2 => lower_solve_sq_fixed::<2>(l, v, z),
        3 => lower_solve_sq_fixed::<3>(l, v, z),
        4 => lower_solve_sq_fixed::<4>(l, v, z),
        6 => lower_solve_sq_fixed::<6>(l, v, z),
        _ => lower_solve_sq_any(l, v, z),
    }
}

#[inline(always)]
pub(crate) fn lower_solve_sq_fixed<const N: usize>(l: &[f64], v: &[f64], out: &mut [f64]) -> f64 {
    let l = &l[..N * N];
    let v = &v[..N];
    let mut z = [0.0; N];
    let mut acc = 0.0;
    for i in 0..N {
        let mut s = v[i];
        for j in 0..i {
            s -= l[i * N + j] * z[j];
        }
        let zi = s / l[i * N + i];
        z[i] = zi;
        acc += zi * zi;
    }
    out[..N].copy_from_slice(&z);
    acc
}

fn lower_solve_sq_any(l: &[f64], v: &[f64], z: &mut [f64]) -> f64 {
    let n = v.len();
    let mut acc = 0.0;
    for i in 0..n {
        let row = &l[i * n..i * n + i];
        let mut s = v[i];
        for (lij, zj) in row.iter().zip(z.iter()) {
            s -= lij * zj;
        }
        let zi = s / l[i * n + i];
        z[i] = zi;
        acc += zi * zi;
    }
    acc
}

/// `‖Mv‖²` for a lower-triangular row-major `M`.
pub(crate) fn lower_matvec_sq(m: &[f64], v: &[f64]) -> f64 {
    match v.len() {
        2 => lower_matvec_sq_fixed::<2>(m, v),
        4 => lower_matvec_sq_fixed::<4>(m, v),
        6 => lower_matvec_sq_fixed::<6>(m, v),
        n => (0..n)
            .map(|i| m[i * n..=i * n + i].iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
            .map(|z| z * z)
            .sum(),
    }
}

#[inline(always)]
pub(crate) fn lower_matvec_sq_fixed<const N: usize>(m: &[f64], v: &[f64]) -> f64 {
    let m = &m[..N * N];
    let v = &v[..N];
    let mut acc = 0.0;
    for i in 0..N {
        let mut z = 0.0;
        for j in 0..=i {
            z += m[i * N + j] * v[j];
        }
        acc += z * z;
    }
    acc
}

pub(crate) fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

pub(crate) fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// Unit-ball volume in `n` dimensions.
pub fn unit_ball_volume(n: usize) -> f64 {
    // ζ₀ = 1, ζ₁ = 2, ζₙ = ζₙ₋₂ · 2π / n
    let (mut even, mut odd) = (1.0, 2.0);
    if n == 0 {
        return even;
    }
    for k in 2..=n {
        if k % 2 == 0 {
            even *= 2.0 * std::f64::consts::PI / k as f64;
        } else {
            odd *= 2.0 * std::f64::consts::PI / k as f64;
        }
    }
    if n % 2 == 0 {
        even
    } else {
        odd
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: scaled Taylor series summed to 256 terms.
    fn expm_taylor(m: &DMatrix<f64>) -> DMatrix<f64> {
        let n = m.nrows();
        let norm = norm1(m);
        let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
        let a = m / 2f64.powi(s);
        let mut term = DMatrix::<f64>::identity(n, n);
        let mut sum = term.clone();
        for k in 1..256 {
            term = &term * &a / k as f64;
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn zero_matrix_gives_identity() {
        let z = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(expm(&z, EXPM_NORM_CAP).unwrap(), DMatrix::identity(3, 3));
    }

    #[test]
    fn nilpotent_series_terminates() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 0.0, 0.0]);
        let e = expm(&m, EXPM_NORM_CAP).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!((e - want).abs().max() < 1e-15);
    }

    #[test]
    fn matches_taylor_oracle_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let m = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.5..1.5)) * 0.7;
            let got = expm(&m, EXPM_NORM_CAP).unwrap();
            let want = expm_taylor(&m);
            let rel = (&got - &want).norm() / want.norm();
            assert!(rel < 1e-12, "relative error {rel}");
        }
    }

    #[test]
    fn large_norm_within_cap_is_accurate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let m = &m * (9.0 / norm1(&m));
        let got = expm(&m, EXPM_NORM_CAP).unwrap();
        let want = expm_taylor(&m);
        assert!((&got - &want).norm() / want.norm() < 1e-12);
    }

    #[test]
    fn rejects_norm_beyond_cap() {
        let m = DMatrix::from_element(2, 2, 40.0);
        assert!(matches!(expm(&m, EXPM_NORM_CAP), Err(GramianError::Overflow { .. })));
    }

    #[test]
    fn unit_ball_volumes() {
        use std::f64::consts::PI;
        assert_eq!(unit_ball_volume(1), 2.0);
        assert!((unit_ball_volume(2) - PI).abs() < 1e-15);
        assert!((unit_ball_volume(3) - 4.0 * PI / 3.0).abs() < 1e-14);
        assert!((unit_ball_volume(4) - PI * PI / 2.0).abs() < 1e-14);
    }

    #[test]
    fn triangular_solve() {
        let l = [2.0, 0.0, 1.0, 3.0];
        let mut z = [0.0; 2];
        // L z = (2, 4) -> z = (1, 1)
        let sq = lower_solve_sq(&l, &[2.0, 4.0], &mut z);
        assert_eq!(z, [1.0, 1.0]);
        assert_eq!(sq, 2.0);
    }
}
