//! Connection-cost threshold `r_N` and the volume constant `C_μ`.

use crate::gramian::{gramian, GramianError};
use crate::linalg::unit_ball_volume;
use crate::system::{ControllabilityInfo, LinearAffineSystem};

/// Points of the `τ`-grid over which `C_μ` is minimized.
pub const C_MU_GRID: usize = 32;

/// `C_{Σ,M} = (C_μ⁻¹ D̃⁻¹ 6^{n+D/2} 2^{n/2} μ_free)^{1/D̃}`.
pub fn cost_constant(info: &ControllabilityInfo, mu_free: f64, c_mu: f64) -> f64 {
    let n = info.n() as f64;
    let d = info.d as f64;
    let dt = info.d_tilde();
    let inner = mu_free / (c_mu * dt) * 6f64.powf(n + d / 2.0) * 2f64.powf(n / 2.0);
    inner.powf(1.0 / dt)
}

/// `r_N = (1+η)^{1/D̃} C_{Σ,M} (log N / N)^{1/D̃}`.
pub fn radius(info: &ControllabilityInfo, mu_free: f64, c_mu: f64, eta: f64, n_samples: usize) -> f64 {
    assert!(n_samples >= 2, "the radius needs N >= 2");
    let dt = info.d_tilde();
    let n = n_samples as f64;
    (1.0 + eta).powf(1.0 / dt) * cost_constant(info, mu_free, c_mu) * (n.ln() / n).powf(1.0 / dt)
}

/// `inf ζₙ √det G(τ) / τ^{D/2}` over `τ = τ_μ k / 32`, `k = 1..=32`.
pub fn estimate_c_mu(sys: &LinearAffineSystem, tau_mu: f64) -> Result<f64, GramianError> {
    if !(tau_mu > 0.0 && tau_mu.is_finite()) {
        return Err(GramianError::InvalidTime(tau_mu));
    }
    let info = sys.controllability_info();
    let zeta = unit_ball_volume(sys.n());
    let half_d = info.d as f64 / 2.0;
    let mut best = f64::INFINITY;
    let mut last_err = None;
    for k in 1..=C_MU_GRID {
        let tau = tau_mu * k as f64 / C_MU_GRID as f64;
        match gramian(sys, tau) {
            Ok(g) => best = best.min(zeta * g.sqrt_determinant() / tau.powf(half_d)),
            Err(e) => last_err = Some(e),
        }
    }
    if best.is_finite() && best > 0.0 {
        Ok(best)
    } else {
        Err(last_err.unwrap_or(GramianError::NonFinite))
    }
}
