//! Statistical waterfilling on the eigenvalues of T̃_m.

use serde::Serialize;

use crate::correlation::CorrelationSet;
use crate::deteq::{self, FixedPointSettings, Solution};
use crate::error::{Error, Result};
use crate::linalg::{self, CMat};
use crate::phases::PhaseConfig;

#[derive(Debug, Clone, Serialize)]
pub struct WaterfillSolution {
    /// power per eigenmode, same order as the input gains
    pub q: Vec<f64>,
    /// water level λ
    pub lambda: f64,
    /// Σ_a [log(τ_a / λ)]_+
    pub objective: f64,
}

/// Powers q_a = [1/λ - 1/τ_a]_+ with (1/Nt) Σ q_a = ρ, Nt = tau.len().
pub fn waterfill(tau: &[f64], rho: f64) -> Result<WaterfillSolution> {
    if tau.iter().any(|t| !(*t >= 0.0)) {
        return Err(Error::InvalidParameter("mode gains must be non-negative".into()));
    }
    if !(rho > 0.0) {
        return Err(Error::InvalidParameter("rho must be positive".into()));
    }
    let n = tau.len() as f64;
    let top = tau.iter().cloned().fold(0.0, f64::max);
    if top <= 0.0 {
        return Err(Error::InvalidParameter("no channel: all mode gains are zero".into()));
    }
    let fill = |lam: f64| tau.iter().filter(|&&t| t > 0.0).map(|&t| (1.0 / lam - 1.0 / t).max(0.0)).sum::<f64>() / n;
    let min_active = tau.iter().cloned().filter(|&t| t > 0.0).fold(f64::INFINITY, f64::min);
    let (mut lo, mut hi) = (min_active * (-40f64).exp(), top);
    // fill is decreasing in λ
    while fill(lo) < rho {
        lo *= 1e-6;
    }
    for _ in 0..400 {
        let mid = (lo * hi).sqrt();
        if fill(mid) > rho {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-13 {
            break;
        }
    }
    let mut lam = (lo * hi).sqrt();
    // close the constraint exactly on the active set
    for _ in 0..4 {
        let act: Vec<f64> = tau.iter().cloned().filter(|&t| t > 0.0 && 1.0 / lam > 1.0 / t).collect();
        if act.is_empty() {
            break;
        }
        let inv = (n * rho + act.iter().map(|t| 1.0 / t).sum::<f64>()) / act.len() as f64;
        lam = 1.0 / inv;
    }
    let q: Vec<f64> = tau
        .iter()
        .map(|&t| if t > 0.0 { (1.0 / lam - 1.0 / t).max(0.0) } else { 0.0 })
        .collect();
    let objective = tau.iter().map(|&t| if t > 0.0 { (t / lam).ln().max(0.0) } else { 0.0 }).sum();
    Ok(WaterfillSolution { q, lambda: lam, objective })
}

/// Q = U diag(q) U^H from the waterfilling on the eigenvalues of `t_tilde`.
pub fn waterfill_covariance(t_tilde: &CMat, rho: f64) -> Result<(CMat, WaterfillSolution)> {
    let (w, u) = linalg::herm_eig(t_tilde)?;
    let tau: Vec<f64> = w.iter().map(|x| x.max(0.0)).collect();
    let sol = waterfill(&tau, rho)?;
    Ok((linalg::hermitize(&linalg::from_eig(&sol.q, &u)), sol))
}

#[derive(Debug, Clone)]
pub struct CovarianceResult {
    pub q: Vec<CMat>,
    pub solution: Solution,
    /// C after every round
    pub history: Vec<f64>,
}

/// Alternates fixed-point solves and per-TX waterfilling until C settles.
pub fn alternate_covariance_fixedpoint(
    cs: &CorrelationSet,
    phases: &PhaseConfig,
    subset: &[usize],
    settings: &FixedPointSettings,
    delta: f64,
    max_rounds: usize,
) -> Result<CovarianceResult> {
    let mut q = cs.isotropic_inputs();
    let mut sol = deteq::solve_fixed_point(cs, phases, &q, subset, settings)?;
    let mut history = vec![sol.c];
    for _ in 0..max_rounds {
        let eff = deteq::effective_matrices(cs, phases, &sol.state)?;
        let mut next = q.clone();
        for &m in subset {
            next[m] = waterfill_covariance(&eff.t_tilde[m], cs.rho)?.0;
        }
        let s2 = deteq::solve_fixed_point(cs, phases, &next, subset, settings)?;
        let gain = s2.c - sol.c;
        if gain < -1e-12 {
            log::warn!("covariance alternation decreased C by {:e}", -gain);
        }
        history.push(s2.c);
        q = next;
        sol = s2;
        if gain.abs() < delta {
            break;
        }
    }
    Ok(CovarianceResult { q, solution: sol, history })
}
