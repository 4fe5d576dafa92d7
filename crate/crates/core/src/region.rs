//! Capacity-region boundary by priority sweeps, and hull membership.

use serde::Serialize;

use crate::correlation::CorrelationSet;
use crate::deteq::FixedPointSettings;
use crate::error::{Error, Result};
use crate::linalg::CMat;
use crate::optimize::{self, Objective, OptimizeOptions, OptimizerSettings};
use crate::phases::PhaseConfig;

#[derive(Debug, Clone, Serialize)]
pub struct RegionPoint {
    /// normalized priorities, in transmitter order
    pub mu: Vec<f64>,
    /// transmitters by decreasing priority
    pub order: Vec<usize>,
    /// nats per channel use, in transmitter order
    pub rates: Vec<f64>,
    pub phases: PhaseConfig,
    /// C({order[0..=l]}) per antenna
    pub subset_mis: Vec<f64>,
}

impl RegionPoint {
    /// Largest violation of Σ_{m∈S} R_m ≤ Nt C(S) over the nested subsets.
    pub fn constraint_violation(&self, nt: usize) -> f64 {
        let mut acc = 0.0;
        let mut worst = f64::NEG_INFINITY;
        for (l, &m) in self.order.iter().enumerate() {
            acc += self.rates[m];
            worst = worst.max(acc - nt as f64 * self.subset_mis[l]);
        }
        worst
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SkippedPoint {
    pub mu: Vec<f64>,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegionSweep {
    pub points: Vec<RegionPoint>,
    pub skipped: Vec<SkippedPoint>,
}

#[derive(Debug, Clone, Default)]
pub struct RegionOptions {
    /// evaluate at fixed phases instead of optimizing
    pub freeze_phases: bool,
    /// phases used when frozen, and the first warm start
    pub initial: Option<PhaseConfig>,
    pub warm_start: bool,
    pub fixed_point: FixedPointSettings,
}

/// Decreasing-priority ordering; ties keep the lower index first.
pub fn priority_order(mu: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..mu.len()).collect();
    order.sort_by(|&a, &b| mu[b].total_cmp(&mu[a]).then(a.cmp(&b)));
    order
}

/// `M=2` grid μ_1 = 0, 0.1, …, 1.
pub fn default_mu_grid(m: usize) -> Vec<Vec<f64>> {
    if m == 2 {
        (0..=10).map(|i| vec![i as f64 / 10.0, 1.0 - i as f64 / 10.0]).collect()
    } else {
        // uniform plus each transmitter favoured in turn
        let mut g = vec![vec![1.0 / m as f64; m]];
        for i in 0..m {
            let mut v = vec![1.0; m];
            v[i] = 2.0;
            g.push(v);
        }
        g
    }
}

fn nested_subsets(order: &[usize]) -> Vec<Vec<usize>> {
    (1..=order.len()).map(|l| order[..l].to_vec()).collect()
}

/// Successive-decoding corner: R_{order[l]} = Nt (C_l − C_{l−1}).
pub fn corner_rates(order: &[usize], subset_mis: &[f64], nt: usize) -> Vec<f64> {
    let mut rates = vec![0.0; order.len()];
    let mut prev = 0.0;
    for (l, &m) in order.iter().enumerate() {
        rates[m] = nt as f64 * (subset_mis[l] - prev);
        prev = subset_mis[l];
    }
    rates
}

/// Rate point for one priority vector at fixed phases.
pub fn point_at(cs: &CorrelationSet, q: &[CMat], mu: &[f64], phases: &PhaseConfig, fp: &FixedPointSettings) -> Result<RegionPoint> {
    let mu = normalize(mu, cs.m())?;
    let order = priority_order(&mu);
    let subset_mis = optimize::subset_mis(cs, q, &nested_subsets(&order), phases, fp)?;
    Ok(RegionPoint {
        rates: corner_rates(&order, &subset_mis, cs.nt),
        mu,
        order,
        phases: phases.clone(),
        subset_mis,
    })
}

fn normalize(mu: &[f64], m: usize) -> Result<Vec<f64>> {
    if mu.len() != m {
        return Err(Error::Dimension(format!("priority vector needs {m} entries, got {}", mu.len())));
    }
    if mu.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidParameter("priorities must be finite and non-negative".into()));
    }
    let total: f64 = mu.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidParameter("priority vector sums to zero".into()));
    }
    Ok(mu.iter().map(|x| x / total).collect())
}

/// Sweeps the priority grid, optimizing phases per μ unless frozen.
pub fn region_boundary(
    cs: &CorrelationSet,
    q: &[CMat],
    mu_grid: &[Vec<f64>],
    settings: &OptimizerSettings,
    opts: &RegionOptions,
) -> Result<RegionSweep> {
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    let identity = PhaseConfig::identity(cs.k(), cs.ns);
    let mut warm = opts.initial.clone();
    for mu in mu_grid {
        let mu_n = normalize(mu, cs.m())?;
        let order = priority_order(&mu_n);
        let phases = if opts.freeze_phases {
            Ok(opts.initial.clone().unwrap_or_else(|| identity.clone()))
        } else {
            let sorted: Vec<f64> = order.iter().map(|&i| mu_n[i]).collect();
            let obj = Objective::nested(&sorted, &order)?;
            let o = OptimizeOptions {
                initial: if opts.warm_start { warm.clone() } else { opts.initial.clone() },
                frozen: Vec::new(),
                fixed_point: opts.fixed_point,
            };
            optimize::optimize(cs, q, &obj, settings, &o).map(|r| {
                log::info!("mu {mu_n:?}: {} iterations, converged {}", r.iterations, r.converged);
                r.phases
            })
        };
        match phases.and_then(|p| point_at(cs, q, &mu_n, &p, &opts.fixed_point)) {
            Ok(pt) => {
                warm = Some(pt.phases.clone());
                points.push(pt);
            }
            Err(e @ (Error::InvalidParameter(_) | Error::Dimension(_) | Error::Config(_))) => return Err(e),
            Err(e) => {
                log::warn!("skipping priority vector {mu:?}: {e}");
                skipped.push(SkippedPoint { mu: mu.clone(), reason: e.to_string() });
            }
        }
    }
    Ok(RegionSweep { points, skipped })
}

/// All successive-decoding corners of the polymatroid at fixed phases, one per decoding order.
pub fn polymatroid_corners(cs: &CorrelationSet, q: &[CMat], phases: &PhaseConfig, fp: &FixedPointSettings) -> Result<Vec<Vec<f64>>> {
    let m = cs.m();
    let mut out = Vec::new();
    for order in permutations(m) {
        let mis = optimize::subset_mis(cs, q, &nested_subsets(&order), phases, fp)?;
        out.push(corner_rates(&order, &mis, cs.nt));
    }
    Ok(out)
}

fn permutations(m: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; m], &mut out);
    out
}

/// Whether `rate` is dominated by a convex combination of `points` (free disposal).
pub fn region_contains(points: &[Vec<f64>], rate: &[f64]) -> Result<bool> {
    use minilp::{ComparisonOp, LinearExpr, OptimizationDirection, Problem};
    if points.is_empty() {
        return Err(Error::InvalidParameter("no region points".into()));
    }
    let d = rate.len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Dimension("rate and region points differ in dimension".into()));
    }
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let lam: Vec<_> = points.iter().map(|_| lp.add_var(0.0, (0.0, f64::INFINITY))).collect();
    let mut sum = LinearExpr::empty();
    for &l in &lam {
        sum.add(l, 1.0);
    }
    lp.add_constraint(sum, ComparisonOp::Eq, 1.0);
    for j in 0..d {
        let mut e = LinearExpr::empty();
        for (i, &l) in lam.iter().enumerate() {
            e.add(l, points[i][j]);
        }
        let slack = 1e-9 * rate[j].abs().max(1.0);
        lp.add_constraint(e, ComparisonOp::Ge, rate[j] - slack);
    }
    match lp.solve() {
        Ok(_) => Ok(true),
        Err(minilp::Error::Infeasible) => Ok(false),
        Err(e) => Err(Error::Numerical(format!("hull test failed: {e}"))),
    }
}

pub fn region_contains_points(points: &[RegionPoint], rate: &[f64]) -> Result<bool> {
    let p: Vec<Vec<f64>> = points.iter().map(|x| x.rates.clone()).collect();
    region_contains(&p, rate)
}
