mod common;

use proptest::prelude::*;
use rismac::config::CorrelationMode;
use rismac::correlation::CorrelationSet;
use rismac::deteq::{effective_matrices, solve_fixed_point, FixedPointSettings};
use rismac::error::Error;
use rismac::linalg;
use rismac::phases::PhaseConfig;
use rismac::waterfill::{alternate_covariance_fixedpoint, waterfill, waterfill_covariance};

fn rate(tau: &[f64], q: &[f64]) -> f64 {
    tau.iter().zip(q).map(|(t, p)| (1.0 + t * p).ln()).sum()
}

fn correlated_tx() -> CorrelationSet {
    let mut cfg = common::small_config(5.0, 10.0);
    cfg.tx_array.correlation = CorrelationMode::Computed;
    cfg.tx_array.theta_deg = Some(60.0);
    cfg.tx_array.phi_deg = Some(0.0);
    cfg.tx_array.sigma_deg = Some(8.0);
    common::correlations(cfg)
}

#[test]
fn equal_gains_split_power_evenly() {
    let s = waterfill(&[2.0, 2.0, 2.0, 2.0], 1.5).unwrap();
    for q in &s.q {
        assert!((q - 1.5).abs() < 1e-12);
    }
    assert!((s.lambda - 1.0 / (1.5 + 0.5)).abs() < 1e-12);
}

#[test]
fn single_mode_takes_all_power() {
    let s = waterfill(&[1.0, 0.0], 0.8).unwrap();
    assert!((s.q[0] - 1.6).abs() < 1e-12);
    assert_eq!(s.q[1], 0.0);
}

#[test]
fn matches_a_simplex_grid_search() {
    let tau = [2.0, 1.0, 0.1];
    let rho = 1.0;
    let total = 3.0 * rho;
    let s = waterfill(&tau, rho).unwrap();
    let wf = rate(&tau, &s.q);
    let steps = 1500;
    let mut best = f64::NEG_INFINITY;
    for i in 0..=steps {
        for j in 0..=(steps - i) {
            let q = [total * i as f64 / steps as f64, total * j as f64 / steps as f64, total * (steps - i - j) as f64 / steps as f64];
            best = best.max(rate(&tau, &q));
        }
    }
    assert!(best <= wf + 1e-12, "grid {best} beats waterfilling {wf}");
    assert!(wf - best < 1e-5);
    // the weakest mode is switched off
    assert_eq!(s.q[2], 0.0);
    assert!((s.q[0] - 1.75).abs() < 1e-10 && (s.q[1] - 1.25).abs() < 1e-10);
}

#[test]
fn kkt_conditions_hold() {
    let tau = [5.0, 3.0, 0.7, 0.2, 0.05, 0.0];
    for rho in [0.05, 0.5, 2.0, 20.0] {
        let s = waterfill(&tau, rho).unwrap();
        let sum: f64 = s.q.iter().sum();
        assert!((sum / tau.len() as f64 - rho).abs() < 1e-12 * rho.max(1.0));
        for (t, q) in tau.iter().zip(&s.q) {
            assert!(*q >= 0.0);
            if *q > 0.0 {
                assert!((t / (1.0 + t * q) - s.lambda).abs() < 1e-10 * s.lambda);
            } else {
                assert!(*t <= s.lambda * (1.0 + 1e-10));
            }
        }
        let by_level: f64 = tau.iter().filter(|&&t| t > 0.0).map(|t| (t / s.lambda).ln().max(0.0)).sum();
        assert!((s.objective - by_level).abs() < 1e-12);
        assert!((s.objective - rate(&tau, &s.q)).abs() < 1e-9);
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    assert!(matches!(waterfill(&[1.0, -0.1], 1.0), Err(Error::InvalidParameter(_))));
    assert!(matches!(waterfill(&[1.0], 0.0), Err(Error::InvalidParameter(_))));
    assert!(matches!(waterfill(&[0.0, 0.0], 1.0), Err(Error::InvalidParameter(_))));
    assert!(waterfill(&[1.0, f64::NAN], 1.0).is_err());
}

#[test]
fn covariance_shares_eigenvectors_with_the_effective_matrix() {
    let cs = correlated_tx();
    let sol = solve_fixed_point(&cs, &PhaseConfig::identity(1, 16), &cs.isotropic_inputs(), &[0, 1], &FixedPointSettings::default()).unwrap();
    let t = &effective_matrices(&cs, &PhaseConfig::identity(1, 16), &sol.state).unwrap().t_tilde[0];
    let (q, _) = waterfill_covariance(t, cs.rho).unwrap();
    assert!(linalg::hermitian_defect(&q) < 1e-12);
    assert!((linalg::trace(&q).re - cs.nt as f64 * cs.rho).abs() < 1e-9);
    let comm = &(&q * t) - &(t * &q);
    assert!(linalg::frobenius(&comm) < 1e-9 * linalg::frobenius(t) * linalg::frobenius(&q));
}

#[test]
fn white_transmit_side_keeps_isotropic_inputs() {
    let cs = CorrelationSet::identity(2, 1, 3, 2, 8, 10.0, 0.0);
    let r = alternate_covariance_fixedpoint(&cs, &PhaseConfig::identity(1, 8), &[0, 1], &FixedPointSettings::default(), 1e-10, 20).unwrap();
    for q in &r.q {
        assert!(linalg::frobenius(&(q - &linalg::scaled_identity(3, 10.0))) < 1e-9);
    }
    assert!((r.history[0] - r.history[r.history.len() - 1]).abs() < 1e-10);
}

#[test]
fn alternation_improves_and_settles() {
    let cs = correlated_tx();
    let id = PhaseConfig::identity(1, 16);
    let fp = FixedPointSettings::default();
    let r = alternate_covariance_fixedpoint(&cs, &id, &[0, 1], &fp, 1e-10, 100).unwrap();
    for w in r.history.windows(2) {
        assert!(w[1] >= w[0] - 1e-10);
    }
    assert!(r.history.last().unwrap() > &(r.history[0] + 1e-4));
    // at the end the inputs are the waterfilling of their own fixed point
    let eff = effective_matrices(&cs, &id, &r.solution.state).unwrap();
    for m in 0..2 {
        let (next, _) = waterfill_covariance(&eff.t_tilde[m], cs.rho).unwrap();
        let rel = linalg::frobenius(&(&next - &r.q[m])) / linalg::frobenius(&r.q[m]);
        assert!(rel < 1e-4, "{rel}");
        assert!((linalg::trace(&r.q[m]).re - cs.nt as f64 * cs.rho).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn power_constraint_and_ordering(tau in prop::collection::vec(0.0f64..10.0, 1..8), rho in 0.01f64..50.0) {
        prop_assume!(tau.iter().any(|&t| t > 1e-6));
        let s = waterfill(&tau, rho).unwrap();
        let sum: f64 = s.q.iter().sum();
        prop_assert!((sum / tau.len() as f64 - rho).abs() < 1e-9 * rho.max(1.0));
        // stronger modes never get less power
        for i in 0..tau.len() {
            for j in 0..tau.len() {
                if tau[i] > tau[j] {
                    prop_assert!(s.q[i] >= s.q[j] - 1e-12);
                }
            }
        }
    }
}
