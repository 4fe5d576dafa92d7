#![allow(dead_code)]

use std::path::PathBuf;

use rismac::config::{Scenario, ScenarioConfig};
use rismac::correlation::{build_correlation_set, CorrelationSet};

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

pub fn load(name: &str) -> ScenarioConfig {
    ScenarioConfig::load(&scenario_path(name)).unwrap()
}

pub fn correlations(cfg: ScenarioConfig) -> CorrelationSet {
    build_correlation_set(&Scenario::new(cfg).unwrap()).unwrap()
}

/// Small correlated case: two transmitters, one 16-element surface, direct links off.
pub fn small_config(sigma_deg: f64, rho_db: f64) -> ScenarioConfig {
    ScenarioConfig::from_toml(&format!(
        r#"
name = "small"
wavelength = 0.12
rho_db = {rho_db:?}
gamma_d_db = "zero"
[counts]
m = 2
k = 1
nt = 3
nr = 2
ns = 16
[[ris]]
theta_in_deg = 30.0
phi_in_deg = [-45.0, 45.0]
theta_out_deg = 70.0
phi_out_deg = 0.0
sigma_deg = {sigma_deg:?}
[mc]
n_draws = 2000
seed = 11
"#
    ))
    .unwrap()
}

pub fn small(sigma_deg: f64) -> CorrelationSet {
    correlations(small_config(sigma_deg, 10.0))
}

/// Scalar fixed point of the identity toy (M=K=1, white correlations, no direct link).
pub struct ToyOracle {
    pub t1: f64,
    pub r1: f64,
    pub t2: f64,
    pub r2: f64,
    pub c: f64,
}

pub fn toy_oracle(nt: f64, nr: f64, ns: f64, q: f64) -> ToyOracle {
    let (a, b) = (nr / nt, ns / nt);
    // for fixed r2, t1 is the positive root of r2 t1² + (1 + r2 b - a r2) t1 - a = 0
    let t1_of = |r2: f64| {
        if r2 == 0.0 {
            return a;
        }
        let bb = 1.0 + r2 * b - a * r2;
        (-bb + (bb * bb + 4.0 * r2 * a).sqrt()) / (2.0 * r2)
    };
    let t2_of = |r2: f64| {
        let t1 = t1_of(r2);
        t1 * b / (1.0 + t1 * r2)
    };
    let g = |r2: f64| r2 - q / (1.0 + q * t2_of(r2));
    let (mut lo, mut hi) = (0.0, q);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let r2 = 0.5 * (lo + hi);
    let t1 = t1_of(r2);
    let t2 = t2_of(r2);
    let r1 = r2 * b / (1.0 + t1 * r2);
    let c = (nr * (1.0 + r1).ln() + ns * (1.0 + t1 * r2).ln() + nt * (1.0 + q * t2).ln()) / nt - r1 * t1 - r2 * t2;
    ToyOracle { t1, r1, t2, r2, c }
}
