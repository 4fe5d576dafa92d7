use std::f64::consts::PI;

use proptest::prelude::*;
use rismac::config::{Scenario, ScenarioConfig};
use rismac::correlation::{build_correlation_set, CorrelationSet};
use rismac::error::Error;
use rismac::geometry::{correlation_matrix, AngularSpectrum, ArrayGeometry};
use rismac::linalg;

fn spectrum(theta: f64, phi: f64, sigma: f64) -> AngularSpectrum {
    AngularSpectrum { mean_azimuth: phi, mean_elevation: theta, angle_spread: sigma, wavelength: 0.12 }
}

fn pair(d: [f64; 3]) -> ArrayGeometry {
    ArrayGeometry::new(vec![[0.0; 3], d]).unwrap()
}

/// Midpoint rule in absolute spherical coordinates around the +z pole.
fn brute_force_kernel(d: [f64; 3], sigma: f64, theta_max: f64, n_theta: usize, n_phi: usize) -> (f64, f64) {
    let k0 = 2.0 * PI / 0.12;
    let (mut re, mut im, mut z) = (0.0, 0.0, 0.0);
    let ht = theta_max / n_theta as f64;
    let hp = 2.0 * PI / n_phi as f64;
    for i in 0..n_theta {
        let t = (i as f64 + 0.5) * ht;
        let w = (-(1.0 - t.cos()) / (sigma * sigma)).exp() * t.sin();
        for j in 0..n_phi {
            let p = j as f64 * hp;
            let u = [t.sin() * p.cos(), t.sin() * p.sin(), t.cos()];
            let arg = k0 * (u[0] * d[0] + u[1] * d[1] + u[2] * d[2]);
            re += w * arg.cos();
            im += w * arg.sin();
            z += w;
        }
    }
    (re / z, im / z)
}

#[test]
fn single_element_is_one() {
    let g = ArrayGeometry::new(vec![[0.3, -0.1, 0.0]]).unwrap();
    let s = correlation_matrix(&g, &spectrum(0.4, 1.0, 0.1)).unwrap();
    assert_eq!(s.nrows(), 1);
    assert_eq!(s[(0, 0)].re, 1.0);
    assert_eq!(s[(0, 0)].im, 0.0);
}

#[test]
fn colocated_elements_are_fully_correlated() {
    let s = correlation_matrix(&pair([0.0; 3]), &spectrum(0.5, 0.2, 0.07)).unwrap();
    for a in 0..2 {
        for b in 0..2 {
            assert!((s[(a, b)].re - 1.0).abs() < 1e-12 && s[(a, b)].im.abs() < 1e-12);
        }
    }
}

#[test]
fn half_wavelength_pair_matches_dense_quadrature() {
    let sigma = 4f64.to_radians();
    let d = [0.06, 0.0, 0.0];
    let s = correlation_matrix(&pair(d), &spectrum(0.0, 0.0, sigma)).unwrap();
    let (re, im) = brute_force_kernel(d, sigma, 14.0 * sigma, 6000, 512);
    // s[(0,1)] pairs x_0 - x_1 = -d
    assert!((s[(0, 1)].re - re).abs() < 1e-7, "{} vs {re}", s[(0, 1)].re);
    assert!((s[(0, 1)].im + im).abs() < 1e-7);
    assert!(s[(0, 1)].norm() < 1.0 && s[(0, 1)].norm() > 0.5);
}

#[test]
fn tilted_pair_phase_follows_mean_wavevector() {
    // narrow spread: S_01 ≈ exp(-i k0 sin θ cos φ d) damped
    let sigma = 0.5f64.to_radians();
    let (th, ph) = (30f64.to_radians(), 45f64.to_radians());
    let d = 0.06;
    let s = correlation_matrix(&pair([d, 0.0, 0.0]), &spectrum(th, ph, sigma)).unwrap();
    let k0 = 2.0 * PI / 0.12;
    let expect = -k0 * th.sin() * ph.cos() * d;
    let got = s[(0, 1)].im.atan2(s[(0, 1)].re);
    assert!((got - expect).abs() < 1e-3, "{got} vs {expect}");
}

#[test]
fn huge_spread_approaches_isotropic_kernel() {
    let k0 = 2.0 * PI / 0.12;
    for d in [0.02, 0.05, 0.06, 0.1] {
        let s = correlation_matrix(&pair([d, 0.0, 0.0]), &spectrum(0.3, 0.0, 1e3)).unwrap();
        let x = k0 * d;
        let sinc = x.sin() / x;
        assert!((s[(0, 1)].re - sinc).abs() < 1e-6, "d={d}: {} vs {sinc}", s[(0, 1)].re);
        assert!(s[(0, 1)].im.abs() < 1e-6);
    }
}

#[test]
fn coupling_decreases_with_spread() {
    let g = pair([0.06, 0.0, 0.0]);
    let mut prev = f64::INFINITY;
    for deg in 1..=30 {
        let s = correlation_matrix(&g, &spectrum(30f64.to_radians(), 0.7, (deg as f64).to_radians())).unwrap();
        let v = s[(0, 1)].norm();
        assert!(v <= prev + 1e-10, "σ={deg}°: {v} > {prev}");
        prev = v;
    }
}

#[test]
fn bad_spectrum_is_rejected() {
    let g = pair([0.06, 0.0, 0.0]);
    for bad in [spectrum(0.0, 0.0, 0.0), spectrum(0.0, 0.0, -0.1), AngularSpectrum { wavelength: 0.0, ..spectrum(0.0, 0.0, 0.1) }] {
        assert!(matches!(correlation_matrix(&g, &bad), Err(Error::InvalidParameter(_))));
    }
    assert!(ArrayGeometry::new(vec![]).is_err());
}

#[test]
fn mean_wavevector_has_magnitude_k0() {
    let s = spectrum(0.7, -1.2, 0.1);
    let k = s.mean_wavevector();
    let norm = (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]).sqrt();
    assert!((norm - 2.0 * PI / 0.12).abs() < 1e-10);
}

fn check_set(cs: &CorrelationSet) {
    let mut all = Vec::new();
    all.extend(cs.r_d.iter().map(|a| (a, cs.nr)));
    all.extend(cs.t_d.iter().map(|a| (a, cs.nt)));
    all.extend(cs.r_k.iter().map(|a| (a, cs.nr)));
    all.extend(cs.s_r.iter().map(|a| (a, cs.ns)));
    all.extend(cs.s_t.iter().flatten().map(|a| (a, cs.ns)));
    all.extend(cs.t_km.iter().flatten().map(|a| (a, cs.nt)));
    for (a, n) in all {
        assert_eq!(a.nrows(), n);
        assert!(linalg::hermitian_defect(a) < 1e-12);
        assert!((linalg::trace(a).re - n as f64).abs() < 1e-12 * n as f64);
        let w = linalg::herm_eigvals(a).unwrap();
        let top = w.iter().cloned().fold(0.0, f64::max);
        assert!(w.iter().all(|&x| x >= -1e-10 * top));
    }
}

#[test]
fn table1_set_has_expected_shapes_and_traces() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/table1.toml");
    let sc = Scenario::new(ScenarioConfig::load(std::path::Path::new(path)).unwrap()).unwrap();
    let cs = build_correlation_set(&sc).unwrap();
    assert_eq!((cs.m(), cs.k(), cs.nt, cs.nr, cs.ns), (2, 1, 8, 4, 400));
    assert_eq!(cs.s_t[0][0].nrows(), 400);
    assert!((linalg::trace(&cs.s_t[0][0]).re - 400.0).abs() < 1e-9);
    check_set(&cs);
    // TX/RX arrays are uncorrelated in the shipped scenarios
    assert!(linalg::is_identity(&cs.t_d[0]) && linalg::is_identity(&cs.r_k[0]));
}

#[test]
fn identity_links_give_identity_matrices() {
    let text = r#"
name = "ident"
wavelength = 0.12
rho_db = 0.0
[counts]
m = 2
k = 1
nt = 3
nr = 2
ns = 9
[[ris]]
theta_in_deg = 30.0
phi_in_deg = [10.0, 20.0]
theta_out_deg = 70.0
phi_out_deg = 0.0
sigma_deg = 5.0
tx_side = "identity"
rx_side = "identity"
"#;
    let sc = Scenario::new(ScenarioConfig::from_toml(text).unwrap()).unwrap();
    let cs = build_correlation_set(&sc).unwrap();
    assert!(linalg::is_identity(&cs.s_r[0]));
    assert!(cs.s_t[0].iter().all(linalg::is_identity));
    check_set(&cs);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn correlation_is_hermitian_psd_with_unit_diagonal(
        n in 2usize..10,
        spacing in 0.01f64..0.1,
        theta in 0.0f64..1.4,
        phi in -3.1f64..3.1,
        sigma_deg in 1.0f64..40.0,
    ) {
        let g = ArrayGeometry::planar_for(n, spacing);
        let s = correlation_matrix(&g, &spectrum(theta, phi, sigma_deg.to_radians())).unwrap();
        prop_assert!(linalg::hermitian_defect(&s) < 1e-12);
        prop_assert!((linalg::trace(&s).re - n as f64).abs() < 1e-12 * n as f64);
        for i in 0..n {
            prop_assert!((s[(i, i)].re - 1.0).abs() < 1e-9);
        }
        let w = linalg::herm_eigvals(&s).unwrap();
        let top = w.iter().cloned().fold(0.0, f64::max);
        prop_assert!(w.iter().all(|&x| x >= -1e-10 * top));
    }
}
