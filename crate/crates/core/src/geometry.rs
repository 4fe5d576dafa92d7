//! Array geometry, angular power spectra, and spatial correlation synthesis.
//!
//! The correlation between two elements is the average of the plane-wave
//! phase difference over a Gaussian cone of arrival directions around the
//! mean wave vector. The sphere is parametrized in a frame whose pole is the
//! mean direction: Gauss-Legendre in `u = cos(angle to pole)` and a periodic
//! trapezoid rule in the azimuth around the pole.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::num::NonZeroUsize;

use faer::c64;
use gauss_quad::legendre::GaussLegendre;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMat};

pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub positions: Vec<Vec3>,
}

impl ArrayGeometry {
    pub fn new(positions: Vec<Vec3>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidParameter("array geometry has no elements".into()));
        }
        Ok(Self { positions })
    }

    /// `rows x cols` grid in the x-y plane centred on the origin; the surface normal is +z.
    pub fn planar_grid(rows: usize, cols: usize, spacing: f64) -> Self {
        let x0 = 0.5 * (cols as f64 - 1.0) * spacing;
        let y0 = 0.5 * (rows as f64 - 1.0) * spacing;
        let mut positions = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                positions.push([c as f64 * spacing - x0, r as f64 * spacing - y0, 0.0]);
            }
        }
        Self { positions }
    }

    /// Square-ish planar grid holding exactly `n` elements.
    pub fn planar_for(n: usize, spacing: f64) -> Self {
        let (rows, cols) = grid_shape(n);
        Self::planar_grid(rows, cols, spacing)
    }

    /// Uniform linear array along x, centred on the origin.
    pub fn linear(n: usize, spacing: f64) -> Self {
        let x0 = 0.5 * (n as f64 - 1.0) * spacing;
        Self {
            positions: (0..n).map(|i| [i as f64 * spacing - x0, 0.0, 0.0]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Rows and columns of the most square grid with `n` elements.
pub fn grid_shape(n: usize) -> (usize, usize) {
    let mut rows = (n as f64).sqrt().floor() as usize;
    while rows > 1 && n % rows != 0 {
        rows -= 1;
    }
    (rows.max(1), n / rows.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngularSpectrum {
    /// radians
    pub mean_azimuth: f64,
    /// polar angle from the surface normal, radians
    pub mean_elevation: f64,
    /// σ, radians
    pub angle_spread: f64,
    /// metres
    pub wavelength: f64,
}

impl AngularSpectrum {
    pub fn validate(&self) -> Result<()> {
        if !(self.angle_spread > 0.0) || !self.angle_spread.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "angle spread must be positive, got {}",
                self.angle_spread
            )));
        }
        if !(self.wavelength > 0.0) || !self.wavelength.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "wavelength must be positive, got {}",
                self.wavelength
            )));
        }
        Ok(())
    }

    pub fn k0(&self) -> f64 {
        2.0 * PI / self.wavelength
    }

    pub fn mean_direction(&self) -> Vec3 {
        let (st, ct) = self.mean_elevation.sin_cos();
        let (sp, cp) = self.mean_azimuth.sin_cos();
        [st * cp, st * sp, ct]
    }

    /// s_0, magnitude k_0.
    pub fn mean_wavevector(&self) -> Vec3 {
        let d = self.mean_direction();
        let k = self.k0();
        [k * d[0], k * d[1], k * d[2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureOptions {
    /// Restrict directions to the half space in front of the surface (+z).
    pub hemisphere: bool,
    /// Stop doubling once no kernel value moves by more than this.
    pub tol: f64,
    pub initial_nodes: usize,
    pub max_nodes: usize,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        Self {
            hemisphere: false,
            tol: 1e-8,
            initial_nodes: 32,
            max_nodes: 2048,
        }
    }
}

fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: Vec3) -> Vec3 {
    let n = dot(&a, &a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Weighted unit directions of one product rule, weights summing to one.
struct DirectionRule {
    dirs: Vec<Vec3>,
    weights: Vec<f64>,
}

fn direction_rule(spec: &AngularSpectrum, n_u: usize, n_az: usize, hemisphere: bool) -> Result<DirectionRule> {
    let pole = spec.mean_direction();
    let helper = if pole[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
    let e1 = normalize(cross(&helper, &pole));
    let e2 = cross(&pole, &e1);
    let s2 = spec.angle_spread * spec.angle_spread;
    // weight exp(-(1-u)/σ²) is below e^-40 outside this interval
    let lo = (1.0 - 40.0 * s2).max(-1.0);
    let gl = GaussLegendre::new(NonZeroUsize::new(n_u).unwrap());
    let mut dirs = Vec::with_capacity(n_u * n_az);
    let mut weights = Vec::with_capacity(n_u * n_az);
    for &(x, w) in gl.as_node_weight_pairs() {
        let u = 0.5 * ((1.0 - lo) * x + (1.0 + lo));
        let wu = 0.5 * (1.0 - lo) * w * (-(1.0 - u) / s2).exp();
        let s = (1.0 - u * u).max(0.0).sqrt();
        for j in 0..n_az {
            let a = 2.0 * PI * j as f64 / n_az as f64;
            let (sa, ca) = a.sin_cos();
            let d = [
                u * pole[0] + s * (ca * e1[0] + sa * e2[0]),
                u * pole[1] + s * (ca * e1[1] + sa * e2[1]),
                u * pole[2] + s * (ca * e1[2] + sa * e2[2]),
            ];
            if hemisphere && d[2] < 0.0 {
                continue;
            }
            dirs.push(d);
            weights.push(wu);
        }
    }
    let z: f64 = weights.iter().sum();
    if !(z > 0.0) {
        return Err(Error::InvalidParameter(
            "angular spectrum has no weight in the admissible half space".into(),
        ));
    }
    weights.iter_mut().for_each(|w| *w /= z);
    Ok(DirectionRule { dirs, weights })
}

/// Kernel ∫ w(k) exp(i k·d) dΩ evaluated at each displacement with a fixed
/// `n_u x n_az` product rule.
pub fn kernel_values(
    diffs: &[Vec3],
    spec: &AngularSpectrum,
    n_u: usize,
    n_az: usize,
    hemisphere: bool,
) -> Result<Vec<c64>> {
    spec.validate()?;
    let rule = direction_rule(spec, n_u, n_az, hemisphere)?;
    let k0 = spec.k0();
    Ok(diffs
        .par_iter()
        .map(|d| {
            let (mut re, mut im) = (0.0, 0.0);
            for (dir, w) in rule.dirs.iter().zip(&rule.weights) {
                let (s, c) = (k0 * dot(dir, d)).sin_cos();
                re += w * c;
                im += w * s;
            }
            c64::new(re, im)
        })
        .collect())
}

/// Adaptive evaluation: doubles the node counts until the values settle.
pub fn kernel_values_adaptive(diffs: &[Vec3], spec: &AngularSpectrum, opts: &QuadratureOptions) -> Result<Vec<c64>> {
    let mut n = opts.initial_nodes.max(4);
    let mut prev = kernel_values(diffs, spec, n, n, opts.hemisphere)?;
    while n < opts.max_nodes {
        n *= 2;
        let next = kernel_values(diffs, spec, n, n, opts.hemisphere)?;
        let change = prev
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0_f64, f64::max);
        prev = next;
        if change < opts.tol {
            return Ok(prev);
        }
    }
    log::warn!("correlation quadrature hit the node cap ({n}) before reaching tolerance");
    Ok(prev)
}

fn diff_key(d: &Vec3) -> [i64; 3] {
    [
        (d[0] * 1e9).round() as i64,
        (d[1] * 1e9).round() as i64,
        (d[2] * 1e9).round() as i64,
    ]
}

/// Correlation matrix with the default quadrature options.
pub fn correlation_matrix(geometry: &ArrayGeometry, spectrum: &AngularSpectrum) -> Result<CMat> {
    correlation_matrix_with(geometry, spectrum, &QuadratureOptions::default())
}

pub fn correlation_matrix_with(
    geometry: &ArrayGeometry,
    spectrum: &AngularSpectrum,
    opts: &QuadratureOptions,
) -> Result<CMat> {
    spectrum.validate()?;
    let n = geometry.len();
    if n == 0 {
        return Err(Error::InvalidParameter("array geometry has no elements".into()));
    }
    let pos = &geometry.positions;
    // unique displacements up to sign; S(-d) = conj(S(d))
    let mut index: HashMap<[i64; 3], usize> = HashMap::new();
    let mut diffs: Vec<Vec3> = Vec::new();
    let mut lookup = vec![(0usize, false); n * n];
    for a in 0..n {
        for b in a..n {
            let d = [pos[a][0] - pos[b][0], pos[a][1] - pos[b][1], pos[a][2] - pos[b][2]];
            let key = diff_key(&d);
            let neg = [-key[0], -key[1], -key[2]];
            let (canon, flipped, dc) = if key >= neg { (key, false, d) } else { (neg, true, [-d[0], -d[1], -d[2]]) };
            let id = *index.entry(canon).or_insert_with(|| {
                diffs.push(dc);
                diffs.len() - 1
            });
            lookup[a * n + b] = (id, flipped);
        }
    }
    let vals = kernel_values_adaptive(&diffs, spectrum, opts)?;
    let mut s = CMat::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            let (id, flipped) = lookup[a * n + b];
            let v = if flipped { vals[id].conj() } else { vals[id] };
            s[(a, b)] = v;
            s[(b, a)] = v.conj();
        }
    }
    // normalization makes the zero displacement exactly one
    for a in 0..n {
        s[(a, a)] = c64::new(1.0, 0.0);
    }
    project_psd(s, n as f64)
}

/// Clips small negative eigenvalues left by quadrature error and restores the trace.
pub fn project_psd(s: CMat, target_trace: f64) -> Result<CMat> {
    let n = s.nrows();
    if n == 1 {
        return Ok(s);
    }
    let w = linalg::herm_eigvals(&s)?;
    let top = w.iter().cloned().fold(0.0_f64, f64::max);
    let low = w.iter().cloned().fold(f64::INFINITY, f64::min);
    if low >= -1e-10 * top {
        return Ok(s);
    }
    if low < -1e-6 * top {
        return Err(Error::Domain(format!(
            "correlation matrix is indefinite beyond quadrature error (min eig {low:e}, max {top:e})"
        )));
    }
    let (w, u) = linalg::herm_eig(&s)?;
    let clipped: Vec<f64> = w.iter().map(|x| x.max(0.0)).collect();
    let p = linalg::hermitize(&linalg::from_eig(&clipped, &u));
    Ok(rescale_trace(&p, target_trace))
}

/// Multiplies by target / Tr(A).
pub fn rescale_trace(a: &CMat, target: f64) -> CMat {
    let tr = linalg::trace(a).re;
    if tr == 0.0 {
        return a.clone();
    }
    let mut out = linalg::scale(a, target / tr);
    if target == a.nrows() as f64 {
        // keep a unit diagonal exact when it already was
        let unit = (0..a.nrows()).all(|i| (a[(i, i)].re - tr / a.nrows() as f64).abs() < 1e-15);
        if unit {
            for i in 0..a.nrows() {
                out[(i, i)] = c64::new(1.0, 0.0);
            }
        }
    }
    out
}
