//! The full set of Kronecker correlation matrices of one scenario.

use serde::{Deserialize, Serialize};

use crate::config::{CorrelationMode, Scenario};
use crate::error::{Error, Result};
use crate::geometry::{self, AngularSpectrum, ArrayGeometry};
use crate::linalg::{self, CMat};

/// How the RIS-to-RX channel of a surface is shared among transmitters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Coupling {
    /// One RIS-to-RX channel per surface seen by every transmitter.
    #[default]
    Shared,
    /// An independent RIS-to-RX channel per (surface, transmitter) pair.
    PerTransmitter,
}

#[derive(Debug, Clone)]
pub struct CorrelationSet {
    pub nt: usize,
    pub nr: usize,
    pub ns: usize,
    /// per TX
    pub r_d: Vec<CMat>,
    pub t_d: Vec<CMat>,
    /// per RIS
    pub r_k: Vec<CMat>,
    pub s_r: Vec<CMat>,
    /// indexed [k][m]
    pub s_t: Vec<Vec<CMat>>,
    pub t_km: Vec<Vec<CMat>>,
    /// linear direct-link gain per TX
    pub gamma_d: Vec<f64>,
    /// linear per-TX SNR
    pub rho: f64,
    pub coupling: Coupling,
    /// element positions of each surface, used for plane-wave spectra
    pub ris_geometry: Vec<ArrayGeometry>,
}

impl CorrelationSet {
    /// Every correlation an identity of the right size.
    pub fn identity(m: usize, k: usize, nt: usize, nr: usize, ns: usize, rho: f64, gamma_d: f64) -> Self {
        let i = |n| linalg::identity(n);
        Self {
            nt,
            nr,
            ns,
            r_d: (0..m).map(|_| i(nr)).collect(),
            t_d: (0..m).map(|_| i(nt)).collect(),
            r_k: (0..k).map(|_| i(nr)).collect(),
            s_r: (0..k).map(|_| i(ns)).collect(),
            s_t: (0..k).map(|_| (0..m).map(|_| i(ns)).collect()).collect(),
            t_km: (0..k).map(|_| (0..m).map(|_| i(nt)).collect()).collect(),
            gamma_d: vec![gamma_d; m],
            rho,
            coupling: Coupling::Shared,
            ris_geometry: (0..k).map(|_| ArrayGeometry::planar_for(ns, 0.06)).collect(),
        }
    }

    pub fn m(&self) -> usize {
        self.r_d.len()
    }

    pub fn k(&self) -> usize {
        self.r_k.len()
    }

    pub fn with_coupling(mut self, coupling: Coupling) -> Self {
        self.coupling = coupling;
        self
    }

    /// Q_m = ρ I for every TX.
    pub fn isotropic_inputs(&self) -> Vec<CMat> {
        (0..self.m()).map(|_| linalg::scaled_identity(self.nt, self.rho)).collect()
    }

    /// Checks sizes, Hermitian symmetry and trace normalization.
    pub fn validate(&self) -> Result<()> {
        let (m, k) = (self.m(), self.k());
        let dims_ok = self.t_d.len() == m
            && self.gamma_d.len() == m
            && self.s_r.len() == k
            && self.s_t.len() == k
            && self.t_km.len() == k
            && self.s_t.iter().all(|v| v.len() == m)
            && self.t_km.iter().all(|v| v.len() == m);
        if !dims_ok {
            return Err(Error::Dimension("correlation set counts are inconsistent".into()));
        }
        let check = |a: &CMat, n: usize, what: &str| -> Result<()> {
            if a.nrows() != n || a.ncols() != n {
                return Err(Error::Dimension(format!("{what} must be {n}x{n}")));
            }
            if linalg::hermitian_defect(a) > 1e-12 {
                return Err(Error::InvalidParameter(format!("{what} is not Hermitian")));
            }
            let tr = linalg::trace(a).re;
            if (tr - n as f64).abs() > 1e-9 * n as f64 {
                return Err(Error::InvalidParameter(format!("{what} has trace {tr}, expected {n}")));
            }
            Ok(())
        };
        for i in 0..m {
            check(&self.r_d[i], self.nr, "R_d")?;
            check(&self.t_d[i], self.nt, "T_d")?;
        }
        for kk in 0..k {
            check(&self.r_k[kk], self.nr, "R_k")?;
            check(&self.s_r[kk], self.ns, "S_r")?;
            for i in 0..m {
                check(&self.s_t[kk][i], self.ns, "S_t")?;
                check(&self.t_km[kk][i], self.nt, "T_km")?;
            }
        }
        if !(self.rho >= 0.0) || self.gamma_d.iter().any(|g| !(*g >= 0.0)) {
            return Err(Error::InvalidParameter("SNR values must be non-negative".into()));
        }
        Ok(())
    }
}

fn build_one(mode: CorrelationMode, geom: &ArrayGeometry, spec: Option<AngularSpectrum>, s: &Scenario) -> Result<CMat> {
    let n = geom.len();
    match (mode, spec) {
        (CorrelationMode::Identity, _) => Ok(linalg::identity(n)),
        (CorrelationMode::Computed, Some(sp)) => {
            let c = geometry::correlation_matrix_with(geom, &sp, &s.quadrature)?;
            Ok(geometry::rescale_trace(&c, n as f64))
        }
        (CorrelationMode::Computed, None) => Err(Error::Config(
            "computed correlation requested without an angular spectrum".into(),
        )),
    }
}

/// Builds every correlation matrix of a validated scenario.
pub fn build_correlation_set(s: &Scenario) -> Result<CorrelationSet> {
    let c = &s.config.counts;
    let ris_geom = s.ris_geometry();
    let tx_geom = s.tx_geometry();
    let rx_geom = s.rx_geometry();
    if ris_geom.len() != c.ns || tx_geom.len() != c.nt || rx_geom.len() != c.nr {
        return Err(Error::Dimension("array geometry does not match declared counts".into()));
    }
    let rx = build_one(s.config.rx_array.correlation, &rx_geom, s.rx_spectrum(), s)?;
    let tx = build_one(s.config.tx_array.correlation, &tx_geom, s.tx_spectrum(), s)?;
    let mut s_r = Vec::new();
    let mut s_t = Vec::new();
    for (kk, ris) in s.config.ris.iter().enumerate() {
        s_r.push(build_one(ris.rx_side, &ris_geom, Some(s.ris_out_spectrum(kk)), s)?);
        let mut row = Vec::new();
        for m in 0..c.m {
            // identical spectra share one matrix build
            let sp = s.ris_in_spectrum(kk, m);
            let prev = (0..m).find(|&j| s.ris_in_spectrum(kk, j) == sp);
            match prev {
                Some(j) => {
                    let cl: CMat = row.get(j).cloned().unwrap();
                    row.push(cl)
                }
                None => row.push(build_one(ris.tx_side, &ris_geom, Some(sp), s)?),
            }
        }
        s_t.push(row);
    }
    let cs = CorrelationSet {
        nt: c.nt,
        nr: c.nr,
        ns: c.ns,
        r_d: (0..c.m).map(|_| rx.clone()).collect(),
        t_d: (0..c.m).map(|_| tx.clone()).collect(),
        r_k: (0..c.k).map(|_| rx.clone()).collect(),
        s_r,
        s_t,
        t_km: (0..c.k).map(|_| (0..c.m).map(|_| tx.clone()).collect()).collect(),
        gamma_d: vec![s.gamma_d_linear(); c.m],
        rho: s.rho_linear(),
        coupling: s.config.coupling,
        ris_geometry: (0..c.k).map(|_| ris_geom.clone()).collect(),
    };
    cs.validate()?;
    Ok(cs)
}
