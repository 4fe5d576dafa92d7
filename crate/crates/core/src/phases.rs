use faer::c64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-RIS phase vectors; the reflection coefficients `exp(i φ)` are unit modulus by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub phases: Vec<Vec<f64>>,
}

impl PhaseConfig {
    /// Φ_k = I for every surface.
    pub fn identity(k: usize, ns: usize) -> Self {
        Self { phases: vec![vec![0.0; ns]; k] }
    }

    pub fn new(phases: Vec<Vec<f64>>) -> Result<Self> {
        if phases.iter().flatten().any(|p| !p.is_finite()) {
            return Err(Error::InvalidParameter("phases must be finite".into()));
        }
        Ok(Self { phases })
    }

    pub fn k(&self) -> usize {
        self.phases.len()
    }

    pub fn check_dims(&self, k: usize, ns: usize) -> Result<()> {
        if self.phases.len() != k || self.phases.iter().any(|p| p.len() != ns) {
            return Err(Error::Dimension(format!(
                "phase configuration must hold {k} vectors of length {ns}"
            )));
        }
        Ok(())
    }

    /// Diagonal of Φ_k.
    pub fn coefficients(&self, k: usize) -> Vec<c64> {
        self.phases[k].iter().map(|&p| c64::cis(p)).collect()
    }

    /// Adds `theta` to every phase of surface `k`.
    pub fn rotated(&self, k: usize, theta: f64) -> Self {
        let mut out = self.clone();
        out.phases[k].iter_mut().for_each(|p| *p += theta);
        out
    }

    /// Phases reduced to [0, 2π).
    pub fn wrapped(&self) -> Self {
        let tau = 2.0 * std::f64::consts::PI;
        Self {
            phases: self
                .phases
                .iter()
                .map(|v| v.iter().map(|p| p.rem_euclid(tau)).collect())
                .collect(),
        }
    }
}
