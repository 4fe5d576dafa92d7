//! Scenario description read from TOML.

use serde::{Deserialize, Serialize};

use crate::correlation::Coupling;
use crate::deteq::FixedPointSettings;
use crate::error::{Error, Result};
use crate::geometry::{AngularSpectrum, ArrayGeometry, QuadratureOptions};
use crate::optimize::OptimizerSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationMode {
    Computed,
    #[default]
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Keyword {
    Zero,
}

/// Direct-link gain: a dB value or the keyword "zero" (direct path removed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DirectGain {
    Db(f64),
    Off(Keyword),
}

impl Default for DirectGain {
    fn default() -> Self {
        DirectGain::Off(Keyword::Zero)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    pub m: usize,
    pub k: usize,
    pub nt: usize,
    pub nr: usize,
    pub ns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySpec {
    /// metres
    pub ris_spacing: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ris_rows: Option<usize>,
    /// defaults to half a wavelength
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tx_spacing: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rx_spacing: Option<f64>,
}

impl Default for GeometrySpec {
    fn default() -> Self {
        Self { ris_spacing: 0.06, ris_rows: None, tx_spacing: None, rx_spacing: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RisSpec {
    pub theta_in_deg: f64,
    /// one mean azimuth per TX
    pub phi_in_deg: Vec<f64>,
    pub theta_out_deg: f64,
    pub phi_out_deg: f64,
    pub sigma_deg: f64,
    /// spread of the outgoing beam, defaults to `sigma_deg`
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_out_deg: Option<f64>,
    #[serde(default = "computed")]
    pub tx_side: CorrelationMode,
    #[serde(default = "computed")]
    pub rx_side: CorrelationMode,
}

fn computed() -> CorrelationMode {
    CorrelationMode::Computed
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AntennaSpec {
    #[serde(default)]
    pub correlation: CorrelationMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSettings {
    pub n_draws: usize,
    pub seed: u64,
}

impl Default for McSettings {
    fn default() -> Self {
        Self { n_draws: 10_000, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RegionSettings {
    /// explicit priority vectors; for M = 2 the default grid is μ_1 = 0, 0.1, ..., 1
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_grid: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub freeze_phases: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutageSettings {
    /// rates in nats; defaults to a grid around the analytic mean
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSettings {
    pub dir: String,
    /// report rates in bits instead of nats
    #[serde(default)]
    pub bits: bool,
}

impl Default for OutputSettings {
    fn default() -> Self {
        Self { dir: "out".into(), bits: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub counts: Counts,
    /// metres
    pub wavelength: f64,
    pub rho_db: f64,
    #[serde(default)]
    pub gamma_d_db: DirectGain,
    #[serde(default)]
    pub coupling: Coupling,
    #[serde(default)]
    pub geometry: GeometrySpec,
    #[serde(default)]
    pub ris: Vec<RisSpec>,
    #[serde(default)]
    pub tx_array: AntennaSpec,
    #[serde(default)]
    pub rx_array: AntennaSpec,
    #[serde(default)]
    pub quadrature: QuadratureOptions,
    #[serde(default)]
    pub solver: FixedPointSettings,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    #[serde(default)]
    pub mc: McSettings,
    #[serde(default)]
    pub region: RegionSettings,
    #[serde(default)]
    pub outage: OutageSettings,
    #[serde(default)]
    pub output: OutputSettings,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.counts;
        let bad = |s: String| Err(Error::Config(s));
        if c.m < 1 || c.nt < 1 || c.nr < 1 || c.ns < 1 {
            return bad("counts m, nt, nr, ns must be at least 1".into());
        }
        if self.ris.len() != c.k {
            return bad(format!("{} [[ris]] entries for k = {}", self.ris.len(), c.k));
        }
        if !(self.wavelength > 0.0) || !self.wavelength.is_finite() {
            return bad("wavelength must be positive".into());
        }
        if self.rho_db.is_nan() || self.rho_db == f64::INFINITY {
            return bad("rho_db must be finite or -inf".into());
        }
        if let DirectGain::Db(g) = self.gamma_d_db {
            if g.is_nan() || g == f64::INFINITY {
                return bad("gamma_d_db must be finite".into());
            }
        }
        for (i, r) in self.ris.iter().enumerate() {
            if r.phi_in_deg.len() != c.m {
                return bad(format!("ris {i}: phi_in_deg needs {} entries", c.m));
            }
            let sig_out = r.sigma_out_deg.unwrap_or(r.sigma_deg);
            let need_in = r.tx_side == CorrelationMode::Computed;
            let need_out = r.rx_side == CorrelationMode::Computed;
            if (need_in && !(r.sigma_deg > 0.0)) || (need_out && !(sig_out > 0.0)) {
                return bad(format!("ris {i}: angle spread must be positive"));
            }
            let angles = [r.theta_in_deg, r.theta_out_deg, r.phi_out_deg];
            if angles.iter().chain(&r.phi_in_deg).any(|a| !a.is_finite()) {
                return bad(format!("ris {i}: angles must be finite"));
            }
        }
        if let Some(rows) = self.geometry.ris_rows {
            if rows == 0 || c.ns % rows != 0 {
                return bad("ris_rows must divide ns".into());
            }
        }
        if !(self.geometry.ris_spacing > 0.0) {
            return bad("ris_spacing must be positive".into());
        }
        for (name, a) in [("tx_array", &self.tx_array), ("rx_array", &self.rx_array)] {
            if a.correlation == CorrelationMode::Computed && !(a.sigma_deg.unwrap_or(0.0) > 0.0) {
                return bad(format!("{name}: computed correlation needs sigma_deg > 0"));
            }
        }
        if self.mc.n_draws < 2 {
            return bad("mc.n_draws must be at least 2".into());
        }
        self.optimizer.validate()?;
        Ok(())
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    if db == f64::NEG_INFINITY {
        0.0
    } else {
        10f64.powf(db / 10.0)
    }
}

/// A validated configuration with derived quantities.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub quadrature: QuadratureOptions,
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let quadrature = config.quadrature;
        Ok(Self { config, quadrature })
    }

    pub fn rho_linear(&self) -> f64 {
        db_to_linear(self.config.rho_db)
    }

    pub fn gamma_d_linear(&self) -> f64 {
        match self.config.gamma_d_db {
            DirectGain::Db(g) => db_to_linear(g),
            DirectGain::Off(_) => 0.0,
        }
    }

    pub fn ris_geometry(&self) -> ArrayGeometry {
        let ns = self.config.counts.ns;
        let d = self.config.geometry.ris_spacing;
        match self.config.geometry.ris_rows {
            Some(rows) => ArrayGeometry::planar_grid(rows, ns / rows, d),
            None => ArrayGeometry::planar_for(ns, d),
        }
    }

    pub fn tx_geometry(&self) -> ArrayGeometry {
        let d = self.config.geometry.tx_spacing.unwrap_or(self.config.wavelength / 2.0);
        ArrayGeometry::linear(self.config.counts.nt, d)
    }

    pub fn rx_geometry(&self) -> ArrayGeometry {
        let d = self.config.geometry.rx_spacing.unwrap_or(self.config.wavelength / 2.0);
        ArrayGeometry::linear(self.config.counts.nr, d)
    }

    fn spectrum(&self, theta_deg: f64, phi_deg: f64, sigma_deg: f64) -> AngularSpectrum {
        AngularSpectrum {
            mean_azimuth: phi_deg.to_radians(),
            mean_elevation: theta_deg.to_radians(),
            angle_spread: sigma_deg.to_radians(),
            wavelength: self.config.wavelength,
        }
    }

    /// Spectrum of the waves from TX `m` at surface `k`.
    pub fn ris_in_spectrum(&self, k: usize, m: usize) -> AngularSpectrum {
        let r = &self.config.ris[k];
        self.spectrum(r.theta_in_deg, r.phi_in_deg[m], r.sigma_deg)
    }

    /// Spectrum of the waves leaving surface `k` toward the RX.
    pub fn ris_out_spectrum(&self, k: usize) -> AngularSpectrum {
        let r = &self.config.ris[k];
        self.spectrum(r.theta_out_deg, r.phi_out_deg, r.sigma_out_deg.unwrap_or(r.sigma_deg))
    }

    fn antenna_spectrum(&self, a: &AntennaSpec) -> Option<AngularSpectrum> {
        a.sigma_deg
            .map(|s| self.spectrum(a.theta_deg.unwrap_or(90.0), a.phi_deg.unwrap_or(90.0), s))
    }

    pub fn tx_spectrum(&self) -> Option<AngularSpectrum> {
        self.antenna_spectrum(&self.config.tx_array)
    }

    pub fn rx_spectrum(&self) -> Option<AngularSpectrum> {
        self.antenna_spectrum(&self.config.rx_array)
    }
}
