//! Variance of the sum mutual information and the Gaussian outage approximation.
//!
//! Λ is the Hessian of the saddle-point functional in the variable order
//! `[t_d, t_1, t_2, r_d, r_1, r_2]`. Its determinant carries the sign
//! `(-1)^{dim/2}` at every regular saddle point; the variance is
//! `-log((-1)^{dim/2} det Λ)`, which vanishes at zero power where Λ reduces
//! to the pure `-I` couplings.

use faer::Mat;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::correlation::CorrelationSet;
use crate::deteq::{DeModel, FixedPointSettings, FixedPointState};
use crate::error::{Error, Result};
use crate::linalg::CMat;
use crate::phases::PhaseConfig;

#[derive(Debug, Clone)]
pub struct LambdaBlocks {
    pub lambda: Mat<f64>,
    /// active transmitters
    pub n_d: usize,
    /// coupling groups
    pub n_g: usize,
    /// (surface, active transmitter) pairs
    pub n_2: usize,
}

impl LambdaBlocks {
    pub fn from_matrix(lambda: Mat<f64>, n_d: usize, n_g: usize, n_2: usize) -> Self {
        assert_eq!(lambda.nrows(), 2 * (n_d + n_g + n_2));
        Self { lambda, n_d, n_g, n_2 }
    }

    pub fn dim(&self) -> usize {
        self.lambda.nrows()
    }

    fn half(&self) -> usize {
        self.n_d + self.n_g + self.n_2
    }

    fn range(&self, fam: &str) -> (usize, usize) {
        let h = self.half();
        let (d, g) = (self.n_d, self.n_g);
        match fam {
            "td" => (0, d),
            "t1" => (d, d + g),
            "t2" => (d + g, h),
            "rd" => (h, h + d),
            "r1" => (h + d, h + d + g),
            "r2" => (h + d + g, 2 * h),
            _ => unreachable!(),
        }
    }

    fn block(&self, a: &str, b: &str) -> Mat<f64> {
        let (r0, r1) = self.range(a);
        let (c0, c1) = self.range(b);
        Mat::from_fn(r1 - r0, c1 - c0, |i, j| self.lambda[(r0 + i, c0 + j)])
    }

    /// t_d with t_d
    pub fn m_dt(&self) -> Mat<f64> {
        self.block("td", "td")
    }
    /// r_d with r_d
    pub fn m_dr(&self) -> Mat<f64> {
        self.block("rd", "rd")
    }
    /// t_1 with t_1
    pub fn m_1t(&self) -> Mat<f64> {
        self.block("t1", "t1")
    }
    /// t_2 with t_2, block diagonal in the transmitter
    pub fn m_2t(&self) -> Mat<f64> {
        self.block("t2", "t2")
    }
    /// r_1 with r_1
    pub fn m_1r(&self) -> Mat<f64> {
        self.block("r1", "r1")
    }
    /// r_2 with r_2
    pub fn m_2r(&self) -> Mat<f64> {
        self.block("r2", "r2")
    }
    /// t_1 with r_2
    pub fn m_12(&self) -> Mat<f64> {
        self.block("t1", "r2")
    }
    /// r_1 with r_d
    pub fn m_1dr(&self) -> Mat<f64> {
        self.block("r1", "rd")
    }
    /// t_2 with t_d
    pub fn m_2dt(&self) -> Mat<f64> {
        self.block("t2", "td")
    }

    /// (-1)^{dim/2} det Λ
    pub fn normalized_det(&self) -> f64 {
        let d = self.lambda.determinant();
        if self.half() % 2 == 1 {
            -d
        } else {
            d
        }
    }

    /// Ratio of extreme singular values.
    pub fn condition_number(&self) -> f64 {
        match self.lambda.singular_values() {
            Ok(s) if !s.is_empty() => {
                let hi = s.iter().cloned().fold(0.0, f64::max);
                let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
                hi / lo
            }
            _ => f64::NAN,
        }
    }
}

/// Λ at a converged state.
pub fn assemble_lambda(
    cs: &CorrelationSet,
    phases: &PhaseConfig,
    q: &[CMat],
    subset: &[usize],
    state: &FixedPointState,
) -> Result<LambdaBlocks> {
    let model = DeModel::new(cs, q, subset, &FixedPointSettings::default())?;
    let grams = model.grams(phases)?;
    lambda_from_model(&model, &grams, state)
}

pub fn lambda_from_model(model: &DeModel, grams: &crate::deteq::Grams, state: &FixedPointState) -> Result<LambdaBlocks> {
    let h = model.hessian_at(grams, state)?;
    Ok(LambdaBlocks::from_matrix(
        h,
        model.active.len(),
        model.groups.len(),
        model.k * model.active.len(),
    ))
}

/// Var = -log det Λ with the sign normalization above, nats².
pub fn variance(blocks: &LambdaBlocks) -> Result<f64> {
    let d = blocks.normalized_det();
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::Domain(format!(
            "normalized det Λ = {d:e} is not positive (dimension {}, condition number {:e})",
            blocks.dim(),
            blocks.condition_number()
        )));
    }
    // exact zero at zero power; tiny negatives are rounding
    Ok((-d.ln()).max(0.0))
}

/// Gaussian approximation of P(I < rate).
pub fn gaussian_outage(mean_total: f64, variance: f64, rate: f64) -> Result<f64> {
    if !(variance > 0.0) {
        return Err(Error::InvalidParameter(format!("variance must be positive, got {variance}")));
    }
    if rate == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    let n = Normal::new(0.0, 1.0).unwrap();
    Ok(n.cdf((rate - mean_total) / variance.sqrt()))
}

#[derive(Debug, Clone, Serialize)]
pub struct VarianceReport {
    pub mean_total: f64,
    pub variance: f64,
    pub blocks_condition_number: f64,
}
