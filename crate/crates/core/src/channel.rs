//! Exact Kronecker-correlated channel draws and Monte Carlo statistics.

use faer::c64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::correlation::{CorrelationSet, Coupling};
use crate::deteq::{DeModel, FixedPointSettings, Gram};
use crate::error::{Error, Result};
use crate::linalg::{self, CMat};
use crate::phases::PhaseConfig;

/// One draw of every channel matrix.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    /// Nr x Nt per TX
    pub g_d: Vec<CMat>,
    /// Nr x Ns, `[k][0]` when shared or `[k][m]` per transmitter
    pub g_r: Vec<Vec<CMat>>,
    /// Ns x Nt, `[k][m]`
    pub g_t: Vec<Vec<CMat>>,
    pub rng_seed: u64,
}

impl ChannelRealization {
    pub fn g_r(&self, k: usize, m: usize) -> &CMat {
        let row = &self.g_r[k];
        if row.len() == 1 {
            &row[0]
        } else {
            &row[m]
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// i.i.d. CN(0, 1) entries.
fn gaussian(rng: &mut impl Rng, r: usize, c: usize) -> CMat {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut out = CMat::zeros(r, c);
    for j in 0..c {
        for i in 0..r {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            out[(i, j)] = c64::new(a * s, b * s);
        }
    }
    out
}

/// Square roots of every correlation matrix, reused across draws.
#[derive(Debug, Clone)]
pub struct ChannelSampler {
    nt: usize,
    nr: usize,
    ns: usize,
    coupling: Coupling,
    gamma_d: Vec<f64>,
    r_d: Vec<CMat>,
    t_d: Vec<CMat>,
    r_k: Vec<CMat>,
    s_r: Vec<CMat>,
    s_t: Vec<Vec<CMat>>,
    t_km: Vec<Vec<CMat>>,
}

impl ChannelSampler {
    pub fn new(cs: &CorrelationSet) -> Result<Self> {
        cs.validate()?;
        let sq = |v: &Vec<CMat>| v.iter().map(linalg::psd_sqrt).collect::<Result<Vec<_>>>();
        Ok(Self {
            nt: cs.nt,
            nr: cs.nr,
            ns: cs.ns,
            coupling: cs.coupling,
            gamma_d: cs.gamma_d.clone(),
            r_d: sq(&cs.r_d)?,
            t_d: sq(&cs.t_d)?,
            r_k: sq(&cs.r_k)?,
            s_r: sq(&cs.s_r)?,
            s_t: cs.s_t.iter().map(sq).collect::<Result<_>>()?,
            t_km: cs.t_km.iter().map(sq).collect::<Result<_>>()?,
        })
    }

    /// G_dm = sqrt(γ/Nt) R^{1/2} W T^{1/2}, G_rk = sqrt(1/Nt) R_k^{1/2} W' S_r^{1/2},
    /// G_tkm = sqrt(1/Nt) S_t^{1/2} W'' T_km^{1/2}.
    pub fn sample(&self, seed: u64) -> ChannelRealization {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (nt, nr, ns) = (self.nt, self.nr, self.ns);
        let m = self.r_d.len();
        let k = self.r_k.len();
        let inv = (1.0 / nt as f64).sqrt();
        let g_d = (0..m)
            .map(|i| {
                let w = gaussian(&mut rng, nr, nt);
                let g = &(&self.r_d[i] * &w) * &self.t_d[i];
                linalg::scale(&g, (self.gamma_d[i] / nt as f64).sqrt())
            })
            .collect();
        let n_r = match self.coupling {
            Coupling::Shared => 1,
            Coupling::PerTransmitter => m,
        };
        let g_r = (0..k)
            .map(|kk| {
                (0..n_r)
                    .map(|_| {
                        let w = gaussian(&mut rng, nr, ns);
                        linalg::scale(&(&(&self.r_k[kk] * &w) * &self.s_r[kk]), inv)
                    })
                    .collect()
            })
            .collect();
        let g_t = (0..k)
            .map(|kk| {
                (0..m)
                    .map(|i| {
                        let w = gaussian(&mut rng, ns, nt);
                        linalg::scale(&(&(&self.s_t[kk][i] * &w) * &self.t_km[kk][i]), inv)
                    })
                    .collect()
            })
            .collect();
        ChannelRealization { g_d, g_r, g_t, rng_seed: seed }
    }
}

/// Draws one realization; deterministic in `seed`.
pub fn sample_channels(cs: &CorrelationSet, seed: u64) -> Result<ChannelRealization> {
    Ok(ChannelSampler::new(cs)?.sample(seed))
}

/// G_tot,m = G_dm + Σ_k G_rk diag(e^{iφ_k}) G_tkm.
pub fn total_channel(real: &ChannelRealization, phases: &PhaseConfig) -> Result<Vec<CMat>> {
    let k = real.g_r.len();
    let m = real.g_d.len();
    if phases.k() != k {
        return Err(Error::Dimension("phase configuration does not match the number of surfaces".into()));
    }
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let mut g = real.g_d[i].clone();
        for kk in 0..k {
            let c = phases.coefficients(kk);
            let gt = &real.g_t[kk][i];
            if c.len() != gt.nrows() {
                return Err(Error::Dimension("phase vector length differs from Ns".into()));
            }
            let scaled = linalg::scale_rows(&c, gt);
            g = &g + &(real.g_r(kk, i) * &scaled);
        }
        out.push(g);
    }
    Ok(out)
}

/// log det(I + A) for Hermitian PSD A, with an eigenvalue fallback.
fn logdet_shifted(a: &CMat) -> Result<f64> {
    let n = a.nrows();
    let mut b = linalg::hermitize(a);
    for i in 0..n {
        b[(i, i)] += 1.0;
    }
    match linalg::logdet_hpd(&b) {
        Ok(v) => Ok(v),
        Err(_) => {
            let w = linalg::herm_eigvals(&b)?;
            let top = w.iter().cloned().fold(0.0, f64::max);
            if w.iter().any(|&x| x < -1e-10 * top.max(1.0)) {
                return Err(Error::Numerical("log-det argument is indefinite".into()));
            }
            Ok(w.iter().map(|x| x.max(f64::MIN_POSITIVE).ln()).sum())
        }
    }
}

/// log det(I + Σ_{m∈S} G_m Q_m G_m^H), nats.
pub fn instantaneous_mi(g_tot: &[CMat], q: &[CMat], subset: &[usize]) -> Result<f64> {
    if subset.is_empty() {
        return Ok(0.0);
    }
    let nr = g_tot[0].nrows();
    let mut a = CMat::zeros(nr, nr);
    for &m in subset {
        if m >= g_tot.len() || m >= q.len() {
            return Err(Error::Dimension("subset index out of range".into()));
        }
        let gq = &g_tot[m] * &q[m];
        a = &a + &(&gq * g_tot[m].adjoint());
    }
    Ok(logdet_shifted(&a)?.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum McMethod {
    /// conditional-Gaussian sampler in the correlation eigenbases
    #[default]
    Fast,
    /// full channel matrices through [`sample_channels`]
    Dense,
}

#[derive(Debug, Clone, Serialize)]
pub struct McStatistics {
    pub n_draws: usize,
    pub mean: f64,
    /// unbiased
    pub variance: f64,
    pub std_err_mean: f64,
    pub std_err_variance: f64,
    /// sorted sum-MI values, nats
    #[serde(skip)]
    pub samples: Vec<f64>,
}

impl McStatistics {
    /// Empirical P(I < rate).
    pub fn empirical_cdf(&self, rate: f64) -> f64 {
        let n = self.samples.partition_point(|&x| x < rate);
        n as f64 / self.samples.len() as f64
    }
}

/// Pairwise summation, independent of thread count.
pub fn pairwise_sum(x: &[f64]) -> f64 {
    if x.len() <= 8 {
        return x.iter().sum();
    }
    let (a, b) = x.split_at(x.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

pub fn summarize(values: Vec<f64>) -> McStatistics {
    let n = values.len();
    let nf = n as f64;
    let mean = pairwise_sum(&values) / nf;
    let dev2: Vec<f64> = values.iter().map(|x| (x - mean) * (x - mean)).collect();
    let dev4: Vec<f64> = dev2.iter().map(|d| d * d).collect();
    let variance = if n > 1 { pairwise_sum(&dev2) / (nf - 1.0) } else { 0.0 };
    let m4 = pairwise_sum(&dev4) / nf;
    let std_err_variance = if n > 1 {
        ((m4 - variance * variance * (nf - 3.0) / (nf - 1.0)).max(0.0) / nf).sqrt()
    } else {
        0.0
    };
    let mut samples = values;
    samples.sort_by(|a, b| a.total_cmp(b));
    McStatistics {
        n_draws: n,
        mean,
        variance,
        std_err_mean: (variance / nf).sqrt(),
        std_err_variance,
        samples,
    }
}

/// Conditional sampler: given the RIS-to-RX draw `W_r`, the cascaded channel
/// `W_r P W_t` has i.i.d. columns with covariance `W_r Γ W_r^H`, so only an
/// Nr x rank draw and an Nr x Nt draw are needed per link.
#[derive(Debug, Clone)]
pub struct FastSampler {
    nt: usize,
    nr: usize,
    coupling: Coupling,
    active: Vec<usize>,
    gamma_d: Vec<f64>,
    q: Vec<CMat>,
    r_d: Vec<Option<CMat>>,
    t_d: Vec<Option<CMat>>,
    r_k: Vec<Option<CMat>>,
    t_km: Vec<Vec<Option<CMat>>>,
    /// Γ_km in the factor basis of S_rk, [k][m]
    gram: Vec<Vec<Option<Gram>>>,
}

fn non_identity_sqrt(a: &CMat) -> Result<Option<CMat>> {
    if linalg::is_identity(a) {
        Ok(None)
    } else {
        Ok(Some(linalg::psd_sqrt(a)?))
    }
}

fn apply_left(a: &Option<CMat>, x: CMat) -> CMat {
    match a {
        Some(a) => a * &x,
        None => x,
    }
}

fn apply_right(x: CMat, a: &Option<CMat>) -> CMat {
    match a {
        Some(a) => &x * a,
        None => x,
    }
}

impl FastSampler {
    pub fn new(cs: &CorrelationSet, phases: &PhaseConfig, q: &[CMat], subset: &[usize]) -> Result<Self> {
        cs.validate()?;
        let model = DeModel::new(cs, q, subset, &FixedPointSettings::default())?;
        let grams = model.grams(phases)?;
        let gram = grams.gram;
        Ok(Self {
            nt: cs.nt,
            nr: cs.nr,
            coupling: cs.coupling,
            active: model.active.clone(),
            gamma_d: cs.gamma_d.clone(),
            q: q.to_vec(),
            r_d: cs.r_d.iter().map(non_identity_sqrt).collect::<Result<_>>()?,
            t_d: cs.t_d.iter().map(non_identity_sqrt).collect::<Result<_>>()?,
            r_k: cs.r_k.iter().map(non_identity_sqrt).collect::<Result<_>>()?,
            t_km: cs
                .t_km
                .iter()
                .map(|row| row.iter().map(non_identity_sqrt).collect::<Result<_>>())
                .collect::<Result<_>>()?,
            gram,
        })
    }

    fn rank(&self, k: usize) -> usize {
        self.gram[k]
            .iter()
            .flatten()
            .map(|g| match g {
                Gram::Diagonal(d) => d.len(),
                Gram::Dense(d) => d.nrows(),
            })
            .next()
            .unwrap_or(0)
    }

    /// Sum-MI of draw `index`.
    pub fn draw(&self, seed: u64, index: u64) -> Result<f64> {
        let mut rng = rng_for(seed, index);
        let (nt, nr) = (self.nt, self.nr);
        let m = self.gamma_d.len();
        let k = self.r_k.len();
        let mut h: Vec<CMat> = vec![CMat::zeros(nr, nt); m];
        for &i in &self.active {
            if self.gamma_d[i] > 0.0 {
                let w = gaussian(&mut rng, nr, nt);
                let g = apply_right(apply_left(&self.r_d[i], w), &self.t_d[i]);
                h[i] = linalg::scale(&g, (self.gamma_d[i] / nt as f64).sqrt());
            }
        }
        for kk in 0..k {
            let r = self.rank(kk);
            let mut shared: Option<CMat> = None;
            for &i in &self.active {
                let wr = match self.coupling {
                    Coupling::Shared => shared.get_or_insert_with(|| gaussian(&mut rng, nr, r)).clone(),
                    Coupling::PerTransmitter => gaussian(&mut rng, nr, r),
                };
                let c = match self.gram[kk][i].as_ref().unwrap() {
                    Gram::Diagonal(d) => {
                        let scaled = CMat::from_fn(nr, r, |a, b| wr[(a, b)] * d[b]);
                        &scaled * wr.adjoint()
                    }
                    Gram::Dense(g) => &(&wr * g) * wr.adjoint(),
                };
                let l = linalg::psd_sqrt(&c)?;
                let z = gaussian(&mut rng, nr, nt);
                let term = apply_right(apply_left(&self.r_k[kk], &l * &z), &self.t_km[kk][i]);
                linalg::axpy(&mut h[i], 1.0 / nt as f64, &term);
            }
        }
        instantaneous_mi(&h, &self.q, &self.active)
    }
}

/// Sample mean, variance and sorted values of the sum-MI over `n_draws` draws.
pub fn mc_statistics(
    cs: &CorrelationSet,
    phases: &PhaseConfig,
    q: &[CMat],
    subset: &[usize],
    n_draws: usize,
    seed: u64,
    method: McMethod,
) -> Result<McStatistics> {
    if n_draws < 2 {
        return Err(Error::InvalidParameter("n_draws must be at least 2".into()));
    }
    let values: Vec<f64> = match method {
        McMethod::Fast => {
            let s = FastSampler::new(cs, phases, q, subset)?;
            (0..n_draws as u64)
                .into_par_iter()
                .map(|i| s.draw(seed, i))
                .collect::<Result<_>>()?
        }
        McMethod::Dense => {
            let s = ChannelSampler::new(cs)?;
            (0..n_draws as u64)
                .into_par_iter()
                .map(|i| {
                    let real = s.sample(draw_seed(seed, i));
                    instantaneous_mi(&total_channel(&real, phases)?, q, subset)
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(summarize(values))
}

/// Seed of draw `index` for the dense sampler.
pub fn draw_seed(seed: u64, index: u64) -> u64 {
    let mut rng = rng_for(seed, index);
    rng.random()
}
