//! RIS phase optimization: full gradient ascent on the deterministic equivalent,
//! the rank-one surrogate ascent, and post-hoc quantization.

use std::f64::consts::PI;

use faer::c64;
use serde::{Deserialize, Serialize};

use crate::correlation::CorrelationSet;
use crate::deteq::{DeModel, FixedPointSettings, Grams, Solution};
use crate::error::{Error, Result};
use crate::geometry::{ArrayGeometry, Vec3};
use crate::linalg::{self, CMat};
use crate::phases::PhaseConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Full,
    #[serde(alias = "semi-optimal")]
    Semi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
pub enum Quantization {
    #[default]
    #[serde(rename = "none", alias = "continuous")]
    #[value(name = "none", alias = "continuous")]
    Continuous,
    #[serde(rename = "1bit", alias = "1-bit")]
    #[value(name = "1bit", alias = "1-bit")]
    OneBit,
    #[serde(rename = "2bit", alias = "2-bit")]
    #[value(name = "2bit", alias = "2-bit")]
    TwoBit,
}

impl Quantization {
    /// Codebook angles in ascending order.
    pub fn codebook(self) -> Option<Vec<f64>> {
        match self {
            Quantization::Continuous => None,
            Quantization::OneBit => Some(vec![0.0, PI]),
            Quantization::TwoBit => Some(vec![PI / 4.0, 3.0 * PI / 4.0, 5.0 * PI / 4.0, 7.0 * PI / 4.0]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub mode: Mode,
    /// initial ε
    pub step_size: f64,
    /// δ on the composite residual
    pub tolerance: f64,
    pub max_iter: usize,
    pub quantization: Quantization,
    /// halvings of ε allowed per iteration
    pub max_halvings: usize,
    /// ε is multiplied by this after an accepted step
    pub step_growth: f64,
    pub step_rule: StepRule,
    pub outer_rounds: usize,
    pub inner_max_iter: usize,
    /// global offsets tried before quantizing
    pub quant_offsets: usize,
}

/// How ε is chosen at the start of each full-ascent iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    /// previous accepted ε times `step_growth`
    Doubling,
    /// secant estimate |s·s / s·y| from the last two directions, capped at `step_growth` times the last step
    #[default]
    BarzilaiBorwein,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            step_size: 1.0,
            tolerance: 1e-6,
            max_iter: 500,
            quantization: Quantization::Continuous,
            max_halvings: 30,
            step_growth: 2.0,
            step_rule: StepRule::BarzilaiBorwein,
            outer_rounds: 50,
            inner_max_iter: 5000,
            quant_offsets: 16,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidParameter(format!("step size must be positive, got {}", self.step_size)));
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::InvalidParameter(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if self.max_iter == 0 || self.outer_rounds == 0 || self.inner_max_iter == 0 {
            return Err(Error::InvalidParameter("iteration limits must be at least 1".into()));
        }
        if !(self.step_growth >= 1.0 && self.step_growth.is_finite()) {
            return Err(Error::InvalidParameter("step growth must be at least 1".into()));
        }
        Ok(())
    }
}

/// Weighted sum of per-antenna MIs over transmitter subsets.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub terms: Vec<(f64, Vec<usize>)>,
}

impl Objective {
    pub fn sum(subset: &[usize]) -> Self {
        Self { terms: vec![(1.0, subset.to_vec())] }
    }

    /// Telescoped priority weights: Σ_ℓ (μ_ℓ − μ_{ℓ+1}) C({order[0..ℓ]}).
    ///
    /// `mu` must already be sorted non-increasing; `order[ℓ]` is the transmitter with the ℓ-th priority.
    pub fn nested(mu: &[f64], order: &[usize]) -> Result<Self> {
        if mu.is_empty() || mu.len() != order.len() {
            return Err(Error::Dimension("priority vector and ordering differ in length".into()));
        }
        if mu.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidParameter("priorities must be finite and non-negative".into()));
        }
        if mu.windows(2).any(|w| w[1] > w[0] + 1e-12) {
            return Err(Error::InvalidParameter("priority vector must be non-increasing".into()));
        }
        let total: f64 = mu.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidParameter("priority vector sums to zero".into()));
        }
        let mut terms = Vec::new();
        for l in 0..mu.len() {
            let next = if l + 1 < mu.len() { mu[l + 1] } else { 0.0 };
            let w = (mu[l] - next) / total;
            if w > 0.0 {
                terms.push((w, order[..=l].to_vec()));
            }
        }
        Ok(Self { terms })
    }

    /// Identity ordering, `mu` non-increasing.
    pub fn weighted(mu: &[f64]) -> Result<Self> {
        let order: Vec<usize> = (0..mu.len()).collect();
        Self::nested(mu, &order)
    }

    fn union(&self) -> Vec<usize> {
        let mut u: Vec<usize> = self.terms.iter().flat_map(|t| t.1.iter().copied()).collect();
        u.sort_unstable();
        u.dedup();
        u
    }
}

/// Start point, frozen surfaces and fixed-point settings for an ascent.
#[derive(Debug, Clone, Default)]
pub struct OptimizeOptions {
    pub initial: Option<PhaseConfig>,
    /// surfaces whose phases are held fixed
    pub frozen: Vec<usize>,
    pub fixed_point: FixedPointSettings,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub residual: f64,
    pub step: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimizeResult {
    pub phases: PhaseConfig,
    /// weighted objective, per TX antenna
    pub objective: f64,
    /// one solution per objective term
    pub solutions: Vec<Solution>,
    pub trace: Vec<TraceRow>,
    pub iterations: usize,
    pub converged: bool,
}

impl OptimizeResult {
    pub fn solution(&self) -> &Solution {
        &self.solutions[self.solutions.len() - 1]
    }
}

#[derive(Clone)]
struct Point {
    phases: PhaseConfig,
    grams: Grams,
    sols: Vec<Solution>,
    value: f64,
}

/// One base model with every transmitter of the objective; one restricted model per term.
struct Engine {
    base: DeModel,
    terms: Vec<(f64, DeModel)>,
}

impl Engine {
    fn new(cs: &CorrelationSet, q: &[CMat], obj: &Objective, fp: &FixedPointSettings) -> Result<Self> {
        if obj.terms.is_empty() {
            return Err(Error::InvalidParameter("objective has no terms".into()));
        }
        cs.validate()?;
        let base = DeModel::new(cs, q, &obj.union(), fp)?;
        let terms = obj
            .terms
            .iter()
            .map(|(w, s)| Ok((*w, base.restricted(s)?)))
            .collect::<Result<_>>()?;
        Ok(Self { base, terms })
    }

    fn point(&self, phases: PhaseConfig, warm: Option<&Point>) -> Result<Point> {
        let grams = self.base.grams(&phases)?;
        let mut sols = Vec::with_capacity(self.terms.len());
        let mut value = 0.0;
        for (j, (w, model)) in self.terms.iter().enumerate() {
            let sol = match warm {
                Some(p) => match model.solve_from(&grams, model.vars_from_state(&p.sols[j].state)) {
                    Ok(s) => s,
                    Err(_) => model.solve(&grams)?,
                },
                None => model.solve(&grams)?,
            };
            value += w * sol.c;
            sols.push(sol);
        }
        if !value.is_finite() {
            return Err(Error::StepSize("objective is not finite; reduce the step size".into()));
        }
        Ok(Point { phases, grams, sols, value })
    }

    /// Σ_ℓ w_ℓ Σ_m Im[B_km]_nn, i.e. (Nt/2) times the objective gradient.
    fn direction(&self, p: &Point) -> Result<Vec<Vec<f64>>> {
        let mut dir = vec![vec![0.0; self.base.ns]; self.base.k];
        let half_nt = self.base.nt as f64 / 2.0;
        for ((w, model), sol) in self.terms.iter().zip(&p.sols) {
            let g = model.phase_gradient(&p.grams, &p.phases, &sol.state)?;
            for (d, gk) in dir.iter_mut().zip(g) {
                for (x, y) in d.iter_mut().zip(gk) {
                    *x += w * half_nt * y;
                }
            }
        }
        Ok(dir)
    }
}

fn rms_phase_change(a: &PhaseConfig, b: &PhaseConfig) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (x, y) in a.phases.iter().flatten().zip(b.phases.iter().flatten()) {
        acc += (c64::cis(*x) - c64::cis(*y)).norm_sqr();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (acc / n as f64).sqrt()
    }
}

/// RMS change of the reflection coefficients plus the relative change of every parameter.
fn composite_residual(a: &Point, b: &Point) -> f64 {
    let params: f64 = a
        .sols
        .iter()
        .zip(&b.sols)
        .map(|(x, y)| {
            let scale = x.state.values().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
            x.state.max_abs_diff(&y.state) / scale
        })
        .sum();
    rms_phase_change(&a.phases, &b.phases) + params
}

fn step_phases(p: &PhaseConfig, dir: &[Vec<f64>], eps: f64) -> PhaseConfig {
    PhaseConfig {
        phases: p
            .phases
            .iter()
            .zip(dir)
            .map(|(v, d)| v.iter().zip(d).map(|(x, g)| x + eps * g).collect())
            .collect(),
    }
}

fn initial_phases(cs: &CorrelationSet, opts: &OptimizeOptions) -> Result<PhaseConfig> {
    let p = opts.initial.clone().unwrap_or_else(|| PhaseConfig::identity(cs.k(), cs.ns));
    p.check_dims(cs.k(), cs.ns)?;
    if opts.frozen.iter().any(|&k| k >= cs.k()) {
        return Err(Error::Dimension("frozen surface index out of range".into()));
    }
    Ok(p)
}

fn into_result(best: Point, trace: Vec<TraceRow>, iterations: usize, converged: bool) -> OptimizeResult {
    OptimizeResult {
        phases: best.phases,
        objective: best.value,
        solutions: best.sols,
        trace,
        iterations,
        converged,
    }
}

/// Gradient ascent on the deterministic-equivalent sum MI of `subset`.
pub fn optimize_full(cs: &CorrelationSet, q: &[CMat], subset: &[usize], settings: &OptimizerSettings) -> Result<OptimizeResult> {
    optimize_full_with(cs, q, &Objective::sum(subset), settings, &OptimizeOptions::default())
}

pub fn optimize_full_with(
    cs: &CorrelationSet,
    q: &[CMat],
    obj: &Objective,
    settings: &OptimizerSettings,
    opts: &OptimizeOptions,
) -> Result<OptimizeResult> {
    settings.validate()?;
    let engine = Engine::new(cs, q, obj, &opts.fixed_point)?;
    let mut cur = engine.point(initial_phases(cs, opts)?, None)?;
    let mut best = cur.clone();
    let mut eps = settings.step_size;
    let mut trace = vec![TraceRow { iteration: 0, objective: cur.value, residual: f64::NAN, step: eps }];
    let mut converged = false;
    let mut limited = false;
    let mut iterations = 0;
    // last accepted step and the direction it was taken along
    let mut last: Option<(f64, Vec<Vec<f64>>)> = None;
    for it in 1..=settings.max_iter {
        iterations = it;
        let mut dir = engine.direction(&cur)?;
        for &k in &opts.frozen {
            dir[k].iter_mut().for_each(|x| *x = 0.0);
        }
        if dir.iter().flatten().all(|x| x.abs() < 1e-300) {
            converged = true;
            break;
        }
        if let Some((step, prev)) = last.take() {
            eps = match settings.step_rule {
                StepRule::Doubling => step * settings.step_growth,
                StepRule::BarzilaiBorwein => {
                    let (mut ss, mut sy) = (0.0, 0.0);
                    for (d, p) in dir.iter().flatten().zip(prev.iter().flatten()) {
                        ss += step * p * step * p;
                        sy += step * p * (d - p);
                    }
                    if sy < 0.0 && ss > 0.0 {
                        // curvature along the step sets the scale
                        limited = true;
                        (ss / -sy).clamp(1e-6 * settings.step_size, step * settings.step_growth)
                    } else {
                        step * settings.step_growth
                    }
                }
            };
        }
        let mut accepted = None;
        for _ in 0..=settings.max_halvings {
            match engine.point(step_phases(&cur.phases, &dir, eps), Some(&cur)) {
                Ok(p) if p.value >= cur.value => {
                    accepted = Some(p);
                    break;
                }
                Ok(_) | Err(Error::Convergence { .. }) => {
                    eps *= 0.5;
                    limited = true;
                }
                Err(e) => return Err(e),
            }
        }
        let Some(next) = accepted else {
            // no ascent at the finest step: stationary to working precision
            converged = true;
            break;
        };
        let residual = composite_residual(&cur, &next);
        cur = next;
        if cur.value > best.value {
            best = cur.clone();
        }
        trace.push(TraceRow { iteration: it, objective: cur.value, residual, step: eps });
        if limited && residual < settings.tolerance {
            converged = true;
            break;
        }
        last = Some((eps, dir));
    }
    log::debug!("full ascent: {iterations} iterations, objective {}", best.value);
    Ok(into_result(best, trace, iterations, converged))
}

/// Rank-one surrogates `S_r ≈ a v v^H`, `S_t ≈ b u u^H` of the RIS correlations.
#[derive(Debug, Clone)]
pub struct RankOneSpectra {
    /// per k
    pub v: Vec<Vec<c64>>,
    /// [k][m]
    pub u: Vec<Vec<Vec<c64>>>,
    /// a·b per (k, m)
    pub scale: Vec<Vec<f64>>,
    /// q_r − q_t per (k, m) when built from wave vectors
    pub delta_q: Option<Vec<Vec<Vec3>>>,
    pub form: SurrogateForm,
}

/// How the per-transmitter rank-one gains enter the surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SurrogateForm {
    /// Σ_m log(1 + t_1 r_2m s_m |κ_m|²)
    #[default]
    PerTransmitter,
    /// log(1 + t_1 Σ_m r_2m s_m |κ_m|²), the exact rank-one limit of a shared surface channel
    Joint,
}

fn principal(s: &CMat) -> Result<(f64, Vec<c64>)> {
    let (vals, vecs) = linalg::herm_eig(s)?;
    let n = vals.len();
    let col = (0..s.nrows()).map(|i| vecs[(i, n - 1)]).collect();
    Ok((vals[n - 1], col))
}

impl RankOneSpectra {
    /// Principal eigenpairs of the finite-spread correlations.
    pub fn from_principal(cs: &CorrelationSet) -> Result<Self> {
        let mut v = Vec::new();
        let mut u = Vec::new();
        let mut scale = Vec::new();
        for k in 0..cs.k() {
            let (a, vk) = principal(&cs.s_r[k])?;
            let mut uk = Vec::new();
            let mut sk = Vec::new();
            for m in 0..cs.m() {
                let (b, um) = principal(&cs.s_t[k][m])?;
                uk.push(um);
                sk.push(a * b);
            }
            v.push(vk);
            u.push(uk);
            scale.push(sk);
        }
        Ok(Self { v, u, scale, delta_q: None, form: SurrogateForm::default() })
    }

    /// Plane-wave limit: `v_n = e^{i q_r·x_n}/√Ns`, `u_mn = e^{i q_tm·x_n}/√Ns`, scale Ns².
    pub fn from_plane_waves(geometry: &ArrayGeometry, q_t: &[Vec<Vec3>], q_r: &[Vec3]) -> Result<Self> {
        if q_t.len() != q_r.len() {
            return Err(Error::Dimension("one receive wave vector per surface".into()));
        }
        let ns = geometry.len();
        let norm = 1.0 / (ns as f64).sqrt();
        let wave = |q: &Vec3| -> Vec<c64> {
            geometry
                .positions
                .iter()
                .map(|x| c64::cis(q[0] * x[0] + q[1] * x[1] + q[2] * x[2]) * norm)
                .collect()
        };
        let v = q_r.iter().map(wave).collect();
        let u = q_t.iter().map(|row| row.iter().map(wave).collect()).collect();
        let scale = q_t.iter().map(|row| vec![(ns * ns) as f64; row.len()]).collect();
        let delta_q = q_t
            .iter()
            .zip(q_r)
            .map(|(row, r)| row.iter().map(|t| [r[0] - t[0], r[1] - t[1], r[2] - t[2]]).collect())
            .collect();
        Ok(Self { v, u, scale, delta_q: Some(delta_q), form: SurrogateForm::default() })
    }

    pub fn with_form(mut self, form: SurrogateForm) -> Self {
        self.form = form;
        self
    }

    fn check(&self, k: usize, m: usize, ns: usize) -> Result<()> {
        let ok = self.v.len() == k
            && self.u.len() == k
            && self.v.iter().all(|v| v.len() == ns)
            && self.u.iter().all(|r| r.len() == m && r.iter().all(|u| u.len() == ns))
            && self.scale.iter().all(|r| r.len() == m);
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension(format!("rank-one spectra must cover {k} surfaces, {m} transmitters, {ns} elements")))
        }
    }

    /// κ_km = v_k^H Φ_k u_km.
    pub fn kappa(&self, phases: &PhaseConfig, k: usize, m: usize) -> c64 {
        let v = &self.v[k];
        let u = &self.u[k][m];
        phases.phases[k]
            .iter()
            .enumerate()
            .map(|(n, &p)| v[n].conj() * c64::cis(p) * u[n])
            .sum()
    }
}

/// Surrogate weights (t_1k, r_2km) of one objective term.
struct SurrogateTerm {
    weight: f64,
    subset: Vec<usize>,
    t1: Vec<f64>,
    r2: Vec<Vec<f64>>,
}

struct Surrogate<'a> {
    spectra: &'a RankOneSpectra,
    coupling: SurrogateForm,
    terms: Vec<SurrogateTerm>,
}

impl Surrogate<'_> {
    fn value(&self, phases: &PhaseConfig) -> f64 {
        let k = self.spectra.v.len();
        let mut d = 0.0;
        for t in &self.terms {
            for kk in 0..k {
                let gains: Vec<f64> = t
                    .subset
                    .iter()
                    .map(|&m| t.t1[kk] * t.r2[kk][m] * self.spectra.scale[kk][m] * self.spectra.kappa(phases, kk, m).norm_sqr())
                    .collect();
                d += t.weight
                    * match self.coupling {
                        SurrogateForm::Joint => (1.0 + gains.iter().sum::<f64>()).ln(),
                        SurrogateForm::PerTransmitter => gains.iter().map(|g| (1.0 + g).ln()).sum(),
                    };
            }
        }
        d
    }

    fn gradient(&self, phases: &PhaseConfig) -> Vec<Vec<f64>> {
        let k = self.spectra.v.len();
        let mut grad: Vec<Vec<f64>> = phases.phases.iter().map(|p| vec![0.0; p.len()]).collect();
        for t in &self.terms {
            for kk in 0..k {
                let kap: Vec<c64> = t.subset.iter().map(|&m| self.spectra.kappa(phases, kk, m)).collect();
                let coef: Vec<f64> = t.subset.iter().map(|&m| t.t1[kk] * t.r2[kk][m] * self.spectra.scale[kk][m]).collect();
                let total: f64 = coef.iter().zip(&kap).map(|(c, x)| c * x.norm_sqr()).sum();
                let v = &self.spectra.v[kk];
                for (j, &m) in t.subset.iter().enumerate() {
                    let denom = match self.coupling {
                        SurrogateForm::Joint => 1.0 + total,
                        SurrogateForm::PerTransmitter => 1.0 + coef[j] * kap[j].norm_sqr(),
                    };
                    let f = t.weight * coef[j] / denom;
                    if f == 0.0 {
                        continue;
                    }
                    let u = &self.spectra.u[kk][m];
                    for (n, g) in grad[kk].iter_mut().enumerate() {
                        // ∂|κ|²/∂φ_n = 2 Im(κ v_n conj(u_n) e^{-iφ_n})
                        let z = kap[j] * v[n] * u[n].conj() * c64::cis(-phases.phases[kk][n]);
                        *g += f * 2.0 * z.im;
                    }
                }
            }
        }
        grad
    }
}

/// Monotone ascent on the surrogate with fixed (t_1, r_2).
fn surrogate_ascent(
    s: &Surrogate,
    start: &PhaseConfig,
    settings: &OptimizerSettings,
    frozen: &[usize],
) -> Result<PhaseConfig> {
    let mut cur = start.clone();
    let mut val = s.value(&cur);
    let mut eps = settings.step_size;
    // a small step only means convergence once ε has been limited by curvature;
    // near a saddle such as Φ = I the first steps are tiny
    let mut limited = false;
    for _ in 0..settings.inner_max_iter {
        let mut g = s.gradient(&cur);
        for &k in frozen {
            g[k].iter_mut().for_each(|x| *x = 0.0);
        }
        if g.iter().flatten().all(|x| x.abs() < 1e-300) {
            break;
        }
        let mut next = None;
        for _ in 0..=settings.max_halvings {
            let trial = step_phases(&cur, &g, eps);
            let tv = s.value(&trial);
            if !tv.is_finite() {
                return Err(Error::StepSize("surrogate objective is not finite; reduce the step size".into()));
            }
            if tv >= val {
                next = Some((trial, tv));
                break;
            }
            eps *= 0.5;
            limited = true;
        }
        let Some((trial, tv)) = next else { break };
        let change = rms_phase_change(&cur, &trial);
        cur = trial;
        val = tv;
        if limited && change < 1e-2 * settings.tolerance {
            break;
        }
        eps *= settings.step_growth;
    }
    Ok(cur)
}

/// Rank-one surrogate ascent alternated with fixed-point refreshes.
pub fn optimize_semi(
    cs: &CorrelationSet,
    q: &[CMat],
    subset: &[usize],
    settings: &OptimizerSettings,
    spectra: &RankOneSpectra,
) -> Result<OptimizeResult> {
    optimize_semi_with(cs, q, &Objective::sum(subset), settings, spectra, &OptimizeOptions::default())
}

pub fn optimize_semi_with(
    cs: &CorrelationSet,
    q: &[CMat],
    obj: &Objective,
    settings: &OptimizerSettings,
    spectra: &RankOneSpectra,
    opts: &OptimizeOptions,
) -> Result<OptimizeResult> {
    settings.validate()?;
    spectra.check(cs.k(), cs.m(), cs.ns)?;
    let engine = Engine::new(cs, q, obj, &opts.fixed_point)?;
    let mut cur = engine.point(initial_phases(cs, opts)?, None)?;
    let mut best = cur.clone();
    let mut trace = vec![TraceRow { iteration: 0, objective: cur.value, residual: f64::NAN, step: settings.step_size }];
    let mut converged = false;
    let mut rounds = 0;
    for round in 1..=settings.outer_rounds {
        rounds = round;
        let sur = Surrogate {
            spectra,
            coupling: spectra.form,
            terms: obj
                .terms
                .iter()
                .zip(&cur.sols)
                .map(|((w, s), sol)| SurrogateTerm {
                    weight: *w,
                    subset: s.clone(),
                    t1: sol.state.t_1.clone(),
                    r2: sol.state.r_2.clone(),
                })
                .collect(),
        };
        let phases = surrogate_ascent(&sur, &cur.phases, settings, &opts.frozen)?;
        let next = engine.point(phases, Some(&cur))?;
        let residual = composite_residual(&cur, &next);
        cur = next;
        if cur.value > best.value {
            best = cur.clone();
        }
        trace.push(TraceRow { iteration: round, objective: cur.value, residual, step: settings.step_size });
        if residual < settings.tolerance {
            converged = true;
            break;
        }
    }
    Ok(into_result(best, trace, rounds, converged))
}

/// Dispatches on `settings.mode`; semi mode uses the principal-eigenvector surrogate.
pub fn optimize(
    cs: &CorrelationSet,
    q: &[CMat],
    obj: &Objective,
    settings: &OptimizerSettings,
    opts: &OptimizeOptions,
) -> Result<OptimizeResult> {
    match settings.mode {
        Mode::Full => optimize_full_with(cs, q, obj, settings, opts),
        Mode::Semi => optimize_semi_with(cs, q, obj, settings, &RankOneSpectra::from_principal(cs)?, opts),
    }
}

/// Phases maximizing the priority-weighted objective for a non-increasing `mu`.
pub fn weighted_objective_phases(
    cs: &CorrelationSet,
    q: &[CMat],
    mu: &[f64],
    settings: &OptimizerSettings,
) -> Result<OptimizeResult> {
    if mu.len() != cs.m() {
        return Err(Error::Dimension(format!("priority vector needs {} entries", cs.m())));
    }
    optimize(cs, q, &Objective::weighted(mu)?, settings, &OptimizeOptions::default())
}

/// Surrogate value Σ_ℓ w_ℓ D_ℓ of the rank-one model, each term with its own fixed point.
pub fn surrogate_objective(
    cs: &CorrelationSet,
    q: &[CMat],
    obj: &Objective,
    phases: &PhaseConfig,
    spectra: &RankOneSpectra,
    fp: &FixedPointSettings,
) -> Result<f64> {
    spectra.check(cs.k(), cs.m(), cs.ns)?;
    let engine = Engine::new(cs, q, obj, fp)?;
    let p = engine.point(phases.clone(), None)?;
    let sur = Surrogate {
        spectra,
        coupling: spectra.form,
        terms: obj
            .terms
            .iter()
            .zip(&p.sols)
            .map(|((w, s), sol)| SurrogateTerm {
                weight: *w,
                subset: s.clone(),
                t1: sol.state.t_1.clone(),
                r2: sol.state.r_2.clone(),
            })
            .collect(),
    };
    Ok(sur.value(phases))
}

/// Weighted deterministic-equivalent objective at fixed phases.
pub fn objective_value(
    cs: &CorrelationSet,
    q: &[CMat],
    obj: &Objective,
    phases: &PhaseConfig,
    fp: &FixedPointSettings,
) -> Result<f64> {
    Ok(Engine::new(cs, q, obj, fp)?.point(phases.clone(), None)?.value)
}

fn nearest(phi: f64, book: &[f64]) -> f64 {
    let tau = 2.0 * PI;
    let x = phi.rem_euclid(tau);
    let mut best = book[0];
    let mut best_d = f64::INFINITY;
    for &c in book {
        let d = (x - c).abs();
        let d = d.min(tau - d);
        // earlier (smaller) angles win ties
        if d < best_d - 1e-12 {
            best = c;
            best_d = d;
        }
    }
    best
}

/// Projects every phase onto the nearest codebook angle.
pub fn quantize_phases(config: &PhaseConfig, level: Quantization) -> PhaseConfig {
    match level.codebook() {
        None => config.clone(),
        Some(book) => PhaseConfig {
            phases: config
                .phases
                .iter()
                .map(|v| v.iter().map(|&p| nearest(p, &book)).collect())
                .collect(),
        },
    }
}

/// Quantizes after a per-surface common rotation, picking the rotation with the best objective.
///
/// The continuous optimum is only defined up to a global phase per surface, so the rotation is free.
pub fn quantize_best_rotation(
    cs: &CorrelationSet,
    q: &[CMat],
    obj: &Objective,
    config: &PhaseConfig,
    level: Quantization,
    n_offsets: usize,
    fp: &FixedPointSettings,
) -> Result<(PhaseConfig, f64)> {
    let engine = Engine::new(cs, q, obj, fp)?;
    let book = match level.codebook() {
        Some(b) if cs.k() > 0 => b,
        _ => {
            let qz = quantize_phases(config, level);
            let v = engine.point(qz.clone(), None)?.value;
            return Ok((qz, v));
        }
    };
    let sector = 2.0 * PI / book.len() as f64;
    let n = n_offsets.max(1);
    let mut best: Option<(PhaseConfig, f64)> = None;
    let mut current = config.clone();
    // coordinate search over the surfaces' rotations
    for k in 0..cs.k() {
        for j in 0..n {
            let theta = sector * j as f64 / n as f64;
            let mut trial = current.clone();
            trial.phases[k] = config.phases[k].iter().map(|p| p + theta).collect();
            let qz = quantize_phases(&trial, level);
            let v = engine.point(qz.clone(), None)?.value;
            if best.as_ref().is_none_or(|b| v > b.1) {
                best = Some((qz, v));
                current = trial;
            }
        }
    }
    Ok(best.expect("at least one offset"))
}

/// Per-antenna MI C(S) of every listed subset at fixed phases.
pub fn subset_mis(
    cs: &CorrelationSet,
    q: &[CMat],
    subsets: &[Vec<usize>],
    phases: &PhaseConfig,
    fp: &FixedPointSettings,
) -> Result<Vec<f64>> {
    let obj = Objective { terms: subsets.iter().map(|s| (1.0, s.clone())).collect() };
    let p = Engine::new(cs, q, &obj, fp)?.point(phases.clone(), None)?;
    Ok(p.sols.iter().map(|s| s.c).collect())
}
