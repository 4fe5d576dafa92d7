//! Deterministic equivalent of the ergodic sum mutual information.
//!
//! The asymptotic functional is a saddle point of
//!
//! ```text
//! F = (1/Nt) [ log det R̄ + Σ_g log det(I + t_1g Γ_g) + Σ_m log det T̄_m ]
//!     - Σ_m r_dm t_dm - Σ_g r_1g t_1g - Σ_km r_2km t_2km
//! ```
//!
//! where a *group* `g` collects the transmitters that share one RIS-to-RX
//! channel. With [`Coupling::Shared`] there is one group per surface and
//! `Γ_g = Σ_m r_2km Γ_km`; with [`Coupling::PerTransmitter`] every (k, m) pair
//! is its own group. `Γ_km = P_km P_km^H` with `P_km = F_rk^H Φ_k F_tkm` and
//! `S = F F^H` low-rank factors, so `Γ_km` has the nonzero spectrum of
//! `Σ_km = S_tkm^{1/2} Φ_k^H S_rk Φ_k S_tkm^{1/2}`.
//!
//! The direct-link gain enters as `sqrt(γ_dm)` on both `R_dm` and `T_dm`.

use faer::{c64, Mat};
use serde::{Deserialize, Serialize};

use crate::correlation::{CorrelationSet, Coupling};
use crate::error::{Error, Result};
use crate::linalg::{self, CMat};
use crate::phases::PhaseConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedPointSettings {
    /// relative residual target
    pub tol: f64,
    pub max_iter: usize,
    /// Picard damping
    pub alpha: f64,
    /// switch to Newton steps on the saddle-point gradient once the residual is below `newton_from`
    pub newton: bool,
    pub newton_from: f64,
    /// eigenvalues below `factor_tol * max` are dropped from the correlation factors
    pub factor_tol: f64,
}

impl Default for FixedPointSettings {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 10_000,
            alpha: 0.5,
            newton: true,
            newton_from: 1e-1,
            factor_tol: 1e-12,
        }
    }
}

impl FixedPointSettings {
    pub fn picard_only() -> Self {
        Self { newton: false, ..Self::default() }
    }
}

/// Scalar parameters of the fixed-point system; `[k][m]` indexing for the RIS families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointState {
    pub t_d: Vec<f64>,
    pub r_d: Vec<f64>,
    pub t_1: Vec<f64>,
    pub r_1: Vec<Vec<f64>>,
    pub t_2: Vec<Vec<f64>>,
    pub r_2: Vec<Vec<f64>>,
}

impl FixedPointState {
    pub fn zeros(m: usize, k: usize) -> Self {
        Self {
            t_d: vec![0.0; m],
            r_d: vec![0.0; m],
            t_1: vec![0.0; k],
            r_1: vec![vec![0.0; m]; k],
            t_2: vec![vec![0.0; m]; k],
            r_2: vec![vec![0.0; m]; k],
        }
    }

    pub fn filled(m: usize, k: usize, v: f64) -> Self {
        Self {
            t_d: vec![v; m],
            r_d: vec![v; m],
            t_1: vec![v; k],
            r_1: vec![vec![v; m]; k],
            t_2: vec![vec![v; m]; k],
            r_2: vec![vec![v; m]; k],
        }
    }

    pub fn values(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend(&self.t_d);
        v.extend(&self.r_d);
        v.extend(&self.t_1);
        for fam in [&self.r_1, &self.t_2, &self.r_2] {
            for row in fam {
                v.extend(row);
            }
        }
        v
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_valid(&self) -> bool {
        self.values().iter().all(|x| x.is_finite() && *x >= 0.0)
    }
}

/// A converged solve with diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct Solution {
    pub state: FixedPointState,
    /// per TX antenna, nats
    pub c: f64,
    pub iterations: usize,
    pub residual: f64,
    /// relative residual after every iteration
    #[serde(skip)]
    pub trace: Vec<f64>,
}

/// Low-rank factor `F` of a correlation matrix, `S = F F^H`.
#[derive(Debug, Clone)]
pub enum Factor {
    Identity(usize),
    Dense(CMat),
}

impl Factor {
    pub fn new(s: &CMat, tol: f64) -> Result<Self> {
        if linalg::is_identity(s) {
            Ok(Factor::Identity(s.nrows()))
        } else {
            Ok(Factor::Dense(linalg::psd_factor(s, tol)?))
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            Factor::Identity(n) => *n,
            Factor::Dense(f) => f.ncols(),
        }
    }

    /// F^H diag(d): rank x n.
    fn adjoint_times_diag(&self, d: &[c64]) -> CMat {
        match self {
            Factor::Identity(_) => linalg::diag(d),
            Factor::Dense(f) => CMat::from_fn(f.ncols(), f.nrows(), |i, j| f[(j, i)].conj() * d[j]),
        }
    }

    /// Z F for a matrix Z with as many columns as F has rows.
    fn right_apply(&self, z: &CMat) -> CMat {
        match self {
            Factor::Identity(_) => z.clone(),
            Factor::Dense(f) => z * f,
        }
    }

    /// Dense copy of F.
    pub fn dense(&self) -> CMat {
        match self {
            Factor::Identity(n) => linalg::identity(*n),
            Factor::Dense(f) => f.clone(),
        }
    }

    /// Squared column norms, the eigenvalues kept in the factor.
    fn column_energy(&self) -> Vec<f64> {
        match self {
            Factor::Identity(n) => vec![1.0; *n],
            Factor::Dense(f) => (0..f.ncols())
                .map(|j| (0..f.nrows()).map(|i| f[(i, j)].norm_sqr()).sum())
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Group {
    pub k: usize,
    pub members: Vec<usize>,
}

/// Gram matrix `Γ_km` in the factor basis of `S_rk`.
#[derive(Debug, Clone)]
pub enum Gram {
    /// diagonal entries, for a white transmit side
    Diagonal(Vec<f64>),
    Dense(CMat),
}

impl Gram {
    pub fn dim(&self) -> usize {
        match self {
            Gram::Diagonal(d) => d.len(),
            Gram::Dense(g) => g.nrows(),
        }
    }

    pub fn to_dense(&self) -> CMat {
        match self {
            Gram::Diagonal(d) => linalg::real_diag(d),
            Gram::Dense(g) => g.clone(),
        }
    }
}

/// All `Γ_km` of one phase configuration, `[k][m]`; `None` for inactive transmitters.
#[derive(Debug, Clone)]
pub struct Grams {
    pub gram: Vec<Vec<Option<Gram>>>,
}

/// Results of evaluating one group at (t_1, r_2).
#[derive(Debug, Clone)]
struct GroupEval {
    logdet: f64,
    /// Tr(W Γ_m) / Nt per member
    tau: Vec<f64>,
    hess: Option<GroupHess>,
    w: Option<Weight>,
}

#[derive(Debug, Clone)]
struct GroupHess {
    /// Tr(W Γ W Γ)
    tt: f64,
    /// Tr(W² Γ_m)
    tr: Vec<f64>,
    /// Tr(W Γ_m W Γ_m')
    rr: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
enum Weight {
    Diagonal,
    Dense(CMat),
}

fn eval_group(members: &[&Gram], t1: f64, r2: &[f64], nt: f64, want_hess: bool, want_w: bool) -> Result<GroupEval> {
    {
        let diag: Option<Vec<&Vec<f64>>> = members
            .iter()
            .map(|g| match g {
                Gram::Diagonal(d) => Some(d),
                Gram::Dense(_) => None,
            })
            .collect();
        match diag {
            Some(g) => {
                let n = g[0].len();
                let mut w = vec![0.0; n];
                let mut logdet = 0.0;
                for i in 0..n {
                    let a = 1.0 + t1 * g.iter().zip(r2).map(|(gm, r)| r * gm[i]).sum::<f64>();
                    logdet += a.ln();
                    w[i] = 1.0 / a;
                }
                let tau = g
                    .iter()
                    .map(|gm| gm.iter().zip(&w).map(|(x, y)| x * y).sum::<f64>() / nt)
                    .collect();
                let hess = want_hess.then(|| {
                    let rr: Vec<Vec<f64>> = g
                        .iter()
                        .map(|ga| {
                            g.iter()
                                .map(|gb| (0..n).map(|i| w[i] * w[i] * ga[i] * gb[i]).sum())
                                .collect()
                        })
                        .collect();
                    let tr = g.iter().map(|ga| (0..n).map(|i| w[i] * w[i] * ga[i]).sum()).collect();
                    let tt = quad_form(&rr, r2);
                    GroupHess { tt, tr, rr }
                });
                Ok(GroupEval { logdet, tau, hess, w: want_w.then_some(Weight::Diagonal) })
            }
            None => {
                let owned: Vec<CMat> = members.iter().map(|g| g.to_dense()).collect();
                let g = &owned;
                let n = g[0].nrows();
                let mut a = linalg::identity(n);
                for (gm, r) in g.iter().zip(r2) {
                    linalg::axpy(&mut a, t1 * r, gm);
                }
                let (w, logdet) = linalg::inv_logdet_hpd(&a)?;
                let tau = g.iter().map(|gm| linalg::trace_prod_re(&w, gm) / nt).collect();
                let hess = if want_hess {
                    let x: Vec<CMat> = g.iter().map(|gm| &w * gm).collect();
                    let rr: Vec<Vec<f64>> = x
                        .iter()
                        .map(|xa| x.iter().map(|xb| linalg::trace_prod_re(xa, xb)).collect())
                        .collect();
                    let tr = x.iter().map(|xa| linalg::trace_prod_re(&w, xa)).collect();
                    let tt = quad_form(&rr, r2);
                    Some(GroupHess { tt, tr, rr })
                } else {
                    None
                };
                Ok(GroupEval { logdet, tau, hess, w: want_w.then_some(Weight::Dense(w)) })
            }
        }
    }
}

fn quad_form(a: &[Vec<f64>], x: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..x.len() {
        for j in 0..x.len() {
            s += x[i] * a[i][j] * x[j];
        }
    }
    s
}

/// Optimization variables: the fixed-point state with `t_1`, `r_1` per group.
#[derive(Debug, Clone, PartialEq)]
pub struct Vars {
    pub t_d: Vec<f64>,
    pub t_1: Vec<f64>,
    pub t_2: Vec<Vec<f64>>,
    pub r_d: Vec<f64>,
    pub r_1: Vec<f64>,
    pub r_2: Vec<Vec<f64>>,
}

/// Everything computed in one evaluation of the saddle-point functional.
#[derive(Debug, Clone)]
pub struct Eval {
    pub value: f64,
    /// Picard images of every variable
    pub image: Vars,
    groups: Vec<GroupEval>,
    pub hessian: Option<Mat<f64>>,
}

/// Fixed-point problem with all factorizations cached; phases enter through [`Grams`].
#[derive(Debug, Clone)]
pub struct DeModel {
    pub nt: usize,
    pub nr: usize,
    pub ns: usize,
    pub m: usize,
    pub k: usize,
    pub coupling: Coupling,
    pub active: Vec<usize>,
    pub groups: Vec<Group>,
    /// sqrt(γ) R_dm
    rd: Vec<CMat>,
    rk: Vec<CMat>,
    /// Q^{1/2} sqrt(γ) T_dm Q^{1/2}
    ad: Vec<CMat>,
    /// Q^{1/2} T_km Q^{1/2}, [k][m]
    akm: Vec<Vec<CMat>>,
    pub f_r: Vec<Factor>,
    pub f_t: Vec<Vec<Factor>>,
    /// transmit-side RIS correlations, kept for phase gradients
    s_t: Vec<Vec<CMat>>,
    pub settings: FixedPointSettings,
}

impl DeModel {
    pub fn new(cs: &CorrelationSet, q: &[CMat], subset: &[usize], settings: &FixedPointSettings) -> Result<Self> {
        let (m, k, nt) = (cs.m(), cs.k(), cs.nt);
        if q.len() != m || q.iter().any(|x| x.nrows() != nt || x.ncols() != nt) {
            return Err(Error::Dimension(format!("need {m} input covariances of size {nt}x{nt}")));
        }
        let mut active: Vec<usize> = subset.to_vec();
        active.sort_unstable();
        active.dedup();
        if active.is_empty() {
            return Err(Error::InvalidParameter("active subset is empty".into()));
        }
        if active.iter().any(|&a| a >= m) {
            return Err(Error::Dimension("subset index out of range".into()));
        }
        let qh: Vec<CMat> = q.iter().map(linalg::psd_sqrt).collect::<Result<_>>()?;
        let sandwich = |i: usize, t: &CMat, s: f64| linalg::hermitize(&linalg::scale(&(&(&qh[i] * t) * &qh[i]), s));
        let rd = (0..m).map(|i| linalg::scale(&cs.r_d[i], cs.gamma_d[i].sqrt())).collect();
        let ad = (0..m).map(|i| sandwich(i, &cs.t_d[i], cs.gamma_d[i].sqrt())).collect();
        let akm = (0..k)
            .map(|kk| (0..m).map(|i| sandwich(i, &cs.t_km[kk][i], 1.0)).collect())
            .collect();
        let f_r = cs.s_r.iter().map(|s| Factor::new(s, settings.factor_tol)).collect::<Result<_>>()?;
        let mut f_t = Vec::with_capacity(k);
        for kk in 0..k {
            let mut row = Vec::with_capacity(m);
            for i in 0..m {
                // repeated spectra reuse one factorization
                let prev = (0..i).find(|&j| linalg::frobenius(&(&cs.s_t[kk][i] - &cs.s_t[kk][j])) == 0.0);
                row.push(match prev {
                    Some(j) => {
                        let f: &Factor = &row[j];
                        f.clone()
                    }
                    None => Factor::new(&cs.s_t[kk][i], settings.factor_tol)?,
                });
            }
            f_t.push(row);
        }
        let groups = make_groups(cs.coupling, k, &active);
        Ok(Self {
            nt,
            nr: cs.nr,
            ns: cs.ns,
            m,
            k,
            coupling: cs.coupling,
            active,
            groups,
            rd,
            rk: cs.r_k.clone(),
            ad,
            akm,
            f_r,
            f_t,
            s_t: cs.s_t.clone(),
            settings: *settings,
        })
    }

    /// Same correlations and factorizations, different active set.
    pub fn restricted(&self, subset: &[usize]) -> Result<Self> {
        let mut active: Vec<usize> = subset.to_vec();
        active.sort_unstable();
        active.dedup();
        if active.is_empty() {
            return Err(Error::InvalidParameter("active subset is empty".into()));
        }
        if active.iter().any(|&a| a >= self.m) {
            return Err(Error::Dimension("subset index out of range".into()));
        }
        let mut out = self.clone();
        out.groups = make_groups(self.coupling, self.k, &active);
        out.active = active;
        Ok(out)
    }

    /// Gram matrices `Γ_km` for a phase configuration.
    pub fn grams(&self, phases: &PhaseConfig) -> Result<Grams> {
        phases.check_dims(self.k, self.ns)?;
        let mut gram = vec![vec![None; self.m]; self.k];
        for kk in 0..self.k {
            let white = self.active.iter().all(|&i| matches!(self.f_t[kk][i], Factor::Identity(_)));
            if white {
                // F_r^H Φ Φ^H F_r = diag of the kept eigenvalues
                let e = self.f_r[kk].column_energy();
                for &i in &self.active {
                    gram[kk][i] = Some(Gram::Diagonal(e.clone()));
                }
            } else {
                let z = self.f_r[kk].adjoint_times_diag(&phases.coefficients(kk));
                for &i in &self.active {
                    let pm = self.f_t[kk][i].right_apply(&z);
                    gram[kk][i] = Some(Gram::Dense(linalg::hermitize(&(&pm * pm.adjoint()))));
                }
            }
        }
        Ok(Grams { gram })
    }

    fn group_eval(&self, grams: &Grams, gi: usize, t1: f64, r2: &[f64], want_hess: bool, want_w: bool) -> Result<GroupEval> {
        let g = &self.groups[gi];
        let members: Vec<&Gram> = g
            .members
            .iter()
            .map(|&i| {
                grams.gram[g.k][i]
                    .as_ref()
                    .ok_or_else(|| Error::Dimension(format!("no gram for transmitter {i} at surface {}", g.k)))
            })
            .collect::<Result<_>>()?;
        eval_group(&members, t1, r2, self.nt as f64, want_hess, want_w)
    }

    fn n_t_vars(&self) -> usize {
        self.active.len() + self.groups.len() + self.k * self.active.len()
    }

    /// Dimension of the Hessian (the Λ matrix).
    pub fn dim(&self) -> usize {
        2 * self.n_t_vars()
    }

    pub fn zero_vars(&self) -> Vars {
        Vars {
            t_d: vec![0.0; self.m],
            t_1: vec![0.0; self.groups.len()],
            t_2: vec![vec![0.0; self.m]; self.k],
            r_d: vec![0.0; self.m],
            r_1: vec![0.0; self.groups.len()],
            r_2: vec![vec![0.0; self.m]; self.k],
        }
    }

    /// Restricts a state to this model's active set and grouping.
    pub fn vars_from_state(&self, s: &FixedPointState) -> Vars {
        let mut v = self.zero_vars();
        for &i in &self.active {
            v.t_d[i] = s.t_d[i];
            v.r_d[i] = s.r_d[i];
            for kk in 0..self.k {
                v.t_2[kk][i] = s.t_2[kk][i];
                v.r_2[kk][i] = s.r_2[kk][i];
            }
        }
        for (gi, g) in self.groups.iter().enumerate() {
            v.t_1[gi] = s.t_1[g.k];
            v.r_1[gi] = g.members.iter().map(|&i| s.r_1[g.k][i]).sum();
        }
        v
    }

    fn state_from(&self, v: &Vars, e: &Eval) -> FixedPointState {
        let mut s = FixedPointState::zeros(self.m, self.k);
        for &i in &self.active {
            s.t_d[i] = v.t_d[i];
            s.r_d[i] = v.r_d[i];
            for kk in 0..self.k {
                s.t_2[kk][i] = v.t_2[kk][i];
                s.r_2[kk][i] = v.r_2[kk][i];
            }
        }
        for kk in 0..self.k {
            // t_1k is the R-side trace, identical across the groups of a surface at the fixed point
            let gs: Vec<usize> = (0..self.groups.len()).filter(|&g| self.groups[g].k == kk).collect();
            s.t_1[kk] = if gs.is_empty() { e.image.t_1.first().copied().unwrap_or(0.0) } else {
                gs.iter().map(|&g| v.t_1[g]).sum::<f64>() / gs.len() as f64
            };
        }
        for (gi, g) in self.groups.iter().enumerate() {
            for (j, &i) in g.members.iter().enumerate() {
                s.r_1[g.k][i] = v.r_2[g.k][i] * e.groups[gi].tau[j];
            }
        }
        s
    }

    /// Evaluates the functional, its Picard images and optionally its Hessian.
    pub fn eval(&self, grams: &Grams, v: &Vars, want_hess: bool) -> Result<Eval> {
        self.eval_inner(grams, v, want_hess, false)
    }

    fn eval_inner(&self, grams: &Grams, v: &Vars, want_hess: bool, want_w: bool) -> Result<Eval> {
        let nt = self.nt as f64;
        let (rinv, ld_r) = self.r_side(v)?;
        let mut image = self.zero_vars();
        for &i in &self.active {
            image.t_d[i] = linalg::trace_prod_re(&rinv, &self.rd[i]) / nt;
        }
        for (gi, g) in self.groups.iter().enumerate() {
            image.t_1[gi] = linalg::trace_prod_re(&rinv, &self.rk[g.k]) / nt;
        }
        let mut ld_t = 0.0;
        let mut tinvs = Vec::new();
        for &i in &self.active {
            let (tinv, ld) = self.t_side(v, i)?;
            ld_t += ld;
            image.r_d[i] = linalg::trace_prod_re(&tinv, &self.ad[i]) / nt;
            for kk in 0..self.k {
                image.r_2[kk][i] = linalg::trace_prod_re(&tinv, &self.akm[kk][i]) / nt;
            }
            tinvs.push(tinv);
        }
        let mut geval = Vec::with_capacity(self.groups.len());
        let mut ld_g = 0.0;
        for (gi, g) in self.groups.iter().enumerate() {
            let r2: Vec<f64> = g.members.iter().map(|&i| v.r_2[g.k][i]).collect();
            let ge = self.group_eval(grams, gi, v.t_1[gi], &r2, want_hess, want_w)?;
            ld_g += ge.logdet;
            image.r_1[gi] = r2.iter().zip(&ge.tau).map(|(r, t)| r * t).sum();
            for (j, &i) in g.members.iter().enumerate() {
                image.t_2[g.k][i] = v.t_1[gi] * ge.tau[j];
            }
            geval.push(ge);
        }
        let mut value = (ld_r + ld_g + ld_t) / nt;
        for &i in &self.active {
            value -= v.r_d[i] * v.t_d[i];
            for kk in 0..self.k {
                value -= v.r_2[kk][i] * v.t_2[kk][i];
            }
        }
        for gi in 0..self.groups.len() {
            value -= v.r_1[gi] * v.t_1[gi];
        }
        let hessian = if want_hess { Some(self.hessian(v, &rinv, &tinvs, &geval)) } else { None };
        Ok(Eval { value, image, groups: geval, hessian })
    }

    fn r_bar(&self, v: &Vars) -> CMat {
        let mut r = linalg::identity(self.nr);
        for &i in &self.active {
            linalg::axpy(&mut r, v.r_d[i], &self.rd[i]);
        }
        for (gi, g) in self.groups.iter().enumerate() {
            linalg::axpy(&mut r, v.r_1[gi], &self.rk[g.k]);
        }
        r
    }

    fn t_bar(&self, v: &Vars, i: usize) -> CMat {
        let mut t = linalg::identity(self.nt);
        linalg::axpy(&mut t, v.t_d[i], &self.ad[i]);
        for kk in 0..self.k {
            linalg::axpy(&mut t, v.t_2[kk][i], &self.akm[kk][i]);
        }
        t
    }

    fn r_side(&self, v: &Vars) -> Result<(CMat, f64)> {
        linalg::inv_logdet_hpd(&self.r_bar(v))
    }

    fn t_side(&self, v: &Vars, i: usize) -> Result<(CMat, f64)> {
        linalg::inv_logdet_hpd(&self.t_bar(v, i))
    }

    // variable layout: [t_d(act), t_1(g), t_2(k, act)] then the r's in the same order
    fn idx_td(&self, a: usize) -> usize {
        a
    }
    fn idx_t1(&self, g: usize) -> usize {
        self.active.len() + g
    }
    fn idx_t2(&self, kk: usize, a: usize) -> usize {
        self.active.len() + self.groups.len() + kk * self.active.len() + a
    }

    fn hessian(&self, v: &Vars, rinv: &CMat, tinvs: &[CMat], ge: &[GroupEval]) -> Mat<f64> {
        let nt = self.nt as f64;
        let half = self.n_t_vars();
        let mut h = Mat::<f64>::zeros(2 * half, 2 * half);
        // R-side: r_d and r_1
        let mut rvars: Vec<(usize, CMat)> = Vec::new();
        for (a, &i) in self.active.iter().enumerate() {
            rvars.push((half + self.idx_td(a), rinv * &self.rd[i]));
        }
        for (gi, g) in self.groups.iter().enumerate() {
            rvars.push((half + self.idx_t1(gi), rinv * &self.rk[g.k]));
        }
        for (ia, ya) in &rvars {
            for (ib, yb) in &rvars {
                h[(*ia, *ib)] = -linalg::trace_prod_re(ya, yb) / nt;
            }
        }
        // T-side: t_dm and t_2km couple within the same m
        for (a, &i) in self.active.iter().enumerate() {
            let tinv = &tinvs[a];
            let mut tv: Vec<(usize, CMat)> = vec![(self.idx_td(a), tinv * &self.ad[i])];
            for kk in 0..self.k {
                tv.push((self.idx_t2(kk, a), tinv * &self.akm[kk][i]));
            }
            for (ia, ya) in &tv {
                for (ib, yb) in &tv {
                    h[(*ia, *ib)] = -linalg::trace_prod_re(ya, yb) / nt;
                }
            }
        }
        // groups: t_1g with the r_2km of its members
        for (gi, g) in self.groups.iter().enumerate() {
            let gh = ge[gi].hess.as_ref().expect("hessian requested");
            let t1 = v.t_1[gi];
            let it1 = self.idx_t1(gi);
            h[(it1, it1)] = -gh.tt / nt;
            for (ja, &ia_m) in g.members.iter().enumerate() {
                let a = self.active.iter().position(|&x| x == ia_m).unwrap();
                let ir = half + self.idx_t2(g.k, a);
                h[(it1, ir)] = gh.tr[ja] / nt;
                h[(ir, it1)] = gh.tr[ja] / nt;
                for (jb, &ib_m) in g.members.iter().enumerate() {
                    let b = self.active.iter().position(|&x| x == ib_m).unwrap();
                    let jr = half + self.idx_t2(g.k, b);
                    h[(ir, jr)] = -t1 * t1 * gh.rr[ja][jb] / nt;
                }
            }
        }
        for p in 0..half {
            h[(p, half + p)] = -1.0;
            h[(half + p, p)] = -1.0;
        }
        h
    }

    fn flatten(&self, v: &Vars) -> Vec<f64> {
        let half = self.n_t_vars();
        let mut x = vec![0.0; 2 * half];
        for (a, &i) in self.active.iter().enumerate() {
            x[self.idx_td(a)] = v.t_d[i];
            x[half + self.idx_td(a)] = v.r_d[i];
            for kk in 0..self.k {
                x[self.idx_t2(kk, a)] = v.t_2[kk][i];
                x[half + self.idx_t2(kk, a)] = v.r_2[kk][i];
            }
        }
        for gi in 0..self.groups.len() {
            x[self.idx_t1(gi)] = v.t_1[gi];
            x[half + self.idx_t1(gi)] = v.r_1[gi];
        }
        x
    }

    fn unflatten(&self, x: &[f64]) -> Vars {
        let half = self.n_t_vars();
        let mut v = self.zero_vars();
        for (a, &i) in self.active.iter().enumerate() {
            v.t_d[i] = x[self.idx_td(a)];
            v.r_d[i] = x[half + self.idx_td(a)];
            for kk in 0..self.k {
                v.t_2[kk][i] = x[self.idx_t2(kk, a)];
                v.r_2[kk][i] = x[half + self.idx_t2(kk, a)];
            }
        }
        for gi in 0..self.groups.len() {
            v.t_1[gi] = x[self.idx_t1(gi)];
            v.r_1[gi] = x[half + self.idx_t1(gi)];
        }
        v
    }

    /// Relative Jacobi residual ||image - x||_inf / ||x||_inf.
    fn residual(&self, v: &Vars, e: &Eval) -> f64 {
        let x = self.flatten(v);
        let y = self.flatten(&e.image);
        rel_change(&x, &y)
    }

    /// One damped Gauss-Seidel sweep: R side, then T side, then the groups.
    pub fn picard_sweep(&self, grams: &Grams, v: &mut Vars, alpha: f64) -> Result<f64> {
        let nt = self.nt as f64;
        let before = self.flatten(v);
        let mut target = before.clone();
        let mix = |old: f64, new: f64| (1.0 - alpha) * old + alpha * new;
        let half = self.n_t_vars();
        let (rinv, _) = self.r_side(v)?;
        for (a, &i) in self.active.iter().enumerate() {
            let t = linalg::trace_prod_re(&rinv, &self.rd[i]) / nt;
            target[self.idx_td(a)] = t;
            v.t_d[i] = mix(v.t_d[i], t);
        }
        for (gi, g) in self.groups.iter().enumerate() {
            let t = linalg::trace_prod_re(&rinv, &self.rk[g.k]) / nt;
            target[self.idx_t1(gi)] = t;
            v.t_1[gi] = mix(v.t_1[gi], t);
        }
        for (a, &i) in self.active.iter().enumerate() {
            let (tinv, _) = self.t_side(v, i)?;
            let r = linalg::trace_prod_re(&tinv, &self.ad[i]) / nt;
            target[half + self.idx_td(a)] = r;
            v.r_d[i] = mix(v.r_d[i], r);
            for kk in 0..self.k {
                let r = linalg::trace_prod_re(&tinv, &self.akm[kk][i]) / nt;
                target[half + self.idx_t2(kk, a)] = r;
                v.r_2[kk][i] = mix(v.r_2[kk][i], r);
            }
        }
        for (gi, g) in self.groups.iter().enumerate() {
            let r2: Vec<f64> = g.members.iter().map(|&i| v.r_2[g.k][i]).collect();
            let ge = self.group_eval(grams, gi, v.t_1[gi], &r2, false, false)?;
            let r1: f64 = r2.iter().zip(&ge.tau).map(|(r, t)| r * t).sum();
            target[half + self.idx_t1(gi)] = r1;
            v.r_1[gi] = mix(v.r_1[gi], r1);
            for (j, &i) in g.members.iter().enumerate() {
                let a = self.active.iter().position(|&x| x == i).unwrap();
                let t2 = v.t_1[gi] * ge.tau[j];
                target[self.idx_t2(g.k, a)] = t2;
                v.t_2[g.k][i] = mix(v.t_2[g.k][i], t2);
            }
        }
        Ok(rel_change(&before, &target))
    }

    /// Solves the fixed point from the standard start (zeros, then one undamped sweep).
    pub fn solve(&self, grams: &Grams) -> Result<Solution> {
        let mut v = self.zero_vars();
        self.picard_sweep(grams, &mut v, 1.0)?;
        self.solve_from(grams, v)
    }

    /// Solves the fixed point from a given starting point.
    pub fn solve_from(&self, grams: &Grams, start: Vars) -> Result<Solution> {
        let st = &self.settings;
        let mut v = start;
        let mut alpha = st.alpha;
        let mut trace = Vec::new();
        let mut prev = f64::INFINITY;
        let mut best = f64::INFINITY;
        let mut stall = 0usize;
        let newton_ok = st.newton;
        let mut cooldown = 0usize;
        let mut it = 0;
        while it < st.max_iter {
            it += 1;
            if newton_ok && cooldown == 0 && prev < st.newton_from {
                let e = self.eval(grams, &v, true)?;
                let res = self.residual(&v, &e);
                if res < st.tol {
                    trace.push(res);
                    return self.finish(grams, v, it, res, trace);
                }
                match self.newton_step(&v, &e) {
                    Some(next) => {
                        let e2 = self.eval(grams, &next, false)?;
                        let res2 = self.residual(&next, &e2);
                        if res2 < res {
                            v = next;
                            prev = res2;
                            trace.push(res2);
                            if res2 < st.tol {
                                return self.finish(grams, v, it, res2, trace);
                            }
                            continue;
                        }
                        cooldown = 20;
                    }
                    None => cooldown = 20,
                }
            }
            cooldown = cooldown.saturating_sub(1);
            let res = self.picard_sweep(grams, &mut v, alpha)?;
            trace.push(res);
            if !res.is_finite() {
                break;
            }
            if res < st.tol {
                return self.finish(grams, v, it, res, trace);
            }
            // the residual is not monotone on the way in; only divergence or a long stall shrinks α
            if res < best {
                best = res;
                stall = 0;
            } else {
                stall += 1;
            }
            if res > 4.0 * best || stall >= 50 {
                alpha = (alpha * 0.5).max(1e-3);
                best = res;
                stall = 0;
            }
            prev = res;
        }
        let residual = trace.last().copied().unwrap_or(f64::NAN);
        Err(Error::Convergence { iterations: it, residual })
    }

    fn newton_step(&self, v: &Vars, e: &Eval) -> Option<Vars> {
        use faer::linalg::solvers::Solve;
        let h = e.hessian.as_ref()?;
        let x = self.flatten(v);
        let y = self.flatten(&e.image);
        let half = self.n_t_vars();
        let n = 2 * half;
        // ∂F/∂t = image(r) - r and ∂F/∂r = image(t) - t
        let mut g = Mat::<f64>::zeros(n, 1);
        for p in 0..half {
            g[(p, 0)] = -(y[half + p] - x[half + p]);
            g[(half + p, 0)] = -(y[p] - x[p]);
        }
        let d = h.partial_piv_lu().solve(&g);
        let mut nx = x.clone();
        for p in 0..n {
            nx[p] += d[(p, 0)];
            if !nx[p].is_finite() {
                return None;
            }
            if nx[p] < 0.0 {
                if nx[p] < -1e-12 * (1.0 + x[p].abs()) {
                    return None;
                }
                nx[p] = 0.0;
            }
        }
        Some(self.unflatten(&nx))
    }

    fn finish(&self, grams: &Grams, v: Vars, iterations: usize, residual: f64, trace: Vec<f64>) -> Result<Solution> {
        let e = self.eval(grams, &v, false)?;
        let state = self.state_from(&v, &e);
        Ok(Solution { state, c: e.value.max(0.0), iterations, residual, trace })
    }

    /// Value of the functional at an arbitrary state.
    pub fn value_at(&self, grams: &Grams, s: &FixedPointState) -> Result<f64> {
        Ok(self.eval(grams, &self.vars_from_state(s), false)?.value)
    }

    /// Hessian of the functional (the Λ matrix) at a state.
    pub fn hessian_at(&self, grams: &Grams, s: &FixedPointState) -> Result<Mat<f64>> {
        Ok(self.eval(grams, &self.vars_from_state(s), true)?.hessian.unwrap())
    }

    /// dC/dφ_{k,n} at a converged state.
    pub fn phase_gradient(&self, grams: &Grams, phases: &PhaseConfig, s: &FixedPointState) -> Result<Vec<Vec<f64>>> {
        let v = self.vars_from_state(s);
        let nt = self.nt as f64;
        let mut grad = vec![vec![0.0; self.ns]; self.k];
        let e = self.eval_inner(grams, &v, false, true)?;
        for (gi, g) in self.groups.iter().enumerate() {
            let w = match e.groups[gi].w.as_ref().unwrap() {
                Weight::Dense(w) => w,
                // a white transmit side makes B real on the diagonal
                Weight::Diagonal => continue,
            };
            let t1 = v.t_1[gi];
            let coef = phases.coefficients(g.k);
            let fr = self.f_r[g.k].dense();
            // Y = S_eff Φ^H F_r W
            let mut s_eff = CMat::zeros(self.ns, self.ns);
            for &i in &g.members {
                linalg::axpy(&mut s_eff, v.r_2[g.k][i], &self.s_t[g.k][i]);
            }
            let conj: Vec<c64> = coef.iter().map(|c| c.conj()).collect();
            let phf = linalg::scale_rows(&conj, &fr);
            let y = &s_eff * &(&phf * w);
            for n in 0..self.ns {
                let mut acc = c64::new(0.0, 0.0);
                for j in 0..fr.ncols() {
                    acc += y[(n, j)] * fr[(n, j)].conj();
                }
                // Im B_nn = -t_1 Im(e^{iφ_n} Σ_j Y_nj conj(F_nj))
                let im_b = -t1 * (acc * coef[n]).im;
                grad[g.k][n] += 2.0 * im_b / nt;
            }
        }
        Ok(grad)
    }
}

fn make_groups(coupling: Coupling, k: usize, active: &[usize]) -> Vec<Group> {
    match coupling {
        Coupling::Shared => (0..k).map(|kk| Group { k: kk, members: active.to_vec() }).collect(),
        Coupling::PerTransmitter => (0..k)
            .flat_map(|kk| active.iter().map(move |&i| Group { k: kk, members: vec![i] }))
            .collect(),
    }
}

fn rel_change(x: &[f64], y: &[f64]) -> f64 {
    let scale = x.iter().chain(y).map(|a| a.abs()).fold(0.0, f64::max);
    let diff = x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Σ_km = S_tkm^{1/2} Φ_k^H S_rk Φ_k S_tkm^{1/2}.
pub fn assemble_sigma(cs: &CorrelationSet, phases: &PhaseConfig, k: usize, m: usize) -> Result<CMat> {
    phases.check_dims(cs.k(), cs.ns)?;
    let st = linalg::psd_sqrt(&cs.s_t[k][m])?;
    let c = phases.coefficients(k);
    let sr = &cs.s_r[k];
    let inner = CMat::from_fn(cs.ns, cs.ns, |i, j| c[i].conj() * sr[(i, j)] * c[j]);
    Ok(linalg::hermitize(&(&(&st * &inner) * &st)))
}

/// R̃, T̃_m and Σ_km at a state.
#[derive(Debug, Clone)]
pub struct EffectiveMatrices {
    pub r_tilde: CMat,
    pub t_tilde: Vec<CMat>,
    pub sigma: Vec<Vec<CMat>>,
}

pub fn effective_matrices(cs: &CorrelationSet, phases: &PhaseConfig, s: &FixedPointState) -> Result<EffectiveMatrices> {
    let (m, k) = (cs.m(), cs.k());
    let mut r = CMat::zeros(cs.nr, cs.nr);
    for i in 0..m {
        linalg::axpy(&mut r, s.r_d[i] * cs.gamma_d[i].sqrt(), &cs.r_d[i]);
        for kk in 0..k {
            linalg::axpy(&mut r, s.r_1[kk][i], &cs.r_k[kk]);
        }
    }
    let t_tilde = (0..m)
        .map(|i| {
            let mut t = linalg::scale(&cs.t_d[i], s.t_d[i] * cs.gamma_d[i].sqrt());
            for kk in 0..k {
                linalg::axpy(&mut t, s.t_2[kk][i], &cs.t_km[kk][i]);
            }
            t
        })
        .collect();
    let sigma = (0..k)
        .map(|kk| (0..m).map(|i| assemble_sigma(cs, phases, kk, i)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(EffectiveMatrices { r_tilde: r, t_tilde, sigma })
}

/// Solves the fixed-point system for one configuration.
pub fn solve_fixed_point(
    cs: &CorrelationSet,
    phases: &PhaseConfig,
    q: &[CMat],
    subset: &[usize],
    settings: &FixedPointSettings,
) -> Result<Solution> {
    let model = DeModel::new(cs, q, subset, settings)?;
    let grams = model.grams(phases)?;
    model.solve(&grams)
}

/// Normalized ergodic sum-MI (nats per TX antenna) at a given state.
pub fn ergodic_mi(
    cs: &CorrelationSet,
    phases: &PhaseConfig,
    q: &[CMat],
    subset: &[usize],
    state: &FixedPointState,
) -> Result<f64> {
    let model = DeModel::new(cs, q, subset, &FixedPointSettings::default())?;
    let grams = model.grams(phases)?;
    Ok(model.value_at(&grams, state)?.max(0.0))
}
