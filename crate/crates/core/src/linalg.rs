//! Dense complex linear algebra helpers on top of `faer`.

use faer::{c64, Mat, Side};

use crate::error::{Error, Result};

pub type CMat = Mat<c64>;

pub fn cz(re: f64, im: f64) -> c64 {
    c64::new(re, im)
}

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

pub fn scaled_identity(n: usize, s: f64) -> CMat {
    CMat::from_fn(n, n, |i, j| if i == j { cz(s, 0.0) } else { cz(0.0, 0.0) })
}

pub fn scale(a: &CMat, s: f64) -> CMat {
    CMat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * s)
}

/// `a += s * b`
pub fn axpy(a: &mut CMat, s: f64, b: &CMat) {
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            a[(i, j)] += b[(i, j)] * s;
        }
    }
}

pub fn adjoint(a: &CMat) -> CMat {
    a.adjoint().to_owned()
}

pub fn trace(a: &CMat) -> c64 {
    (0..a.nrows().min(a.ncols())).map(|i| a[(i, i)]).sum()
}

/// Real part of Tr(A B) without forming the product.
pub fn trace_prod_re(a: &CMat, b: &CMat) -> f64 {
    let mut s = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            let x = a[(i, j)];
            let y = b[(j, i)];
            s += x.re * y.re - x.im * y.im;
        }
    }
    s
}

pub fn frobenius(a: &CMat) -> f64 {
    let mut s = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            s += a[(i, j)].norm_sqr();
        }
    }
    s.sqrt()
}

/// ||A - A^H||_F / ||A||_F, zero for the zero matrix.
pub fn hermitian_defect(a: &CMat) -> f64 {
    let n = a.nrows();
    let mut d = 0.0;
    for i in 0..n {
        for j in 0..n {
            d += (a[(i, j)] - a[(j, i)].conj()).norm_sqr();
        }
    }
    let f = frobenius(a);
    if f == 0.0 {
        0.0
    } else {
        d.sqrt() / f
    }
}

/// Averages A with its adjoint.
pub fn hermitize(a: &CMat) -> CMat {
    CMat::from_fn(a.nrows(), a.ncols(), |i, j| (a[(i, j)] + a[(j, i)].conj()) * 0.5)
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues ascending.
///
/// Each eigenvector is rotated so its largest-modulus entry is real and
/// positive, which makes the basis reproducible.
pub fn herm_eig(a: &CMat) -> Result<(Vec<f64>, CMat)> {
    let n = a.nrows();
    if n == 0 {
        return Ok((Vec::new(), CMat::zeros(0, 0)));
    }
    let h = hermitize(a);
    let e = h
        .self_adjoint_eigen(Side::Lower)
        .map_err(|_| Error::Numerical("eigendecomposition did not converge".into()))?;
    let s = e.S().column_vector();
    let vals: Vec<f64> = (0..n).map(|i| s[i].re).collect();
    let mut u = e.U().to_owned();
    for j in 0..n {
        let mut best = 0;
        let mut bm = -1.0;
        for i in 0..n {
            let m = u[(i, j)].norm_sqr();
            if m > bm * (1.0 + 1e-12) {
                bm = m;
                best = i;
            }
        }
        let p = u[(best, j)];
        if p.norm() > 0.0 {
            let rot = p.conj() / p.norm();
            for i in 0..n {
                u[(i, j)] *= rot;
            }
        }
    }
    Ok((vals, u))
}

pub fn herm_eigvals(a: &CMat) -> Result<Vec<f64>> {
    if a.nrows() == 0 {
        return Ok(Vec::new());
    }
    hermitize(a)
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|_| Error::Numerical("eigenvalue computation did not converge".into()))
}

/// Reassembles U diag(w) U^H.
pub fn from_eig(vals: &[f64], u: &CMat) -> CMat {
    let n = u.nrows();
    let scaled = CMat::from_fn(n, vals.len(), |i, j| u[(i, j)] * vals[j]);
    &scaled * u.adjoint()
}

/// Principal square root of a PSD matrix, negative eigenvalues clipped at zero.
pub fn psd_sqrt(a: &CMat) -> Result<CMat> {
    let (w, u) = herm_eig(a)?;
    let r: Vec<f64> = w.iter().map(|x| x.max(0.0).sqrt()).collect();
    Ok(hermitize(&from_eig(&r, &u)))
}

/// Low-rank factor F with A ~ F F^H, keeping eigenvalues above `rel_tol * max`.
/// Columns are ordered by decreasing eigenvalue.
pub fn psd_factor(a: &CMat, rel_tol: f64) -> Result<CMat> {
    let (w, u) = herm_eig(a)?;
    let top = w.iter().cloned().fold(0.0_f64, f64::max);
    let keep: Vec<usize> = (0..w.len())
        .rev()
        .filter(|&i| top > 0.0 && w[i] > rel_tol * top)
        .collect();
    let n = a.nrows();
    Ok(CMat::from_fn(n, keep.len(), |i, j| {
        u[(i, keep[j])] * w[keep[j]].sqrt()
    }))
}

/// Cholesky factor of a Hermitian positive-definite matrix.
fn cholesky(a: &CMat) -> Result<faer::linalg::solvers::Llt<c64>> {
    a.llt(Side::Lower)
        .map_err(|_| Error::Numerical("matrix is not positive definite".into()))
}

/// log det of a Hermitian positive-definite matrix via Cholesky.
pub fn logdet_hpd(a: &CMat) -> Result<f64> {
    if a.nrows() == 0 {
        return Ok(0.0);
    }
    let l = cholesky(a)?;
    let l = l.L();
    Ok((0..a.nrows()).map(|i| 2.0 * l[(i, i)].re.ln()).sum())
}

/// Inverse of a Hermitian positive-definite matrix.
pub fn inv_hpd(a: &CMat) -> Result<CMat> {
    use faer::linalg::solvers::DenseSolveCore;
    if a.nrows() == 0 {
        return Ok(CMat::zeros(0, 0));
    }
    let l = cholesky(a)?;
    Ok(hermitize(&l.inverse()))
}

/// Inverse and log-determinant of a Hermitian positive-definite matrix.
pub fn inv_logdet_hpd(a: &CMat) -> Result<(CMat, f64)> {
    use faer::linalg::solvers::DenseSolveCore;
    if a.nrows() == 0 {
        return Ok((CMat::zeros(0, 0), 0.0));
    }
    let l = cholesky(a)?;
    let ld = {
        let lf = l.L();
        (0..a.nrows()).map(|i| 2.0 * lf[(i, i)].re.ln()).sum()
    };
    Ok((hermitize(&l.inverse()), ld))
}

/// General complex inverse through partial-pivot LU.
pub fn inv_general(a: &CMat) -> CMat {
    use faer::linalg::solvers::DenseSolveCore;
    a.partial_piv_lu().inverse()
}

/// Determinant of a real matrix through partial-pivot LU.
pub fn det_real(a: &Mat<f64>) -> f64 {
    a.determinant()
}

/// Matrix of a diagonal with entries `d`.
pub fn diag(d: &[c64]) -> CMat {
    let n = d.len();
    CMat::from_fn(n, n, |i, j| if i == j { d[i] } else { cz(0.0, 0.0) })
}

pub fn real_diag(d: &[f64]) -> CMat {
    let n = d.len();
    CMat::from_fn(n, n, |i, j| if i == j { cz(d[i], 0.0) } else { cz(0.0, 0.0) })
}

/// Scales rows: diag(d) * A.
pub fn scale_rows(d: &[c64], a: &CMat) -> CMat {
    CMat::from_fn(a.nrows(), a.ncols(), |i, j| d[i] * a[(i, j)])
}

/// True when every off-diagonal entry is exactly zero.
pub fn is_diagonal(a: &CMat) -> bool {
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            if i != j && a[(i, j)] != cz(0.0, 0.0) {
                return false;
            }
        }
    }
    true
}

pub fn is_identity(a: &CMat) -> bool {
    a.nrows() == a.ncols()
        && is_diagonal(a)
        && (0..a.nrows()).all(|i| a[(i, i)] == cz(1.0, 0.0))
}
