//! Dense linear-algebra helpers shared by the synthesis and simulation layers.

use nalgebra::{Complex, DMatrix, DVector, Schur};

use crate::error::{Error, Result};

/// `X + Xᵀ`.
pub fn sym(x: &DMatrix<f64>) -> DMatrix<f64> {
    x + x.transpose()
}

/// Eigenvalues of a general real matrix.
///
/// The Schur iteration's deflation test is loosened step by step (machine
/// epsilon up to 1e-12) when it stalls, which happens on matrices with
/// clustered eigenvalues; as a last resort the matrix is rotated by a fixed
/// orthogonal similarity and the ladder repeated.
pub fn eigenvalues(a: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    let n = a.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut work = a.clone();
    for attempt in 0..3 {
        let mut eps = f64::EPSILON;
        while eps <= 1e-12 {
            if let Some(schur) = Schur::try_new(work.clone(), eps, 100 * n.max(10)) {
                return Ok(schur.complex_eigenvalues().iter().copied().collect());
            }
            eps *= 8.0;
        }
        let q = householder(n, attempt);
        work = &q * work * &q;
    }
    Err(Error::Numeric("Schur iteration did not converge".into()))
}

/// Householder reflector `I − 2vvᵀ/‖v‖²` for a fixed, seed-dependent `v`.
fn householder(n: usize, seed: usize) -> DMatrix<f64> {
    let v = DVector::from_iterator(
        n,
        (0..n).map(|k| ((k * 7919 + seed * 104_729 + 1) as f64).sin() + 1.5),
    );
    DMatrix::identity(n, n) - &v * v.transpose() * (2.0 / v.norm_squared())
}

/// Largest real part over all eigenvalues (NaN if the eigensolver fails).
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    match eigenvalues(a) {
        Ok(ev) => ev.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max),
        Err(_) => f64::NAN,
    }
}

pub fn is_hurwitz(a: &DMatrix<f64>) -> bool {
    a.nrows() > 0 && spectral_abscissa(a) < 0.0
}

#[cfg(test)]
mod eigen_tests {
    use super::*;

    #[test]
    fn repeated_blocks_converge() {
        // block-diagonal with identical companion blocks stalls plain Schur
        let blk = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -12.0, -7.0]);
        let mut a = DMatrix::zeros(18, 18);
        for k in 0..9 {
            a.view_mut((2 * k, 2 * k), (2, 2)).copy_from(&blk);
        }
        let re = sorted_real_parts(&a);
        assert!((re[0] + 4.0).abs() < 1e-6 && (re[17] + 3.0).abs() < 1e-6);
    }
}

/// Induced 2-norm (largest singular value).
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.singular_values().max()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_symmetric_eigenvalue(a: &DMatrix<f64>) -> f64 {
    a.clone().symmetric_eigen().eigenvalues.min()
}

/// Number of singular values above `rel_tol * σ_max`.
pub fn numeric_rank(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = a.singular_values();
    let largest = sv.max();
    if largest == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * largest).count()
}

/// Stacked observability matrix `[C; CA; …; CA^{n-1}]`.
pub fn observability_matrix(a: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let p = c.nrows();
    let mut out = DMatrix::zeros(p * n, n);
    let mut row = c.clone();
    for k in 0..n {
        out.view_mut((k * p, 0), (p, n)).copy_from(&row);
        row = &row * a;
    }
    out
}

/// Dimension of the controllable subspace of `(a, b)`.
///
/// Builds an orthonormal basis of the Krylov space `span{B, AB, A²B, …}` one
/// block at a time instead of forming the raw power matrix, whose columns
/// lose all relative precision once `n` reaches a few dozen.
pub fn controllable_dimension(a: &DMatrix<f64>, b: &DMatrix<f64>, rel_tol: f64) -> usize {
    let n = a.nrows();
    let scale = spectral_norm(a).max(spectral_norm(b)).max(1.0);
    let mut basis: Vec<DVector<f64>> = Vec::new();

    let mut frontier: Vec<DVector<f64>> = Vec::new();
    for col in b.column_iter() {
        if let Some(v) = orthonormalize_against(&basis, col.into_owned(), rel_tol * scale) {
            basis.push(v.clone());
            frontier.push(v);
        }
    }
    while !frontier.is_empty() && basis.len() < n {
        let mut next = Vec::new();
        for v in &frontier {
            let w = a * v;
            if let Some(u) = orthonormalize_against(&basis, w, rel_tol * scale) {
                basis.push(u.clone());
                next.push(u);
                if basis.len() == n {
                    break;
                }
            }
        }
        frontier = next;
    }
    basis.len()
}

fn orthonormalize_against(
    basis: &[DVector<f64>],
    mut w: DVector<f64>,
    threshold: f64,
) -> Option<DVector<f64>> {
    // two passes of modified Gram-Schmidt
    for _ in 0..2 {
        for q in basis {
            let proj = q.dot(&w);
            w.axpy(-proj, q, 1.0);
        }
    }
    let norm = w.norm();
    if norm > threshold {
        Some(w / norm)
    } else {
        None
    }
}

/// Solves `aᵀ X + X a + q = 0` for a Hurwitz `a`.
///
/// Uses the scaled matrix-sign Newton iteration followed by a few rounds of
/// residual refinement. The result is symmetrised when `q` is symmetric.
pub fn lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || q.nrows() != n || q.ncols() != n {
        return Err(Error::Dimension {
            block: "lyapunov".into(),
            expected: format!("{n}x{n}"),
            got: format!("{}x{} / {}x{}", a.nrows(), a.ncols(), q.nrows(), q.ncols()),
        });
    }
    let abscissa = spectral_abscissa(a);
    if !(abscissa < 0.0) {
        return Err(Error::NotHurwitz { abscissa });
    }
    let q_norm = q.norm().max(f64::MIN_POSITIVE);
    let mut x = if n <= KRONECKER_LIMIT { kronecker_lyapunov(a, q)? } else { sign_iteration(a, q)? };
    for _ in 0..3 {
        let residual = a.transpose() * &x + &x * a + q;
        if residual.norm() <= 1e-14 * q_norm {
            break;
        }
        let correction = if n <= KRONECKER_LIMIT {
            kronecker_lyapunov(a, &residual)?
        } else {
            sign_iteration(a, &residual)?
        };
        x += correction;
    }
    if (q - q.transpose()).norm() <= 1e-14 * q_norm {
        x = (&x + x.transpose()) * 0.5;
    }
    Ok(x)
}

/// Largest order solved through the dense Kronecker system.
const KRONECKER_LIMIT: usize = 8;

fn kronecker_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let identity = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    let system = identity.kronecker(&at) + at.kronecker(&identity);
    let rhs = DVector::from_iterator(n * n, q.iter().map(|v| -v));
    let sol = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numeric("singular Lyapunov operator".into()))?;
    Ok(DMatrix::from_column_slice(n, n, sol.as_slice()))
}

fn sign_iteration(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let identity = DMatrix::<f64>::identity(n, n);
    let mut ak = a.clone();
    let mut zk = q.clone();
    for _ in 0..100 {
        let lu = ak.clone().lu();
        let inv = lu
            .try_inverse()
            .ok_or_else(|| Error::Numeric("singular iterate in Lyapunov solver".into()))?;
        let log_det: f64 = ak.clone().lu().u().diagonal().iter().map(|d| d.abs().ln()).sum();
        let c = (-log_det / n as f64).exp();
        let next_a = (&ak * c + &inv / c) * 0.5;
        let next_z = (&zk * c + inv.transpose() * &zk * &inv / c) * 0.5;
        let delta = (&next_a + &identity).norm();
        ak = next_a;
        zk = next_z;
        if delta <= 1e-13 * (n as f64).sqrt() {
            return Ok(zk * 0.5);
        }
    }
    Err(Error::Numeric("Lyapunov sign iteration did not converge".into()))
}

/// Characteristic polynomial `Π (A − λ_k I)` evaluated at the matrix.
fn polynomial_at(a: &DMatrix<f64>, roots: &[f64]) -> DMatrix<f64> {
    let n = a.nrows();
    let identity = DMatrix::<f64>::identity(n, n);
    roots
        .iter()
        .fold(identity.clone(), |acc, &r| acc * (a - &identity * r))
}

/// Ackermann's formula: the row `k` placing the eigenvalues of `a − b k` at
/// `poles` for a single-input pair.
pub fn ackermann(a: &DMatrix<f64>, b: &DVector<f64>, poles: &[f64]) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if poles.len() != n {
        return Err(Error::Placement(format!(
            "need {n} poles, got {}",
            poles.len()
        )));
    }
    let mut ctrb = DMatrix::zeros(n, n);
    let mut col = b.clone();
    for k in 0..n {
        ctrb.set_column(k, &col);
        col = a * col;
    }
    if numeric_rank(&ctrb, 1e-12) < n {
        return Err(Error::Placement("pair is not controllable".into()));
    }
    let inv = ctrb
        .try_inverse()
        .ok_or_else(|| Error::Placement("singular controllability matrix".into()))?;
    let mut last = DMatrix::zeros(1, n);
    last[(0, n - 1)] = 1.0;
    Ok(last * inv * polynomial_at(a, poles))
}

/// Checks a pole list: strictly negative, finite and pairwise distinct.
pub fn check_poles(poles: &[f64]) -> Result<()> {
    for (k, &p) in poles.iter().enumerate() {
        if !p.is_finite() || p >= 0.0 {
            return Err(Error::Placement(format!("pole {p} is not strictly negative")));
        }
        if poles[..k].contains(&p) {
            return Err(Error::Placement(format!("pole {p} repeated")));
        }
    }
    Ok(())
}

/// Eigenvalues sorted by real part, for comparisons in tests and reports.
pub fn sorted_real_parts(a: &DMatrix<f64>) -> Vec<f64> {
    let mut re: Vec<f64> = eigenvalues(a)
        .expect("eigensolver converged")
        .iter()
        .map(|z| z.re)
        .collect();
    re.sort_by(|x, y| x.partial_cmp(y).unwrap());
    re
}
