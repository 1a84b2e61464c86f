//! Small dense helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Orthonormal basis (columns) of the hyperplane `{v : weightsᵀ v = 0}`.
pub fn tangent_basis(weights: &[f64]) -> DMatrix<f64> {
    let n = weights.len();
    if n <= 1 {
        return DMatrix::zeros(n, 0);
    }
    let mut seed = DMatrix::<f64>::identity(n, n);
    for (i, w) in weights.iter().enumerate() {
        seed[(i, 0)] = *w;
    }
    // columns e_1.. e_{n-1} after the weight column keep the matrix regular
    // whenever the last weight is nonzero
    for j in 1..n {
        for i in 0..n {
            seed[(i, j)] = if i == j - 1 { 1.0 } else { 0.0 };
        }
    }
    let q = seed.qr().q();
    q.columns(1, n - 1).into_owned()
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn max_sym_eig(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    let mut s = m.clone();
    symmetrize(&mut s);
    s.symmetric_eigenvalues().max()
}

pub fn min_sym_eig(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let mut s = m.clone();
    symmetrize(&mut s);
    s.symmetric_eigenvalues().min()
}

/// Affine parametrisation `{y : A y = b} = {y0 + N w}` with orthonormal `N`.
///
/// Rows of `A` that are numerically dependent are dropped; an inconsistent
/// system is an error.
pub fn affine_nullspace(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    tol: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let nvar = a.ncols();
    if a.nrows() == 0 {
        return Ok((DVector::zeros(nvar), DMatrix::identity(nvar, nvar)));
    }
    // SVD of Aᵀ A-sized problem through the full V factor.
    let svd = nalgebra::linalg::SVD::new(a.clone(), true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = tol * smax.max(1.0);
    let mut y0 = DVector::zeros(nvar);
    let mut rank = 0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff {
            let coef = u.column(k).dot(b) / s;
            y0 += vt.row(k).transpose() * coef;
            rank += 1;
        }
    }
    let resid = (a * &y0 - b).amax();
    if resid > 1e-8 * (1.0 + b.amax()) {
        return Err(Error::SolverFailure(format!(
            "inconsistent equality constraints (residual {resid:e})"
        )));
    }
    // complete the row space to a full basis to extract the nullspace
    let full = nalgebra::linalg::SVD::new(
        {
            let mut padded = DMatrix::zeros(nvar.max(a.nrows()), nvar);
            padded.rows_mut(0, a.nrows()).copy_from(a);
            padded
        },
        false,
        true,
    );
    let vt_full = full.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..full.singular_values.len()).collect();
    order.sort_by(|&i, &j| {
        full.singular_values[j]
            .partial_cmp(&full.singular_values[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let null_dim = nvar - rank;
    let mut basis = DMatrix::zeros(nvar, null_dim);
    for (col, &k) in order.iter().skip(rank).take(null_dim).enumerate() {
        basis.set_column(col, &vt_full.row(k).transpose());
    }
    Ok((y0, basis))
}

/// Solve a symmetric positive (semi)definite system, falling back to a
/// regularised LU when Cholesky fails.
pub fn solve_spd(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = h.clone().cholesky() {
        return Some(ch.solve(g));
    }
    let scale = h.diagonal().amax().max(1e-300);
    let mut reg = h.clone();
    for i in 0..reg.nrows() {
        reg[(i, i)] += 1e-12 * scale;
    }
    if let Some(ch) = reg.clone().cholesky() {
        return Some(ch.solve(g));
    }
    reg.lu().solve(g)
}

pub fn max_abs_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in 0..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}
