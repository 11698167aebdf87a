//! Small dense linear-algebra helpers shared by the geometry and fitting code.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::rng::standard_normal;

/// D×k matrix with orthonormal columns drawn from the Haar measure
/// (Gram–Schmidt of a Gaussian matrix).
pub fn random_orthonormal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    assert!(cols <= rows, "cannot fit {cols} orthonormal columns in dimension {rows}");
    loop {
        let mut m = DMatrix::zeros(rows, cols);
        for j in 0..cols {
            m.set_column(j, &standard_normal(rng, rows));
        }
        if let Some(q) = gram_schmidt(&m, 1e-8) {
            if q.ncols() == cols {
                return q;
            }
        }
    }
}

/// Modified Gram–Schmidt with re-orthogonalisation. Columns whose residual norm
/// falls below `tol` are dropped; returns `None` if nothing survives.
pub fn gram_schmidt(m: &DMatrix<f64>, tol: f64) -> Option<DMatrix<f64>> {
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(m.ncols());
    for j in 0..m.ncols() {
        let mut v = m.column(j).into_owned();
        let scale = v.norm().max(f64::MIN_POSITIVE);
        for _ in 0..2 {
            for q in &cols {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let n = v.norm();
        if n > tol * scale.max(1.0) && n > tol {
            cols.push(v / n);
        }
    }
    if cols.is_empty() {
        None
    } else {
        Some(DMatrix::from_columns(&cols))
    }
}

/// Extend orthonormal columns `q` (D×k) to `target` columns with
/// deterministic directions taken from the standard basis.
pub fn extend_orthonormal(q: &DMatrix<f64>, target: usize) -> DMatrix<f64> {
    let dim = q.nrows();
    let mut cols: Vec<DVector<f64>> = q.column_iter().map(|c| c.into_owned()).collect();
    let mut i = 0;
    while cols.len() < target && i < dim {
        let mut v = DVector::zeros(dim);
        v[i] = 1.0;
        for _ in 0..2 {
            for c in &cols {
                let d = c.dot(&v);
                v.axpy(-d, c, 1.0);
            }
        }
        let n = v.norm();
        if n > 1e-6 {
            cols.push(v / n);
        }
        i += 1;
    }
    DMatrix::from_columns(&cols)
}

/// Orthonormal basis of the column span of `m`, keeping singular directions
/// above `rel_tol · σ_max`. Columns are ordered by decreasing singular value.
pub fn span_basis(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let rows = m.nrows();
    if m.ncols() == 0 || m.norm() == 0.0 {
        return DMatrix::zeros(rows, 0);
    }
    // Thin problem: eigen-decompose the smaller Gram matrix.
    let (u, s) = left_singular(m);
    let smax = s.first().copied().unwrap_or(0.0);
    let keep = s.iter().take_while(|&&x| x > rel_tol * smax && x > 0.0).count();
    u.columns(0, keep).into_owned()
}

/// Left singular vectors and singular values of `m`, sorted descending.
pub fn left_singular(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("svd requested u");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let cols: Vec<DVector<f64>> = order.iter().map(|&i| u.column(i).into_owned()).collect();
    let vals = order.iter().map(|&i| svd.singular_values[i]).collect();
    if cols.is_empty() {
        return (DMatrix::zeros(m.nrows(), 0), vals);
    }
    (DMatrix::from_columns(&cols), vals)
}

/// Nearest matrix with orthonormal columns (polar factor `U Vᵀ`).
pub fn polar(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("u");
    let vt = svd.v_t.expect("v_t");
    u * vt
}

/// Spectral norm of a symmetric matrix.
pub fn sym_op_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Orthogonal projector `Q Qᵀ` for orthonormal `q`.
pub fn projector(q: &DMatrix<f64>) -> DMatrix<f64> {
    q * q.transpose()
}

/// Max deviation of `QᵀQ` from the identity.
pub fn orthonormality_defect(q: &DMatrix<f64>) -> f64 {
    let g = q.transpose() * q;
    let k = g.nrows();
    (g - DMatrix::identity(k, k)).abs().max()
}
