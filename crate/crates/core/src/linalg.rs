//! Small dense helpers shared across modules.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type CMatrix = DMatrix<Complex64>;

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.singular_values().max()
}

pub fn spectral_norm_c(m: &CMatrix) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.singular_values().max()
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue_sym(m: &DMatrix<f64>) -> f64 {
    let s = symmetrize(m);
    s.symmetric_eigenvalues().min()
}

pub fn max_eigenvalue_sym(m: &DMatrix<f64>) -> f64 {
    let s = symmetrize(m);
    s.symmetric_eigenvalues().max()
}

/// Smallest eigenvalue of the Hermitian part of `m`.
pub fn min_eigenvalue_herm(m: &CMatrix) -> f64 {
    let h = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
    h.symmetric_eigenvalues().min()
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn mat_pow(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mut out = DMatrix::identity(m.nrows(), m.ncols());
    for _ in 0..k {
        out = &out * m;
    }
    out
}

/// `[I, M, M^2, ..., M^{n-1}]`.
pub fn powers(m: &DMatrix<f64>, n: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut cur = DMatrix::identity(m.nrows(), m.ncols());
    for _ in 0..n {
        let next = &cur * m;
        out.push(cur);
        cur = next;
    }
    out
}

pub fn to_complex(m: &DMatrix<f64>) -> CMatrix {
    m.map(|x| Complex64::new(x, 0.0))
}

/// Block reversal permutation `R_n (x) I_b`.
pub fn block_reversal(n: usize, b: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(n * b, n * b);
    for i in 0..n {
        for k in 0..b {
            p[(i * b + k, (n - 1 - i) * b + k)] = 1.0;
        }
    }
    p
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn max_abs_c(m: &CMatrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

pub fn nested_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn from_nested_rows(rows: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != nc) {
        return None;
    }
    Some(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

pub fn zeros_vec(n: usize) -> DVector<f64> {
    DVector::zeros(n)
}
