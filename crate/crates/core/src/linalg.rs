use nalgebra::{DMatrix, DVector};

/// Solves `a x = b` for symmetric positive (semi-)definite `a`, adding a
/// growing ridge to the diagonal until the Cholesky factorisation succeeds.
pub(crate) fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let scale = a.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
    let mut ridge = 0.0;
    for _ in 0..12 {
        let mut m = a.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += ridge;
        }
        if let Some(chol) = m.cholesky() {
            let x = chol.solve(b);
            if x.iter().all(|v| v.is_finite()) {
                return Some(x);
            }
        }
        ridge = if ridge == 0.0 { scale * 1e-12 } else { ridge * 100.0 };
    }
    None
}

/// Moore-Penrose inverse of a symmetric matrix via its eigendecomposition.
/// Eigenvalues below `rel_tol * max|eigenvalue|` are treated as zero.
pub(crate) fn pinv_symmetric(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let eig = a.clone().symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let cutoff = max_ev * rel_tol;
    let mut out = DMatrix::zeros(n, n);
    for (idx, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev.abs() <= cutoff || ev.abs() == 0.0 {
            continue;
        }
        let v = eig.eigenvectors.column(idx);
        out += (v * v.transpose()) / ev;
    }
    out
}
