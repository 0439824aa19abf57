//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Moore–Penrose inverse of the Laplacian `M` of a connected weighted graph,
/// via `(M + J/n)⁻¹ - J/n` with `J` the all-ones matrix.
pub fn laplacian_pinv(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let j = DMatrix::from_element(n, n, 1.0 / n as f64);
    let shifted = m + &j;
    let chol = shifted
        .cholesky()
        .ok_or_else(|| Error::Domain("weighted graph is disconnected (Laplacian not invertible on the quotient)".into()))?;
    Ok(chol.inverse() - j)
}

/// Smallest generalized eigenvalue of the pencil `(A, B)` restricted to the
/// range of the positive semidefinite `B`.
#[derive(Debug, Clone)]
pub struct GenEig {
    pub value: f64,
    /// Minimizer, normalized so that `vᵀ B v = 1`.
    pub vector: DVector<f64>,
    /// Dimension of the range of `B` that was kept.
    pub rank: usize,
}

/// Solve `min vᵀAv / vᵀBv` over `v` in the range of `B`. Eigenvalues of `B`
/// below `rel_cut · max eig(B)` are treated as null directions.
pub fn min_generalized_eig(a: &DMatrix<f64>, b: &DMatrix<f64>, rel_cut: f64) -> Result<GenEig> {
    let n = a.nrows();
    if n == 0 {
        return Err(Error::Domain("empty quadratic form".into()));
    }
    let bs = (b + b.transpose()) * 0.5;
    let as_ = (a + a.transpose()) * 0.5;
    let eb = bs.symmetric_eigen();
    let top = eb.eigenvalues.iter().cloned().fold(0.0, f64::max);
    if !(top > 0.0) {
        return Err(Error::Domain("Γ-form vanishes identically".into()));
    }
    let keep: Vec<usize> = (0..n).filter(|&i| eb.eigenvalues[i] > rel_cut * top).collect();
    let r = keep.len();
    let mut w = DMatrix::zeros(n, r);
    for (c, &i) in keep.iter().enumerate() {
        let s = eb.eigenvalues[i].sqrt();
        w.set_column(c, &(eb.eigenvectors.column(i) / s));
    }
    let c = w.transpose() * &as_ * &w;
    let c = (&c + c.transpose()) * 0.5;
    let ec = c.symmetric_eigen();
    let (imin, &value) = ec
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .expect("nonempty spectrum");
    let vector = &w * ec.eigenvectors.column(imin);
    Ok(GenEig { value, vector, rank: r })
}

/// Drop row and column `k` (pinning a coordinate to zero).
pub fn remove_index(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    m.clone().remove_row(k).remove_column(k)
}

/// Re-insert a zero at position `k`.
pub fn insert_zero(v: &DVector<f64>, k: usize) -> DVector<f64> {
    v.clone().insert_row(k, 0.0)
}

/// Euclidean projection onto `{x : x_i >= floor, Σ x_i = 1}`.
pub fn project_simplex(v: &DVector<f64>, floor: f64) -> DVector<f64> {
    let n = v.len();
    let budget = 1.0 - floor * n as f64;
    let shifted: Vec<f64> = v.iter().map(|&x| x - floor).collect();
    let mut sorted = shifted.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &s) in sorted.iter().enumerate() {
        cum += s;
        let t = (cum - budget) / (i + 1) as f64;
        if s - t > 0.0 {
            theta = t;
        }
    }
    DVector::from_iterator(n, shifted.iter().map(|&x| (x - theta).max(0.0) + floor))
}

/// Orthonormal basis (columns) of the zero-sum hyperplane in `R^n`.
pub fn zero_sum_basis(n: usize) -> DMatrix<f64> {
    // Helmert contrasts.
    let mut u = DMatrix::zeros(n, n.saturating_sub(1));
    for j in 0..n.saturating_sub(1) {
        let k = (j + 1) as f64;
        let norm = (k * (k + 1.0)).sqrt();
        for i in 0..=j {
            u[(i, j)] = 1.0 / norm;
        }
        u[(j + 1, j)] = -k / norm;
    }
    u
}

/// Solve a symmetric positive definite block-tridiagonal system.
///
/// `diag[k]` are the diagonal blocks and `upper[k]` couples block `k` to
/// block `k + 1` (the lower blocks are the transposes).
pub fn block_tridiag_solve(diag: &[DMatrix<f64>], upper: &[DMatrix<f64>], rhs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    let m = diag.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    // Block LDLᵀ: S_k = D_k - U_{k-1}ᵀ S_{k-1}⁻¹ U_{k-1}.
    let mut chols = Vec::with_capacity(m);
    let mut y: Vec<DVector<f64>> = Vec::with_capacity(m);
    for k in 0..m {
        let mut s = diag[k].clone();
        let mut r = rhs[k].clone();
        if k > 0 {
            let prev: &nalgebra::Cholesky<f64, nalgebra::Dyn> = &chols[k - 1];
            let x = prev.solve(&upper[k - 1]);
            s -= upper[k - 1].transpose() * x;
            r -= upper[k - 1].transpose() * prev.solve(&y[k - 1]);
        }
        let s = (&s + s.transpose()) * 0.5;
        let c = s
            .cholesky()
            .ok_or_else(|| Error::Numerical(format!("block-tridiagonal system not positive definite at block {k}")))?;
        chols.push(c);
        y.push(r);
    }
    let mut x: Vec<DVector<f64>> = vec![DVector::zeros(0); m];
    for k in (0..m).rev() {
        let mut r = y[k].clone();
        if k + 1 < m {
            r -= &upper[k] * &x[k + 1];
        }
        x[k] = chols[k].solve(&r);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinv_of_path_laplacian() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        let p = laplacian_pinv(&m).unwrap();
        let id = &m * &p;
        let proj = DMatrix::identity(3, 3) - DMatrix::from_element(3, 3, 1.0 / 3.0);
        assert!((id - proj).norm() < 1e-12);
    }

    #[test]
    fn simplex_projection_is_feasible_and_idempotent() {
        let v = DVector::from_vec(vec![0.9, -0.3, 0.7]);
        let p = project_simplex(&v, 1e-6);
        assert!((p.sum() - 1.0).abs() < 1e-12 && p.iter().all(|&x| x >= 1e-6 - 1e-15));
        let q = project_simplex(&p, 1e-6);
        assert!((p - q).norm() < 1e-12);
    }

    #[test]
    fn helmert_basis_is_orthonormal() {
        let u = zero_sum_basis(5);
        assert!((u.transpose() * &u - DMatrix::identity(4, 4)).norm() < 1e-12);
        assert!(u.row_sum().norm() < 1e-12);
    }

    #[test]
    fn block_tridiagonal_matches_dense() {
        let d = vec![
            DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]),
            DMatrix::from_row_slice(2, 2, &[5.0, 0.5, 0.5, 4.0]),
            DMatrix::from_row_slice(2, 2, &[3.0, 0.2, 0.2, 6.0]),
        ];
        let u = vec![
            DMatrix::from_row_slice(2, 2, &[0.3, -0.2, 0.1, 0.4]),
            DMatrix::from_row_slice(2, 2, &[-0.5, 0.1, 0.0, 0.2]),
        ];
        let r = vec![DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![-1.0, 0.5]), DVector::from_vec(vec![0.3, 0.0])];
        let x = block_tridiag_solve(&d, &u, &r).unwrap();
        let mut dense = DMatrix::zeros(6, 6);
        for k in 0..3 {
            dense.view_mut((2 * k, 2 * k), (2, 2)).copy_from(&d[k]);
        }
        for k in 0..2 {
            dense.view_mut((2 * k, 2 * k + 2), (2, 2)).copy_from(&u[k]);
            dense.view_mut((2 * k + 2, 2 * k), (2, 2)).copy_from(&u[k].transpose());
        }
        let rhs = DVector::from_iterator(6, r.iter().flat_map(|v| v.iter().cloned()));
        let xd = dense.lu().solve(&rhs).unwrap();
        let xs = DVector::from_iterator(6, x.iter().flat_map(|v| v.iter().cloned()));
        assert!((xd - xs).norm() < 1e-12);
    }

    #[test]
    fn generalized_eig_restricts_to_range() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 5.0]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let g = min_generalized_eig(&a, &b, 1e-12).unwrap();
        assert_eq!(g.rank, 1);
        assert!((g.value - 2.0).abs() < 1e-14);
    }
}
