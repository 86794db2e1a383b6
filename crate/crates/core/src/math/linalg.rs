//! Small dense routines on `ndarray` matrices. Sizes here are at most a few
//! thousand, so straightforward O(n³) kernels are adequate.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Lower Cholesky factor `L` with `A = L Lᵀ`.
pub fn cholesky(a: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "cholesky (square matrix)",
            expected: n,
            got: a.ncols(),
        });
    }
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let d = a[[j, j]] - l[j * n..j * n + j].iter().map(|v| v * v).sum::<f64>();
        if !d.is_finite() || d <= 0.0 {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        let row_j = l[j * n..j * n + j].to_vec();
        for i in j + 1..n {
            let row_i = &l[i * n..i * n + j];
            let dot: f64 = row_i.iter().zip(&row_j).map(|(x, y)| x * y).sum();
            l[i * n + j] = (a[[i, j]] - dot) / djj;
        }
    }
    Ok(Array2::from_shape_vec((n, n), l).expect("n*n buffer"))
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Array1<f64> {
    let n = b.len();
    let mut x = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solves `Lᵀ x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Array1<f64> {
    let n = b.len();
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// `Σ log L_kk`, i.e. half the log-determinant of `L Lᵀ`.
pub fn log_diag_sum(l: ArrayView2<'_, f64>) -> f64 {
    l.diag().iter().map(|d| d.ln()).sum()
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
pub fn spd_inverse(a: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let l = cholesky(a)?;
    let n = a.nrows();
    let mut inv = Array2::<f64>::zeros((n, n));
    let mut e = Array1::<f64>::zeros(n);
    for j in 0..n {
        e.fill(0.0);
        e[j] = 1.0;
        let y = solve_lower(l.view(), e.view());
        let x = solve_lower_transpose(l.view(), y.view());
        inv.column_mut(j).assign(&x);
    }
    // symmetrize away round-off
    let t = inv.t().to_owned();
    Ok((inv + t) * 0.5)
}

/// Log-density of `N(x | 0, A)` for SPD `A`.
pub fn zero_mean_mvn_logpdf(a: ArrayView2<'_, f64>, x: ArrayView1<'_, f64>) -> Result<f64> {
    let l = cholesky(a)?;
    let u = solve_lower(l.view(), x);
    Ok(-0.5 * u.dot(&u) - log_diag_sum(l.view()) - 0.5 * x.len() as f64 * super::LN_2PI)
}
