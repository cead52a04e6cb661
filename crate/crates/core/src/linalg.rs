//! Small dense helpers used by the verification suites.

use ndarray::Array2;

use crate::autodiff::Matrix;

/// `log|det A|` by LU decomposition with partial pivoting. Returns `-inf`
/// for singular matrices.
pub fn log_abs_det(a: &Matrix) -> f64 {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "log_abs_det needs a square matrix");
    let mut m = a.clone();
    let mut acc = 0.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[[i, col]].abs().total_cmp(&m[[j, col]].abs()))
            .unwrap();
        let pv = m[[pivot, col]];
        if pv == 0.0 {
            return f64::NEG_INFINITY;
        }
        if pivot != col {
            for j in 0..n {
                m.swap([pivot, j], [col, j]);
            }
        }
        acc += pv.abs().ln();
        for i in col + 1..n {
            let f = m[[i, col]] / pv;
            if f != 0.0 {
                for j in col..n {
                    m[[i, j]] -= f * m[[col, j]];
                }
            }
        }
    }
    acc
}

/// Central-difference Jacobian `J[i][j] = ∂f_i/∂x_j`.
pub fn fd_jacobian(mut f: impl FnMut(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Matrix {
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    let mut m = 0;
    for j in 0..n {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let (fp, fm) = (f(&xp), f(&xm));
        m = fp.len();
        cols.push(
            fp.iter()
                .zip(&fm)
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect::<Vec<_>>(),
        );
    }
    Array2::from_shape_fn((m, n), |(i, j)| cols[j][i])
}
